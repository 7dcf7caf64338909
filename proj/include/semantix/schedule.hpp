#pragma once

#include "semantix/tensor.hpp"

#include <string>
#include <vector>

namespace semantix {

/// The printed closed form for sigma_t omits the square root the DDIM family
/// carries; with PosteriorSqrt, eta = 1 reproduces the DDPM posterior standard
/// deviation, which is the default. PaperLiteral keeps the printed expression.
enum class SigmaVariant { PosteriorSqrt, PaperLiteral };

SigmaVariant sigma_variant_from_string(const std::string& name);
std::string to_string(SigmaVariant v);

/// Descriptor for the beta sequence: either linear(a,b) interpolation or an
/// explicit list. Parsed from config strings like "linear(0.00085,0.012)".
struct BetaSpec {
  enum class Kind { Linear, Explicit };
  Kind kind = Kind::Linear;
  Real lo = 0.00085;
  Real hi = 0.012;
  std::vector<Real> values;  // Explicit only

  static BetaSpec linear(Real a, Real b) { return {Kind::Linear, a, b, {}}; }
  static BetaSpec explicit_values(std::vector<Real> v) {
    return {Kind::Explicit, 0, 0, std::move(v)};
  }
  static BetaSpec parse(const std::string& text);
  std::string to_string() const;
};

/// Variance schedule over timesteps 1..T (index 0 unused). Immutable after
/// construction; concurrent reads are safe.
struct Schedule {
  int T = 0;
  Array beta;       // size T+1, beta[0] unused
  Array alpha;      // alpha[t] = 1 - beta[t]
  Array alpha_bar;  // alpha_bar[t] = prod_{s<=t} alpha[s]
  Real eta = 1.0;

  /// alpha_bar with the convention alpha_bar(0) = 1.
  Real alpha_bar_at(int t) const;
};

Schedule make_schedule(int T, const BetaSpec& spec, Real eta);

/// Native-step sigma_t with alpha_bar(0) = 1.
Real sigma(const Schedule& s, int t, SigmaVariant variant = SigmaVariant::PosteriorSqrt);

/// alpha_bar of the transition target. For t_prev >= 1 this is the stored
/// value; for the transition to the clean state (t_prev = 0) it is the
/// geometric midpoint sqrt(alpha_bar[t]), a virtual sub-step that keeps the
/// final transition stochastic (eta > 0) so inversion replay stays exact for
/// every plan. alpha_bar_at(0) = 1 would zero the final sigma and make the
/// last step an unchecked denoiser extrapolation.
Real transition_alpha_bar_prev(const Schedule& s, int t, int t_prev);

/// sigma for a (t -> t_prev) transition of a possibly respaced plan, built on
/// the effective beta 1 - alpha_bar[t]/alpha_bar[t_prev]. Coincides with
/// sigma(s, t, variant) when t_prev == t - 1.
Real sigma_between(const Schedule& s, int t, int t_prev,
                   SigmaVariant variant = SigmaVariant::PosteriorSqrt);

/// Ascending timestep subsequence used by inversion (consumed low-to-high)
/// and sampling (consumed high-to-low).
struct TimestepPlan {
  std::vector<int> steps;  // ascending, unique, within [1, T]
  int t_start = 0;

  int n_steps() const { return static_cast<int>(steps.size()); }
  /// Transition target for the plan step at `index`: the previous plan step,
  /// or 0 (clean) for the smallest one.
  int prev_of(int index) const { return index == 0 ? 0 : steps[static_cast<size_t>(index) - 1]; }
};

/// n_steps indices spaced as evenly as integer rounding (round-half-up)
/// allows over [1, t_start], always including t_start.
TimestepPlan make_plan(const Schedule& s, int t_start, int n_steps);

}  // namespace semantix
