#include "semantix/schedule.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace semantix {

SigmaVariant sigma_variant_from_string(const std::string& name) {
  if (name == "posterior-sqrt") return SigmaVariant::PosteriorSqrt;
  if (name == "paper-literal") return SigmaVariant::PaperLiteral;
  throw std::invalid_argument("unknown sigma variant '" + name +
                              "' (expected posterior-sqrt or paper-literal)");
}

std::string to_string(SigmaVariant v) {
  return v == SigmaVariant::PosteriorSqrt ? "posterior-sqrt" : "paper-literal";
}

BetaSpec BetaSpec::parse(const std::string& text) {
  double a = 0, b = 0;
  if (std::sscanf(text.c_str(), "linear(%lf,%lf)", &a, &b) == 2) return linear(a, b);
  if (std::sscanf(text.c_str(), "linear(%lf, %lf)", &a, &b) == 2) return linear(a, b);
  throw std::invalid_argument("unparsable beta spec '" + text + "' (expected linear(a,b))");
}

std::string BetaSpec::to_string() const {
  if (kind == Kind::Linear) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "linear(%g,%g)", lo, hi);
    return buf;
  }
  return "explicit[" + std::to_string(values.size()) + "]";
}

Real Schedule::alpha_bar_at(int t) const {
  if (t == 0) return 1.0;
  if (t < 1 || t > T) throw std::out_of_range("alpha_bar_at: t=" + std::to_string(t));
  return alpha_bar[t];
}

Schedule make_schedule(int T, const BetaSpec& spec, Real eta) {
  if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
  if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("make_schedule: eta must be in [0,1]");

  Schedule s;
  s.T = T;
  s.eta = eta;
  s.beta = Array::Zero(T + 1);
  s.alpha = Array::Zero(T + 1);
  s.alpha_bar = Array::Zero(T + 1);

  for (int t = 1; t <= T; ++t) {
    Real b;
    switch (spec.kind) {
      case BetaSpec::Kind::Linear:
        b = T == 1 ? spec.lo : spec.lo + (spec.hi - spec.lo) * Real(t - 1) / Real(T - 1);
        break;
      case BetaSpec::Kind::Explicit:
        if (static_cast<int>(spec.values.size()) != T)
          throw std::invalid_argument("make_schedule: explicit beta list has " +
                                      std::to_string(spec.values.size()) + " entries, need " +
                                      std::to_string(T));
        b = spec.values[static_cast<size_t>(t) - 1];
        break;
      default:
        throw std::logic_error("make_schedule: bad BetaSpec kind");
    }
    if (!(b > 0.0 && b < 1.0))
      throw std::invalid_argument("make_schedule: beta[" + std::to_string(t) + "]=" +
                                  std::to_string(b) + " outside (0,1)");
    s.beta[t] = b;
    s.alpha[t] = 1.0 - b;
    s.alpha_bar[t] = (t == 1 ? 1.0 : s.alpha_bar[t - 1]) * s.alpha[t];
  }
  return s;
}

Real sigma(const Schedule& s, int t, SigmaVariant variant) {
  if (t < 1 || t > s.T) throw std::out_of_range("sigma: t=" + std::to_string(t));
  Real ratio = s.beta[t] * (1.0 - s.alpha_bar_at(t - 1)) / (1.0 - s.alpha_bar[t]);
  return variant == SigmaVariant::PosteriorSqrt ? s.eta * std::sqrt(ratio) : s.eta * ratio;
}

Real transition_alpha_bar_prev(const Schedule& s, int t, int t_prev) {
  if (t_prev >= 1) return s.alpha_bar_at(t_prev);
  return std::sqrt(s.alpha_bar_at(t));
}

Real sigma_between(const Schedule& s, int t, int t_prev, SigmaVariant variant) {
  if (t < 1 || t > s.T) throw std::out_of_range("sigma_between: t=" + std::to_string(t));
  if (t_prev < 0 || t_prev >= t)
    throw std::invalid_argument("sigma_between: t_prev=" + std::to_string(t_prev) +
                                " must be in [0, t)");
  Real ab_t = s.alpha_bar[t];
  Real ab_p = transition_alpha_bar_prev(s, t, t_prev);
  Real beta_eff = 1.0 - ab_t / ab_p;
  Real ratio = beta_eff * (1.0 - ab_p) / (1.0 - ab_t);
  return variant == SigmaVariant::PosteriorSqrt ? s.eta * std::sqrt(ratio) : s.eta * ratio;
}

TimestepPlan make_plan(const Schedule& s, int t_start, int n_steps) {
  if (t_start < 1 || t_start > s.T)
    throw std::invalid_argument("make_plan: t_start=" + std::to_string(t_start) +
                                " outside [1," + std::to_string(s.T) + "]");
  if (n_steps < 1) throw std::invalid_argument("make_plan: n_steps must be >= 1");
  if (n_steps > t_start)
    throw std::invalid_argument("make_plan: n_steps=" + std::to_string(n_steps) + " > t_start=" +
                                std::to_string(t_start));

  TimestepPlan plan;
  plan.t_start = t_start;
  plan.steps.reserve(static_cast<size_t>(n_steps));
  if (n_steps == 1) {
    plan.steps.push_back(t_start);
    return plan;
  }
  for (int i = 0; i < n_steps; ++i) {
    // round-half-up at exact even spacing over [1, t_start]
    Real pos = 1.0 + Real(i) * Real(t_start - 1) / Real(n_steps - 1);
    plan.steps.push_back(static_cast<int>(std::floor(pos + 0.5)));
  }
  plan.steps.back() = t_start;
  return plan;
}

}  // namespace semantix
