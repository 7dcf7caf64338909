#pragma once

#include "semantix/energy.hpp"
#include "semantix/schedule.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>

namespace semantix {

/// Full run configuration; defaults are the published presets. Parsed from TOML
/// (subset: sections, scalars, arrays, comments) or JSON with identical
/// kebab-case keys; unknown keys are errors.
struct RunConfig {
  struct Denoiser {
    std::string kind = "toy";  // toy | adapter
    std::uint64_t seed = 0;
    int latent_downscale = 1;
    std::string adapter_name;
  } denoiser;

  struct ScheduleCfg {
    int T = 1000;
    BetaSpec beta_spec = BetaSpec::linear(0.00085, 0.012);
    Real eta = 1.0;
    SigmaVariant sigma_variant = SigmaVariant::PosteriorSqrt;
  } schedule;

  struct PlanCfg {
    int t_start = 601;
    int n_steps = 60;
  } plan;

  std::string guidance_preset = "image";  // image | video
  EnergyConfig guidance;                  // defaults per preset

  struct Io {
    std::string output_dir = "out";
    bool energy_log = false;
  } io;

  static RunConfig load(const std::string& path);
  static RunConfig from_json(const nlohmann::json& j);
  /// Key/value overrides with the same dotted kebab-case keys the files use,
  /// e.g. {"guidance.gamma-ref", "2.5"}; used for CLI flag overlays.
  void apply_override(const std::string& dotted_key, const std::string& value);
  /// Validates cross-field constraints (plan within schedule, energy config).
  /// The swap/adain-threshold-versus-plan-length coupling only applies when
  /// the config drives the guided sampler.
  void validate(bool sampling = true) const;

  nlohmann::json to_json() const;

  Schedule make_schedule_obj() const;
  TimestepPlan make_plan_obj(const Schedule& s) const;

  bool operator==(const RunConfig& other) const { return to_json() == other.to_json(); }
};

/// Applies SEMANTIX_SEED (when set) over every seed-carrying field.
void apply_seed_env(RunConfig& cfg);

}  // namespace semantix
