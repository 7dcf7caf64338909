#include "semantix/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <variant>
#include <vector>

namespace semantix {

namespace {

using TomlValue = std::variant<bool, double, std::string, std::vector<double>,
                               std::vector<std::string>>;
using FlatMap = std::map<std::string, TomlValue>;

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

TomlValue parse_scalar(const std::string& raw, const std::string& key) {
  std::string v = trim(raw);
  if (v.empty()) throw std::invalid_argument("config: empty value for key '" + key + "'");
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"')
      throw std::invalid_argument("config: unterminated string for key '" + key + "'");
    return v.substr(1, v.size() - 2);
  }
  if (v == "true") return true;
  if (v == "false") return false;
  char* end = nullptr;
  double d = std::strtod(v.c_str(), &end);
  if (end == nullptr || *end != '\0')
    throw std::invalid_argument("config: unparsable value '" + v + "' for key '" + key + "'");
  return d;
}

TomlValue parse_value(const std::string& raw, const std::string& key) {
  std::string v = trim(raw);
  if (!v.empty() && v.front() == '[') {
    if (v.back() != ']')
      throw std::invalid_argument("config: unterminated array for key '" + key + "'");
    std::string inner = v.substr(1, v.size() - 2);
    std::vector<double> nums;
    std::vector<std::string> strs;
    bool any_string = false;
    std::string item;
    std::istringstream ss(inner);
    while (std::getline(ss, item, ',')) {
      std::string it = trim(item);
      if (it.empty()) continue;
      TomlValue sv = parse_scalar(it, key);
      if (std::holds_alternative<std::string>(sv)) {
        any_string = true;
        strs.push_back(std::get<std::string>(sv));
      } else if (std::holds_alternative<double>(sv)) {
        nums.push_back(std::get<double>(sv));
      } else {
        throw std::invalid_argument("config: booleans not allowed in arrays (key '" + key + "')");
      }
    }
    if (any_string) {
      if (!nums.empty())
        throw std::invalid_argument("config: mixed array types for key '" + key + "'");
      return strs;
    }
    return nums;
  }
  return parse_scalar(v, key);
}

FlatMap parse_toml(const std::string& text) {
  FlatMap out;
  std::string section;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']')
        throw std::invalid_argument("config: bad section header at line " +
                                    std::to_string(lineno));
      section = trim(s.substr(1, s.size() - 2));
      continue;
    }
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected key = value at line " +
                                  std::to_string(lineno));
    std::string key = trim(s.substr(0, eq));
    std::string full = section.empty() ? key : section + "." + key;
    if (out.count(full) > 0)
      throw std::invalid_argument("config: duplicate key '" + full + "'");
    out[full] = parse_value(s.substr(eq + 1), full);
  }
  return out;
}

void flatten_json(const nlohmann::json& j, const std::string& prefix, FlatMap& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items())
      flatten_json(v, prefix.empty() ? k : prefix + "." + k, out);
    return;
  }
  if (j.is_boolean())
    out[prefix] = j.get<bool>();
  else if (j.is_number())
    out[prefix] = j.get<double>();
  else if (j.is_string())
    out[prefix] = j.get<std::string>();
  else if (j.is_array()) {
    if (!j.empty() && j.front().is_string())
      out[prefix] = j.get<std::vector<std::string>>();
    else
      out[prefix] = j.get<std::vector<double>>();
  } else
    throw std::invalid_argument("config: unsupported JSON value at key '" + prefix + "'");
}

/// Typed key consumption over the flat map; every consumed key is erased so
/// leftovers can be reported as unknown.
struct KeyReader {
  FlatMap values;

  template <typename T>
  bool take(const std::string& key, T& dst) {
    auto it = values.find(key);
    if (it == values.end()) return false;
    if constexpr (std::is_same_v<T, bool>) {
      if (!std::holds_alternative<bool>(it->second)) bad_type(key, "boolean");
      dst = std::get<bool>(it->second);
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!std::holds_alternative<std::string>(it->second)) bad_type(key, "string");
      dst = std::get<std::string>(it->second);
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      if (!std::holds_alternative<std::vector<double>>(it->second)) bad_type(key, "number array");
      dst.clear();
      for (double d : std::get<std::vector<double>>(it->second))
        dst.push_back(static_cast<int>(d));
    } else {
      if (!std::holds_alternative<double>(it->second)) bad_type(key, "number");
      dst = static_cast<T>(std::get<double>(it->second));
    }
    values.erase(it);
    return true;
  }

  [[noreturn]] static void bad_type(const std::string& key, const char* want) {
    throw std::invalid_argument("config: key '" + key + "' must be a " + want);
  }

  void finish() const {
    if (values.empty()) return;
    std::string keys;
    for (const auto& [k, unused] : values) keys += (keys.empty() ? "" : ", ") + k;
    throw std::invalid_argument("config: unknown key(s): " + keys);
  }
};

RunConfig from_flat(FlatMap flat) {
  RunConfig cfg;
  KeyReader r{std::move(flat)};

  r.take("denoiser.kind", cfg.denoiser.kind);
  double seed_d;
  if (r.take("denoiser.seed", seed_d)) cfg.denoiser.seed = static_cast<std::uint64_t>(seed_d);
  r.take("denoiser.latent-downscale", cfg.denoiser.latent_downscale);
  r.take("denoiser.adapter-name", cfg.denoiser.adapter_name);

  r.take("schedule.t", cfg.schedule.T);
  std::string beta;
  if (r.take("schedule.beta-spec", beta)) cfg.schedule.beta_spec = BetaSpec::parse(beta);
  r.take("schedule.eta", cfg.schedule.eta);
  std::string variant;
  if (r.take("schedule.sigma-variant", variant))
    cfg.schedule.sigma_variant = sigma_variant_from_string(variant);

  r.take("plan.t-start", cfg.plan.t_start);
  r.take("plan.n-steps", cfg.plan.n_steps);

  if (r.take("guidance.preset", cfg.guidance_preset)) {
    if (cfg.guidance_preset == "image")
      cfg.guidance = EnergyConfig::image();
    else if (cfg.guidance_preset == "video")
      cfg.guidance = EnergyConfig::video();
    else
      throw std::invalid_argument("config: guidance.preset must be image or video");
  }
  r.take("guidance.omega", cfg.guidance.omega);
  r.take("guidance.gamma-ref", cfg.guidance.gamma_ref);
  r.take("guidance.gamma-c", cfg.guidance.gamma_c);
  r.take("guidance.gamma-reg", cfg.guidance.gamma_reg);
  r.take("guidance.lambda-pe", cfg.guidance.lambda_pe);
  r.take("guidance.clamp-lo", cfg.guidance.clamp_lo);
  r.take("guidance.clamp-hi", cfg.guidance.clamp_hi);
  r.take("guidance.swap-start", cfg.guidance.swap_start_step);
  r.take("guidance.adain-start", cfg.guidance.adain_start_step);
  r.take("guidance.feature-blocks", cfg.guidance.feature_blocks);
  r.take("guidance.swap-layers", cfg.guidance.swap_layers);
  std::string pe;
  if (r.take("guidance.pe-mode", pe)) cfg.guidance.pe_mode = pe_mode_from_string(pe);
  r.take("guidance.k-clusters", cfg.guidance.k_clusters);
  r.take("guidance.shuffle-correspondence", cfg.guidance.shuffle_correspondence);
  double sseed;
  if (r.take("guidance.shuffle-seed", sseed))
    cfg.guidance.shuffle_seed = static_cast<std::uint64_t>(sseed);

  r.take("io.output-dir", cfg.io.output_dir);
  r.take("io.energy-log", cfg.io.energy_log);

  r.finish();
  return cfg;
}

}  // namespace

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  bool json = path.size() >= 5 && path.substr(path.size() - 5) == ".json";
  if (json) return from_json(nlohmann::json::parse(text));
  return from_flat(parse_toml(text));
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  FlatMap flat;
  flatten_json(j, "", flat);
  return from_flat(std::move(flat));
}

void RunConfig::apply_override(const std::string& dotted_key, const std::string& value) {
  nlohmann::json j = to_json();
  FlatMap flat;
  flatten_json(j, "", flat);
  if (flat.count(dotted_key) == 0)
    throw std::invalid_argument("config: unknown key(s): " + dotted_key);
  flat[dotted_key] = parse_value(value, dotted_key);
  *this = from_flat(std::move(flat));
}

void RunConfig::validate(bool sampling) const {
  if (denoiser.kind != "toy" && denoiser.kind != "adapter")
    throw std::invalid_argument("config: denoiser.kind must be toy or adapter");
  if (denoiser.latent_downscale < 1)
    throw std::invalid_argument("config: denoiser.latent-downscale must be >= 1");
  if (plan.t_start < 1 || plan.t_start > schedule.T)
    throw std::invalid_argument("config: plan.t-start outside [1, schedule.t]");
  if (plan.n_steps < 1 || plan.n_steps > plan.t_start)
    throw std::invalid_argument("config: plan.n-steps outside [1, plan.t-start]");
  guidance.validate(sampling ? plan.n_steps : 0);
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["denoiser"] = {{"kind", denoiser.kind},
                   {"seed", denoiser.seed},
                   {"latent-downscale", denoiser.latent_downscale},
                   {"adapter-name", denoiser.adapter_name}};
  j["schedule"] = {{"t", schedule.T},
                   {"beta-spec", schedule.beta_spec.to_string()},
                   {"eta", schedule.eta},
                   {"sigma-variant", to_string(schedule.sigma_variant)}};
  j["plan"] = {{"t-start", plan.t_start}, {"n-steps", plan.n_steps}};
  j["guidance"] = {{"preset", guidance_preset},
                   {"omega", guidance.omega},
                   {"gamma-ref", guidance.gamma_ref},
                   {"gamma-c", guidance.gamma_c},
                   {"gamma-reg", guidance.gamma_reg},
                   {"lambda-pe", guidance.lambda_pe},
                   {"clamp-lo", guidance.clamp_lo},
                   {"clamp-hi", guidance.clamp_hi},
                   {"swap-start", guidance.swap_start_step},
                   {"adain-start", guidance.adain_start_step},
                   {"feature-blocks", guidance.feature_blocks},
                   {"swap-layers", guidance.swap_layers},
                   {"pe-mode", to_string(guidance.pe_mode)},
                   {"k-clusters", guidance.k_clusters},
                   {"shuffle-correspondence", guidance.shuffle_correspondence},
                   {"shuffle-seed", guidance.shuffle_seed}};
  j["io"] = {{"output-dir", io.output_dir}, {"energy-log", io.energy_log}};
  return j;
}

Schedule RunConfig::make_schedule_obj() const {
  return make_schedule(schedule.T, schedule.beta_spec, schedule.eta);
}

TimestepPlan RunConfig::make_plan_obj(const Schedule& s) const {
  return make_plan(s, plan.t_start, plan.n_steps);
}

void apply_seed_env(RunConfig& cfg) {
  const char* env = std::getenv("SEMANTIX_SEED");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  unsigned long long v = std::strtoull(env, &end, 10);
  if (end == nullptr || *end != '\0')
    throw std::invalid_argument("SEMANTIX_SEED is not an integer");
  cfg.denoiser.seed = v;
  cfg.guidance.shuffle_seed = v;
}

}  // namespace semantix
