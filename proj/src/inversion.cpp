#include "semantix/inversion.hpp"

#include "semantix/rng.hpp"
#include "semantix/sampler.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace semantix {

std::map<int, Tensor> diffuse_independent(const Tensor& x0, const Schedule& s,
                                          const TimestepPlan& plan, std::uint64_t seed) {
  if (!all_finite(x0)) throw std::invalid_argument("diffuse_independent: non-finite input");
  std::map<int, Tensor> xs;
  for (size_t i = 0; i < plan.steps.size(); ++i) {
    int t = plan.steps[i];
    Real ab = s.alpha_bar_at(t);
    NormalSampler rng(mix_seed(seed, 0x5eedULL, std::uint64_t(t)));
    Tensor x(x0.batch(), x0.channels(), x0.height(), x0.width());
    rng.fill(x);
    x.array() = std::sqrt(ab) * x0.array() + std::sqrt(1.0 - ab) * x.array();
    xs.emplace(t, std::move(x));
  }
  return xs;
}

Tensor compute_mu_hat(const Tensor& x_t, const Tensor& eps_hat, int t, int t_prev,
                      const Schedule& s, SigmaVariant variant) {
  require_same_shape(x_t, eps_hat, "compute_mu_hat");
  Real ab_t = s.alpha_bar_at(t);
  Real ab_p = transition_alpha_bar_prev(s, t, t_prev);
  Real sig = sigma_between(s, t, t_prev, variant);
  Real radicand = 1.0 - ab_p - sig * sig;
  if (radicand < -1e-12)
    throw std::invalid_argument("compute_mu_hat: sigma^2 exceeds 1 - alpha_bar at t_prev=" +
                                std::to_string(t_prev) + " (t=" + std::to_string(t) + ")");
  radicand = std::max(radicand, 0.0);

  Tensor mu(x_t.batch(), x_t.channels(), x_t.height(), x_t.width());
  mu.array() = std::sqrt(ab_p) * (x_t.array() - std::sqrt(1.0 - ab_t) * eps_hat.array()) /
                   std::sqrt(ab_t) +
               std::sqrt(radicand) * eps_hat.array();
  return mu;
}

Tensor extract_noise(const Tensor& x_prev, const Tensor& mu_hat, Real sigma_t) {
  require_same_shape(x_prev, mu_hat, "extract_noise");
  if (!(sigma_t > 0.0))
    throw std::invalid_argument(
        "extract_noise: sigma_t must be positive (eta=0 plans carry no noise maps)");
  Tensor z(x_prev.batch(), x_prev.channels(), x_prev.height(), x_prev.width());
  z.array() = (x_prev.array() - mu_hat.array()) / sigma_t;
  return z;
}

InversionRecord invert(const Tensor& x0, const DenoiserBackend& backend, const Condition& c,
                       const Schedule& s, const TimestepPlan& plan, Real cfg_omega,
                       std::uint64_t seed, SigmaVariant variant) {
  if (plan.steps.empty()) throw std::invalid_argument("invert: empty plan");
  std::map<int, Tensor> xs = diffuse_independent(x0, s, plan, seed);

  InversionRecord rec;
  rec.plan = plan;
  rec.condition = c;
  rec.omega = cfg_omega;
  rec.seed = seed;
  rec.sigma_variant = variant;

  rec.x_start = xs.at(plan.t_start);

  // walk transitions in replay order (t_start downward); each step t pairs
  // with the previous plan step, the smallest one with the clean input
  for (int i = plan.n_steps() - 1; i >= 0; --i) {
    int t = plan.steps[static_cast<size_t>(i)];
    int t_prev = plan.prev_of(i);
    const Tensor& x_t = xs.at(t);
    const Tensor& x_prev = i == 0 ? x0 : xs.at(t_prev);

    DenoiserOutput out = backend.predict(x_t, t, c);
    Tensor eps_hat = cfg_combine(out.eps_cond, out.eps_uncond, cfg_omega);
    Tensor mu = compute_mu_hat(x_t, eps_hat, t, t_prev, s, variant);
    Real sig = sigma_between(s, t, t_prev, variant);
    if (sig > 0.0) {
      Tensor z = extract_noise(x_prev, mu, sig);
      // re-derive the lower sample from (mu, z) before its own transition is
      // processed, so replay reproduces it to the last bit; mirrors the
      // error-accumulation correction of edit-friendly inversion
      if (i > 0) {
        Tensor corrected = mu;
        corrected.array() += sig * z.array();
        xs.at(t_prev) = std::move(corrected);
      }
      rec.noise_maps.emplace(t, std::move(z));
    }
  }
  return rec;
}

Tensor reconstruct(const InversionRecord& rec, const DenoiserBackend& backend, const Schedule& s,
                   Real cfg_omega) {
  if (rec.plan.steps.empty()) throw std::invalid_argument("reconstruct: empty plan");
  Tensor x = rec.x_start;
  for (int i = rec.plan.n_steps() - 1; i >= 0; --i) {
    int t = rec.plan.steps[static_cast<size_t>(i)];
    int t_prev = rec.plan.prev_of(i);

    DenoiserOutput out = backend.predict(x, t, rec.condition);
    Tensor eps_hat = cfg_combine(out.eps_cond, out.eps_uncond, cfg_omega);
    Tensor mu = compute_mu_hat(x, eps_hat, t, t_prev, s, rec.sigma_variant);
    Real sig = sigma_between(s, t, t_prev, rec.sigma_variant);
    if (sig > 0.0) {
      auto it = rec.noise_maps.find(t);
      if (it == rec.noise_maps.end())
        throw std::invalid_argument("reconstruct: missing noise map for t=" + std::to_string(t));
      mu.array() += sig * it->second.array();
    }
    x = std::move(mu);
  }
  return x;
}

// --- archive ----------------------------------------------------------------

namespace {

void write_f32(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    float v = static_cast<float>(t.array()[i]);
    out.write(reinterpret_cast<const char*>(&v), sizeof(float));
  }
}

Tensor read_f32(const std::filesystem::path& path, const std::array<int, 4>& dims) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Tensor t(dims[0], dims[1], dims[2], dims[3]);
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    float v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(float));
    if (!in) throw std::runtime_error("short read in " + path.string());
    t.array()[i] = v;
  }
  return t;
}

std::string z_name(int t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "z_%06d.f32", t);
  return buf;
}

}  // namespace

void save_record(const InversionRecord& rec, const Schedule& s, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  nlohmann::json manifest;
  manifest["schedule"] = {{"T", s.T},
                          {"eta", s.eta},
                          {"beta-first", s.beta[1]},
                          {"beta-last", s.beta[s.T]}};
  manifest["sigma-variant"] = to_string(rec.sigma_variant);
  manifest["plan"] = {{"t-start", rec.plan.t_start}, {"steps", rec.plan.steps}};
  manifest["omega"] = rec.omega;
  manifest["seed"] = rec.seed;
  manifest["condition"] = {{"prompt", rec.condition.prompt}, {"null", rec.condition.is_null}};
  manifest["dtype"] = "float32-le";
  manifest["shape"] = {rec.x_start.batch(), rec.x_start.channels(), rec.x_start.height(),
                       rec.x_start.width()};
  std::vector<int> z_steps;
  for (const auto& [t, unused] : rec.noise_maps) z_steps.push_back(t);
  manifest["noise-steps"] = z_steps;

  std::ofstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("cannot write manifest in " + dir);
  mf << manifest.dump(2) << "\n";

  write_f32(fs::path(dir) / "x_start.f32", rec.x_start);
  for (const auto& [t, z] : rec.noise_maps) write_f32(fs::path(dir) / z_name(t), z);
}

InversionRecord load_record(const std::string& dir, Schedule* schedule_out) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("cannot open " + dir + "/manifest.json");
  nlohmann::json manifest = nlohmann::json::parse(mf);

  InversionRecord rec;
  rec.plan.t_start = manifest.at("plan").at("t-start").get<int>();
  rec.plan.steps = manifest.at("plan").at("steps").get<std::vector<int>>();
  rec.omega = manifest.at("omega").get<Real>();
  rec.seed = manifest.at("seed").get<std::uint64_t>();
  rec.sigma_variant = sigma_variant_from_string(manifest.at("sigma-variant").get<std::string>());
  rec.condition.prompt = manifest.at("condition").at("prompt").get<std::string>();
  rec.condition.is_null = manifest.at("condition").at("null").get<bool>();

  auto sh = manifest.at("shape").get<std::vector<int>>();
  if (sh.size() != 4) throw std::runtime_error("bad shape entry in " + dir + "/manifest.json");
  std::array<int, 4> dims{sh[0], sh[1], sh[2], sh[3]};
  rec.x_start = read_f32(fs::path(dir) / "x_start.f32", dims);
  for (int t : manifest.at("noise-steps").get<std::vector<int>>())
    rec.noise_maps.emplace(t, read_f32(fs::path(dir) / z_name(t), dims));

  if (schedule_out != nullptr) {
    const auto& js = manifest.at("schedule");
    *schedule_out = make_schedule(
        js.at("T").get<int>(),
        BetaSpec::linear(js.at("beta-first").get<Real>(), js.at("beta-last").get<Real>()),
        js.at("eta").get<Real>());
  }
  return rec;
}

}  // namespace semantix
