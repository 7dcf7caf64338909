// Command-line front end: transfer, invert, reconstruct, inspect-features,
// metrics. Flags mirror the config keys; --config loads a TOML or JSON file,
// flags override file values, SEMANTIX_SEED overrides all seeds.

#include "semantix/config.hpp"
#include "semantix/correspondence.hpp"
#include "semantix/image_io.hpp"
#include "semantix/inversion.hpp"
#include "semantix/metrics.hpp"
#include "semantix/rng.hpp"
#include "semantix/sampler.hpp"
#include "semantix/toy_denoiser.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace semantix;

namespace {

struct FlagOverrides {
  std::map<std::string, std::string> values;

  void add_to(CLI::App* cmd, const char* flag, const char* key, const char* desc) {
    cmd->add_option_function<std::string>(
        flag, [this, key](const std::string& v) { values[key] = v; }, desc);
  }
};

void add_guidance_flags(CLI::App* cmd, FlagOverrides& ov) {
  ov.add_to(cmd, "--omega", "guidance.omega", "classifier-free guidance strength");
  ov.add_to(cmd, "--gamma-ref", "guidance.gamma-ref", "style feature guidance weight");
  ov.add_to(cmd, "--gamma-c", "guidance.gamma-c", "spatial feature guidance weight");
  ov.add_to(cmd, "--gamma-reg", "guidance.gamma-reg", "semantic distance weight");
  ov.add_to(cmd, "--lambda-pe", "guidance.lambda-pe", "positional encoding weight");
  ov.add_to(cmd, "--clamp-lo", "guidance.clamp-lo", "gradient clamp lower bound");
  ov.add_to(cmd, "--clamp-hi", "guidance.clamp-hi", "gradient clamp upper bound");
  ov.add_to(cmd, "--swap-start", "guidance.swap-start", "KV swap start step");
  ov.add_to(cmd, "--adain-start", "guidance.adain-start", "AdaIN start step");
  ov.add_to(cmd, "--feature-blocks", "guidance.feature-blocks", "tapped decoder blocks, e.g. [2,3]");
  ov.add_to(cmd, "--swap-layers", "guidance.swap-layers", "self-attention swap layers, e.g. [3,4]");
  ov.add_to(cmd, "--pe-mode", "guidance.pe-mode", "positional encoding mode (\"2d\"|\"3d\")");
  ov.add_to(cmd, "--k-clusters", "guidance.k-clusters", "k-means cluster count");
  ov.add_to(cmd, "--preset", "guidance.preset", "guidance preset (\"image\"|\"video\")");
  ov.add_to(cmd, "--shuffle-seed", "guidance.shuffle-seed", "correspondence shuffle seed");
}

void add_common_flags(CLI::App* cmd, FlagOverrides& ov) {
  ov.add_to(cmd, "--seed", "denoiser.seed", "backend + run seed");
  ov.add_to(cmd, "--denoiser-kind", "denoiser.kind", "backend kind (\"toy\"|\"adapter\")");
  ov.add_to(cmd, "--adapter-name", "denoiser.adapter-name", "registered adapter name");
  ov.add_to(cmd, "--latent-downscale", "denoiser.latent-downscale", "toy encoder pool factor");
  ov.add_to(cmd, "--t-start", "plan.t-start", "inversion timestep");
  ov.add_to(cmd, "--n-steps", "plan.n-steps", "sampling step count");
  ov.add_to(cmd, "--eta", "schedule.eta", "stochasticity eta");
  ov.add_to(cmd, "--sigma-variant", "schedule.sigma-variant",
            "sigma formula (\"posterior-sqrt\"|\"paper-literal\")");
  ov.add_to(cmd, "--output-dir", "io.output-dir", "output directory");
}

RunConfig resolve_config(const std::string& config_path, const FlagOverrides& ov,
                         bool shuffle_flag, bool sampling = true) {
  RunConfig cfg;
  if (!config_path.empty()) cfg = RunConfig::load(config_path);
  for (const auto& [k, v] : ov.values) {
    // bare strings for enum-ish keys arrive unquoted from the shell
    if (!v.empty() && v.front() != '[' && v.front() != '"' && v != "true" && v != "false") {
      char* end = nullptr;
      std::strtod(v.c_str(), &end);
      if (end == nullptr || *end != '\0') {
        cfg.apply_override(k, "\"" + v + "\"");
        continue;
      }
    }
    cfg.apply_override(k, v);
  }
  if (shuffle_flag) cfg.guidance.shuffle_correspondence = true;
  apply_seed_env(cfg);
  cfg.validate(sampling);
  return cfg;
}

std::unique_ptr<DenoiserBackend> build_backend(const RunConfig& cfg) {
  ensure_toy_backend_registered();
  BackendOptions opt;
  opt.seed = cfg.denoiser.seed;
  opt.latent_downscale = cfg.denoiser.latent_downscale;
  if (cfg.denoiser.kind == "toy") return make_registered_backend("toy", opt);
  if (cfg.denoiser.adapter_name.empty())
    throw std::invalid_argument("denoiser.kind=adapter requires denoiser.adapter-name");
  return make_registered_backend(cfg.denoiser.adapter_name, opt);
}

Tensor load_input(const std::string& path, bool& is_video) {
  if (fs::is_directory(path)) {
    is_video = true;
    return load_frame_dir(path);
  }
  is_video = false;
  return load_png(path);
}

void write_image_or_frames(const Tensor& img, const fs::path& base, bool video) {
  if (video)
    save_frame_dir(img, base.string());
  else
    save_png(img, base.string() + ".png");
}

nlohmann::json manifest_stub(const RunConfig& cfg) {
  nlohmann::json m;
  m["config"] = cfg.to_json();
  m["effective-seed"] = cfg.denoiser.seed;
  return m;
}

/// Content hash of a PNG file, or of every frame file for a directory input.
std::string input_content_hash(const std::string& path) {
  if (!fs::is_directory(path)) return file_content_hash(path);
  std::string combined;
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(path))
    if (entry.path().extension() == ".png") names.push_back(entry.path().string());
  std::sort(names.begin(), names.end());
  for (const auto& n : names) combined += file_content_hash(n);
  char buf[19];
  std::snprintf(buf, sizeof(buf), "fnv1a-%012llx",
                static_cast<unsigned long long>(fnv1a64(combined) & 0xffffffffffffULL));
  return buf;
}

void write_manifest(const nlohmann::json& m, const fs::path& dir) {
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  out << m.dump(2) << "\n";
}

int cmd_transfer(const std::string& config_path, const std::string& context_path,
                 const std::string& reference_path, const std::string& context_prompt,
                 const std::string& reference_prompt, const FlagOverrides& ov, bool shuffle,
                 bool energy_log_flag) {
  RunConfig cfg = resolve_config(config_path, ov, shuffle);
  if (energy_log_flag) cfg.io.energy_log = true;
  auto backend = build_backend(cfg);

  bool ctx_video = false, ref_video = false;
  Tensor context = load_input(context_path, ctx_video);
  Tensor reference = load_input(reference_path, ref_video);
  if (cfg.denoiser.kind == "adapter") {
    context = resize_image(context, 512, 512);
    reference = resize_image(reference, 512, 512);
  }
  if (ctx_video && cfg.guidance_preset == "image")
    std::cerr << "note: frame-directory context with the image preset; consider --preset video\n";

  Schedule s = cfg.make_schedule_obj();
  TimestepPlan plan = cfg.make_plan_obj(s);

  TransferResult result = run_transfer(
      context, reference, Condition::text(context_prompt), Condition::text(reference_prompt),
      *backend, s, cfg.guidance, plan, cfg.denoiser.seed, cfg.schedule.sigma_variant);

  fs::path out_dir(cfg.io.output_dir);
  fs::create_directories(out_dir);
  write_image_or_frames(result.output, out_dir / "output", ctx_video);
  write_image_or_frames(result.context_recon, out_dir / "context_recon", ctx_video);
  write_image_or_frames(result.reference_recon, out_dir / "reference_recon", ctx_video);

  std::string energy_log_path;
  if (cfg.io.energy_log) {
    energy_log_path = (out_dir / "energy.jsonl").string();
    std::ofstream log(energy_log_path);
    for (const auto& e : result.energy_log) {
      nlohmann::json rec = {{"step", e.step},
                            {"t", e.t},
                            {"style", e.breakdown.style},
                            {"spatial", e.breakdown.spatial},
                            {"regularizer", e.breakdown.regularizer},
                            {"total", e.breakdown.total},
                            {"grad_max_abs", e.grad_max_abs}};
      log << rec.dump() << "\n";
    }
  }

  nlohmann::json m = manifest_stub(cfg);
  m["plan-steps"] = plan.steps;
  m["inputs"] = {{"context", {{"path", context_path}, {"hash", input_content_hash(context_path)}}},
                 {"reference",
                  {{"path", reference_path}, {"hash", input_content_hash(reference_path)}}}};
  m["outputs"] = {ctx_video ? "output/" : "output.png",
                  ctx_video ? "context_recon/" : "context_recon.png",
                  ctx_video ? "reference_recon/" : "reference_recon.png"};
  m["energy-log"] = cfg.io.energy_log ? nlohmann::json(energy_log_path) : nlohmann::json(nullptr);
  m["prompts"] = {{"context", context_prompt}, {"reference", reference_prompt}};
  m["shuffle-correspondence"] = cfg.guidance.shuffle_correspondence;
  m["shuffle-seed"] = cfg.guidance.shuffle_seed;
  write_manifest(m, out_dir);
  std::cout << "wrote " << (out_dir / "manifest.json").string() << "\n";
  return 0;
}

int cmd_invert(const std::string& config_path, const std::string& input_path,
               const std::string& record_dir, const std::string& prompt,
               const FlagOverrides& ov) {
  RunConfig cfg = resolve_config(config_path, ov, false, /*sampling=*/false);
  auto backend = build_backend(cfg);

  bool video = false;
  Tensor image = load_input(input_path, video);
  if (cfg.denoiser.kind == "adapter") image = resize_image(image, 512, 512);
  Tensor x0 = backend->encode(image);

  Schedule s = cfg.make_schedule_obj();
  TimestepPlan plan = cfg.make_plan_obj(s);
  InversionRecord rec = invert(x0, *backend, Condition::text(prompt), s, plan,
                               cfg.guidance.omega, cfg.denoiser.seed, cfg.schedule.sigma_variant);
  save_record(rec, s, record_dir);

  Tensor recon = reconstruct(rec, *backend, s, cfg.guidance.omega);
  Real err = max_abs_diff(recon, x0);

  nlohmann::json m = manifest_stub(cfg);
  m["input"] = {{"path", input_path}, {"hash", input_content_hash(input_path)}};
  m["record-dir"] = record_dir;
  m["recon-max-abs"] = err;
  // manifest.json belongs to the record archive; the run report sits beside it
  std::ofstream out(fs::path(record_dir) / "run_manifest.json");
  out << m.dump(2) << "\n";
  std::cout << "recon-max-abs " << err << "\n";
  return 0;
}

int cmd_reconstruct(const std::string& config_path, const std::string& record_dir,
                    const std::string& out_path, const std::string& original_path,
                    const FlagOverrides& ov) {
  RunConfig cfg = resolve_config(config_path, ov, false, /*sampling=*/false);
  auto backend = build_backend(cfg);

  Schedule s;
  InversionRecord rec = load_record(record_dir, &s);
  Tensor recon = reconstruct(rec, *backend, s, rec.omega);
  Tensor image = backend->decode(recon);
  if (image.batch() > 1)
    save_frame_dir(image, out_path);
  else
    save_png(image, out_path);

  if (!original_path.empty()) {
    bool video = false;
    Tensor original = load_input(original_path, video);
    Tensor x0 = backend->encode(original);
    std::cout << "recon-max-abs " << max_abs_diff(recon, x0) << "\n";
  }
  return 0;
}

int cmd_inspect_features(const std::string& config_path, const std::string& input_path, int t,
                         const std::string& reference_path, const FlagOverrides& ov) {
  RunConfig cfg = resolve_config(config_path, ov, false, /*sampling=*/false);
  auto backend = build_backend(cfg);

  Schedule s = cfg.make_schedule_obj();
  if (t <= 0) t = cfg.plan.t_start;
  if (t < 1 || t > s.T) throw std::invalid_argument("inspect-features: t outside [1, T]");

  bool video = false;
  Tensor image = load_input(input_path, video);
  Tensor x0 = backend->encode(image);
  TimestepPlan probe;
  probe.steps = {t};
  probe.t_start = t;
  Tensor x_t = diffuse_independent(x0, s, probe, cfg.denoiser.seed).at(t);

  TapRequest taps;
  taps.feature_blocks = cfg.guidance.feature_blocks;
  DenoiserOutput out = backend->predict(x_t, t, Condition::null_token(), taps);

  fs::path out_dir(cfg.io.output_dir);
  fs::create_directories(out_dir);
  for (const auto& [block, feats] : out.features) {
    FeatureMap fm{feats, block, t};
    Tensor vis = pca_visualize(fm);
    save_png(vis, (out_dir / ("pca_block_" + std::to_string(block) + ".png")).string());
  }

  if (!reference_path.empty()) {
    bool rvideo = false;
    Tensor ref_img = load_input(reference_path, rvideo);
    Tensor xr0 = backend->encode(ref_img);
    Tensor xr_t = diffuse_independent(xr0, s, probe, mix_seed(cfg.denoiser.seed, 0x20)).at(t);
    DenoiserOutput rout = backend->predict(xr_t, t, Condition::null_token(), taps);
    for (const auto& [block, feats] : out.features) {
      FeatureMap fc{feats, block, t};
      FeatureMap fr{rout.features.at(block), block, t};
      PositionalField pe = make_positional_field(fc.data.channels(), fc.data.height(),
                                                 fc.data.width(), cfg.guidance.pe_mode, 1,
                                                 cfg.guidance.lambda_pe);
      RegionMask full = RegionMask::full(fc.data.height(), fc.data.width());
      CorrespondenceMap corr = match_features(add_positional_encoding(fc, pe),
                                              add_positional_encoding(fr, pe), full);
      // paint each context position with the PCA colour of its match
      Tensor ref_vis = pca_visualize(fr);
      Tensor overlay(1, 3, fc.data.height(), fc.data.width());
      for (Eigen::Index i = 0; i < corr.assignment.size(); ++i) {
        int j = corr.assignment[i];
        for (int c = 0; c < 3; ++c) overlay.array()[c * overlay.plane_size() + i] =
            ref_vis.array()[c * ref_vis.plane_size() + j];
      }
      save_png(overlay,
               (out_dir / ("correspondence_block_" + std::to_string(block) + ".png")).string());
    }
  }
  std::cout << "wrote feature inspections to " << out_dir.string() << "\n";
  return 0;
}

int cmd_metrics(const std::string& path_a, const std::string& path_b,
                const std::string& out_dir_str) {
  fs::path out_dir(out_dir_str);
  fs::create_directories(out_dir);

  std::vector<std::pair<std::string, std::string>> pairs;
  if (fs::is_directory(path_a) != fs::is_directory(path_b))
    throw std::invalid_argument("metrics: both arguments must be files or both directories");
  if (fs::is_directory(path_a)) {
    for (const auto& entry : fs::directory_iterator(path_a)) {
      if (entry.path().extension() != ".png") continue;
      fs::path other = fs::path(path_b) / entry.path().filename();
      if (fs::exists(other)) pairs.emplace_back(entry.path().string(), other.string());
    }
    std::sort(pairs.begin(), pairs.end());
    if (pairs.empty()) throw std::invalid_argument("metrics: no matching PNG pairs");
  } else {
    pairs.emplace_back(path_a, path_b);
  }

  std::ofstream csv(out_dir / "metrics.csv");
  csv << "a,b,gram_loss,ssim,recon_max_abs\n";
  for (size_t i = 0; i < pairs.size(); ++i) {
    Tensor a = load_png(pairs[i].first);
    Tensor b = load_png(pairs[i].second);
    MetricReport r = compare_images(a, b);
    nlohmann::json j = {{"a", pairs[i].first},
                        {"b", pairs[i].second},
                        {"gram-loss", r.gram_loss},
                        {"ssim", r.ssim},
                        {"recon-max-abs", r.recon_max_abs},
                        {"notes", r.notes}};
    std::ofstream jf(out_dir / ("metrics_" + std::to_string(i) + ".json"));
    jf << j.dump(2) << "\n";
    csv << pairs[i].first << "," << pairs[i].second << "," << r.gram_loss << "," << r.ssim << ","
        << r.recon_max_abs << "\n";
    std::cout << pairs[i].first << " vs " << pairs[i].second << ": gram=" << r.gram_loss
              << " ssim=" << r.ssim << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantix energy-guided sampler for semantic style transfer"};
  app.require_subcommand(1);

  std::string config_path, context_path, reference_path, input_path, record_dir, out_path;
  std::string original_path, prompt, context_prompt, reference_prompt, metrics_out = "out";
  std::string metrics_a, metrics_b;
  int inspect_t = 0;
  bool shuffle = false, energy_log = false;
  FlagOverrides ov;

  auto* transfer = app.add_subcommand("transfer", "run semantic style transfer");
  transfer->add_option("--config", config_path, "TOML or JSON config file");
  transfer->add_option("context", context_path, "context image (PNG) or frame directory")
      ->required();
  transfer->add_option("reference", reference_path, "reference image (PNG)")->required();
  transfer->add_option("--prompt", context_prompt, "context prompt");
  transfer->add_option("--reference-prompt", reference_prompt, "reference prompt");
  transfer->add_flag("--shuffle-correspondence", shuffle, "randomly permute correspondences");
  transfer->add_flag("--energy-log", energy_log, "write per-step energy JSONL");
  add_common_flags(transfer, ov);
  add_guidance_flags(transfer, ov);

  auto* invert_cmd = app.add_subcommand("invert", "edit-friendly DDPM inversion to an archive");
  invert_cmd->add_option("--config", config_path, "TOML or JSON config file");
  invert_cmd->add_option("input", input_path, "input image (PNG) or frame directory")->required();
  invert_cmd->add_option("record", record_dir, "output record directory")->required();
  invert_cmd->add_option("--prompt", prompt, "inversion prompt");
  add_common_flags(invert_cmd, ov);
  add_guidance_flags(invert_cmd, ov);

  auto* recon = app.add_subcommand("reconstruct", "replay an inversion record");
  recon->add_option("--config", config_path, "TOML or JSON config file");
  recon->add_option("record", record_dir, "inversion record directory")->required();
  recon->add_option("output", out_path, "output PNG (or frame directory for video records)")
      ->required();
  recon->add_option("--original", original_path, "original input to report max-abs against");
  add_common_flags(recon, ov);

  auto* inspect = app.add_subcommand("inspect-features", "PCA feature maps and correspondence");
  inspect->add_option("--config", config_path, "TOML or JSON config file");
  inspect->add_option("input", input_path, "input image (PNG) or frame directory")->required();
  inspect->add_option("--t", inspect_t, "diffusion timestep (default: plan.t-start)");
  inspect->add_option("--reference", reference_path, "reference image for the overlay");
  add_common_flags(inspect, ov);
  add_guidance_flags(inspect, ov);

  auto* metrics_cmd = app.add_subcommand("metrics", "Gram/SSIM report for image pairs");
  metrics_cmd->add_option("a", metrics_a, "first image or directory")->required();
  metrics_cmd->add_option("b", metrics_b, "second image or directory")->required();
  metrics_cmd->add_option("--output-dir", metrics_out, "report directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (transfer->parsed())
      return cmd_transfer(config_path, context_path, reference_path, context_prompt,
                          reference_prompt, ov, shuffle, energy_log);
    if (invert_cmd->parsed())
      return cmd_invert(config_path, input_path, record_dir, prompt, ov);
    if (recon->parsed())
      return cmd_reconstruct(config_path, record_dir, out_path, original_path, ov);
    if (inspect->parsed())
      return cmd_inspect_features(config_path, input_path, inspect_t, reference_path, ov);
    if (metrics_cmd->parsed()) return cmd_metrics(metrics_a, metrics_b, metrics_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
