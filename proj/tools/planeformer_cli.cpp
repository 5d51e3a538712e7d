// planeformer: one binary with subcommands for the full pipeline —
// synthetic data generation, training, pairwise / multiview evaluation,
// mesh export, and a finite-difference gradient self-check.

#include <CLI11.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "planeformer/episode_io.hpp"
#include "planeformer/inference.hpp"
#include "planeformer/metrics.hpp"
#include "planeformer/model.hpp"
#include "planeformer/parallel.hpp"

namespace fs = std::filesystem;
using namespace pf;

namespace {

// Configuration or command-line misuse; exits with status 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr std::uint64_t kGenEpisodeStream = 11;
constexpr std::uint64_t kGenCodebookStream = 12;
constexpr std::uint64_t kGradStream = 13;
constexpr int kGenerationAttempts = 64;

// ---------------------------------------------------------------------------
// RunConfig: every tunable of every subcommand, merged from defaults, the
// model preset, the JSON config file, and command-line flags (in that order).

struct RunConfig {
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string out = "runs";
  std::string preset = "desk";
  std::vector<std::string> ablate;

  int h = 9;
  double tau = 0.5;
  double sigma = 0.5;

  // gen-data
  int episodes = 50;
  int views = 2;
  int codebook_size = 32;
  SceneConfig scene;
  NoiseConfig noise;
  BaselineConfig baseline;
  Intrinsics intrinsics;

  // dataset / artifact paths
  std::string data;
  std::string val_data;
  std::string codebook;  // defaults to codebook.json next to `data`
  std::string model;     // checkpoint directory
  bool gt_inject = false;

  // train
  int iterations = 2000;
  int batch_size = 8;
  int eval_interval = 200;
  int checkpoint_interval = 500;
  OptimizerConfig optim;
  LossWeights loss;

  // grad-check
  double grad_eps = 1e-5;
  double grad_tol = 1e-4;
  int grad_draws = 3;
  int grad_coords = 1500;
};

ModelConfig preset_model(const std::string& preset) {
  if (preset == "paper") return ModelConfig::paper();
  if (preset == "desk") return ModelConfig::desk();
  if (preset == "smoke") return ModelConfig::smoke();
  throw UsageError("config key 'preset': must be one of paper, desk, smoke");
}

Intrinsics preset_intrinsics(const std::string& preset) {
  if (preset == "paper") return Intrinsics{550.0, 550.0, 320.0, 240.0, 640, 480};
  return Intrinsics{110.0, 110.0, 64.0, 48.0, 128, 96};
}

const std::set<std::string> kAblations = {"appearance", "plane", "mask",
                                          "transformer", "residual"};

ModelConfig effective_model(const RunConfig& cfg) {
  ModelConfig m = preset_model(cfg.preset);
  for (const std::string& a : cfg.ablate) {
    if (a == "appearance") m.no_appearance = true;
    else if (a == "plane") m.no_plane = true;
    else if (a == "mask") m.no_mask = true;
    else if (a == "transformer") m.no_transformer = true;
    else if (a == "residual") m.no_residual = true;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Strict JSON parsing: unknown keys and type mismatches are usage errors that
// name the offending key path.

void check_keys(const Json& j, const std::string& path,
                const std::set<std::string>& allowed) {
  for (const auto& item : j.items())
    if (!allowed.count(item.key()))
      throw UsageError("unknown config key '" +
                       (path.empty() ? item.key() : path + "." + item.key()) +
                       "'");
}

Json expect_object(const Json& j, const std::string& path) {
  if (!j.is_object())
    throw UsageError("config key '" + path + "': expected an object");
  return j;
}

void fetch_double(const Json& j, const std::string& path, const char* key,
                  double& into) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  if (!v.is_number())
    throw UsageError("config key '" + path + key + "': expected a number");
  into = v.get<double>();
}

void fetch_int(const Json& j, const std::string& path, const char* key,
               int& into) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  if (!v.is_number_integer())
    throw UsageError("config key '" + path + key + "': expected an integer");
  into = v.get<int>();
}

void fetch_u64(const Json& j, const std::string& path, const char* key,
               std::uint64_t& into) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  if (!v.is_number_integer() ||
      (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
    throw UsageError("config key '" + path + key +
                     "': expected a non-negative integer");
  into = v.get<std::uint64_t>();
}

void fetch_bool(const Json& j, const std::string& path, const char* key,
                bool& into) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  if (!v.is_boolean())
    throw UsageError("config key '" + path + key + "': expected a boolean");
  into = v.get<bool>();
}

void fetch_string(const Json& j, const std::string& path, const char* key,
                  std::string& into) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  if (!v.is_string())
    throw UsageError("config key '" + path + key + "': expected a string");
  into = v.get<std::string>();
}

void fetch_string_list(const Json& j, const std::string& path, const char* key,
                       std::vector<std::string>& into) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  if (!v.is_array())
    throw UsageError("config key '" + path + key +
                     "': expected an array of strings");
  into.clear();
  for (const Json& e : v) {
    if (!e.is_string())
      throw UsageError("config key '" + path + key +
                       "': expected an array of strings");
    into.push_back(e.get<std::string>());
  }
}

void parse_scene(const Json& j, SceneConfig& s) {
  check_keys(j, "scene",
             {"n_interior", "room_min", "room_max", "height_min", "height_max",
              "patch_min", "patch_max", "p_duplicate", "d_app"});
  fetch_int(j, "scene.", "n_interior", s.n_interior);
  fetch_double(j, "scene.", "room_min", s.room_min);
  fetch_double(j, "scene.", "room_max", s.room_max);
  fetch_double(j, "scene.", "height_min", s.height_min);
  fetch_double(j, "scene.", "height_max", s.height_max);
  fetch_double(j, "scene.", "patch_min", s.patch_min);
  fetch_double(j, "scene.", "patch_max", s.patch_max);
  fetch_double(j, "scene.", "p_duplicate", s.p_duplicate);
  fetch_int(j, "scene.", "d_app", s.d_app);
}

void parse_noise(const Json& j, NoiseConfig& n) {
  check_keys(j, "noise",
             {"sigma_app", "sigma_view", "sigma_n_deg", "sigma_o",
              "min_area_px"});
  fetch_double(j, "noise.", "sigma_app", n.sigma_app);
  fetch_double(j, "noise.", "sigma_view", n.sigma_view);
  fetch_double(j, "noise.", "sigma_n_deg", n.sigma_n_deg);
  fetch_double(j, "noise.", "sigma_o", n.sigma_o);
  fetch_int(j, "noise.", "min_area_px", n.min_area_px);
}

void parse_baseline(const Json& j, BaselineConfig& b) {
  check_keys(j, "baseline",
             {"rot_min_deg", "rot_max_deg", "trans_min", "trans_max",
              "min_matches", "min_unique", "stub_tau", "corruption",
              "stub_top", "max_tries"});
  fetch_double(j, "baseline.", "rot_min_deg", b.rot_min_deg);
  fetch_double(j, "baseline.", "rot_max_deg", b.rot_max_deg);
  fetch_double(j, "baseline.", "trans_min", b.trans_min);
  fetch_double(j, "baseline.", "trans_max", b.trans_max);
  fetch_int(j, "baseline.", "min_matches", b.min_matches);
  fetch_int(j, "baseline.", "min_unique", b.min_unique);
  fetch_double(j, "baseline.", "stub_tau", b.stub_tau);
  fetch_double(j, "baseline.", "corruption", b.corruption);
  fetch_int(j, "baseline.", "stub_top", b.stub_top);
  fetch_int(j, "baseline.", "max_tries", b.max_tries);
}

void parse_intrinsics_cfg(const Json& j, Intrinsics& k) {
  check_keys(j, "intrinsics", {"fx", "fy", "cx", "cy", "width", "height"});
  fetch_double(j, "intrinsics.", "fx", k.fx);
  fetch_double(j, "intrinsics.", "fy", k.fy);
  fetch_double(j, "intrinsics.", "cx", k.cx);
  fetch_double(j, "intrinsics.", "cy", k.cy);
  fetch_int(j, "intrinsics.", "width", k.width);
  fetch_int(j, "intrinsics.", "height", k.height);
}

void parse_optim(const Json& j, OptimizerConfig& o) {
  check_keys(j, "optim",
             {"peak_lr", "floor_lr", "start_frac", "warmup_frac", "momentum",
              "weight_decay", "grad_clip"});
  fetch_double(j, "optim.", "peak_lr", o.peak_lr);
  fetch_double(j, "optim.", "floor_lr", o.floor_lr);
  fetch_double(j, "optim.", "start_frac", o.start_frac);
  fetch_double(j, "optim.", "warmup_frac", o.warmup_frac);
  fetch_double(j, "optim.", "momentum", o.momentum);
  fetch_double(j, "optim.", "weight_decay", o.weight_decay);
  fetch_double(j, "optim.", "grad_clip", o.grad_clip);
}

void parse_loss(const Json& j, LossWeights& w) {
  check_keys(j, "loss", {"w_pi", "w_c", "w_rot", "lambda_t"});
  fetch_double(j, "loss.", "w_pi", w.w_pi);
  fetch_double(j, "loss.", "w_c", w.w_c);
  fetch_double(j, "loss.", "w_rot", w.w_rot);
  fetch_double(j, "loss.", "lambda_t", w.lambda_t);
}

const std::set<std::string> kTopLevelKeys = {
    "seed",          "jobs",          "out",
    "preset",        "ablate",        "h",
    "tau",           "sigma",         "episodes",
    "views",         "codebook_size", "scene",
    "noise",         "baseline",      "intrinsics",
    "data",          "val_data",      "codebook",
    "model",         "gt_inject",     "iterations",
    "batch_size",    "eval_interval", "checkpoint_interval",
    "optim",         "loss",          "grad_eps",
    "grad_tol",      "grad_draws",    "grad_coords"};

// Values given on the command line; they win over the file.
struct FlagOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<std::string> out;
  std::optional<std::string> preset;
  std::optional<std::vector<std::string>> ablate;
  std::optional<int> h;
  std::optional<double> tau;
  std::optional<double> sigma;
};

RunConfig parse_config(const std::string& config_path,
                       const FlagOverrides& flags) {
  Json file = Json::object();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in.good())
      throw UsageError("cannot open config file '" + config_path + "'");
    try {
      in >> file;
    } catch (const Json::parse_error& e) {
      throw UsageError("config file '" + config_path + "': " + e.what());
    }
    expect_object(file, "(root)");
  }
  check_keys(file, "", kTopLevelKeys);

  RunConfig cfg;
  // The preset seeds model-dependent defaults, so resolve it first.
  fetch_string(file, "", "preset", cfg.preset);
  if (flags.preset) cfg.preset = *flags.preset;
  const ModelConfig preset = preset_model(cfg.preset);
  cfg.scene.d_app = preset.d_app;
  cfg.intrinsics = preset_intrinsics(cfg.preset);

  fetch_u64(file, "", "seed", cfg.seed);
  fetch_int(file, "", "jobs", cfg.jobs);
  fetch_string(file, "", "out", cfg.out);
  fetch_string_list(file, "", "ablate", cfg.ablate);
  fetch_int(file, "", "h", cfg.h);
  fetch_double(file, "", "tau", cfg.tau);
  fetch_double(file, "", "sigma", cfg.sigma);
  fetch_int(file, "", "episodes", cfg.episodes);
  fetch_int(file, "", "views", cfg.views);
  fetch_int(file, "", "codebook_size", cfg.codebook_size);
  if (file.contains("scene"))
    parse_scene(expect_object(file.at("scene"), "scene"), cfg.scene);
  if (file.contains("noise"))
    parse_noise(expect_object(file.at("noise"), "noise"), cfg.noise);
  if (file.contains("baseline"))
    parse_baseline(expect_object(file.at("baseline"), "baseline"),
                   cfg.baseline);
  if (file.contains("intrinsics"))
    parse_intrinsics_cfg(expect_object(file.at("intrinsics"), "intrinsics"),
                         cfg.intrinsics);
  fetch_string(file, "", "data", cfg.data);
  fetch_string(file, "", "val_data", cfg.val_data);
  fetch_string(file, "", "codebook", cfg.codebook);
  fetch_string(file, "", "model", cfg.model);
  fetch_bool(file, "", "gt_inject", cfg.gt_inject);
  fetch_int(file, "", "iterations", cfg.iterations);
  fetch_int(file, "", "batch_size", cfg.batch_size);
  fetch_int(file, "", "eval_interval", cfg.eval_interval);
  fetch_int(file, "", "checkpoint_interval", cfg.checkpoint_interval);
  if (file.contains("optim"))
    parse_optim(expect_object(file.at("optim"), "optim"), cfg.optim);
  if (file.contains("loss"))
    parse_loss(expect_object(file.at("loss"), "loss"), cfg.loss);
  fetch_double(file, "", "grad_eps", cfg.grad_eps);
  fetch_double(file, "", "grad_tol", cfg.grad_tol);
  fetch_int(file, "", "grad_draws", cfg.grad_draws);
  fetch_int(file, "", "grad_coords", cfg.grad_coords);

  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.jobs) cfg.jobs = *flags.jobs;
  if (flags.out) cfg.out = *flags.out;
  if (flags.ablate) cfg.ablate = *flags.ablate;
  if (flags.h) cfg.h = *flags.h;
  if (flags.tau) cfg.tau = *flags.tau;
  if (flags.sigma) cfg.sigma = *flags.sigma;

  // Cross-field validation, before any work starts.
  std::set<std::string> seen;
  for (const std::string& a : cfg.ablate) {
    if (!kAblations.count(a))
      throw UsageError("config key 'ablate': unknown ablation '" + a +
                       "' (expected appearance, plane, mask, transformer, "
                       "residual)");
    if (!seen.insert(a).second)
      throw UsageError("config key 'ablate': duplicate ablation '" + a + "'");
  }
  if (cfg.h < 1) throw UsageError("config key 'h': must be >= 1");
  if (cfg.tau < 0.0 || cfg.tau > 1.0)
    throw UsageError("config key 'tau': must lie in [0, 1]");
  if (cfg.sigma <= 0.0) throw UsageError("config key 'sigma': must be > 0");
  if (cfg.jobs < 0) throw UsageError("config key 'jobs': must be >= 0");
  if (cfg.episodes < 1) throw UsageError("config key 'episodes': must be >= 1");
  if (cfg.views < 2) throw UsageError("config key 'views': must be >= 2");
  if (cfg.codebook_size < 2)
    throw UsageError("config key 'codebook_size': must be >= 2");
  if (cfg.iterations < 1)
    throw UsageError("config key 'iterations': must be >= 1");
  if (cfg.batch_size < 1)
    throw UsageError("config key 'batch_size': must be >= 1");
  if (cfg.eval_interval < 1)
    throw UsageError("config key 'eval_interval': must be >= 1");
  if (cfg.checkpoint_interval < 1)
    throw UsageError("config key 'checkpoint_interval': must be >= 1");
  if (cfg.grad_eps <= 0.0)
    throw UsageError("config key 'grad_eps': must be > 0");
  if (cfg.grad_tol <= 0.0)
    throw UsageError("config key 'grad_tol': must be > 0");
  if (cfg.grad_draws < 1)
    throw UsageError("config key 'grad_draws': must be >= 1");
  if (cfg.grad_coords < 1)
    throw UsageError("config key 'grad_coords': must be >= 1");
  return cfg;
}

// Full round-trippable echo: parsing this json (no flags) reproduces `cfg`.
Json config_to_json(const RunConfig& cfg) {
  return Json{
      {"seed", cfg.seed},
      {"jobs", cfg.jobs},
      {"out", cfg.out},
      {"preset", cfg.preset},
      {"ablate", cfg.ablate},
      {"h", cfg.h},
      {"tau", cfg.tau},
      {"sigma", cfg.sigma},
      {"episodes", cfg.episodes},
      {"views", cfg.views},
      {"codebook_size", cfg.codebook_size},
      {"scene",
       {{"n_interior", cfg.scene.n_interior},
        {"room_min", cfg.scene.room_min},
        {"room_max", cfg.scene.room_max},
        {"height_min", cfg.scene.height_min},
        {"height_max", cfg.scene.height_max},
        {"patch_min", cfg.scene.patch_min},
        {"patch_max", cfg.scene.patch_max},
        {"p_duplicate", cfg.scene.p_duplicate},
        {"d_app", cfg.scene.d_app}}},
      {"noise",
       {{"sigma_app", cfg.noise.sigma_app},
        {"sigma_view", cfg.noise.sigma_view},
        {"sigma_n_deg", cfg.noise.sigma_n_deg},
        {"sigma_o", cfg.noise.sigma_o},
        {"min_area_px", cfg.noise.min_area_px}}},
      {"baseline",
       {{"rot_min_deg", cfg.baseline.rot_min_deg},
        {"rot_max_deg", cfg.baseline.rot_max_deg},
        {"trans_min", cfg.baseline.trans_min},
        {"trans_max", cfg.baseline.trans_max},
        {"min_matches", cfg.baseline.min_matches},
        {"min_unique", cfg.baseline.min_unique},
        {"stub_tau", cfg.baseline.stub_tau},
        {"corruption", cfg.baseline.corruption},
        {"stub_top", cfg.baseline.stub_top},
        {"max_tries", cfg.baseline.max_tries}}},
      {"intrinsics",
       {{"fx", cfg.intrinsics.fx},
        {"fy", cfg.intrinsics.fy},
        {"cx", cfg.intrinsics.cx},
        {"cy", cfg.intrinsics.cy},
        {"width", cfg.intrinsics.width},
        {"height", cfg.intrinsics.height}}},
      {"data", cfg.data},
      {"val_data", cfg.val_data},
      {"codebook", cfg.codebook},
      {"model", cfg.model},
      {"gt_inject", cfg.gt_inject},
      {"iterations", cfg.iterations},
      {"batch_size", cfg.batch_size},
      {"eval_interval", cfg.eval_interval},
      {"checkpoint_interval", cfg.checkpoint_interval},
      {"optim",
       {{"peak_lr", cfg.optim.peak_lr},
        {"floor_lr", cfg.optim.floor_lr},
        {"start_frac", cfg.optim.start_frac},
        {"warmup_frac", cfg.optim.warmup_frac},
        {"momentum", cfg.optim.momentum},
        {"weight_decay", cfg.optim.weight_decay},
        {"grad_clip", cfg.optim.grad_clip}}},
      {"loss",
       {{"w_pi", cfg.loss.w_pi},
        {"w_c", cfg.loss.w_c},
        {"w_rot", cfg.loss.w_rot},
        {"lambda_t", cfg.loss.lambda_t}}},
      {"grad_eps", cfg.grad_eps},
      {"grad_tol", cfg.grad_tol},
      {"grad_draws", cfg.grad_draws},
      {"grad_coords", cfg.grad_coords}};
}

// ---------------------------------------------------------------------------
// Run directories: <out>/<command>-<confighash16>-<utc timestamp>. A rerun
// with an identical effective config reuses the newest matching directory,
// which is what lets `train` resume from its own checkpoints.

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string config_hash(const Json& echo) {
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a(echo.dump());
  return hex.str();
}

std::string utc_stamp() {
  const std::time_t now =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

struct RunContext {
  fs::path dir;
  bool created = false;               // this invocation made the directory
  std::vector<fs::path> outputs;      // files to drop if the command fails

  fs::path file(const std::string& name) {
    const fs::path p = dir / name;
    outputs.push_back(p);
    return p;
  }

  void discard_outputs() {
    std::error_code ec;
    for (const fs::path& p : outputs) fs::remove(p, ec);
    if (created && fs::is_empty(dir, ec) && !ec) fs::remove(dir, ec);
  }
};

RunContext open_run_dir(const std::string& command, const RunConfig& cfg,
                        const Json& echo) {
  const std::string prefix = command + "-" + config_hash(echo) + "-";
  RunContext ctx;
  fs::create_directories(cfg.out);
  std::string newest;
  for (const auto& entry : fs::directory_iterator(cfg.out)) {
    if (!entry.is_directory()) continue;
    const std::string name = entry.path().filename().string();
    if (name.rfind(prefix, 0) == 0 && name > newest) newest = name;
  }
  if (!newest.empty()) {
    ctx.dir = fs::path(cfg.out) / newest;
  } else {
    ctx.dir = fs::path(cfg.out) / (prefix + utc_stamp());
    fs::create_directories(ctx.dir);
    ctx.created = true;
  }
  std::ofstream out(ctx.dir / "config.json");
  out << echo.dump(2) << "\n";
  if (!out.good())
    throw std::runtime_error("failed to write " +
                             (ctx.dir / "config.json").string());
  return ctx;
}

void write_json_file(const fs::path& path, const Json& j) {
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out.good())
    throw std::runtime_error("failed to write " + path.string());
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out.good())
    throw std::runtime_error("failed to write " + path.string());
}

// ---------------------------------------------------------------------------
// Shared loading helpers.

std::string codebook_path_for(const RunConfig& cfg) {
  if (!cfg.codebook.empty()) return cfg.codebook;
  if (!cfg.data.empty())
    return (fs::path(cfg.data).parent_path() / "codebook.json").string();
  throw UsageError("config key 'codebook': required when 'data' is unset");
}

CameraCodebook load_codebook(const RunConfig& cfg) {
  const std::string path = codebook_path_for(cfg);
  return codebook_from_json(load_manifest(path));
}

std::vector<Episode> load_data(const RunConfig& cfg, const char* which,
                               const std::string& path) {
  if (path.empty())
    throw UsageError(std::string("config key '") + which +
                     "': required for this command");
  return load_episodes(path);
}

// Builds the model recorded in a checkpoint directory and loads its weights.
PlaneFormer load_model(const std::string& dir) {
  if (dir.empty())
    throw UsageError(
        "config key 'model': a checkpoint directory is required (or set "
        "gt_inject)");
  const Json manifest = read_checkpoint_manifest(dir);
  if (!manifest.contains("model"))
    throw std::runtime_error("checkpoint manifest in '" + dir +
                             "' lacks a model description");
  PlaneFormer model(model_config_from_json(manifest.at("model")), 0);
  load_checkpoint_params(dir, model.params());
  return model;
}

void check_d_app(const std::vector<Episode>& episodes, int model_d_app) {
  for (const Episode& e : episodes)
    if (e.d_app != model_d_app)
      throw std::runtime_error(
          "data embedding width " + std::to_string(e.d_app) +
          " does not match the model's " + std::to_string(model_d_app));
}

// ---------------------------------------------------------------------------
// gen-data

Episode generate_one_episode(const RunConfig& cfg, const CameraCodebook& cb,
                             std::uint64_t episode_seed) {
  std::string last_error = "generation budget exhausted";
  for (int attempt = 0; attempt < kGenerationAttempts; ++attempt) {
    const std::uint64_t s = mix_seed(episode_seed, attempt);
    try {
      const SyntheticScene scene = generate_scene(cfg.scene, mix_seed(s, 1));
      return make_episode(scene, cfg.views, cfg.baseline, cfg.noise,
                          cfg.intrinsics, cb, mix_seed(s, 2));
    } catch (const GenerationFailure& e) {
      last_error = e.what();
    }
  }
  throw std::runtime_error("episode generation failed after " +
                           std::to_string(kGenerationAttempts) +
                           " attempts: " + last_error);
}

int cmd_gen_data(const RunConfig& cfg, RunContext& ctx) {
  const CameraCodebook cb = make_codebook(
      cfg.scene, cfg.baseline, cfg.codebook_size,
      mix_seed(cfg.seed, kGenCodebookStream));

  std::vector<Episode> episodes(cfg.episodes);
  parallel_for(episodes.size(), cfg.jobs, [&](std::size_t i) {
    episodes[i] = generate_one_episode(
        cfg, cb, mix_seed(mix_seed(cfg.seed, kGenEpisodeStream), i));
  });

  save_episodes(ctx.file("episodes.jsonl").string(), episodes);
  write_json_file(ctx.file("codebook.json"), codebook_to_json(cb));

  std::size_t n_pairs = 0, n_dets = 0;
  for (const Episode& e : episodes) {
    n_pairs += e.pairs.size() / 2;  // stored in both directions
    for (const ViewData& v : e.views) n_dets += v.detections.size();
  }
  Json manifest = {{"command", "gen-data"},
                   {"episodes", cfg.episodes},
                   {"views", cfg.views},
                   {"d_app", cfg.scene.d_app},
                   {"codebook_size", cfg.codebook_size},
                   {"seed", cfg.seed},
                   {"preset", cfg.preset},
                   {"view_pairs", n_pairs},
                   {"detections", n_dets}};
  write_json_file(ctx.file("manifest.json"), manifest);

  std::cout << "gen-data: wrote " << cfg.episodes << " episodes (" << n_pairs
            << " view pairs, " << n_dets << " detections) to " << ctx.dir
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const RunConfig& cfg, RunContext& ctx) {
  const auto train_set = load_data(cfg, "data", cfg.data);
  std::vector<Episode> val_set;
  if (!cfg.val_data.empty()) val_set = load_episodes(cfg.val_data);
  const CameraCodebook cb = load_codebook(cfg);

  TrainConfig tc;
  tc.model = effective_model(cfg);
  tc.optim = cfg.optim;
  tc.weights = cfg.loss;
  tc.iterations = cfg.iterations;
  tc.batch_size = cfg.batch_size;
  tc.eval_interval = cfg.eval_interval;
  tc.checkpoint_interval = cfg.checkpoint_interval;
  tc.jobs = cfg.jobs;
  tc.seed = cfg.seed;
  tc.out_dir = ctx.dir.string();
  check_d_app(train_set, tc.model.d_app);
  check_d_app(val_set, tc.model.d_app);

  PlaneFormer model(tc.model, tc.seed);
  const TrainResult result = train(model, train_set, val_set, cb, tc);

  // Relative to the run dir so the artifact does not depend on where (or
  // under which worker count) the run directory was created.
  Json summary = {{"command", "train"},
                  {"initial_loss", result.initial_loss},
                  {"final_loss", result.final_loss},
                  {"iterations_run", result.iterations_run},
                  {"final_checkpoint",
                   fs::relative(fs::path(result.final_checkpoint), ctx.dir).string()}};
  if (!result.evals.empty()) {
    const EvalSnapshot& last = result.evals.back();
    summary["val"] = {{"iteration", last.iteration},
                      {"val_loss", last.val_loss},
                      {"c_accuracy", last.c_accuracy},
                      {"ipaa_mean", last.ipaa_mean}};
  }
  write_json_file(ctx.file("result.json"), summary);

  std::cout << "train: " << result.iterations_run << " iterations, loss "
            << result.initial_loss << " -> " << result.final_loss
            << ", checkpoint " << result.final_checkpoint << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval-pair

int cmd_eval_pair(const RunConfig& cfg, RunContext& ctx) {
  const auto episodes = load_data(cfg, "data", cfg.data);
  std::optional<PlaneFormer> model;
  CameraCodebook cb;
  if (!cfg.gt_inject) {
    model.emplace(load_model(cfg.model));
    cb = load_codebook(cfg);
    check_d_app(episodes, model->config().d_app);
  }
  const InferenceConfig inf{cfg.h, cfg.tau, cfg.sigma};

  struct Task {
    int episode, a, b;
  };
  std::vector<Task> tasks;
  for (int e = 0; e < static_cast<int>(episodes.size()); ++e) {
    const int n = static_cast<int>(episodes[e].views.size());
    for (int a = 0; a < n; ++a)
      for (int b = a + 1; b < n; ++b) tasks.push_back({e, a, b});
  }

  std::vector<PairEvaluation> evals(tasks.size());
  std::vector<char> selected_ok(tasks.size(), 0);
  parallel_for(tasks.size(), cfg.jobs, [&](std::size_t i) {
    const Episode& ep = episodes[tasks[i].episode];
    const PairData& pd = ep.pair(tasks[i].a, tasks[i].b);
    const int m1 = static_cast<int>(ep.views[tasks[i].a].detections.size());
    const int m2 = static_cast<int>(ep.views[tasks[i].b].detections.size());
    if (cfg.gt_inject) {
      evals[i].ipaa_fraction = ipaa(pd.gt_matches, pd.gt_matches, m1, m2);
      const auto [rot, trans] = pose_error(pd.gt_rel, pd.gt_rel);
      evals[i].rot_err_deg = rot;
      evals[i].trans_err_m = trans;
      selected_ok[i] = 1;
      return;
    }
    const PairResult r = score_hypotheses(
        *model, ep.views[tasks[i].a].detections,
        ep.views[tasks[i].b].detections, pd.stub, cb, ep.intrinsics,
        ep.intrinsics, inf);
    std::vector<std::pair<int, int>> pred;
    for (const MatchEdge& m : r.matches) pred.push_back({m.j1, m.j2});
    evals[i].ipaa_fraction = ipaa(pred, pd.gt_matches, m1, m2);
    const auto [rot, trans] = pose_error(r.refined, pd.gt_rel);
    evals[i].rot_err_deg = rot;
    evals[i].trans_err_m = trans;
    selected_ok[i] =
        r.selected_index == nearest_codebook_entry(pd.gt_rel, cb) ? 1 : 0;
  });

  const EvaluationSummary summary = summarize_pairs(evals);
  std::size_t n_sel = 0;
  for (char c : selected_ok) n_sel += c;
  const double selection_pct =
      tasks.empty() ? 0.0 : 100.0 * static_cast<double>(n_sel) / tasks.size();

  Json j = summary_to_json(summary);
  j["n_episodes"] = episodes.size();
  j["selection"] = {{"accuracy_pct", selection_pct}};
  write_json_file(ctx.file("metrics.json"), j);

  std::ostringstream table;
  table << summary_to_table(summary);
  table << std::left << std::setw(22) << "selection (%)" << std::fixed
        << std::setprecision(2) << selection_pct << "\n";
  write_text_file(ctx.file("metrics.txt"), table.str());
  std::cout << table.str();
  return 0;
}

// ---------------------------------------------------------------------------
// eval-multiview / reconstruct

ChainResult chain_from_scene(const GlobalScene& scene) {
  ChainResult chain;
  chain.view_to_global = scene.view_poses;
  chain.group_of = scene.detection_to_plane;
  chain.n_groups = static_cast<int>(scene.planes.size());
  return chain;
}

struct SceneRun {
  GlobalScene scene;
  ChainResult chain;
  int root = 0;
};

SceneRun run_scene(const RunConfig& cfg, const std::optional<PlaneFormer>& model,
                   const CameraCodebook& cb, const Episode& ep) {
  SceneRun out;
  if (cfg.gt_inject) {
    out.root = 0;
    out.chain = ground_truth_chain(ep, out.root);
    out.scene = fuse_planes(ep.views, out.chain);
    out.scene.root = out.root;
  } else {
    const InferenceConfig inf{cfg.h, cfg.tau, cfg.sigma};
    out.scene = reconstruct_scene(*model, ep, cb, inf);
    out.chain = chain_from_scene(out.scene);
    out.root = out.scene.root;
  }
  return out;
}

int cmd_eval_multiview(const RunConfig& cfg, RunContext& ctx) {
  const auto episodes = load_data(cfg, "data", cfg.data);
  std::optional<PlaneFormer> model;
  CameraCodebook cb;
  if (!cfg.gt_inject) {
    model.emplace(load_model(cfg.model));
    cb = load_codebook(cfg);
    check_d_app(episodes, model->config().d_app);
  }

  std::vector<std::vector<PairEvaluation>> rows(episodes.size());
  std::vector<std::array<double, 3>> aps(episodes.size());
  parallel_for(episodes.size(), cfg.jobs, [&](std::size_t i) {
    const Episode& ep = episodes[i];
    const SceneRun run = run_scene(cfg, model, cb, ep);
    rows[i] = multiview_evaluate(ep, run.chain);

    const auto pred_planes =
        scene_to_ap_planes(run.scene, ep.views, ep.intrinsics);
    const GlobalScene gt_scene =
        fuse_planes(ep.views, ground_truth_chain(ep, run.root));
    const auto gt_planes = scene_to_ap_planes(gt_scene, ep.views, ep.intrinsics);
    ApConfig ap_cfg;
    ap_cfg.variant = ApVariant::All;
    aps[i][0] = scene_ap(pred_planes, gt_planes, ap_cfg);
    ap_cfg.variant = ApVariant::MinusOffset;
    aps[i][1] = scene_ap(pred_planes, gt_planes, ap_cfg);
    ap_cfg.variant = ApVariant::MinusNormal;
    aps[i][2] = scene_ap(pred_planes, gt_planes, ap_cfg);
  });

  std::vector<PairEvaluation> pooled;
  for (const auto& r : rows) pooled.insert(pooled.end(), r.begin(), r.end());
  const EvaluationSummary summary = summarize_pairs(pooled);
  std::array<double, 3> ap_mean = {0.0, 0.0, 0.0};
  for (const auto& a : aps)
    for (int v = 0; v < 3; ++v) ap_mean[v] += a[v];
  for (int v = 0; v < 3; ++v) ap_mean[v] /= std::max<std::size_t>(1, aps.size());

  Json j = summary_to_json(summary);
  j["n_episodes"] = episodes.size();
  j["ap"] = {{"all", ap_mean[0]},
             {"minus_offset", ap_mean[1]},
             {"minus_normal", ap_mean[2]}};
  write_json_file(ctx.file("metrics.json"), j);

  std::ostringstream table;
  table << summary_to_table(summary);
  table << std::fixed << std::setprecision(2);
  table << std::left << std::setw(22) << "AP" << 100.0 * ap_mean[0] << "\n";
  table << std::left << std::setw(22) << "AP -offset"
        << 100.0 * ap_mean[1] << "\n";
  table << std::left << std::setw(22) << "AP -normal"
        << 100.0 * ap_mean[2] << "\n";
  write_text_file(ctx.file("metrics.txt"), table.str());
  std::cout << table.str();
  return 0;
}

int cmd_reconstruct(const RunConfig& cfg, RunContext& ctx) {
  const auto episodes = load_data(cfg, "data", cfg.data);
  std::optional<PlaneFormer> model;
  CameraCodebook cb;
  if (!cfg.gt_inject) {
    model.emplace(load_model(cfg.model));
    cb = load_codebook(cfg);
    check_d_app(episodes, model->config().d_app);
  }

  std::vector<SceneRun> runs(episodes.size());
  parallel_for(episodes.size(), cfg.jobs, [&](std::size_t i) {
    runs[i] = run_scene(cfg, model, cb, episodes[i]);
  });

  Json index = Json::array();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%06zu.ply", i);
    export_scene(runs[i].scene, episodes[i].views, episodes[i].intrinsics,
                 ctx.file(name).string());
    int degenerate = 0;
    for (const GlobalPlane& p : runs[i].scene.planes) degenerate += p.degenerate;
    index.push_back({{"file", name},
                     {"views", episodes[i].views.size()},
                     {"planes", runs[i].scene.planes.size()},
                     {"degenerate", degenerate},
                     {"root", runs[i].root}});
  }
  write_json_file(ctx.file("scenes.json"), index);
  std::cout << "reconstruct: wrote " << runs.size() << " meshes to " << ctx.dir
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// grad-check

int cmd_grad_check(const RunConfig& cfg, RunContext& ctx) {
  const ModelConfig mc = effective_model(cfg);
  SceneConfig scene_cfg = cfg.scene;
  scene_cfg.d_app = mc.d_app;
  const CameraCodebook cb =
      make_codebook(scene_cfg, cfg.baseline, cfg.codebook_size,
                    mix_seed(cfg.seed, kGenCodebookStream));

  Json report = Json::array();
  bool breach = false;
  for (int draw = 0; draw < cfg.grad_draws; ++draw) {
    const std::uint64_t draw_seed =
        mix_seed(mix_seed(cfg.seed, kGradStream), draw);
    PlaneFormer model(mc, mix_seed(draw_seed, 1));
    Rng rng(mix_seed(draw_seed, 2));

    // Alternate hypothesis polarity so both loss paths (all four heads vs the
    // gated camera-score-only path) get coverage.
    const bool want_correct = (draw % 2) == 0;
    TrainingPair tp;
    RunConfig gen_cfg = cfg;
    gen_cfg.scene = scene_cfg;
    gen_cfg.views = 2;
    for (int tries = 0;; ++tries) {
      if (tries >= 32)
        throw std::runtime_error(
            "grad-check: could not draw a training pair with the requested "
            "hypothesis polarity");
      const Episode ep =
          generate_one_episode(gen_cfg, cb, mix_seed(draw_seed, 3 + tries));
      tp = make_training_pair(ep, cb, mc.token_config(), rng);
      if (tp.gt.hyp_correct == want_correct) break;
    }

    ParamStore& ps = model.params();
    const auto loss_and_grad = [&]() {
      ps.zero_grad();
      PlaneFormer::Trace trace;
      const PlaneFormerOutputs out =
          model.forward(tp.batch, false, nullptr, &trace, tp.gt.hyp_correct);
      return loss_and_backward(model, trace, out, tp.gt, cfg.loss).total;
    };
    const auto loss_only = [&]() {
      const PlaneFormerOutputs out =
          model.forward(tp.batch, false, nullptr, nullptr, tp.gt.hyp_correct);
      return compute_loss(out, tp.gt, cfg.loss).total;
    };
    const GradCheckReport rep =
        grad_check(ps, loss_and_grad, loss_only, cfg.grad_eps, rng,
                   static_cast<std::size_t>(cfg.grad_coords));

    const bool ok = rep.max_rel_err < cfg.grad_tol;
    breach = breach || !ok;
    report.push_back({{"draw", draw},
                      {"hyp_correct", want_correct},
                      {"max_rel_err", rep.max_rel_err},
                      {"mean_rel_err", rep.mean_rel_err},
                      {"worst_param", rep.worst_param},
                      {"checked", rep.checked},
                      {"skipped_nonsmooth", rep.skipped_nonsmooth},
                      {"ok", ok}});
    std::cout << "grad-check draw " << draw << ": max rel err "
              << rep.max_rel_err << " over " << rep.checked << " coords ("
              << rep.skipped_nonsmooth << " skipped"
              << (rep.worst_param.empty() ? ""
                                          : ", worst " + rep.worst_param)
              << ") -> " << (ok ? "ok" : "BREACH") << "\n";
  }
  write_json_file(ctx.file("report.json"),
                  Json{{"tolerance", cfg.grad_tol},
                       {"eps", cfg.grad_eps},
                       {"draws", report},
                       {"ok", !breach}});
  if (breach) {
    std::cerr << "grad-check: tolerance " << cfg.grad_tol << " breached\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-view planar reconstruction pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  FlagOverrides flags;
  std::uint64_t flag_seed = 0;
  int flag_jobs = 1, flag_h = 9;
  double flag_tau = 0.5, flag_sigma = 0.5;
  std::string flag_out, flag_preset;
  std::vector<std::string> flag_ablate;

  app.set_help_flag("--help", "print help and exit");
  const auto add_common = [&](CLI::App* cmd) {
    cmd->set_help_flag("--help", "print help and exit");
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--seed", flag_seed, "RNG seed");
    cmd->add_option("--jobs", flag_jobs, "worker threads (0 = hardware)");
    cmd->add_option("--out", flag_out, "parent directory for run outputs");
    cmd->add_option("--h", flag_h, "hypotheses ranked per pair");
    cmd->add_option("--tau", flag_tau, "match-score threshold");
    cmd->add_option("--sigma", flag_sigma, "visibility bandwidth");
    cmd->add_option("--preset", flag_preset, "model preset: paper, desk, smoke");
    cmd->add_option("--ablate", flag_ablate,
                    "drop a component: appearance, plane, mask, transformer, "
                    "residual");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate synthetic episodes");
  CLI::App* tr = app.add_subcommand("train", "train a model");
  CLI::App* evp = app.add_subcommand("eval-pair", "two-view evaluation");
  CLI::App* evm = app.add_subcommand("eval-multiview", "multiview evaluation");
  CLI::App* rec = app.add_subcommand("reconstruct", "export PLY meshes");
  CLI::App* gc = app.add_subcommand("grad-check",
                                    "finite-difference gradient check");
  for (CLI::App* cmd : {gen, tr, evp, evm, rec, gc}) add_common(cmd);

  CLI11_PARSE(app, argc, argv);
  CLI::App* cmd = app.get_subcommands().front();

  if (cmd->count("--seed")) flags.seed = flag_seed;
  if (cmd->count("--jobs")) flags.jobs = flag_jobs;
  if (cmd->count("--out")) flags.out = flag_out;
  if (cmd->count("--h")) flags.h = flag_h;
  if (cmd->count("--tau")) flags.tau = flag_tau;
  if (cmd->count("--sigma")) flags.sigma = flag_sigma;
  if (cmd->count("--preset")) flags.preset = flag_preset;
  if (cmd->count("--ablate")) flags.ablate = flag_ablate;

  try {
    const RunConfig cfg = parse_config(config_path, flags);
    const Json echo = config_to_json(cfg);
    RunContext ctx = open_run_dir(cmd->get_name(), cfg, echo);
    try {
      if (cmd == gen) return cmd_gen_data(cfg, ctx);
      if (cmd == tr) return cmd_train(cfg, ctx);
      if (cmd == evp) return cmd_eval_pair(cfg, ctx);
      if (cmd == evm) return cmd_eval_multiview(cfg, ctx);
      if (cmd == rec) return cmd_reconstruct(cfg, ctx);
      return cmd_grad_check(cfg, ctx);
    } catch (...) {
      ctx.discard_outputs();
      throw;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
