#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "cguard/config.h"
#include "cguard/errors.h"
#include "cguard/experiments.h"
#include "cguard/impedance.h"
#include "cguard/ppo.h"

namespace fs = std::filesystem;
using namespace cguard;

namespace {

constexpr int kOk = 0;
constexpr int kGateFailed = 1;
constexpr int kUsage = 2;

struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int jobs = 0;
};

RunConfig load_config(const Common& c) {
  RunConfig cfg;
  if (!c.config_path.empty()) cfg = RunConfig::load(c.config_path);
  if (auto s = env_seed()) {
    cfg.seed = *s;
    cfg.train.seed = *s;
  }
  if (c.seed_set) {
    cfg.seed = c.seed;
    cfg.train.seed = c.seed;
  }
  if (c.jobs > 0) cfg.jobs = c.jobs;
  if (cfg.jobs <= 0) {
    cfg.jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  }
  cfg.train.jobs = cfg.jobs;
  cfg.stability.jobs = cfg.jobs;
  cfg.robustness.jobs = cfg.jobs;
  return cfg;
}

std::string out_dir_or_env(const std::string& flag, const std::string& fallback) {
  if (!flag.empty()) return flag;
  if (auto e = env_out()) return *e;
  return fallback;
}

// Every checkpoints/ directory under root, grouped by run directory.
std::vector<Checkpoint> find_checkpoints(const std::string& root) {
  if (!fs::is_directory(root)) {
    throw Error(ErrorCode::kMissingCheckpoint, "no run directory " + root);
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().parent_path().filename() == "checkpoints" &&
        e.path().extension() == ".json") {
      files.push_back(e.path());
    }
  }
  std::vector<Checkpoint> out;
  for (const auto& f : files) out.push_back(Checkpoint::load(f.string()));
  std::sort(out.begin(), out.end(), [](const Checkpoint& a, const Checkpoint& b) {
    if (a.mode != b.mode) return a.mode < b.mode;
    return a.episode < b.episode;
  });
  if (out.empty()) {
    throw Error(ErrorCode::kMissingCheckpoint, "no checkpoints under " + root);
  }
  return out;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream(path) << j.dump(2) << '\n';
}

int cmd_train(const Common& common, const std::string& mode_name,
              const std::string& out_flag, int episodes) {
  RunConfig cfg = load_config(common);
  const TrainMode mode = parse_train_mode(mode_name);
  const std::string out = out_dir_or_env(out_flag, "");
  if (out.empty()) {
    throw Error(ErrorCode::kInvalidConfig, "--out is required (or set CGUARD_OUT)");
  }
  if (episodes >= 0) cfg.train.episodes = episodes;
  TrainHooks hooks;
  hooks.on_update = [&](const CurveRow& r, const UpdateStats&) {
    if (r.episode % 200 < cfg.train.envs_per_update) {
      std::fprintf(stderr, "episode %d  mean return %.1f  success %.2f\n",
                   r.episode, r.mean_return, r.success_rate);
    }
  };
  const TrainResult res = train(mode, cfg.train, out, hooks);
  std::cout << nlohmann::json{{"out", out},
                              {"mode", to_string(mode)},
                              {"episodes", res.curve.empty() ? 0 : res.curve.back().episode},
                              {"checkpoints", res.checkpoints.size()},
                              {"aborted_updates", res.aborted_updates}}
                   .dump(2)
            << '\n';
  return kOk;
}

int cmd_certify(const Common& common, const std::string& path, double epsilon,
                int grid, bool strict, const std::string& out_flag) {
  RunConfig cfg = load_config(common);
  if (epsilon <= 0.0) epsilon = cfg.certify_epsilon;
  if (grid <= 0) grid = cfg.certify_grid;
  const Checkpoint ck = Checkpoint::load(path);
  PegParams params = cfg.train.base_params;
  const PegTask task;
  const CertifyReport rep =
      certify_checkpoint(ck, params, task, CertifyRegion::peg_default(grid), epsilon);
  nlohmann::json doc = rep.to_json();
  doc["checkpoint"] = {{"episode", ck.episode}, {"mode", to_string(ck.mode)}};
  std::cout << doc.dump(2) << '\n';
  const std::string out = out_dir_or_env(out_flag, "");
  if (!out.empty()) {
    fs::create_directories(out);
    write_json(fs::path(out) / "certificate.json", doc);
    write_certificate_csv((fs::path(out) / "certificate_grid.csv").string(), rep.fixed);
    write_certificate_csv((fs::path(out) / "certificate_grid_rebuilt.csv").string(),
                          rep.rebuilt);
  }
  return strict && !rep.verdict ? kGateFailed : kOk;
}

int cmd_stability(const Common& common, const std::string& run, double horizon,
                  int tasks, double delta_t) {
  RunConfig cfg = load_config(common);
  StabilityOptions o = cfg.stability;
  if (horizon > 0.0) o.horizon_seconds = horizon;
  if (tasks > 0) o.tasks = tasks;
  if (delta_t > 0.0) o.delta_t = delta_t;
  const auto cks = find_checkpoints(run);
  const StabilityReport rep = stability_test(cks, o);
  std::string stem = "stability";
  if (o.delta_t > 0.0) {
    std::ostringstream s;
    s << "stability_dt" << o.delta_t;
    stem = s.str();
  }
  nlohmann::json doc = rep.to_json();
  if (o.delta_t > 0.0) doc["delta_t"] = o.delta_t;
  rep.write_csv((fs::path(run) / (stem + ".csv")).string());
  write_json(fs::path(run) / (stem + ".json"), doc);
  std::cout << doc.dump(2) << '\n';
  // Gate on the last C-PPO checkpoint; PPO rows are report-only.
  const StabilityRow* last = nullptr;
  for (const auto& r : rep.rows)
    if (r.mode == TrainMode::kCppo) last = &r;
  if (last && last->failure_rate() > 0.02) {
    std::cerr << "stability gate failed: C-PPO failure rate "
              << last->failure_rate() << " > 0.02\n";
    return kGateFailed;
  }
  return kOk;
}

int cmd_robustness(const Common& common, const std::string& run, int trials,
                   int episode) {
  RunConfig cfg = load_config(common);
  RobustnessOptions o = cfg.robustness;
  if (trials > 0) o.trials = trials;
  const auto cks = find_checkpoints(run);
  std::map<TrainMode, const Checkpoint*> pick;
  for (const auto& ck : cks) {
    if (episode >= 0 && ck.episode != episode) continue;
    pick[ck.mode] = &ck;  // sorted, so the last one wins
  }
  if (pick.empty()) {
    throw Error(ErrorCode::kMissingCheckpoint,
                "no checkpoint at episode " + std::to_string(episode));
  }
  nlohmann::json all = nlohmann::json::object();
  int code = kOk;
  for (const auto& [mode, ck] : pick) {
    const RobustnessReport rep = robustness_test(*ck, o);
    const std::string stem = std::string("robustness_") + to_string(mode);
    rep.write_csv((fs::path(run) / (stem + ".csv")).string());
    write_json(fs::path(run) / (stem + ".json"), rep.to_json());
    all[to_string(mode)] = rep.to_json();
    if (mode == TrainMode::kCppo &&
        !(rep.force.max < 0.2 && rep.position.max < 0.05)) {
      std::cerr << "robustness gate failed: max force " << rep.force.max
                << ", max position " << rep.position.max << '\n';
      code = kGateFailed;
    }
  }
  std::cout << all.dump(2) << '\n';
  return code;
}

std::vector<int> parse_sizes(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    // Accept both "256" and "3x256".
    const auto x = item.find('x');
    const std::string w = x == std::string::npos ? item : item.substr(x + 1);
    try {
      out.push_back(std::stoi(w));
    } catch (const std::exception&) {
      throw Error(ErrorCode::kInvalidConfig, "bad size '" + item + "'");
    }
  }
  return out;
}

int cmd_sweep(const Common& common, const std::string& sizes,
              const std::string& modes, int episodes, const std::string& out_flag) {
  RunConfig cfg = load_config(common);
  std::vector<int> widths = sizes.empty() ? cfg.sweep_widths : parse_sizes(sizes);
  std::vector<TrainMode> ms = cfg.sweep_modes;
  if (!modes.empty()) {
    ms.clear();
    std::stringstream ss(modes);
    std::string item;
    while (std::getline(ss, item, ',')) ms.push_back(parse_train_mode(item));
  }
  TrainConfig base = cfg.train;
  base.episodes = episodes >= 0 ? episodes : cfg.sweep_episodes;
  const std::string out = out_dir_or_env(out_flag, "");
  const SweepResult res = size_sweep(widths, ms, base, out);
  std::cout << res.to_json().dump(2) << '\n';
  return res.gate_evaluated && !res.gate_passed ? kGateFailed : kOk;
}

int cmd_theorem3(const Common& common, const std::string& gains_path,
                 double amplitude, const std::string& out_flag) {
  RunConfig cfg = load_config(common);
  Theorem3DemoConfig demo = cfg.theorem3;
  if (!gains_path.empty()) {
    std::ifstream in(gains_path);
    if (!in) throw Error(ErrorCode::kInvalidConfig, gains_path + ": cannot open");
    nlohmann::json j;
    try {
      in >> j;
      // Either a full demo section or a bare gains object.
      demo = j.contains("gains") ? Theorem3DemoConfig::from_json(j)
                                 : Theorem3DemoConfig::from_json({{"gains", j}});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kInvalidConfig, gains_path + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorCode::kInvalidConfig, gains_path + ": " + e.detail());
    }
  }
  if (amplitude >= 0.0) demo.amplitude = amplitude;
  const Theorem3DemoResult res = run_theorem3_demo(demo);
  const std::string out = out_dir_or_env(out_flag, ".");
  fs::create_directories(out);
  write_feasibility_csv((fs::path(out) / "feasibility.csv").string(), res.absorbing);
  nlohmann::json doc = res.summary_json();
  doc["config"] = demo.to_json();
  write_json(fs::path(out) / "theorem3.json", doc);
  std::cout << res.summary_json().dump(2) << '\n';
  return res.passed ? kOk : kGateFailed;
}

int cmd_report(const std::string& run) {
  const auto files = write_report(run);
  for (const auto& f : files) std::cout << f << '\n';
  if (files.empty()) {
    throw Error(ErrorCode::kMissingCheckpoint, "nothing to plot under " + run);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contraction-guarded policy training and certification"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config_path, "JSON config file");
  app.add_option_function<std::uint64_t>(
      "--seed",
      [&](std::uint64_t s) {
        common.seed = s;
        common.seed_set = true;
      },
      "Random seed (overrides CGUARD_SEED)");
  app.add_option("--jobs", common.jobs, "Worker threads (default: all cores)");

  std::string mode, out, checkpoint, run, sizes, modes, gains;
  int episodes = -1, grid = 0, tasks = 0, trials = 0, episode = -1;
  double epsilon = 0.0, horizon = 0.0, amplitude = -1.0, delta_t = 0.0;
  bool strict = false;

  auto* train = app.add_subcommand("train", "Train a policy with PPO or C-PPO");
  train->add_option("--mode", mode, "ppo or cppo")->required()
      ->check(CLI::IsMember({"ppo", "cppo"}));
  train->add_option("--out", out, "Run directory (or CGUARD_OUT)");
  train->add_option("--episodes", episodes, "Override the episode budget");

  auto* certify = app.add_subcommand("certify", "Certify a checkpoint");
  certify->add_option("--checkpoint", checkpoint, "Checkpoint JSON")->required();
  certify->add_option("--epsilon", epsilon, "Contraction margin");
  certify->add_option("--grid", grid, "Grid points per dimension");
  certify->add_option("--out", out, "Also write certificate.json and per-point grid CSVs here");
  certify->add_flag("--strict", strict, "Exit 1 when the verdict is fail");

  auto* stab = app.add_subcommand("eval-stability", "Extended-horizon test");
  stab->add_option("--run", run, "Run directory")->required();
  stab->add_option("--horizon", horizon, "Horizon in seconds");
  stab->add_option("--tasks", tasks, "Number of held-out tasks");
  stab->add_option("--delta-t", delta_t,
                   "Control period override for a sensitivity run");

  auto* rob = app.add_subcommand("eval-robustness", "Perturbed-parameter test");
  rob->add_option("--run", run, "Run directory")->required();
  rob->add_option("--trials", trials, "Number of trials");
  rob->add_option("--episode", episode, "Checkpoint episode (default: last)");

  auto* sweep = app.add_subcommand("sweep", "Network-size sweep");
  sweep->add_option("--sizes", sizes, "Comma-separated widths, e.g. 32,3x256");
  sweep->add_option("--modes", modes, "Comma-separated modes");
  sweep->add_option("--episodes", episodes, "Episodes per cell");
  sweep->add_option("--out", out, "Output directory");

  auto* t3 = app.add_subcommand("demo-theorem3",
                                "Absorbing-matrix pipeline on the synthetic plant");
  t3->add_option("--gains", gains, "Gains JSON");
  t3->add_option("--amplitude", amplitude, "Nonlinearity amplitude");
  t3->add_option("--out", out, "Output directory");

  auto* report = app.add_subcommand("report", "Render SVG plots for a run");
  report->add_option("--run", run, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return e.get_exit_code() == 0 ? code : kUsage;
  }

  try {
    if (*train) return cmd_train(common, mode, out, episodes);
    if (*certify) return cmd_certify(common, checkpoint, epsilon, grid, strict, out);
    if (*stab) return cmd_stability(common, run, horizon, tasks, delta_t);
    if (*rob) return cmd_robustness(common, run, trials, episode);
    if (*sweep) return cmd_sweep(common, sizes, modes, episodes, out);
    if (*t3) return cmd_theorem3(common, gains, amplitude, out);
    if (*report) return cmd_report(run);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (e.code() == ErrorCode::kInvalidConfig ||
        e.code() == ErrorCode::kMissingCheckpoint) {
      return kUsage;
    }
    return kGateFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kGateFailed;
  }
  return kUsage;
}
