#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cguard/contraction.h"
#include "cguard/peg_env.h"
#include "cguard/policy.h"
#include "cguard/ppo.h"

namespace cguard {

// Runs fn(i) for i in [0, n) on up to `jobs` threads.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn);

struct SeededTask {
  PegParams params;
  PegTask task;
};

// Held-out tasks drawn from their own stream, disjoint from training seeds.
std::vector<SeededTask> evaluation_tasks(int n, std::uint64_t seed,
                                         const TaskRanges& ranges = {},
                                         const PegParams& base = {});

struct StabilityRow {
  int episode = 0;
  TrainMode mode = TrainMode::kCppo;
  int tasks = 0;
  int failures = 0;           // at the stability horizon
  int train_horizon_failures = 0;
  int chattering = 0;
  int nonzero_equilibrium = 0;
  int drift = 0;
  double mean_error = 0.0;

  double failure_rate() const { return tasks ? double(failures) / tasks : 0.0; }
  double train_horizon_success() const {
    return tasks ? 1.0 - double(train_horizon_failures) / tasks : 0.0;
  }
};

struct StabilityReport {
  std::vector<StabilityRow> rows;
  double horizon_seconds = 16.0;
  double train_horizon_seconds = 8.0;
  void write_csv(const std::string& path) const;
  nlohmann::json to_json() const;
};

struct StabilityOptions {
  int tasks = 50;
  double horizon_seconds = 16.0;
  double train_horizon_seconds = 8.0;
  std::uint64_t seed = 7;
  int jobs = 1;
  // When positive, the plant and the policy integrator run at this period
  // instead of the checkpoint's own.
  double delta_t = 0.0;
  TaskRanges ranges;
  FailureCriteria criteria;
};

// Deterministic rollouts of every checkpoint on one seeded task set. The
// training-horizon result is read off the first part of the same rollout.
StabilityReport stability_test(const std::vector<Checkpoint>& checkpoints,
                               const StabilityOptions& options = {});

struct RobustnessOptions {
  int trials = 1000;
  double horizon_seconds = 8.0;
  std::uint64_t seed = 11;
  int jobs = 1;
  PerturbationSpec perturbation;
  TaskRanges ranges;
  FailureCriteria criteria;
};

struct Quantiles {
  double p50 = 0.0, p90 = 0.0, p99 = 0.0, max = 0.0;
};
Quantiles quantiles(std::vector<double> values);

struct RobustnessReport {
  int episode = 0;
  TrainMode mode = TrainMode::kCppo;
  std::vector<double> position_errors;
  std::vector<double> force_errors;
  int failures = 0;
  Quantiles position;
  Quantiles force;
  nlohmann::json to_json() const;
  void write_csv(const std::string& path) const;
};

RobustnessReport robustness_test(const Checkpoint& checkpoint,
                                 const RobustnessOptions& options = {});

struct SweepCell {
  std::vector<int> hidden;
  TrainMode mode = TrainMode::kCppo;
  std::vector<CurveRow> curve;
  double final_success = 0.0;  // mean over the last quarter of the curve
};

struct SweepResult {
  std::vector<SweepCell> cells;
  bool gate_evaluated = false;
  bool gate_passed = false;  // C-PPO 3x256 reaches >= 80% of 3x32 success
  void write_csv(const std::string& path) const;
  nlohmann::json to_json() const;
};

SweepResult size_sweep(const std::vector<int>& widths,
                       const std::vector<TrainMode>& modes,
                       const TrainConfig& base, const std::string& out_dir = "");

struct CertifyRegion {
  VectorXd y_lo, y_hi;
  VectorXd s2_lo, s2_hi;
  int grid = 17;
  static CertifyRegion peg_default(int grid = 17);
  std::vector<RegionPoint> points() const;
};

struct CertifyReport {
  ContractionCertificate fixed;    // the policy's own transform
  ContractionCertificate rebuilt;  // transform rebuilt at every point
  ConstraintReport constraints;
  EquilibriumAudit equilibrium;
  double epsilon = 0.0;
  bool verdict = false;
  nlohmann::json to_json() const;
};

CertifyReport certify_checkpoint(const Checkpoint& checkpoint,
                                 const PegParams& params, const PegTask& task,
                                 const CertifyRegion& region, double epsilon);

/// Two closed-loop rollouts measured in the metric Theta = diag(W_y, W_u).
struct ContractionTrace {
  std::vector<double> t;
  std::vector<double> distance;
  double fitted_rate = 0.0;  // slope of log distance against t
};

// RK4 over ẏ = f(y, u) with the policy action held over each step.
VectorXd rk4_step(const PlantModel& plant, const VectorXd& y,
                  const VectorXd& u, double t, double dt, int substeps = 4);

ContractionTrace paired_trajectories(const PlantModel& plant,
                                     ConstrainedPolicy policy,
                                     const VectorXd& y0a, const VectorXd& y0b,
                                     double dt, int steps,
                                     double distance_floor = 1e-9);

double fit_log_rate(const std::vector<double>& t,
                    const std::vector<double>& distance, double floor = 1e-9);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

void svg_line_plot(const std::string& path, const std::string& title,
                   const std::string& x_label, const std::string& y_label,
                   const std::vector<Series>& series);
void svg_histogram(const std::string& path, const std::string& title,
                   const std::string& x_label,
                   const std::vector<std::pair<std::string, std::vector<double>>>& data,
                   int bins = 30);

// Reads whatever run artifacts exist under run_dir and writes SVG plots
// next to them. Returns the list of files written.
std::vector<std::string> write_report(const std::string& run_dir);

}  // namespace cguard
