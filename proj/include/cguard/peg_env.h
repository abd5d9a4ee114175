#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "cguard/contraction.h"
#include "cguard/policy.h"

namespace cguard {

/// First-order peg over the surface g(x) = k1 sin(x) + k2 cos(x).
struct PegParams {
  double tau_z = 0.0437;
  double tau_x = 0.01;
  double k_sur = 16.0;
  double k1_sur = 0.0;
  double k2_sur = 0.0;
  double delta_t = 0.01;

  void validate() const;
  nlohmann::json to_json() const;
  static PegParams from_json(const nlohmann::json& j);
};

struct PegTask {
  double x_d = 2.0;
  double f_d = -1.0;
  double x0 = 2.0;
  double z0 = 0.0;
};

struct PegState {
  double x = 0.0;
  double z = 0.0;
  double f = 0.0;
  double x_d = 0.0;
  double f_d = 0.0;
  double elapsed = 0.0;

  double e_x() const { return x_d - x; }
  double e_f() const { return f_d - f; }
};

struct PegAction {
  double u_z = 0.0;
  double u_x = 0.0;
};

// Vector order used by the plant model and policies: y = (e_x, e_f),
// u = (u_x, u_z).
inline VectorXd to_vector(const PegAction& a) {
  VectorXd u(2);
  u << a.u_x, a.u_z;
  return u;
}
inline PegAction to_action(const VectorXd& u) { return {u[1], u[0]}; }

double surface(const PegParams& params, double x);
double surface_slope(const PegParams& params, double x);
double contact_force(const PegParams& params, double x, double z);

PegState initial_state(const PegParams& params, const PegTask& task);

// Exact zero-order-hold update of both first-order lags over delta_t, then
// the contact force is recomputed from the new position.
PegState step(const PegState& state, const PegParams& params,
              const PegAction& action);

enum class ObservationDesign {
  kRaw,            // (x, f)
  kError,          // (e_x, e_f)
  kErrorIntegral,  // (e_x, e_f, sum e_x dt, sum e_f dt)
};

ObservationDesign parse_observation_design(const std::string& name);

// Running sums are the integrals sum e * delta_t accumulated by the caller.
VectorXd observe(const PegState& state, ObservationDesign design,
                 double sum_e_x = 0.0, double sum_e_f = 0.0);

struct RewardWeights {
  double distance = 1.0;
  double chattering = 0.1;
};

double reward(const PegState& state, const PegAction& previous,
              const PegAction& action, const RewardWeights& weights = {});

struct TaskRanges {
  double x_d_lo = 1.0, x_d_hi = 3.0;
  double f_d_lo = -2.0, f_d_hi = -0.5;
  double x0_lo = 1.0, x0_hi = 3.0;
  double z0_lo = -3.0, z0_hi = 1.0;
  double k_sur_lo = 1.0, k_sur_hi = 31.0;
  double k_profile = 0.01;  // |k1|, |k2| <= k_profile
};

PegTask sample_task(std::mt19937_64& rng, const TaskRanges& ranges = {});
PegTask sample_task(std::uint64_t seed, const TaskRanges& ranges = {});
PegParams sample_params(std::mt19937_64& rng, const TaskRanges& ranges = {},
                        double delta_t = 0.01);
PegParams sample_params(std::uint64_t seed, const TaskRanges& ranges = {},
                        double delta_t = 0.01);

/// Relative error magnitudes for the robustness test.
struct PerturbationSpec {
  double tau = 0.5;
  double k_sur = 1.0;
  double k_profile = 0.5;
  double floor_fraction = 0.1;  // parameters never drop below this fraction
};

struct PerturbationDraw {
  double tau_z = 0.0, tau_x = 0.0, k_sur = 0.0, k1 = 0.0, k2 = 0.0;
};

PegParams perturb_params(const PegParams& params, const PerturbationDraw& eta,
                         const PerturbationSpec& spec = {});
PegParams perturb_params(const PegParams& params, std::mt19937_64& rng,
                         const PerturbationSpec& spec = {});

/// Environment wrapper holding the integrals and previous action.
class PegEnv {
 public:
  struct StepResult {
    double reward = 0.0;
    bool done = false;
  };

  PegEnv() = default;
  PegEnv(PegParams params, PegTask task, int horizon_steps,
         RewardWeights weights = {});

  void reset();
  void reset(PegParams params, PegTask task);
  StepResult step(const PegAction& action);

  const PegState& state() const { return state_; }
  const PegParams& params() const { return params_; }
  const PegTask& task() const { return task_; }
  VectorXd error() const;  // y = (e_x, e_f)
  VectorXd observe(ObservationDesign design) const;
  int steps() const { return steps_; }
  int horizon() const { return horizon_; }
  void set_horizon(int steps) { horizon_ = steps; }

 private:
  PegParams params_;
  PegTask task_;
  PegState state_;
  RewardWeights weights_;
  PegAction previous_;
  double sum_e_x_ = 0.0;
  double sum_e_f_ = 0.0;
  int steps_ = 0;
  int horizon_ = 800;
};

// In-contact error dynamics y = (e_x, e_f), u = (u_x, u_z) for fixed targets.
PlantModel peg_plant_model(const PegParams& params, const PegTask& task);

// Transform built at a mid-range contact point (x = 2, k_sur at the range
// center, flat surface). Used as the fixed transform of peg policies.
CoordinateTransform peg_nominal_transform(const PegParams& params);

// Newton solve of f(0, u, t) = 0 for the action holding zero error.
VectorXd solve_equilibrium_action(const PlantModel& plant, const VectorXd& u0,
                                  double t = 0.0);

// Closed form for the peg: u_x = x_d, u_z = g(x_d) + f_d / k_sur.
VectorXd peg_equilibrium_action(const PegParams& params, const PegTask& task);

struct EquilibriumTarget {
  PegTask task;
  VectorXd u_required;
  VectorXd u_closed_form;
  bool reachable = false;
};

struct EquilibriumAudit {
  std::vector<EquilibriumTarget> targets;
  std::vector<double> min_abs_s2_slope;  // per axis over the region
  bool s2_slope_nonzero = false;
  bool all_reachable = false;
  bool ok = false;
  nlohmann::json to_json() const;
};

EquilibriumAudit equilibrium_audit(const ConstrainedPolicy& policy,
                                   const PegParams& params,
                                   const std::vector<PegTask>& targets,
                                   const std::vector<RegionPoint>& region,
                                   double slope_tolerance = 1e-10);

/// Per-step log of one rollout.
struct TrajectorySample {
  double t = 0.0, x = 0.0, z = 0.0, f = 0.0;
  double u_x = 0.0, u_z = 0.0;
  double e_x = 0.0, e_f = 0.0;
  double reward = 0.0;
};

enum class FailureType { kNone, kChattering, kNonzeroEquilibrium, kDrift };
const char* to_string(FailureType type);

struct EpisodeSummary {
  double position_error = 0.0;  // mean |e_x| over the final window
  double force_error = 0.0;     // mean |e_f| over the final window
  double combined_error = 0.0;  // max of the two
  double total_reward = 0.0;
  bool failed = false;
  FailureType failure = FailureType::kNone;
  nlohmann::json to_json() const;
};

struct FailureCriteria {
  double error_threshold = 0.4;
  double window_seconds = 1.0;
  // Mean per-step |du|_1 over the final quarter above this is chattering.
  double chattering_threshold = 0.05;
  // Final-quarter error growth above this fraction is drift.
  double drift_growth = 0.1;
};

EpisodeSummary summarize(const std::vector<TrajectorySample>& log,
                         double delta_t, const FailureCriteria& criteria = {});

void write_trajectory_csv(const std::string& path,
                          const std::vector<TrajectorySample>& log);

// Deterministic rollout of a policy (mean action) over `steps` steps.
std::vector<TrajectorySample> rollout_deterministic(ConstrainedPolicy policy,
                                                    const PegParams& params,
                                                    const PegTask& task,
                                                    int steps);

}  // namespace cguard
