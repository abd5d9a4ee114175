#include "cguard/peg_env.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "cguard/errors.h"

namespace cguard {

void PegParams::validate() const {
  if (!(tau_z > 0.0) || !(tau_x > 0.0)) {
    throw Error(ErrorCode::kInvalidConfig, "time constants must be positive");
  }
  if (!(delta_t > 0.0)) {
    throw Error(ErrorCode::kInvalidConfig, "delta_t must be positive");
  }
  if (!(k_sur > 0.0)) {
    throw Error(ErrorCode::kInvalidConfig, "k_sur must be positive");
  }
}

nlohmann::json PegParams::to_json() const {
  return {{"tau_z", tau_z},   {"tau_x", tau_x},   {"k_sur", k_sur},
          {"k1_sur", k1_sur}, {"k2_sur", k2_sur}, {"delta_t", delta_t}};
}

PegParams PegParams::from_json(const nlohmann::json& j) {
  PegParams p;
  p.tau_z = j.value("tau_z", p.tau_z);
  p.tau_x = j.value("tau_x", p.tau_x);
  p.k_sur = j.value("k_sur", p.k_sur);
  p.k1_sur = j.value("k1_sur", p.k1_sur);
  p.k2_sur = j.value("k2_sur", p.k2_sur);
  p.delta_t = j.value("delta_t", p.delta_t);
  p.validate();
  return p;
}

double surface(const PegParams& p, double x) {
  return p.k1_sur * std::sin(x) + p.k2_sur * std::cos(x);
}

double surface_slope(const PegParams& p, double x) {
  return p.k1_sur * std::cos(x) - p.k2_sur * std::sin(x);
}

double contact_force(const PegParams& p, double x, double z) {
  return p.k_sur * std::min(z - surface(p, x), 0.0);
}

PegState initial_state(const PegParams& params, const PegTask& task) {
  PegState s;
  s.x = task.x0;
  s.z = task.z0;
  s.x_d = task.x_d;
  s.f_d = task.f_d;
  s.f = contact_force(params, s.x, s.z);
  return s;
}

PegState step(const PegState& state, const PegParams& params,
              const PegAction& action) {
  if (!std::isfinite(action.u_z) || !std::isfinite(action.u_x)) {
    throw Error(ErrorCode::kNonFiniteAction, "action is not finite");
  }
  PegState next = state;
  const double az = std::exp(-params.delta_t / params.tau_z);
  const double ax = std::exp(-params.delta_t / params.tau_x);
  next.z = action.u_z + (state.z - action.u_z) * az;
  next.x = action.u_x + (state.x - action.u_x) * ax;
  next.f = contact_force(params, next.x, next.z);
  next.elapsed = state.elapsed + params.delta_t;
  return next;
}

ObservationDesign parse_observation_design(const std::string& name) {
  if (name == "a" || name == "raw") return ObservationDesign::kRaw;
  if (name == "b" || name == "error") return ObservationDesign::kError;
  if (name == "c" || name == "d" || name == "error_integral") {
    return ObservationDesign::kErrorIntegral;
  }
  throw Error(ErrorCode::kInvalidConfig, "unknown observation design " + name);
}

VectorXd observe(const PegState& s, ObservationDesign design, double sum_e_x,
                 double sum_e_f) {
  switch (design) {
    case ObservationDesign::kRaw: {
      VectorXd o(2);
      o << s.x, s.f;
      return o;
    }
    case ObservationDesign::kError: {
      VectorXd o(2);
      o << s.e_x(), s.e_f();
      return o;
    }
    case ObservationDesign::kErrorIntegral: {
      VectorXd o(4);
      o << s.e_x(), s.e_f(), sum_e_x, sum_e_f;
      return o;
    }
  }
  return {};
}

double reward(const PegState& s, const PegAction& previous,
              const PegAction& action, const RewardWeights& w) {
  const double distance = std::abs(s.e_x()) + std::abs(s.e_f());
  const double chatter = std::abs(action.u_x - previous.u_x) +
                         std::abs(action.u_z - previous.u_z);
  return -w.distance * distance - w.chattering * chatter;
}

PegTask sample_task(std::mt19937_64& rng, const TaskRanges& r) {
  auto uni = [&](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  PegTask t;
  t.x_d = uni(r.x_d_lo, r.x_d_hi);
  t.f_d = uni(r.f_d_lo, r.f_d_hi);
  t.x0 = uni(r.x0_lo, r.x0_hi);
  t.z0 = uni(r.z0_lo, r.z0_hi);
  return t;
}

PegTask sample_task(std::uint64_t seed, const TaskRanges& ranges) {
  std::mt19937_64 rng(seed);
  return sample_task(rng, ranges);
}

PegParams sample_params(std::mt19937_64& rng, const TaskRanges& r,
                        double delta_t) {
  auto uni = [&](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  PegParams p;
  p.delta_t = delta_t;
  p.k_sur = uni(r.k_sur_lo, r.k_sur_hi);
  p.k1_sur = uni(-r.k_profile, r.k_profile);
  p.k2_sur = uni(-r.k_profile, r.k_profile);
  return p;
}

PegParams sample_params(std::uint64_t seed, const TaskRanges& ranges,
                        double delta_t) {
  std::mt19937_64 rng(seed);
  return sample_params(rng, ranges, delta_t);
}

PegParams perturb_params(const PegParams& params, const PerturbationDraw& eta,
                         const PerturbationSpec& spec) {
  auto scaled = [&](double value, double rel, double draw) {
    const double out = value * (1.0 + draw * rel);
    const double floor = spec.floor_fraction * std::abs(value);
    return value > 0.0 ? std::max(out, floor) : out;
  };
  PegParams p = params;
  p.tau_z = scaled(params.tau_z, spec.tau, eta.tau_z);
  p.tau_x = scaled(params.tau_x, spec.tau, eta.tau_x);
  p.k_sur = scaled(params.k_sur, spec.k_sur, eta.k_sur);
  // Profile coefficients may have either sign; only their magnitude scales.
  p.k1_sur = params.k1_sur * (1.0 + eta.k1 * spec.k_profile);
  p.k2_sur = params.k2_sur * (1.0 + eta.k2 * spec.k_profile);
  return p;
}

PegParams perturb_params(const PegParams& params, std::mt19937_64& rng,
                         const PerturbationSpec& spec) {
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  PerturbationDraw eta;
  eta.tau_z = uni(rng);
  eta.tau_x = uni(rng);
  eta.k_sur = uni(rng);
  eta.k1 = uni(rng);
  eta.k2 = uni(rng);
  return perturb_params(params, eta, spec);
}

PegEnv::PegEnv(PegParams params, PegTask task, int horizon_steps,
               RewardWeights weights)
    : params_(params), task_(task), weights_(weights), horizon_(horizon_steps) {
  params_.validate();
  reset();
}

void PegEnv::reset() {
  state_ = initial_state(params_, task_);
  previous_ = {};
  sum_e_x_ = 0.0;
  sum_e_f_ = 0.0;
  steps_ = 0;
}

void PegEnv::reset(PegParams params, PegTask task) {
  params.validate();
  params_ = params;
  task_ = task;
  reset();
}

PegEnv::StepResult PegEnv::step(const PegAction& action) {
  // The integrals include the error the action was computed from.
  sum_e_x_ += state_.e_x() * params_.delta_t;
  sum_e_f_ += state_.e_f() * params_.delta_t;
  // The first action of an episode is not penalized for its jump from zero.
  const PegAction previous = steps_ == 0 ? action : previous_;
  state_ = cguard::step(state_, params_, action);
  StepResult out;
  out.reward = cguard::reward(state_, previous, action, weights_);
  previous_ = action;
  ++steps_;
  out.done = steps_ >= horizon_;
  return out;
}

VectorXd PegEnv::error() const {
  VectorXd y(2);
  y << state_.e_x(), state_.e_f();
  return y;
}

VectorXd PegEnv::observe(ObservationDesign design) const {
  return cguard::observe(state_, design, sum_e_x_, sum_e_f_);
}

PlantModel peg_plant_model(const PegParams& params, const PegTask& task) {
  PlantModel plant;
  plant.dim_y = 2;
  plant.dim_u = 2;
  const PegParams p = params;
  const double x_d = task.x_d;
  const double f_d = task.f_d;

  plant.f = [p, x_d, f_d](const VectorXd& y, const VectorXd& u, double) {
    const double x = x_d - y[0];
    const double force = f_d - y[1];
    const double z = force / p.k_sur + surface(p, x);
    const double xdot = (u[0] - x) / p.tau_x;
    const double zdot = (u[1] - z) / p.tau_z;
    VectorXd out(2);
    out << -xdot, -p.k_sur * (zdot - surface_slope(p, x) * xdot);
    return out;
  };
  plant.jac_y = [p, x_d](const VectorXd& y, const VectorXd& u, double) {
    const double x = x_d - y[0];
    const double g1 = surface_slope(p, x);
    const double g2 = -surface(p, x);
    MatrixXd j(2, 2);
    j(0, 0) = -1.0 / p.tau_x;
    j(0, 1) = 0.0;
    j(1, 0) = -p.k_sur * (g1 / p.tau_z + (g2 * (u[0] - x) - g1) / p.tau_x);
    j(1, 1) = -1.0 / p.tau_z;
    return j;
  };
  plant.jac_u = [p, x_d](const VectorXd& y, const VectorXd&, double) {
    const double x = x_d - y[0];
    MatrixXd j(2, 2);
    j << -1.0 / p.tau_x, 0.0, p.k_sur * surface_slope(p, x) / p.tau_x,
        -p.k_sur / p.tau_z;
    return j;
  };
  return plant;
}

CoordinateTransform peg_nominal_transform(const PegParams& params) {
  PegParams nominal = params;
  nominal.k_sur = 16.0;
  nominal.k1_sur = 0.0;
  nominal.k2_sur = 0.0;
  const PegTask task{2.0, -1.0, 2.0, 0.0};
  const PlantModel plant = peg_plant_model(nominal, task);
  const VectorXd y = VectorXd::Zero(2);
  const VectorXd u = peg_equilibrium_action(nominal, task);
  return build_transform(plant.jac_y(y, u, 0.0), plant.jac_u(y, u, 0.0));
}

VectorXd solve_equilibrium_action(const PlantModel& plant, const VectorXd& u0,
                                  double t) {
  const VectorXd y = VectorXd::Zero(plant.dim_y);
  VectorXd u = u0;
  for (int it = 0; it < 50; ++it) {
    const VectorXd r = plant.f(y, u, t);
    if (r.lpNorm<Eigen::Infinity>() < 1e-13) break;
    u -= plant.jac_u(y, u, t).fullPivLu().solve(r);
  }
  return u;
}

VectorXd peg_equilibrium_action(const PegParams& params, const PegTask& task) {
  VectorXd u(2);
  u << task.x_d, surface(params, task.x_d) + task.f_d / params.k_sur;
  return u;
}

nlohmann::json EquilibriumAudit::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& t : targets) {
    list.push_back({{"x_d", t.task.x_d},
                    {"f_d", t.task.f_d},
                    {"u_required", {t.u_required[0], t.u_required[1]}},
                    {"reachable", t.reachable}});
  }
  return {{"targets", list},
          {"min_abs_s2_slope", min_abs_s2_slope},
          {"s2_slope_nonzero", s2_slope_nonzero},
          {"all_reachable", all_reachable},
          {"ok", ok}};
}

EquilibriumAudit equilibrium_audit(const ConstrainedPolicy& policy,
                                   const PegParams& params,
                                   const std::vector<PegTask>& targets,
                                   const std::vector<RegionPoint>& region,
                                   double slope_tolerance) {
  EquilibriumAudit audit;
  const int m = policy.dim();
  audit.min_abs_s2_slope.assign(m, std::numeric_limits<double>::infinity());
  for (const RegionPoint& pt : region) {
    const PolicyJacobians jac = policy.slopes(pt.y, pt.s2);
    for (int i = 0; i < m; ++i) {
      audit.min_abs_s2_slope[i] =
          std::min(audit.min_abs_s2_slope[i], std::abs(jac.d_s2(i, i)));
    }
  }
  audit.s2_slope_nonzero = !region.empty();
  for (double s : audit.min_abs_s2_slope) {
    audit.s2_slope_nonzero = audit.s2_slope_nonzero && s > slope_tolerance;
  }

  audit.all_reachable = true;
  for (const PegTask& task : targets) {
    EquilibriumTarget t;
    t.task = task;
    const PlantModel plant = peg_plant_model(params, task);
    t.u_required = solve_equilibrium_action(plant, VectorXd::Zero(2));
    t.u_closed_form = peg_equilibrium_action(params, task);
    t.reachable =
        t.u_required.cwiseAbs().maxCoeff() <= policy.action_clip();
    audit.all_reachable = audit.all_reachable && t.reachable;
    audit.targets.push_back(std::move(t));
  }
  audit.ok = audit.s2_slope_nonzero && audit.all_reachable;
  return audit;
}

const char* to_string(FailureType type) {
  switch (type) {
    case FailureType::kNone: return "none";
    case FailureType::kChattering: return "chattering";
    case FailureType::kNonzeroEquilibrium: return "nonzero_equilibrium";
    case FailureType::kDrift: return "drift";
  }
  return "unknown";
}

nlohmann::json EpisodeSummary::to_json() const {
  return {{"position_error", position_error},
          {"force_error", force_error},
          {"combined_error", combined_error},
          {"total_reward", total_reward},
          {"failed", failed},
          {"failure", cguard::to_string(failure)}};
}

EpisodeSummary summarize(const std::vector<TrajectorySample>& log,
                         double delta_t, const FailureCriteria& c) {
  EpisodeSummary s;
  if (log.empty()) return s;
  const int n = static_cast<int>(log.size());
  const int window = std::clamp(
      static_cast<int>(std::lround(c.window_seconds / delta_t)), 1, n);
  for (int k = n - window; k < n; ++k) {
    s.position_error += std::abs(log[k].e_x);
    s.force_error += std::abs(log[k].e_f);
  }
  s.position_error /= window;
  s.force_error /= window;
  s.combined_error = std::max(s.position_error, s.force_error);
  for (const auto& sample : log) s.total_reward += sample.reward;
  s.failed = s.combined_error > c.error_threshold;
  if (!s.failed) return s;

  const int quarter = std::max(2, n / 4);
  const int start = n - quarter;
  double variation = 0.0;
  for (int k = std::max(start, 1); k < n; ++k) {
    variation += std::abs(log[k].u_x - log[k - 1].u_x) +
                 std::abs(log[k].u_z - log[k - 1].u_z);
  }
  variation /= quarter;

  auto combined = [&](int k) {
    return std::max(std::abs(log[k].e_x), std::abs(log[k].e_f));
  };
  const int half = quarter / 2;
  double early = 0.0, late = 0.0;
  for (int k = start; k < start + half; ++k) early += combined(k);
  for (int k = start + half; k < n; ++k) late += combined(k);
  early /= half;
  late /= (n - start - half);

  if (variation > c.chattering_threshold) {
    s.failure = FailureType::kChattering;
  } else if (late > early * (1.0 + c.drift_growth)) {
    s.failure = FailureType::kDrift;
  } else {
    s.failure = FailureType::kNonzeroEquilibrium;
  }
  return s;
}

void write_trajectory_csv(const std::string& path,
                          const std::vector<TrajectorySample>& log) {
  std::ofstream out(path);
  out << "t,x,z,f,u_x,u_z,e_x,e_f,reward\n";
  out.precision(10);
  for (const auto& s : log) {
    out << s.t << ',' << s.x << ',' << s.z << ',' << s.f << ',' << s.u_x << ','
        << s.u_z << ',' << s.e_x << ',' << s.e_f << ',' << s.reward << '\n';
  }
}

std::vector<TrajectorySample> rollout_deterministic(ConstrainedPolicy policy,
                                                    const PegParams& params,
                                                    const PegTask& task,
                                                    int steps) {
  PegEnv env(params, task, steps);
  policy.reset();
  std::vector<TrajectorySample> log;
  log.reserve(steps);
  for (int k = 0; k < steps; ++k) {
    const PolicyOutput out = policy_forward(policy, env.error());
    const PegAction action = to_action(out.u);
    const auto result = env.step(action);
    const PegState& s = env.state();
    log.push_back({s.elapsed, s.x, s.z, s.f, action.u_x, action.u_z, s.e_x(),
                   s.e_f(), result.reward});
  }
  return log;
}

}  // namespace cguard
