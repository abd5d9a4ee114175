#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "cguard/contraction.h"
#include "cguard/policy.h"

namespace cguard {

/// Diagonal gains of Lambda_d e'' + K_d e' + K_p e + K_rl u = 0.
struct ImpedanceGains {
  VectorXd lambda_d;
  VectorXd k_d;
  VectorXd k_p;
  VectorXd k_rl;

  int dim() const { return static_cast<int>(lambda_d.size()); }
  void validate() const;
  nlohmann::json to_json() const;
  static ImpedanceGains from_json(const nlohmann::json& j);
};

enum class RootBranch { kPlus, kMinus };

// y = K1 e + K2 e'. The reduced equation is
//   Lambda_y y' + B_y y + S K_rl u = S zeta
// where S = K_d on axes with K_p = 0 and 1 elsewhere.
struct CompositeMap {
  VectorXd k1;
  VectorXd k2;
  VectorXd lambda_y;
  VectorXd b_y;
  VectorXd equation_scale;
  RootBranch branch = RootBranch::kPlus;

  int dim() const { return static_cast<int>(k1.size()); }
  VectorXd composite(const VectorXd& e, const VectorXd& e_dot) const {
    return k1.cwiseProduct(e) + k2.cwiseProduct(e_dot);
  }
};

CompositeMap gains_to_first_order(const ImpedanceGains& gains,
                                  RootBranch branch = RootBranch::kPlus);

// Lambda_y y' + B_y y + S K_rl u - S (Lambda_d e'' + K_d e' + K_p e + K_rl u)
// for y = K1 e + K2 e'.
VectorXd reduction_residual(const ImpedanceGains& gains, const CompositeMap& map,
                            const VectorXd& e, const VectorXd& e_dot,
                            const VectorXd& e_ddot, const VectorXd& u);

/// One (y, y', zeta) sample in reduced coordinates.
struct AbsorbingSample {
  VectorXd y;
  VectorXd y_dot;
  VectorXd zeta;
};

struct AbsorbingWitness {
  bool feasible = false;
  double lambda_tilde = 0.0;
  double b_tilde = 0.0;
  double residual = 0.0;
};

struct AbsorbingCheckResult {
  // witnesses[k][i] for sample k and axis i
  std::vector<std::vector<AbsorbingWitness>> witnesses;
  std::vector<int> infeasible;  // sample indices
  // Largest relative change of a witness between consecutive samples.
  double max_witness_jump = 0.0;
  std::vector<int> jump_flags;  // sample indices where the jump exceeds tol

  int samples() const { return static_cast<int>(witnesses.size()); }
  double feasible_fraction() const;
  double min_lambda_tilde() const;
};

// Per axis: solve lt y' + bt y = lambda_y y' + b_y y - zeta with lt, bt > 0,
// choosing the solution nearest (lambda_y, b_y).
AbsorbingWitness absorb_axis(double y, double y_dot, double zeta,
                             double lambda_y, double b_y);

AbsorbingCheckResult absorbing_feasibility(
    const std::vector<AbsorbingSample>& samples, const CompositeMap& map,
    double jump_tolerance = 0.5);

void write_feasibility_csv(const std::string& path,
                           const AbsorbingCheckResult& result);

struct Theorem3Check {
  bool passed = false;
  std::vector<bool> axis_ok;
  std::vector<double> min_s1;  // min over samples of d_s1 * K_rl
  std::vector<double> min_s2;
  bool has_implied = false;
  HierarchicalCheck implied;  // block check under the witness substitution
  double implied_epsilon = 0.0;
};

// slopes[i][k]: axis i at sample k. k_rl is the effective action weight
// (S K_rl). When witnesses are given their sample count must match and the
// block check runs with lambda = -lt bt, b = -lt K_rl, eps1 = min lt * eps.
Theorem3Check verify_theorem3(const CompositeMap& map,
                              const std::vector<std::vector<AxisSlopes>>& slopes,
                              const VectorXd& k_rl, double epsilon,
                              const AbsorbingCheckResult* witnesses = nullptr);

// Integrates e' = K2^-1 (y - K1 e) exactly for y linear between samples.
std::vector<VectorXd> recover_tracking_error(const std::vector<VectorXd>& y,
                                             double delta_t, const VectorXd& k1,
                                             const VectorXd& k2,
                                             const VectorXd& e0);

/// Spring-mass-damper error system with zeta_i = amplitude sin(e_i) e'_i.
class SyntheticCartesianPlant {
 public:
  struct State {
    VectorXd e;
    VectorXd e_dot;
  };

  SyntheticCartesianPlant(ImpedanceGains gains, double amplitude,
                          RootBranch branch = RootBranch::kPlus);

  const ImpedanceGains& gains() const { return gains_; }
  const CompositeMap& map() const { return map_; }
  double amplitude() const { return amplitude_; }
  int dim() const { return gains_.dim(); }

  VectorXd zeta(const State& s) const;
  VectorXd acceleration(const State& s, const VectorXd& u) const;
  // RK4 with the action held over delta_t.
  State step(const State& s, const VectorXd& u, double delta_t,
             int substeps = 10) const;

  // Nominal reduced model y' = -Lambda_y^-1 (B_y y + S K_rl u).
  PlantModel first_order_model() const;
  // z = y, v = u: W_y = W_u = I with b_ii = -S K_rl / lambda_y.
  CoordinateTransform identity_transform() const;
  // Reduced-coordinate sample of the true trajectory at (s, u).
  AbsorbingSample reduced_sample(const State& s, const VectorXd& u) const;

 private:
  ImpedanceGains gains_;
  CompositeMap map_;
  double amplitude_ = 0.0;
};

/// Inputs of the end-to-end Theorem 3 run.
struct Theorem3DemoConfig {
  ImpedanceGains gains;
  RootBranch branch = RootBranch::kPlus;
  double amplitude = 0.1;
  // Linear per-axis inner policy h_i = s1_slope z_i + s2_slope s2_i.
  VectorXd s1_slope;
  VectorXd s2_slope;
  double action_clip = 100.0;
  double epsilon = 0.1;
  double horizon = 10.0;
  double delta_t = 0.01;
  VectorXd e0;
  VectorXd e_dot0;

  static Theorem3DemoConfig defaults();
  nlohmann::json to_json() const;
  static Theorem3DemoConfig from_json(const nlohmann::json& j);
};

struct Theorem3DemoResult {
  std::vector<double> t;
  std::vector<VectorXd> e;
  std::vector<VectorXd> e_dot;
  std::vector<VectorXd> y;
  std::vector<VectorXd> u;
  std::vector<AbsorbingSample> samples;
  AbsorbingCheckResult absorbing;
  Theorem3Check theorem3;
  std::vector<VectorXd> recovered_e;
  double recovery_error = 0.0;  // max |recovered - simulated|
  double final_error = 0.0;     // ||e(T)||
  bool passed = false;

  nlohmann::json summary_json() const;
};

ConstrainedPolicy theorem3_linear_policy(const SyntheticCartesianPlant& plant,
                                         const Theorem3DemoConfig& config);

Theorem3DemoResult run_theorem3_demo(const Theorem3DemoConfig& config);

}  // namespace cguard
