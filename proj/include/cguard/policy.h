#pragma once

#include <random>
#include <vector>

#include <json.hpp>

#include "cguard/contraction.h"
#include "cguard/mlp.h"

namespace cguard {

/// One per-axis network h_i: inputs (s1_i, s2_i), scalar output.
class AxisNetwork {
 public:
  AxisNetwork() = default;
  explicit AxisNetwork(Mlp net);

  static AxisNetwork random(const std::vector<int>& hidden,
                            std::mt19937_64& rng);

  const Mlp& net() const { return net_; }
  Mlp& mutable_net() { return net_; }

  double operator()(double s1, double s2) const;

 private:
  Mlp net_;
};

// Chain product W_l M_{l-1} W_{l-1} ... M_1 W_1 with M_j = 1 - tanh^2 of the
// layer-j pre-activation, split into the s1 and s2 columns.
AxisSlopes axis_jacobian(const AxisNetwork& net, double s1, double s2);

// Hidden-layer weights are clamped to >= epsilon. Final-layer weights are
// clamped to <= -epsilon when coupling_sign > 0 and >= epsilon otherwise.
// Biases are left alone.
AxisNetwork project_weights(const AxisNetwork& net, int coupling_sign,
                            double epsilon);

bool is_projected(const AxisNetwork& net, int coupling_sign, double epsilon);

/// Integrator state of the inner policy: s1 = W_y y for the latest sample,
/// s2 = sum of previous s1 * delta_t (zero at episode start).
struct InnerPolicyState {
  VectorXd s1;
  VectorXd s2;
  double delta_t = 0.01;

  void reset(int m);
};

struct PolicyConfig {
  std::vector<int> hidden = {32, 32, 32};
  double epsilon = 1e-3;
  double action_clip = 4.0;
  double delta_t = 0.01;
  double init_log_std = 0.0;
  int seed = 0;
};

/// u = clip(W_u^-1 [h_1(s1_1, s2_1), ..., h_m(s1_m, s2_m)]), z = W_y y.
class ConstrainedPolicy {
 public:
  struct BatchCache {
    std::vector<Mlp::Cache> axes;
  };

  ConstrainedPolicy() = default;
  ConstrainedPolicy(CoordinateTransform transform,
                    std::vector<AxisNetwork> axes, double epsilon,
                    double action_clip, double delta_t);

  // Random per-axis networks, projected onto the feasible set.
  static ConstrainedPolicy random(CoordinateTransform transform,
                                  const PolicyConfig& config);

  int dim() const { return transform_.dim(); }
  const CoordinateTransform& transform() const { return transform_; }
  const std::vector<AxisNetwork>& axes() const { return axes_; }
  std::vector<AxisNetwork>& mutable_axes() { return axes_; }
  InnerPolicyState& state() { return state_; }
  const InnerPolicyState& state() const { return state_; }
  double epsilon() const { return epsilon_; }
  double action_clip() const { return action_clip_; }
  void set_action_clip(double clip) { action_clip_ = clip; }
  double delta_t() const { return state_.delta_t; }

  VectorXd& log_std() { return log_std_; }
  const VectorXd& log_std() const { return log_std_; }

  void reset() { state_.reset(dim()); }

  VectorXd latent(const VectorXd& y) const;  // z = W_y y
  VectorXd inner(const VectorXd& s1, const VectorXd& s2) const;
  // Unclipped W_u^-1 pi_z(W_y y, s2).
  VectorXd mean_action(const VectorXd& y, const VectorXd& s2) const;
  VectorXd clip(const VectorXd& u) const;
  VectorXd action(const VectorXd& y, const VectorXd& s2) const {
    return clip(mean_action(y, s2));
  }

  // Diagonal inner-policy slopes at (W_y y, s2).
  PolicyJacobians slopes(const VectorXd& y, const VectorXd& s2) const;

  std::vector<int> coupling_signs() const;
  void project();
  bool feasible() const;

  ClosedLoopPolicy closed_loop() const;

  // Batched unclipped mean over columns of y and s2 (s2 in latent coords).
  MatrixXd mean_batch(const MatrixXd& y, const MatrixXd& s2,
                      BatchCache* cache = nullptr) const;
  // Accumulates per-axis parameter gradients for dL/d(mean) = grad_mean.
  // Returns dL/dy.
  MatrixXd backward_batch(const BatchCache& cache, const MatrixXd& grad_mean,
                          std::vector<Mlp::Gradients>* grads) const;

  int parameter_count() const;  // axis networks followed by log-std
  void flatten(double* out) const;
  void unflatten(const double* in);

  nlohmann::json to_json() const;
  static ConstrainedPolicy from_json(const nlohmann::json& j);

 private:
  CoordinateTransform transform_;
  std::vector<AxisNetwork> axes_;
  InnerPolicyState state_;
  double epsilon_ = 1e-3;
  double action_clip_ = 4.0;
  VectorXd log_std_;
};

struct PolicyOutput {
  VectorXd u;     // clipped action
  VectorXd mean;  // unclipped
  VectorXd s1;
  VectorXd s2;    // integrator value used for this step
  std::vector<Mlp::Cache> cache;
};

// Evaluates the policy at y and advances the integrator s2 += s1 * delta_t.
PolicyOutput policy_forward(ConstrainedPolicy& policy, const VectorXd& y);

struct ConstraintReport {
  bool satisfied = false;
  std::vector<double> worst_s1;  // max over samples of d_s1 * b_ii
  std::vector<double> worst_s2;
  std::vector<double> epsilon_prime;  // k * eps1 * eps * |b_ii|
  int samples = 0;
  int saturated = 0;
  double saturated_fraction() const {
    return samples == 0 ? 0.0 : static_cast<double>(saturated) / samples;
  }
};

// Checks d_s1 b < -eps' and d_s2 b < -eps' at every non-saturated region
// point. A point is saturated when any hidden |pre-activation| exceeds
// saturation_threshold.
ConstraintReport verify_constraint_satisfaction(
    const ConstrainedPolicy& policy, const std::vector<RegionPoint>& region,
    double weight_epsilon, double saturation_threshold = 6.0);

nlohmann::json to_json(const CoordinateTransform& t);
CoordinateTransform transform_from_json(const nlohmann::json& j);

}  // namespace cguard
