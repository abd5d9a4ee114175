#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "cguard/mlp.h"
#include "cguard/peg_env.h"
#include "cguard/policy.h"

namespace cguard {

enum class TrainMode { kPpo, kCppo };
const char* to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& name);

struct TrainConfig {
  double learning_rate = 1e-4;
  double entropy_coef = 0.0;
  double vf_coef = 1.0;
  double max_grad_norm = 0.5;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  int minibatches = 4;
  double clip_range = 0.1;
  int epochs_per_update = 10;

  int episodes = 4000;
  int steps_per_episode = 800;
  int envs_per_update = 4;  // one episode per env per update
  std::uint64_t seed = 0;

  std::vector<int> hidden = {32, 32, 32};
  std::vector<int> value_hidden = {32, 32, 32};
  double weight_epsilon = 1e-3;
  double action_clip = 4.0;
  double init_log_std = -1.0;
  double log_std_floor = -5.0;
  double adam_epsilon = 1e-5;
  int checkpoint_every = 1000;
  int jobs = 1;
  // Rewards divided by the running std of the discounted return, then
  // clipped to +-reward_clip.
  bool normalize_reward = true;
  double reward_clip = 10.0;

  RewardWeights reward;
  TaskRanges ranges;
  PegParams base_params;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Scalar state-value function over (e_x, e_f, sum e_x dt, sum e_f dt).
class ValueNetwork {
 public:
  ValueNetwork() = default;
  explicit ValueNetwork(Mlp net) : net_(std::move(net)) {}
  static ValueNetwork random(int input_dim, const std::vector<int>& hidden,
                             std::mt19937_64& rng);

  const Mlp& net() const { return net_; }
  Mlp& mutable_net() { return net_; }
  double operator()(const VectorXd& obs) const { return net_.forward(obs)[0]; }

 private:
  Mlp net_;
};

/// Adam with bias correction over a flat parameter vector.
class Adam {
 public:
  Adam() = default;
  Adam(int n, double lr, double epsilon = 1e-8, double beta1 = 0.9,
       double beta2 = 0.999);
  void step(VectorXd& params, const VectorXd& grad);
  int steps() const { return t_; }
  double learning_rate() const { return lr_; }

 private:
  double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  VectorXd m_, v_;
  int t_ = 0;
};

/// Flat storage, one column per step, env-major.
struct RolloutBuffer {
  MatrixXd y;        // policy input (e_x, e_f)
  MatrixXd s2;       // latent integrator used for the step
  MatrixXd obs;      // value-network input
  MatrixXd action;   // sampled, before clipping
  VectorXd log_prob;
  VectorXd reward;      // training reward, scaled when normalization is on
  VectorXd raw_reward;
  VectorXd value;
  VectorXd next_value;  // V(s_{t+1})
  // 0 running, 1 terminal, 2 cut at the end of an env segment (bootstrapped).
  std::vector<std::uint8_t> done;
  VectorXd advantage;
  VectorXd ret;

  std::vector<EpisodeSummary> episodes;  // completed during collection

  int size() const { return static_cast<int>(reward.size()); }
  void resize(int n, int dim_y, int dim_obs, int dim_u);
};

// delta_t = r_t + gamma (1 - terminal_t) V'_t - V_t,
// A_t = delta_t + gamma lambda (1 - d_t) A_{t+1}, d_t = terminal or cut.
void compute_gae(RolloutBuffer& buffer, double gamma, double lambda);

VectorXd normalize_advantages(const VectorXd& adv);

double gaussian_log_prob(const VectorXd& action, const VectorXd& mean,
                         const VectorXd& log_std);

using TaskSampler =
    std::function<void(std::mt19937_64& rng, PegParams* params, PegTask* task)>;

TaskSampler default_task_sampler(const TaskRanges& ranges,
                                 const PegParams& base);

/// Running mean and variance (parallel merge form).
struct RunningMoments {
  double count = 1e-4;
  double mean = 0.0;
  double var = 1.0;
  void update(const std::vector<double>& batch);
};

struct RewardScaler {
  bool enabled = false;
  double gamma = 0.99;
  double clip = 10.0;
  RunningMoments moments;
  std::vector<double> running_return;  // per env
};

/// Env pool with one RNG stream per env so output is independent of jobs.
struct EnvPool {
  std::vector<PegEnv> envs;
  std::vector<std::mt19937_64> rngs;
  std::vector<InnerPolicyState> policy_states;
  std::vector<std::vector<TrajectorySample>> logs;  // current episode
  TaskSampler sampler;
  RewardScaler scaler;

  EnvPool(int n, int horizon, std::uint64_t seed, TaskSampler sampler,
          RewardWeights weights = {});
  void reset_env(int i);
};

struct RolloutOptions {
  bool stochastic = true;
  int jobs = 1;
};

RolloutBuffer collect_rollouts(const ConstrainedPolicy& policy,
                               const ValueNetwork& value, EnvPool& pool,
                               int n_steps, const RolloutOptions& options = {});

struct PpoLoss {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double total = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
};

// Loss on the given columns with advantages normalized over those columns.
// grad, if set, receives d total / d params laid out as policy.flatten
// followed by value.net().flatten.
PpoLoss ppo_loss(const ConstrainedPolicy& policy, const ValueNetwork& value,
                 const RolloutBuffer& buffer, const std::vector<int>& columns,
                 const TrainConfig& config, VectorXd* grad);

struct UpdateStats {
  PpoLoss last;
  double mean_policy_loss = 0.0;
  double mean_value_loss = 0.0;
  double grad_norm = 0.0;           // mean pre-clip norm
  double projection_change = 0.0;   // sum of ||theta_post - theta_pre||
  int minibatch_steps = 0;
};

struct Learner {
  ConstrainedPolicy policy;
  ValueNetwork value;
  Adam adam;
  std::mt19937_64 rng;
};

Learner make_learner(const CoordinateTransform& transform,
                     const TrainConfig& config);

// Throws NonFiniteLoss after restoring the weights and optimizer state.
UpdateStats ppo_update(Learner& learner, const RolloutBuffer& buffer,
                       const TrainConfig& config, bool constrained);

struct CurveRow {
  int episode = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
};

struct Checkpoint {
  int episode = 0;
  TrainMode mode = TrainMode::kCppo;
  ConstrainedPolicy policy;
  ValueNetwork value;
  nlohmann::json config;

  nlohmann::json to_json() const;
  static Checkpoint from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

struct TrainResult {
  std::vector<CurveRow> curve;
  std::vector<Checkpoint> checkpoints;
  Learner learner;
  int aborted_updates = 0;
};

struct TrainHooks {
  std::function<void(const CurveRow&, const UpdateStats&)> on_update;
};

// When out_dir is non-empty, writes learning_curve.csv, config.json and
// checkpoints/episode_<n>.json there.
TrainResult train(TrainMode mode, const TrainConfig& config,
                  const std::string& out_dir = "",
                  const TrainHooks& hooks = {});

void write_curve_csv(const std::string& path,
                     const std::vector<CurveRow>& curve);

}  // namespace cguard
