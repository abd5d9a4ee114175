#include "cguard/ppo.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "cguard/errors.h"

namespace cguard {
namespace {

constexpr double kLog2Pi = 1.8378770664093453;

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out,
                const std::string& prefix = "") {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig,
                "field '" + prefix + key + "': " + e.what());
  }
}

int total_params(const ConstrainedPolicy& p, const ValueNetwork& v) {
  return p.parameter_count() + v.net().parameter_count();
}

VectorXd flatten_all(const ConstrainedPolicy& p, const ValueNetwork& v) {
  VectorXd theta(total_params(p, v));
  p.flatten(theta.data());
  v.net().flatten(theta.data() + p.parameter_count());
  return theta;
}

void unflatten_all(const VectorXd& theta, ConstrainedPolicy& p,
                   ValueNetwork& v) {
  p.unflatten(theta.data());
  v.mutable_net().unflatten(theta.data() + p.parameter_count());
}

MatrixXd gather(const MatrixXd& m, const std::vector<int>& cols) {
  MatrixXd out(m.rows(), cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(j) = m.col(cols[j]);
  return out;
}

VectorXd gather(const VectorXd& v, const std::vector<int>& cols) {
  VectorXd out(cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j) out[j] = v[cols[j]];
  return out;
}

}  // namespace

const char* to_string(TrainMode mode) {
  return mode == TrainMode::kPpo ? "ppo" : "cppo";
}

TrainMode parse_train_mode(const std::string& name) {
  if (name == "ppo") return TrainMode::kPpo;
  if (name == "cppo" || name == "c-ppo") return TrainMode::kCppo;
  throw Error(ErrorCode::kInvalidConfig, "unknown mode '" + name + "'");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw Error(ErrorCode::kInvalidConfig, what);
  };
  if (!(clip_range > 0.0 && clip_range < 1.0)) fail("clip_range must be in (0, 1)");
  if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma must be in (0, 1]");
  if (!(gae_lambda > 0.0 && gae_lambda <= 1.0)) fail("gae_lambda must be in (0, 1]");
  if (minibatches <= 0 || epochs_per_update <= 0 || steps_per_episode <= 0 ||
      envs_per_update <= 0 || checkpoint_every <= 0 || jobs <= 0) {
    fail("counts must be positive");
  }
  if (episodes < 0) fail("episodes must be non-negative");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(max_grad_norm > 0.0)) fail("max_grad_norm must be positive");
  if (hidden.empty() || value_hidden.empty()) fail("hidden sizes must be set");
  for (int h : hidden) if (h <= 0) fail("hidden sizes must be positive");
  for (int h : value_hidden) if (h <= 0) fail("hidden sizes must be positive");
  base_params.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {
      {"learning_rate", learning_rate},
      {"entropy_coef", entropy_coef},
      {"vf_coef", vf_coef},
      {"max_grad_norm", max_grad_norm},
      {"gamma", gamma},
      {"gae_lambda", gae_lambda},
      {"minibatches", minibatches},
      {"clip_range", clip_range},
      {"epochs_per_update", epochs_per_update},
      {"episodes", episodes},
      {"steps_per_episode", steps_per_episode},
      {"envs_per_update", envs_per_update},
      {"seed", seed},
      {"hidden", hidden},
      {"value_hidden", value_hidden},
      {"weight_epsilon", weight_epsilon},
      {"action_clip", action_clip},
      {"init_log_std", init_log_std},
      {"log_std_floor", log_std_floor},
      {"adam_epsilon", adam_epsilon},
      {"checkpoint_every", checkpoint_every},
      {"normalize_reward", normalize_reward},
      {"reward_clip", reward_clip},
      {"reward", {{"distance", reward.distance}, {"chattering", reward.chattering}}},
      {"ranges",
       {{"x_d", {ranges.x_d_lo, ranges.x_d_hi}},
        {"f_d", {ranges.f_d_lo, ranges.f_d_hi}},
        {"x0", {ranges.x0_lo, ranges.x0_hi}},
        {"z0", {ranges.z0_lo, ranges.z0_hi}},
        {"k_sur", {ranges.k_sur_lo, ranges.k_sur_hi}},
        {"k_profile", ranges.k_profile}}},
      {"plant", base_params.to_json()},
  };
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) {
    throw Error(ErrorCode::kInvalidConfig, "train config must be an object");
  }
  TrainConfig c;
  read_field(j, "learning_rate", c.learning_rate);
  read_field(j, "entropy_coef", c.entropy_coef);
  read_field(j, "vf_coef", c.vf_coef);
  read_field(j, "max_grad_norm", c.max_grad_norm);
  read_field(j, "gamma", c.gamma);
  read_field(j, "gae_lambda", c.gae_lambda);
  read_field(j, "minibatches", c.minibatches);
  read_field(j, "clip_range", c.clip_range);
  read_field(j, "epochs_per_update", c.epochs_per_update);
  read_field(j, "episodes", c.episodes);
  read_field(j, "steps_per_episode", c.steps_per_episode);
  read_field(j, "envs_per_update", c.envs_per_update);
  read_field(j, "seed", c.seed);
  read_field(j, "hidden", c.hidden);
  read_field(j, "value_hidden", c.value_hidden);
  read_field(j, "weight_epsilon", c.weight_epsilon);
  read_field(j, "action_clip", c.action_clip);
  read_field(j, "init_log_std", c.init_log_std);
  read_field(j, "log_std_floor", c.log_std_floor);
  read_field(j, "adam_epsilon", c.adam_epsilon);
  read_field(j, "checkpoint_every", c.checkpoint_every);
  read_field(j, "normalize_reward", c.normalize_reward);
  read_field(j, "reward_clip", c.reward_clip);
  if (j.contains("reward")) {
    read_field(j["reward"], "distance", c.reward.distance, "reward.");
    read_field(j["reward"], "chattering", c.reward.chattering, "reward.");
  }
  if (j.contains("ranges")) {
    const auto& r = j["ranges"];
    auto pair = [&](const char* key, double& lo, double& hi) {
      std::vector<double> v{lo, hi};
      read_field(r, key, v, "ranges.");
      if (v.size() != 2 || v[0] > v[1]) {
        throw Error(ErrorCode::kInvalidConfig,
                    std::string("field 'ranges.") + key + "': expected [lo, hi]");
      }
      lo = v[0];
      hi = v[1];
    };
    pair("x_d", c.ranges.x_d_lo, c.ranges.x_d_hi);
    pair("f_d", c.ranges.f_d_lo, c.ranges.f_d_hi);
    pair("x0", c.ranges.x0_lo, c.ranges.x0_hi);
    pair("z0", c.ranges.z0_lo, c.ranges.z0_hi);
    pair("k_sur", c.ranges.k_sur_lo, c.ranges.k_sur_hi);
    read_field(r, "k_profile", c.ranges.k_profile, "ranges.");
  }
  if (j.contains("plant")) {
    try {
      c.base_params = PegParams::from_json(j["plant"]);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kInvalidConfig, std::string("field 'plant': ") + e.what());
    }
  }
  c.validate();
  return c;
}

ValueNetwork ValueNetwork::random(int input_dim, const std::vector<int>& hidden,
                                  std::mt19937_64& rng) {
  std::vector<int> sizes{input_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  return ValueNetwork(Mlp::random(sizes, rng));
}

Adam::Adam(int n, double lr, double epsilon, double beta1, double beta2)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(epsilon),
      m_(VectorXd::Zero(n)), v_(VectorXd::Zero(n)) {}

void Adam::step(VectorXd& params, const VectorXd& grad) {
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  const double step = lr_ * std::sqrt(c2) / c1;
  params.array() -= step * m_.array() / (v_.array().sqrt() + eps_);
}

void RolloutBuffer::resize(int n, int dim_y, int dim_obs, int dim_u) {
  y.resize(dim_y, n);
  s2.resize(dim_u, n);
  obs.resize(dim_obs, n);
  action.resize(dim_u, n);
  log_prob.resize(n);
  reward.resize(n);
  raw_reward.resize(n);
  value.resize(n);
  next_value.resize(n);
  done.assign(n, 0);
  advantage = VectorXd::Zero(n);
  ret = VectorXd::Zero(n);
}

void compute_gae(RolloutBuffer& b, double gamma, double lambda) {
  const int n = b.size();
  b.advantage.resize(n);
  double next_adv = 0.0;
  for (int t = n - 1; t >= 0; --t) {
    const double boot = b.done[t] == 1 ? 0.0 : 1.0;
    const double carry = b.done[t] ? 0.0 : 1.0;
    const double delta = b.reward[t] + gamma * boot * b.next_value[t] - b.value[t];
    next_adv = delta + gamma * lambda * carry * next_adv;
    b.advantage[t] = next_adv;
  }
  b.ret = b.advantage + b.value;
}

VectorXd normalize_advantages(const VectorXd& adv) {
  if (adv.size() == 0) return adv;
  const double mean = adv.mean();
  const double var = (adv.array() - mean).square().mean();
  return (adv.array() - mean) / (std::sqrt(var) + 1e-8);
}

double gaussian_log_prob(const VectorXd& a, const VectorXd& mean,
                         const VectorXd& log_std) {
  const VectorXd z = ((a - mean).array() / log_std.array().exp()).matrix();
  return -0.5 * z.squaredNorm() - log_std.sum() - 0.5 * kLog2Pi * a.size();
}

TaskSampler default_task_sampler(const TaskRanges& ranges,
                                 const PegParams& base) {
  return [ranges, base](std::mt19937_64& rng, PegParams* p, PegTask* t) {
    *p = sample_params(rng, ranges, base.delta_t);
    p->tau_x = base.tau_x;
    p->tau_z = base.tau_z;
    *t = sample_task(rng, ranges);
  };
}

EnvPool::EnvPool(int n, int horizon, std::uint64_t seed, TaskSampler s,
                 RewardWeights weights)
    : sampler(std::move(s)) {
  std::seed_seq seq{seed, static_cast<std::uint64_t>(0x9e3779b9)};
  std::vector<std::uint64_t> seeds(n);
  seq.generate(seeds.begin(), seeds.end());
  for (int i = 0; i < n; ++i) {
    rngs.emplace_back(seeds[i]);
    PegParams p;
    PegTask t;
    sampler(rngs[i], &p, &t);
    envs.emplace_back(p, t, horizon, weights);
  }
  policy_states.resize(n);
  logs.resize(n);
  scaler.running_return.assign(n, 0.0);
}

void RunningMoments::update(const std::vector<double>& batch) {
  if (batch.empty()) return;
  double bm = 0.0;
  for (double x : batch) bm += x;
  bm /= batch.size();
  double bv = 0.0;
  for (double x : batch) bv += (x - bm) * (x - bm);
  bv /= batch.size();
  const double bc = static_cast<double>(batch.size());
  const double total = count + bc;
  const double delta = bm - mean;
  const double m2 = var * count + bv * bc + delta * delta * count * bc / total;
  mean += delta * bc / total;
  var = m2 / total;
  count = total;
}

void EnvPool::reset_env(int i) {
  PegParams p;
  PegTask t;
  sampler(rngs[i], &p, &t);
  envs[i].reset(p, t);
  policy_states[i] = {};
  logs[i].clear();
}

namespace {

struct EnvSegment {
  RolloutBuffer buf;
  std::vector<EpisodeSummary> episodes;
};

void run_env(const ConstrainedPolicy& policy, const ValueNetwork& value,
             EnvPool& pool, int i, int n_steps, bool stochastic,
             EnvSegment* seg) {
  ConstrainedPolicy local = policy;
  PegEnv& env = pool.envs[i];
  std::mt19937_64& rng = pool.rngs[i];
  std::normal_distribution<double> normal(0.0, 1.0);
  const int m = local.dim();
  if (pool.policy_states[i].s2.size() == m) {
    local.state() = pool.policy_states[i];
  } else {
    local.reset();
  }
  const VectorXd sigma = local.log_std().array().exp();
  const double dt = env.params().delta_t;

  RolloutBuffer& b = seg->buf;
  b.resize(n_steps, m, 4, m);
  for (int t = 0; t < n_steps; ++t) {
    const VectorXd y = env.error();
    const VectorXd obs = env.observe(ObservationDesign::kErrorIntegral);
    const PolicyOutput out = policy_forward(local, y);
    VectorXd a = out.mean;
    if (stochastic) {
      for (int k = 0; k < m; ++k) a[k] += sigma[k] * normal(rng);
    }
    const VectorXd applied = local.clip(a);
    const PegAction act = to_action(applied);
    const auto res = env.step(act);

    b.y.col(t) = y;
    b.s2.col(t) = out.s2;
    b.obs.col(t) = obs;
    b.action.col(t) = a;
    b.log_prob[t] = gaussian_log_prob(a, out.mean, local.log_std());
    b.reward[t] = res.reward;
    b.value[t] = value(obs);
    b.done[t] = res.done ? 1 : 0;

    const PegState& s = env.state();
    pool.logs[i].push_back({s.elapsed, s.x, s.z, s.f, act.u_x, act.u_z,
                            s.e_x(), s.e_f(), res.reward});
    if (res.done) {
      seg->episodes.push_back(summarize(pool.logs[i], dt));
      pool.reset_env(i);
      local.reset();
    }
  }
  for (int t = 0; t + 1 < n_steps; ++t) b.next_value[t] = b.value[t + 1];
  b.next_value[n_steps - 1] =
      b.done[n_steps - 1] ? 0.0
                          : value(env.observe(ObservationDesign::kErrorIntegral));
  for (int t = 0; t < n_steps; ++t) {
    if (b.done[t]) b.next_value[t] = 0.0;
  }
  pool.policy_states[i] = local.state();
}

}  // namespace

RolloutBuffer collect_rollouts(const ConstrainedPolicy& policy,
                               const ValueNetwork& value, EnvPool& pool,
                               int n_steps, const RolloutOptions& options) {
  const int n_env = static_cast<int>(pool.envs.size());
  std::vector<EnvSegment> segs(n_env);
  const int jobs = std::clamp(options.jobs, 1, std::max(n_env, 1));
  if (jobs == 1) {
    for (int i = 0; i < n_env; ++i) {
      run_env(policy, value, pool, i, n_steps, options.stochastic, &segs[i]);
    }
  } else {
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w] {
        for (int i = w; i < n_env; i += jobs) {
          run_env(policy, value, pool, i, n_steps, options.stochastic,
                  &segs[i]);
        }
      });
    }
    for (auto& t : workers) t.join();
  }

  const int m = policy.dim();
  RolloutBuffer out;
  out.resize(n_env * n_steps, m, 4, m);
  RewardScaler& sc = pool.scaler;
  if (sc.enabled) {
    // Discounted-return statistics are folded in env order, step-major.
    if (static_cast<int>(sc.running_return.size()) != n_env) {
      sc.running_return.assign(n_env, 0.0);
    }
    for (int t = 0; t < n_steps; ++t) {
      std::vector<double> rets(n_env);
      for (int i = 0; i < n_env; ++i) {
        double& r = sc.running_return[i];
        r = sc.gamma * r + segs[i].buf.reward[t];
        rets[i] = r;
        if (segs[i].buf.done[t]) r = 0.0;
      }
      sc.moments.update(rets);
    }
  }
  for (int i = 0; i < n_env; ++i) {
    const RolloutBuffer& b = segs[i].buf;
    const int off = i * n_steps;
    out.y.middleCols(off, n_steps) = b.y;
    out.s2.middleCols(off, n_steps) = b.s2;
    out.obs.middleCols(off, n_steps) = b.obs;
    out.action.middleCols(off, n_steps) = b.action;
    out.log_prob.segment(off, n_steps) = b.log_prob;
    out.raw_reward.segment(off, n_steps) = b.reward;
    if (sc.enabled) {
      const double inv = 1.0 / std::sqrt(sc.moments.var + 1e-8);
      out.reward.segment(off, n_steps) =
          (b.reward * inv).cwiseMax(-sc.clip).cwiseMin(sc.clip);
    } else {
      out.reward.segment(off, n_steps) = b.reward;
    }
    out.value.segment(off, n_steps) = b.value;
    out.next_value.segment(off, n_steps) = b.next_value;
    std::copy(b.done.begin(), b.done.end(), out.done.begin() + off);
    // Segments are independent; cut the GAE recursion at each boundary.
    if (!out.done[off + n_steps - 1]) {
      out.done[off + n_steps - 1] = 2;
    }
    out.episodes.insert(out.episodes.end(), segs[i].episodes.begin(),
                        segs[i].episodes.end());
  }
  return out;
}

PpoLoss ppo_loss(const ConstrainedPolicy& policy, const ValueNetwork& value,
                 const RolloutBuffer& buffer, const std::vector<int>& cols,
                 const TrainConfig& config, VectorXd* grad) {
  const int n = static_cast<int>(cols.size());
  const int m = policy.dim();
  const MatrixXd y = gather(buffer.y, cols);
  const MatrixXd s2 = gather(buffer.s2, cols);
  const MatrixXd obs = gather(buffer.obs, cols);
  const MatrixXd act = gather(buffer.action, cols);
  const VectorXd old_logp = gather(buffer.log_prob, cols);
  const VectorXd old_v = gather(buffer.value, cols);
  const VectorXd ret = gather(buffer.ret, cols);
  const VectorXd adv = normalize_advantages(gather(buffer.advantage, cols));

  ConstrainedPolicy::BatchCache pcache;
  const MatrixXd mean = policy.mean_batch(y, s2, &pcache);
  const VectorXd log_std = policy.log_std();
  const VectorXd inv_var = (-2.0 * log_std).array().exp();
  const MatrixXd diff = act - mean;

  PpoLoss L;
  const double c = config.clip_range;
  MatrixXd grad_mean(m, n);
  VectorXd grad_log_std = VectorXd::Zero(m);
  for (int j = 0; j < n; ++j) {
    const double quad = diff.col(j).cwiseAbs2().dot(inv_var);
    const double logp = -0.5 * quad - log_std.sum() - 0.5 * kLog2Pi * m;
    const double log_ratio = logp - old_logp[j];
    const double ratio = std::exp(log_ratio);
    const double unclipped = ratio * adv[j];
    const double clipped = std::clamp(ratio, 1.0 - c, 1.0 + c) * adv[j];
    L.policy_loss -= std::min(unclipped, clipped);
    L.approx_kl += 0.5 * log_ratio * log_ratio;
    if (std::abs(ratio - 1.0) > c) L.clip_fraction += 1.0;
    const double g_logp = unclipped <= clipped ? -adv[j] * ratio / n : 0.0;
    grad_mean.col(j) = g_logp * diff.col(j).cwiseProduct(inv_var);
    grad_log_std.array() +=
        g_logp * (diff.col(j).array().square() * inv_var.array() - 1.0);
  }
  L.policy_loss /= n;
  L.approx_kl /= n;
  L.clip_fraction /= n;
  L.entropy = (0.5 + 0.5 * kLog2Pi) * m + log_std.sum();
  grad_log_std.array() -= config.entropy_coef;

  Mlp::Cache vcache;
  const MatrixXd v = value.net().forward_batch(obs, &vcache);
  MatrixXd grad_v(1, n);
  for (int j = 0; j < n; ++j) {
    const double vj = v(0, j);
    const double dv = std::clamp(vj - old_v[j], -c, c);
    const double vclip = old_v[j] + dv;
    const double l1 = (vj - ret[j]) * (vj - ret[j]);
    const double l2 = (vclip - ret[j]) * (vclip - ret[j]);
    L.value_loss += 0.5 * std::max(l1, l2);
    double g = 0.0;
    if (l1 >= l2) {
      g = vj - ret[j];
    } else if (std::abs(vj - old_v[j]) < c) {
      g = vclip - ret[j];
    }
    grad_v(0, j) = config.vf_coef * g / n;
  }
  L.value_loss /= n;
  L.total = L.policy_loss - config.entropy_coef * L.entropy +
            config.vf_coef * L.value_loss;

  if (grad) {
    grad->resize(total_params(policy, value));
    std::vector<Mlp::Gradients> pg;
    for (const auto& ax : policy.axes()) pg.push_back(ax.net().zero_gradients());
    policy.backward_batch(pcache, grad_mean, &pg);
    double* out = grad->data();
    for (std::size_t i = 0; i < pg.size(); ++i) {
      Mlp::flatten(pg[i], out);
      out += policy.axes()[i].net().parameter_count();
    }
    for (int k = 0; k < m; ++k) *out++ = grad_log_std[k];
    Mlp::Gradients vg = value.net().zero_gradients();
    value.net().backward(vcache, grad_v, &vg);
    Mlp::flatten(vg, out);
  }
  return L;
}

Learner make_learner(const CoordinateTransform& transform,
                     const TrainConfig& config) {
  Learner l;
  l.rng.seed(config.seed);
  PolicyConfig pc;
  pc.hidden = config.hidden;
  pc.epsilon = config.weight_epsilon;
  pc.action_clip = config.action_clip;
  pc.delta_t = config.base_params.delta_t;
  pc.init_log_std = config.init_log_std;
  pc.seed = static_cast<int>(config.seed);
  l.policy = ConstrainedPolicy::random(transform, pc);
  l.value = ValueNetwork::random(4, config.value_hidden, l.rng);
  l.adam = Adam(total_params(l.policy, l.value), config.learning_rate,
                config.adam_epsilon);
  return l;
}

UpdateStats ppo_update(Learner& learner, const RolloutBuffer& buffer,
                       const TrainConfig& config, bool constrained) {
  const ConstrainedPolicy policy_backup = learner.policy;
  const ValueNetwork value_backup = learner.value;
  const Adam adam_backup = learner.adam;

  UpdateStats stats;
  const int n = buffer.size();
  const int mb = std::max(1, n / config.minibatches);
  std::vector<int> perm(n);
  VectorXd grad;
  for (int epoch = 0; epoch < config.epochs_per_update; ++epoch) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), learner.rng);
    for (int start = 0; start < n; start += mb) {
      const int end = std::min(n, start + mb);
      const std::vector<int> cols(perm.begin() + start, perm.begin() + end);
      const PpoLoss loss =
          ppo_loss(learner.policy, learner.value, buffer, cols, config, &grad);
      if (!std::isfinite(loss.total) || !grad.allFinite()) {
        learner.policy = policy_backup;
        learner.value = value_backup;
        learner.adam = adam_backup;
        throw Error(ErrorCode::kNonFiniteLoss, "loss or gradient is not finite");
      }
      const double norm = grad.norm();
      if (norm > config.max_grad_norm) grad *= config.max_grad_norm / norm;
      VectorXd theta = flatten_all(learner.policy, learner.value);
      learner.adam.step(theta, grad);
      unflatten_all(theta, learner.policy, learner.value);
      learner.policy.log_std() =
          learner.policy.log_std().cwiseMax(config.log_std_floor);
      if (constrained) {
        VectorXd pre(learner.policy.parameter_count());
        learner.policy.flatten(pre.data());
        learner.policy.project();
        VectorXd post(pre.size());
        learner.policy.flatten(post.data());
        stats.projection_change += (post - pre).norm();
      }
      stats.last = loss;
      stats.mean_policy_loss += loss.policy_loss;
      stats.mean_value_loss += loss.value_loss;
      stats.grad_norm += norm;
      ++stats.minibatch_steps;
    }
  }
  if (stats.minibatch_steps > 0) {
    stats.mean_policy_loss /= stats.minibatch_steps;
    stats.mean_value_loss /= stats.minibatch_steps;
    stats.grad_norm /= stats.minibatch_steps;
  }
  return stats;
}

nlohmann::json Checkpoint::to_json() const {
  return {{"schema", "cguard.checkpoint.v1"},
          {"episode", episode},
          {"mode", cguard::to_string(mode)},
          {"policy", policy.to_json()},
          {"value", value.net().to_json()},
          {"config", config}};
}

Checkpoint Checkpoint::from_json(const nlohmann::json& j) {
  Checkpoint c;
  try {
    c.episode = j.value("episode", 0);
    c.mode = parse_train_mode(j.value("mode", std::string("cppo")));
    c.policy = ConstrainedPolicy::from_json(j.at("policy"));
    if (j.contains("value")) c.value = ValueNetwork(Mlp::from_json(j["value"]));
    c.config = j.value("config", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("checkpoint: ") + e.what());
  }
  return c;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kInvalidConfig, "cannot write " + path);
  out << to_json().dump(1) << '\n';
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kMissingCheckpoint, "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, path + ": " + e.what());
  }
  return from_json(j);
}

void write_curve_csv(const std::string& path,
                     const std::vector<CurveRow>& curve) {
  std::ofstream out(path);
  out << "episode,mean_return,success_rate\n";
  out.precision(10);
  for (const auto& r : curve) {
    out << r.episode << ',' << r.mean_return << ',' << r.success_rate << '\n';
  }
}

TrainResult train(TrainMode mode, const TrainConfig& config,
                  const std::string& out_dir, const TrainHooks& hooks) {
  config.validate();
#if defined(__GLIBC__)
  // Minibatch activations are a few hundred KB; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
  namespace fs = std::filesystem;
  TrainResult result;
  const CoordinateTransform transform = peg_nominal_transform(config.base_params);
  result.learner = make_learner(transform, config);
  Learner& learner = result.learner;
  const bool constrained = mode == TrainMode::kCppo;

  if (!out_dir.empty()) {
    fs::create_directories(fs::path(out_dir) / "checkpoints");
    nlohmann::json snap = config.to_json();
    snap["mode"] = to_string(mode);
    std::ofstream(fs::path(out_dir) / "config.json") << snap.dump(2) << '\n';
  }

  EnvPool pool(config.envs_per_update, config.steps_per_episode,
               config.seed + 1,
               default_task_sampler(config.ranges, config.base_params),
               config.reward);
  pool.scaler.enabled = config.normalize_reward;
  pool.scaler.gamma = config.gamma;
  pool.scaler.clip = config.reward_clip;
  RolloutOptions ro;
  ro.jobs = config.jobs;

  int done = 0;
  while (done < config.episodes) {
    RolloutBuffer buf = collect_rollouts(learner.policy, learner.value, pool,
                                         config.steps_per_episode, ro);
    compute_gae(buf, config.gamma, config.gae_lambda);
    UpdateStats stats;
    try {
      stats = ppo_update(learner, buf, config, constrained);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNonFiniteLoss) throw;
      ++result.aborted_updates;
    }
    const int prev = done;
    done += static_cast<int>(buf.episodes.size());

    CurveRow row;
    row.episode = done;
    int ok = 0;
    for (const auto& ep : buf.episodes) {
      row.mean_return += ep.total_reward;
      ok += ep.failed ? 0 : 1;
    }
    if (!buf.episodes.empty()) {
      row.mean_return /= buf.episodes.size();
      row.success_rate = static_cast<double>(ok) / buf.episodes.size();
    }
    result.curve.push_back(row);
    if (hooks.on_update) hooks.on_update(row, stats);

    if (done / config.checkpoint_every > prev / config.checkpoint_every ||
        done >= config.episodes) {
      Checkpoint ck;
      ck.episode = done;
      ck.mode = mode;
      ck.policy = learner.policy;
      ck.value = learner.value;
      ck.config = config.to_json();
      if (!out_dir.empty()) {
        ck.save((fs::path(out_dir) / "checkpoints" /
                 ("episode_" + std::to_string(done) + ".json"))
                    .string());
      }
      result.checkpoints.push_back(std::move(ck));
    }
  }
  if (!out_dir.empty()) {
    write_curve_csv((fs::path(out_dir) / "learning_curve.csv").string(),
                    result.curve);
  }
  return result;
}

}  // namespace cguard
