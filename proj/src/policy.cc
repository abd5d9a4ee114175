#include "cguard/policy.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cguard/errors.h"

namespace cguard {
namespace {

constexpr const char* kPolicySchema = "cguard.policy.v1";

nlohmann::json matrix_json(const MatrixXd& m) {
  std::vector<double> data;
  data.reserve(m.size());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return {{"shape", {m.rows(), m.cols()}}, {"data", data}};
}

MatrixXd matrix_from_json(const nlohmann::json& j) {
  const int rows = j.at("shape").at(0).get<int>();
  const int cols = j.at("shape").at(1).get<int>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<int>(data.size()) != rows * cols) {
    throw Error(ErrorCode::kInvalidConfig, "matrix data size mismatch");
  }
  MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int c = 0; c < cols; ++c) m(i, c) = data[i * cols + c];
  return m;
}

std::vector<double> vec(const VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

VectorXd vec_from(const std::vector<double>& v) {
  return Eigen::Map<const VectorXd>(v.data(), static_cast<int>(v.size()));
}

// Hidden chain M_{l-1} W_{l-1} ... M_1 W_1 evaluated at (s1, s2): one row per
// unit of the last hidden layer, one column per input.
MatrixXd hidden_chain(const Mlp& net, double s1, double s2) {
  VectorXd a(2);
  a << s1, s2;
  MatrixXd chain = MatrixXd::Identity(2, 2);
  const auto& layers = net.layers();
  for (std::size_t k = 0; k + 1 < layers.size(); ++k) {
    const VectorXd pre = layers[k].weights * a + layers[k].bias;
    a = pre.array().tanh();
    chain = (1.0 - a.array().square()).matrix().asDiagonal() *
            (layers[k].weights * chain);
  }
  return chain;
}

}  // namespace

AxisNetwork::AxisNetwork(Mlp net) : net_(std::move(net)) {
  if (net_.input_dim() != 2 || net_.output_dim() != 1) {
    throw Error(ErrorCode::kDimensionMismatch,
                "axis network must map R^2 -> R");
  }
}

AxisNetwork AxisNetwork::random(const std::vector<int>& hidden,
                                std::mt19937_64& rng) {
  std::vector<int> sizes = {2};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  return AxisNetwork(Mlp::random(sizes, rng));
}

double AxisNetwork::operator()(double s1, double s2) const {
  VectorXd x(2);
  x << s1, s2;
  return net_.forward(x)[0];
}

AxisSlopes axis_jacobian(const AxisNetwork& net, double s1, double s2) {
  const auto& layers = net.net().layers();
  const int l = static_cast<int>(layers.size());

  // Forward pass for the tanh derivative factors.
  std::vector<VectorXd> m_factors;
  VectorXd a(2);
  a << s1, s2;
  for (int k = 0; k + 1 < l; ++k) {
    const VectorXd t = (layers[k].weights * a + layers[k].bias).array().tanh();
    m_factors.push_back((1.0 - t.array().square()).matrix());
    a = t;
  }

  // Row vector product from the output layer down.
  Eigen::RowVectorXd g = layers[l - 1].weights;
  for (int k = l - 2; k >= 0; --k) {
    g = (g.array() * m_factors[k].transpose().array()).matrix() *
        layers[k].weights;
  }
  return {g[0], g[1]};
}

AxisNetwork project_weights(const AxisNetwork& net, int coupling_sign,
                            double epsilon) {
  Mlp out = net.net();
  auto& layers = out.mutable_layers();
  const int l = static_cast<int>(layers.size());
  for (int k = 0; k + 1 < l; ++k) {
    layers[k].weights = layers[k].weights.cwiseMax(epsilon);
  }
  auto& last = layers[l - 1].weights;
  if (coupling_sign > 0) {
    last = last.cwiseMin(-epsilon);
  } else {
    last = last.cwiseMax(epsilon);
  }
  return AxisNetwork(std::move(out));
}

bool is_projected(const AxisNetwork& net, int coupling_sign, double epsilon) {
  const auto& layers = net.net().layers();
  const int l = static_cast<int>(layers.size());
  for (int k = 0; k + 1 < l; ++k) {
    if (layers[k].weights.minCoeff() < epsilon) return false;
  }
  const auto& last = layers[l - 1].weights;
  return coupling_sign > 0 ? last.maxCoeff() <= -epsilon
                           : last.minCoeff() >= epsilon;
}

void InnerPolicyState::reset(int m) {
  s1 = VectorXd::Zero(m);
  s2 = VectorXd::Zero(m);
}

ConstrainedPolicy::ConstrainedPolicy(CoordinateTransform transform,
                                     std::vector<AxisNetwork> axes,
                                     double epsilon, double action_clip,
                                     double delta_t)
    : transform_(std::move(transform)),
      axes_(std::move(axes)),
      epsilon_(epsilon),
      action_clip_(action_clip) {
  if (static_cast<int>(axes_.size()) != transform_.dim()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "one axis network per latent dimension is required");
  }
  if (transform_.wu_inv.size() == 0) transform_.wu_inv = transform_.wu.inverse();
  state_.delta_t = delta_t;
  state_.reset(dim());
  log_std_ = VectorXd::Zero(dim());
}

ConstrainedPolicy ConstrainedPolicy::random(CoordinateTransform transform,
                                            const PolicyConfig& config) {
  std::mt19937_64 rng(static_cast<std::uint64_t>(config.seed));
  std::vector<AxisNetwork> axes;
  for (int i = 0; i < transform.dim(); ++i) {
    axes.push_back(AxisNetwork::random(config.hidden, rng));
  }
  ConstrainedPolicy policy(std::move(transform), std::move(axes),
                           config.epsilon, config.action_clip, config.delta_t);
  policy.log_std_.setConstant(config.init_log_std);
  policy.project();
  return policy;
}

VectorXd ConstrainedPolicy::latent(const VectorXd& y) const {
  return transform_.wy * y;
}

VectorXd ConstrainedPolicy::inner(const VectorXd& s1,
                                  const VectorXd& s2) const {
  VectorXd v(dim());
  for (int i = 0; i < dim(); ++i) v[i] = axes_[i](s1[i], s2[i]);
  return v;
}

VectorXd ConstrainedPolicy::mean_action(const VectorXd& y,
                                        const VectorXd& s2) const {
  return transform_.wu_inv * inner(latent(y), s2);
}

VectorXd ConstrainedPolicy::clip(const VectorXd& u) const {
  return u.cwiseMax(-action_clip_).cwiseMin(action_clip_);
}

PolicyJacobians ConstrainedPolicy::slopes(const VectorXd& y,
                                          const VectorXd& s2) const {
  const VectorXd s1 = latent(y);
  PolicyJacobians p{MatrixXd::Zero(dim(), dim()), MatrixXd::Zero(dim(), dim())};
  for (int i = 0; i < dim(); ++i) {
    const AxisSlopes s = axis_jacobian(axes_[i], s1[i], s2[i]);
    p.d_s1(i, i) = s.d_s1;
    p.d_s2(i, i) = s.d_s2;
  }
  return p;
}

std::vector<int> ConstrainedPolicy::coupling_signs() const {
  std::vector<int> signs;
  for (int i = 0; i < dim(); ++i) {
    signs.push_back(transform_.coupling_diag[i] > 0.0 ? 1 : -1);
  }
  return signs;
}

void ConstrainedPolicy::project() {
  const auto signs = coupling_signs();
  for (int i = 0; i < dim(); ++i) {
    axes_[i] = project_weights(axes_[i], signs[i], epsilon_);
  }
}

bool ConstrainedPolicy::feasible() const {
  const auto signs = coupling_signs();
  for (int i = 0; i < dim(); ++i) {
    if (!is_projected(axes_[i], signs[i], epsilon_)) return false;
  }
  return true;
}

ClosedLoopPolicy ConstrainedPolicy::closed_loop() const {
  ConstrainedPolicy copy = *this;
  ClosedLoopPolicy loop;
  loop.action = [copy](const VectorXd& y, const VectorXd& s2) {
    return copy.action(y, s2);
  };
  loop.slopes = [copy](const VectorXd& y, const VectorXd& s2) {
    return copy.slopes(y, s2);
  };
  return loop;
}

MatrixXd ConstrainedPolicy::mean_batch(const MatrixXd& y, const MatrixXd& s2,
                                       BatchCache* cache) const {
  const int n = static_cast<int>(y.cols());
  const MatrixXd z = transform_.wy * y;
  MatrixXd v(dim(), n);
  if (cache) cache->axes.resize(dim());
  MatrixXd input(2, n);
  for (int i = 0; i < dim(); ++i) {
    input.row(0) = z.row(i);
    input.row(1) = s2.row(i);
    v.row(i) = axes_[i].net().forward_batch(
        input, cache ? &cache->axes[i] : nullptr);
  }
  return transform_.wu_inv * v;
}

MatrixXd ConstrainedPolicy::backward_batch(
    const BatchCache& cache, const MatrixXd& grad_mean,
    std::vector<Mlp::Gradients>* grads) const {
  const MatrixXd grad_v = transform_.wu_inv.transpose() * grad_mean;
  MatrixXd grad_z(dim(), grad_mean.cols());
  for (int i = 0; i < dim(); ++i) {
    const MatrixXd gi = axes_[i].net().backward(
        cache.axes[i], grad_v.row(i), grads ? &(*grads)[i] : nullptr);
    grad_z.row(i) = gi.row(0);
  }
  return transform_.wy.transpose() * grad_z;
}

int ConstrainedPolicy::parameter_count() const {
  int n = static_cast<int>(log_std_.size());
  for (const auto& a : axes_) n += a.net().parameter_count();
  return n;
}

void ConstrainedPolicy::flatten(double* out) const {
  for (const auto& a : axes_) {
    a.net().flatten(out);
    out += a.net().parameter_count();
  }
  for (int i = 0; i < log_std_.size(); ++i) *out++ = log_std_[i];
}

void ConstrainedPolicy::unflatten(const double* in) {
  for (auto& a : axes_) {
    a.mutable_net().unflatten(in);
    in += a.net().parameter_count();
  }
  for (int i = 0; i < log_std_.size(); ++i) log_std_[i] = *in++;
}

nlohmann::json to_json(const CoordinateTransform& t) {
  return {{"wy", matrix_json(t.wy)},
          {"wu", matrix_json(t.wu)},
          {"eigenvalues", vec(t.eigenvalues)},
          {"coupling", matrix_json(t.coupling)}};
}

CoordinateTransform transform_from_json(const nlohmann::json& j) {
  CoordinateTransform t;
  t.wy = matrix_from_json(j.at("wy"));
  t.wu = matrix_from_json(j.at("wu"));
  t.wu_inv = t.wu.inverse();
  t.eigenvalues = vec_from(j.at("eigenvalues").get<std::vector<double>>());
  t.coupling = matrix_from_json(j.at("coupling"));
  t.coupling_diag = t.coupling.diagonal();
  return t;
}

nlohmann::json ConstrainedPolicy::to_json() const {
  nlohmann::json axes = nlohmann::json::array();
  for (const auto& a : axes_) axes.push_back(a.net().to_json());
  return {{"schema", kPolicySchema},
          {"epsilon", epsilon_},
          {"action_clip", action_clip_},
          {"delta_t", state_.delta_t},
          {"coupling_signs", coupling_signs()},
          {"transform", cguard::to_json(transform_)},
          {"log_std", vec(log_std_)},
          {"axes", axes}};
}

ConstrainedPolicy ConstrainedPolicy::from_json(const nlohmann::json& j) {
  if (j.value("schema", std::string()) != kPolicySchema) {
    throw Error(ErrorCode::kInvalidConfig,
                std::string("policy checkpoint schema must be ") + kPolicySchema);
  }
  std::vector<AxisNetwork> axes;
  for (const auto& a : j.at("axes")) axes.emplace_back(Mlp::from_json(a));
  ConstrainedPolicy p(transform_from_json(j.at("transform")), std::move(axes),
                      j.at("epsilon").get<double>(),
                      j.at("action_clip").get<double>(),
                      j.at("delta_t").get<double>());
  p.log_std_ = vec_from(j.at("log_std").get<std::vector<double>>());
  return p;
}

PolicyOutput policy_forward(ConstrainedPolicy& policy, const VectorXd& y) {
  if (y.size() != policy.dim()) {
    throw Error(ErrorCode::kDimensionMismatch, "state dimension mismatch");
  }
  if (!y.allFinite()) {
    throw Error(ErrorCode::kNonFiniteInput, "policy input is not finite");
  }
  InnerPolicyState& st = policy.state();
  PolicyOutput out;
  out.s1 = policy.latent(y);
  out.s2 = st.s2;
  out.cache.resize(policy.dim());
  VectorXd v(policy.dim());
  MatrixXd input(2, 1);
  for (int i = 0; i < policy.dim(); ++i) {
    input << out.s1[i], out.s2[i];
    v[i] = policy.axes()[i].net().forward_batch(input, &out.cache[i])(0, 0);
  }
  out.mean = policy.transform().wu_inv * v;
  out.u = policy.clip(out.mean);
  st.s1 = out.s1;
  st.s2 += out.s1 * st.delta_t;
  return out;
}

ConstraintReport verify_constraint_satisfaction(
    const ConstrainedPolicy& policy, const std::vector<RegionPoint>& region,
    double weight_epsilon, double saturation_threshold) {
  const int m = policy.dim();
  const VectorXd& b = policy.transform().coupling_diag;
  ConstraintReport report;
  report.worst_s1.assign(m, -std::numeric_limits<double>::infinity());
  report.worst_s2.assign(m, -std::numeric_limits<double>::infinity());
  std::vector<double> eps1(m, std::numeric_limits<double>::infinity());
  std::vector<int> width(m, 1);

  struct Slope {
    double s1, s2;
  };
  std::vector<std::vector<Slope>> kept(m);
  for (const RegionPoint& pt : region) {
    ++report.samples;
    const VectorXd s1 = policy.latent(pt.y);
    bool saturated = false;
    for (int i = 0; i < m; ++i) {
      VectorXd x(2);
      x << s1[i], pt.s2[i];
      if (policy.axes()[i].net().max_hidden_preactivation(x) >
          saturation_threshold) {
        saturated = true;
      }
    }
    if (saturated) {
      ++report.saturated;
      continue;
    }
    for (int i = 0; i < m; ++i) {
      const AxisNetwork& net = policy.axes()[i];
      const AxisSlopes s = axis_jacobian(net, s1[i], pt.s2[i]);
      kept[i].push_back({s.d_s1 * b[i], s.d_s2 * b[i]});
      if (net.net().num_layers() > 1) {
        const MatrixXd chain = hidden_chain(net.net(), s1[i], pt.s2[i]);
        width[i] = static_cast<int>(chain.rows());
        eps1[i] = std::min(eps1[i], chain.minCoeff());
      } else {
        eps1[i] = 1.0;
      }
    }
  }

  report.satisfied = true;
  for (int i = 0; i < m; ++i) {
    const double e1 = std::isfinite(eps1[i]) ? eps1[i] : 0.0;
    report.epsilon_prime.push_back(width[i] * e1 * weight_epsilon *
                                   std::abs(b[i]));
    for (const Slope& s : kept[i]) {
      report.worst_s1[i] = std::max(report.worst_s1[i], s.s1);
      report.worst_s2[i] = std::max(report.worst_s2[i], s.s2);
    }
    if (!kept[i].empty()) {
      const double bound = -report.epsilon_prime[i];
      if (!(report.worst_s1[i] < bound && report.worst_s2[i] < bound &&
            report.epsilon_prime[i] > 0.0)) {
        report.satisfied = false;
      }
    }
  }
  return report;
}

}  // namespace cguard
