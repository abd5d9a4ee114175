#include "cguard/mlp.h"

#include <cmath>
#include <string>

#include "cguard/errors.h"

namespace cguard {

Mlp::Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const auto& l = layers_[k];
    if (l.bias.size() != l.weights.rows() ||
        (k > 0 && l.weights.cols() != layers_[k - 1].weights.rows())) {
      throw Error(ErrorCode::kDimensionMismatch,
                  "layer " + std::to_string(k) + " shape mismatch");
    }
  }
}

Mlp Mlp::random(const std::vector<int>& sizes, std::mt19937_64& rng,
                double output_scale) {
  std::vector<DenseLayer> layers;
  for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(sizes[k]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    DenseLayer l;
    l.weights.resize(sizes[k + 1], sizes[k]);
    l.bias.resize(sizes[k + 1]);
    for (int i = 0; i < l.weights.size(); ++i) l.weights.data()[i] = dist(rng);
    for (int i = 0; i < l.bias.size(); ++i) l.bias[i] = dist(rng);
    if (k + 2 == sizes.size()) {
      l.weights *= output_scale;
      l.bias *= output_scale;
    }
    layers.push_back(std::move(l));
  }
  return Mlp(std::move(layers));
}

Mlp Mlp::zeros(const std::vector<int>& sizes) {
  std::vector<DenseLayer> layers;
  for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
    layers.push_back({MatrixXd::Zero(sizes[k + 1], sizes[k]),
                      VectorXd::Zero(sizes[k + 1])});
  }
  return Mlp(std::move(layers));
}

int Mlp::input_dim() const {
  return layers_.empty() ? 0 : static_cast<int>(layers_.front().weights.cols());
}

int Mlp::output_dim() const {
  return layers_.empty() ? 0 : static_cast<int>(layers_.back().weights.rows());
}

std::vector<int> Mlp::sizes() const {
  std::vector<int> s;
  if (layers_.empty()) return s;
  s.push_back(input_dim());
  for (const auto& l : layers_) s.push_back(static_cast<int>(l.weights.rows()));
  return s;
}

VectorXd Mlp::forward(const VectorXd& x) const {
  VectorXd a = x;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    VectorXd pre = layers_[k].weights * a + layers_[k].bias;
    a = k + 1 < layers_.size() ? VectorXd(pre.array().tanh()) : pre;
  }
  return a;
}

MatrixXd Mlp::forward_batch(const MatrixXd& x, Cache* cache) const {
  if (cache) {
    cache->inputs.resize(layers_.size());
    cache->pre.resize(layers_.size());
  }
  MatrixXd a = x;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    MatrixXd pre = layers_[k].weights * a;
    pre.colwise() += layers_[k].bias;
    if (cache) cache->inputs[k] = a;
    if (k + 1 < layers_.size()) {
      a = pre.array().tanh();
    } else {
      a = pre;
    }
    if (cache) cache->pre[k] = std::move(pre);
  }
  return a;
}

MatrixXd Mlp::backward(const Cache& cache, const MatrixXd& grad_out,
                       Gradients* grads) const {
  MatrixXd delta = grad_out;
  for (int k = num_layers() - 1; k >= 0; --k) {
    if (k + 1 < num_layers()) {
      // tanh'(p) = 1 - tanh(p)^2; the next layer's input is tanh(p).
      const MatrixXd& act = cache.inputs[k + 1];
      delta = delta.array() * (1.0 - act.array().square());
    }
    if (grads) {
      grads->weights[k].noalias() += delta * cache.inputs[k].transpose();
      grads->bias[k] += delta.rowwise().sum();
    }
    delta = layers_[k].weights.transpose() * delta;
  }
  return delta;
}

MatrixXd Mlp::input_jacobian(const VectorXd& x) const {
  MatrixXd jac = MatrixXd::Identity(input_dim(), input_dim());
  VectorXd a = x;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const VectorXd pre = layers_[k].weights * a + layers_[k].bias;
    jac = layers_[k].weights * jac;
    if (k + 1 < layers_.size()) {
      a = pre.array().tanh();
      jac = (1.0 - a.array().square()).matrix().asDiagonal() * jac;
    }
  }
  return jac;
}

double Mlp::max_hidden_preactivation(const VectorXd& x) const {
  double worst = 0.0;
  VectorXd a = x;
  for (std::size_t k = 0; k + 1 < layers_.size(); ++k) {
    const VectorXd pre = layers_[k].weights * a + layers_[k].bias;
    worst = std::max(worst, pre.cwiseAbs().maxCoeff());
    a = pre.array().tanh();
  }
  return worst;
}

Mlp::Gradients Mlp::zero_gradients() const {
  Gradients g;
  for (const auto& l : layers_) {
    g.weights.push_back(MatrixXd::Zero(l.weights.rows(), l.weights.cols()));
    g.bias.push_back(VectorXd::Zero(l.bias.size()));
  }
  return g;
}

int Mlp::parameter_count() const {
  int n = 0;
  for (const auto& l : layers_)
    n += static_cast<int>(l.weights.size() + l.bias.size());
  return n;
}

namespace {

// Row-major copies so the flat layout matches the checkpoint layout.
void copy_out(const MatrixXd& m, double*& out) {
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) *out++ = m(i, j);
}

void copy_in(MatrixXd& m, const double*& in) {
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) m(i, j) = *in++;
}

}  // namespace

void Mlp::flatten(double* out) const {
  for (const auto& l : layers_) {
    copy_out(l.weights, out);
    for (int i = 0; i < l.bias.size(); ++i) *out++ = l.bias[i];
  }
}

void Mlp::unflatten(const double* in) {
  for (auto& l : layers_) {
    copy_in(l.weights, in);
    for (int i = 0; i < l.bias.size(); ++i) l.bias[i] = *in++;
  }
}

void Mlp::flatten(const Gradients& g, double* out) {
  for (std::size_t k = 0; k < g.weights.size(); ++k) {
    copy_out(g.weights[k], out);
    for (int i = 0; i < g.bias[k].size(); ++i) *out++ = g.bias[k][i];
  }
}

nlohmann::json Mlp::to_json() const {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : layers_) {
    std::vector<double> w;
    w.reserve(l.weights.size());
    for (int i = 0; i < l.weights.rows(); ++i)
      for (int j = 0; j < l.weights.cols(); ++j) w.push_back(l.weights(i, j));
    layers.push_back({{"shape", {l.weights.rows(), l.weights.cols()}},
                      {"weights", w},
                      {"bias", std::vector<double>(l.bias.data(),
                                                   l.bias.data() + l.bias.size())}});
  }
  return {{"layers", layers}};
}

Mlp Mlp::from_json(const nlohmann::json& j) {
  std::vector<DenseLayer> layers;
  for (const auto& lj : j.at("layers")) {
    const int rows = lj.at("shape").at(0).get<int>();
    const int cols = lj.at("shape").at(1).get<int>();
    const auto w = lj.at("weights").get<std::vector<double>>();
    const auto b = lj.at("bias").get<std::vector<double>>();
    if (static_cast<int>(w.size()) != rows * cols ||
        static_cast<int>(b.size()) != rows) {
      throw Error(ErrorCode::kInvalidConfig, "layer array size mismatch");
    }
    DenseLayer l;
    l.weights.resize(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) l.weights(r, c) = w[r * cols + c];
    l.bias = Eigen::Map<const VectorXd>(b.data(), rows);
    layers.push_back(std::move(l));
  }
  return Mlp(std::move(layers));
}

}  // namespace cguard
