#pragma once

#include <random>
#include <vector>

#include <json.hpp>

#include "cguard/linalg.h"

namespace cguard {

struct DenseLayer {
  MatrixXd weights;  // out x in
  VectorXd bias;
};

/// Fully connected network, tanh on every layer except the last (linear).
/// Batched calls take one sample per column.
class Mlp {
 public:
  struct Cache {
    std::vector<MatrixXd> inputs;  // input to each layer
    std::vector<MatrixXd> pre;     // pre-activation of each layer
  };

  struct Gradients {
    std::vector<MatrixXd> weights;
    std::vector<VectorXd> bias;
  };

  Mlp() = default;
  explicit Mlp(std::vector<DenseLayer> layers);

  // sizes = {in, hidden..., out}. Weights and biases ~ U(-1/sqrt(fan_in), +).
  static Mlp random(const std::vector<int>& sizes, std::mt19937_64& rng,
                    double output_scale = 1.0);
  static Mlp zeros(const std::vector<int>& sizes);

  int input_dim() const;
  int output_dim() const;
  int num_layers() const { return static_cast<int>(layers_.size()); }
  std::vector<int> sizes() const;

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& mutable_layers() { return layers_; }

  VectorXd forward(const VectorXd& x) const;
  MatrixXd forward_batch(const MatrixXd& x, Cache* cache = nullptr) const;

  // Accumulates parameter gradients for dL/d(output) = grad_out and returns
  // dL/d(input).
  MatrixXd backward(const Cache& cache, const MatrixXd& grad_out,
                    Gradients* grads) const;

  // d(output)/d(input) at x, out x in.
  MatrixXd input_jacobian(const VectorXd& x) const;

  // Largest |pre-activation| among hidden (tanh) units at x.
  double max_hidden_preactivation(const VectorXd& x) const;

  Gradients zero_gradients() const;

  int parameter_count() const;
  // Layer-major: W (row-major) then b, for each layer.
  void flatten(double* out) const;
  void unflatten(const double* in);
  static void flatten(const Gradients& g, double* out);

  nlohmann::json to_json() const;
  static Mlp from_json(const nlohmann::json& j);

 private:
  std::vector<DenseLayer> layers_;
};

}  // namespace cguard
