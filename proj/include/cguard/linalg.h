#pragma once

#include <Eigen/Dense>

#include <vector>

namespace cguard {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Skew-diagonal permutation: ones on the anti-diagonal. Symmetric and
// involutory, so P == P^T == P^-1.
MatrixXd skew_permutation(int n);

// Largest eigenvalue of the symmetric part M + M^T.
double max_sym_eigenvalue(const MatrixXd& m);

// Max absolute entry strictly below / above the diagonal.
double max_abs_lower(const MatrixXd& m);
double max_abs_upper(const MatrixXd& m);
double max_abs_offdiag(const MatrixXd& m);

double smallest_singular_value(const MatrixXd& m);

bool all_finite(const MatrixXd& m);

// Central finite-difference Jacobian of a vector map.
template <typename Fn>
MatrixXd finite_difference_jacobian(Fn&& fn, const VectorXd& x,
                                    double step = 1e-6) {
  const VectorXd f0 = fn(x);
  MatrixXd jac(f0.size(), x.size());
  for (int j = 0; j < x.size(); ++j) {
    const double h = step * std::max(1.0, std::abs(x[j]));
    VectorXd xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    jac.col(j) = (fn(xp) - fn(xm)) / (2.0 * h);
  }
  return jac;
}

}  // namespace cguard
