#include "cguard/linalg.h"

#include <algorithm>
#include <cmath>

namespace cguard {

MatrixXd skew_permutation(int n) {
  MatrixXd p = MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) p(i, n - 1 - i) = 1.0;
  return p;
}

double max_sym_eigenvalue(const MatrixXd& m) {
  const MatrixXd sym = m + m.transpose();
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(sym, Eigen::EigenvaluesOnly);
  return solver.eigenvalues().maxCoeff();
}

double max_abs_lower(const MatrixXd& m) {
  double worst = 0.0;
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < std::min<int>(i, m.cols()); ++j)
      worst = std::max(worst, std::abs(m(i, j)));
  return worst;
}

double max_abs_upper(const MatrixXd& m) {
  return max_abs_lower(m.transpose());
}

double max_abs_offdiag(const MatrixXd& m) {
  return std::max(max_abs_lower(m), max_abs_upper(m));
}

double smallest_singular_value(const MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<MatrixXd> svd(m);
  return svd.singularValues().minCoeff();
}

bool all_finite(const MatrixXd& m) { return m.allFinite(); }

}  // namespace cguard
