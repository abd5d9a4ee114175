#include "cguard/contraction.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "cguard/errors.h"

namespace cguard {
namespace {

constexpr double kEigenSeparation = 1e-8;
constexpr double kSingularTol = 1e-10;
constexpr double kCouplingTol = 1e-10;

void require_square(const MatrixXd& m, int n, const char* name) {
  if (m.rows() != n || m.cols() != n) {
    throw Error(ErrorCode::kDimensionMismatch,
                std::string(name) + " must be " + std::to_string(n) + "x" +
                    std::to_string(n));
  }
}

void check_coupling(const MatrixXd& coupling) {
  for (int i = 0; i < coupling.rows(); ++i) {
    if (std::abs(coupling(i, i)) <= kCouplingTol) {
      throw Error(ErrorCode::kZeroCouplingDiagonal,
                  "b_" + std::to_string(i) +
                      " vanishes; axis is not controllable by the policy");
    }
  }
}

MatrixXd checked_product(const MatrixXd& wy, const MatrixXd& jac_u) {
  const int m = static_cast<int>(wy.rows());
  require_square(wy, m, "W_y");
  require_square(jac_u, m, "jac_u");
  if (smallest_singular_value(wy) <= kSingularTol) {
    throw Error(ErrorCode::kSingularInput, "W_y is singular");
  }
  MatrixXd prod = wy * jac_u;
  const double scale = std::max(1.0, prod.cwiseAbs().maxCoeff());
  if (smallest_singular_value(prod) <= kSingularTol * scale) {
    throw Error(ErrorCode::kSingularInput, "W_y * jac_u is rank deficient");
  }
  return prod;
}

}  // namespace

CoordinateTransform CoordinateTransform::identity(int m) {
  CoordinateTransform t;
  t.wy = MatrixXd::Identity(m, m);
  t.wu = MatrixXd::Identity(m, m);
  t.wu_inv = MatrixXd::Identity(m, m);
  t.eigenvalues = VectorXd::Zero(m);
  t.coupling = MatrixXd::Identity(m, m);
  t.coupling_diag = VectorXd::Ones(m);
  return t;
}

EigenBasis build_wy(const MatrixXd& jac_y) {
  const int m = static_cast<int>(jac_y.rows());
  require_square(jac_y, m, "jac_y");
  if (!jac_y.allFinite()) {
    throw Error(ErrorCode::kNonFiniteInput, "jac_y has non-finite entries");
  }

  // Left eigenvectors of A are right eigenvectors of A^T.
  Eigen::EigenSolver<MatrixXd> solver(jac_y.transpose(), true);
  if (solver.info() != Eigen::Success) {
    throw Error(ErrorCode::kNonDiagonalizable, "eigensolver did not converge");
  }
  const Eigen::VectorXcd values = solver.eigenvalues();
  const Eigen::MatrixXcd vectors = solver.eigenvectors();

  const double scale = std::max(1.0, values.cwiseAbs().maxCoeff());
  for (int i = 0; i < m; ++i) {
    if (std::abs(values[i].imag()) > 1e-10 * scale) {
      throw Error(ErrorCode::kComplexEigenvalues,
                  "eigenvalue " + std::to_string(values[i].real()) + " + " +
                      std::to_string(values[i].imag()) + "i");
    }
  }

  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return values[a].real() > values[b].real();
  });
  for (int k = 1; k < m; ++k) {
    const double gap =
        values[order[k - 1]].real() - values[order[k]].real();
    if (gap < kEigenSeparation * scale) {
      throw Error(ErrorCode::kNonDiagonalizable,
                  "repeated eigenvalue near " +
                      std::to_string(values[order[k]].real()));
    }
  }

  EigenBasis basis;
  basis.wy.resize(m, m);
  basis.eigenvalues.resize(m);
  for (int k = 0; k < m; ++k) {
    VectorXd v = vectors.col(order[k]).real();
    v.normalize();
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0.0) v = -v;
    basis.wy.row(k) = v.transpose();
    basis.eigenvalues[k] = values[order[k]].real();
  }
  if (smallest_singular_value(basis.wy) <= kSingularTol) {
    throw Error(ErrorCode::kNonDiagonalizable, "eigenvector matrix is singular");
  }
  return basis;
}

InputTransform build_wu_qr(const MatrixXd& wy, const MatrixXd& jac_u) {
  const MatrixXd prod = checked_product(wy, jac_u);
  const int m = static_cast<int>(prod.rows());
  const MatrixXd p = skew_permutation(m);
  const MatrixXd x = p * prod;

  Eigen::HouseholderQR<MatrixXd> qr(x.transpose());
  MatrixXd q = qr.householderQ();
  MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int i = 0; i < m; ++i) {
    if (r(i, i) < 0.0) {
      r.row(i) *= -1.0;
      q.col(i) *= -1.0;
    }
  }

  InputTransform out;
  out.wu = p * q.transpose();
  // W_u^-1 = Q P since both factors are orthogonal.
  out.coupling = prod * (q * p);
  check_coupling(out.coupling);
  return out;
}

InputTransform build_wu_lu(const MatrixXd& wy, const MatrixXd& jac_u) {
  const MatrixXd prod = checked_product(wy, jac_u);
  const int m = static_cast<int>(prod.rows());
  const MatrixXd p = skew_permutation(m);
  const MatrixXd a = p * prod * p;

  MatrixXd l = MatrixXd::Identity(m, m);
  MatrixXd u = a;
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  for (int k = 0; k < m; ++k) {
    if (std::abs(u(k, k)) <= 1e-12 * scale) {
      throw Error(ErrorCode::kPivotFailure,
                  "zero pivot at column " + std::to_string(k));
    }
    for (int i = k + 1; i < m; ++i) {
      const double factor = u(i, k) / u(k, k);
      l(i, k) = factor;
      u.row(i) -= factor * u.row(k);
      u(i, k) = 0.0;
    }
  }

  InputTransform out;
  out.wu = p * u * p.transpose();
  out.coupling = prod * out.wu.inverse();
  check_coupling(out.coupling);
  return out;
}

CoordinateTransform build_transform(const MatrixXd& jac_y,
                                    const MatrixXd& jac_u, WuMethod method) {
  const EigenBasis basis = build_wy(jac_y);
  const InputTransform input = method == WuMethod::kQr
                                   ? build_wu_qr(basis.wy, jac_u)
                                   : build_wu_lu(basis.wy, jac_u);
  CoordinateTransform t;
  t.wy = basis.wy;
  t.eigenvalues = basis.eigenvalues;
  t.wu = input.wu;
  t.wu_inv = input.wu.inverse();
  t.coupling = input.coupling;
  t.coupling_diag = input.coupling.diagonal();
  return t;
}

MatrixXd generalized_jacobian(const MatrixXd& jac, const MatrixXd& theta,
                              const MatrixXd& theta_dot) {
  const int n = static_cast<int>(jac.rows());
  require_square(jac, n, "J");
  require_square(theta, n, "Theta");
  require_square(theta_dot, n, "Theta_dot");
  const double scale = std::max(1.0, theta.cwiseAbs().maxCoeff());
  if (smallest_singular_value(theta) <= 1e-12 * scale) {
    throw Error(ErrorCode::kSingularTheta, "Theta is not invertible");
  }
  const MatrixXd lhs = theta_dot + theta * jac;
  // F Theta = lhs  <=>  Theta^T F^T = lhs^T.
  return theta.transpose().fullPivLu().solve(lhs.transpose()).transpose();
}

SplitJacobian assemble_f(const MatrixXd& jac_y, const MatrixXd& jac_u,
                         const CoordinateTransform& transform,
                         const PolicyJacobians& policy,
                         const MatrixXd& wy_dot) {
  const int m = transform.dim();
  require_square(jac_y, m, "jac_y");
  require_square(jac_u, m, "jac_u");
  require_square(transform.wu, m, "W_u");
  require_square(policy.d_s1, m, "d_pi/d_s1");
  require_square(policy.d_s2, m, "d_pi/d_s2");
  if (wy_dot.size() != 0) require_square(wy_dot, m, "W_y_dot");

  const MatrixXd wy_inv = transform.wy.inverse();
  const MatrixXd wu_inv = transform.wu_inv.size() != 0
                              ? transform.wu_inv
                              : MatrixXd(transform.wu.inverse());
  const MatrixXd a = transform.wy * jac_y * wy_inv;
  const MatrixXd b = transform.wy * jac_u * wu_inv;

  SplitJacobian out;
  out.f1 = MatrixXd::Zero(2 * m, 2 * m);
  out.f1.topLeftCorner(m, m) = a;
  out.f1.topRightCorner(m, m) = b;
  out.f1.bottomLeftCorner(m, m) = policy.d_s1 * a + policy.d_s2;
  out.f1.bottomRightCorner(m, m) = policy.d_s1 * b;

  out.f2 = MatrixXd::Zero(2 * m, 2 * m);
  if (wy_dot.size() != 0) {
    const MatrixXd rate = wy_dot * wy_inv;
    out.f2.topLeftCorner(m, m) = rate;
    out.f2.bottomLeftCorner(m, m) = policy.d_s1 * rate;
  }
  return out;
}

bool uniformly_negative(const MatrixXd& m, double margin) {
  if (m.rows() != m.cols()) {
    throw Error(ErrorCode::kDimensionMismatch, "matrix must be square");
  }
  return max_sym_eigenvalue(m) < -margin;
}

TransformBuilder fixed_transform(CoordinateTransform transform) {
  return [t = std::move(transform)](const VectorXd&, const VectorXd&, double) {
    return t;
  };
}

TransformBuilder rebuild_transform(PlantModel plant, WuMethod method) {
  return [plant = std::move(plant), method](const VectorXd& y,
                                            const VectorXd& u, double t) {
    return build_transform(plant.jac_y(y, u, t), plant.jac_u(y, u, t), method);
  };
}

std::vector<VectorXd> box_grid(const VectorXd& lo, const VectorXd& hi, int n) {
  if (lo.size() != hi.size() || n < 1) {
    throw Error(ErrorCode::kDimensionMismatch, "grid bounds differ in size or n < 1");
  }
  const int dims = static_cast<int>(lo.size());
  std::size_t total = 1;
  for (int d = 0; d < dims; ++d) total *= static_cast<std::size_t>(n);

  std::vector<VectorXd> points;
  points.reserve(total);
  std::vector<int> idx(dims, 0);
  for (std::size_t k = 0; k < total; ++k) {
    VectorXd p(dims);
    for (int d = 0; d < dims; ++d) {
      p[d] = n == 1 ? 0.5 * (lo[d] + hi[d])
                    : lo[d] + (hi[d] - lo[d]) * idx[d] / (n - 1);
    }
    points.push_back(std::move(p));
    for (int d = dims - 1; d >= 0; --d) {
      if (++idx[d] < n) break;
      idx[d] = 0;
    }
  }
  return points;
}

std::vector<RegionPoint> region_from_grid(const std::vector<VectorXd>& grid,
                                          int dim_y, double t) {
  std::vector<RegionPoint> region;
  region.reserve(grid.size());
  for (const VectorXd& p : grid) {
    if (p.size() != 2 * dim_y) {
      throw Error(ErrorCode::kDimensionMismatch,
                  "grid points must stack (y, s2)");
    }
    region.push_back({p.head(dim_y), p.tail(dim_y), t});
  }
  return region;
}

int ContractionCertificate::failed_count() const {
  return static_cast<int>(std::count_if(
      grid.begin(), grid.end(), [](const auto& s) { return !s.ok; }));
}

double ContractionCertificate::worst_f1_margin() const {
  double worst = -std::numeric_limits<double>::infinity();
  for (const auto& s : grid)
    if (s.error.empty()) worst = std::max(worst, s.f1_margin);
  return worst;
}

double ContractionCertificate::worst_margin() const {
  double worst = -std::numeric_limits<double>::infinity();
  for (const auto& s : grid)
    if (s.error.empty()) worst = std::max(worst, s.margin);
  return worst;
}

ContractionCertificate certify_theorem1(const PlantModel& plant,
                                        const TransformBuilder& builder,
                                        const ClosedLoopPolicy& policy,
                                        const std::vector<RegionPoint>& region,
                                        double epsilon,
                                        const CertifyOptions& options) {
  if (region.empty()) {
    throw Error(ErrorCode::kDimensionMismatch, "region is empty");
  }
  if (!(epsilon > 0.0)) {
    throw Error(ErrorCode::kInvalidConfig, "epsilon must be positive");
  }

  ContractionCertificate cert;
  cert.epsilon = epsilon;
  cert.grid.resize(region.size());
  cert.has_wy_dot_diagnostic = options.wy_dot_diagnostic;

  double nu_plus = -std::numeric_limits<double>::infinity();
  double nu_plus_fd = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < region.size(); ++k) {
    const RegionPoint& pt = region[k];
    CertificateSample& sample = cert.grid[k];
    sample.point = pt;
    try {
      sample.u = policy.action(pt.y, pt.s2);
      const MatrixXd jy = plant.jac_y(pt.y, sample.u, pt.t);
      const MatrixXd ju = plant.jac_u(pt.y, sample.u, pt.t);
      const CoordinateTransform transform = builder(pt.y, sample.u, pt.t);
      const PolicyJacobians slopes = policy.slopes(pt.y, pt.s2);

      // W_y is treated as frozen for the verdict.
      const SplitJacobian split = assemble_f(jy, ju, transform, slopes);
      sample.f1_margin = max_sym_eigenvalue(split.f1);
      sample.margin = max_sym_eigenvalue(split.f1 + split.f2);
      nu_plus = std::max(nu_plus, max_sym_eigenvalue(split.f2));

      if (options.wy_dot_diagnostic) {
        const VectorXd ydot = plant.f(pt.y, sample.u, pt.t);
        const double h = options.wy_dot_step;
        const MatrixXd wp = builder(pt.y + h * ydot, sample.u, pt.t + h).wy;
        const MatrixXd wm = builder(pt.y - h * ydot, sample.u, pt.t - h).wy;
        const MatrixXd wy_dot = (wp - wm) / (2.0 * h);
        const SplitJacobian diag = assemble_f(jy, ju, transform, slopes, wy_dot);
        nu_plus_fd = std::max(nu_plus_fd, max_sym_eigenvalue(diag.f2));
      }
    } catch (const Error& e) {
      sample.error = e.what();
    }
  }

  cert.nu_plus = std::isfinite(nu_plus) ? nu_plus : 0.0;
  cert.nu_plus_wy_dot = std::isfinite(nu_plus_fd) ? nu_plus_fd : 0.0;
  const double bound = -(epsilon + std::max(cert.nu_plus, 0.0));
  cert.verdict = true;
  for (auto& sample : cert.grid) {
    sample.ok = sample.error.empty() && sample.f1_margin < bound;
    cert.verdict = cert.verdict && sample.ok;
  }
  return cert;
}

namespace {

std::vector<double> stacked_point(const RegionPoint& p) {
  std::vector<double> out(p.y.data(), p.y.data() + p.y.size());
  out.insert(out.end(), p.s2.data(), p.s2.data() + p.s2.size());
  return out;
}

}  // namespace

nlohmann::json to_json(const ContractionCertificate& cert, int max_violations) {
  nlohmann::json violations = nlohmann::json::array();
  int listed = 0;
  const CertificateSample* worst = nullptr;
  for (const auto& s : cert.grid) {
    if (!worst || s.margin > worst->margin) worst = &s;
    if (s.ok || listed >= max_violations) continue;
    nlohmann::json entry = {{"point", stacked_point(s.point)},
                            {"f1_margin", s.f1_margin},
                            {"margin", s.margin}};
    if (!s.error.empty()) entry["error"] = s.error;
    violations.push_back(std::move(entry));
    ++listed;
  }
  const int failed = cert.failed_count();
  nlohmann::json out = {{"epsilon", cert.epsilon},
                        {"nu_plus", cert.nu_plus},
                        {"samples", cert.grid.size()},
                        {"failed", failed},
                        {"worst_margin", cert.worst_margin()},
                        {"worst_f1_margin", cert.worst_f1_margin()},
                        {"violations", std::move(violations)},
                        {"violations_truncated", failed > listed},
                        {"verdict", cert.verdict ? "pass" : "fail"}};
  if (worst) out["worst_point"] = stacked_point(worst->point);
  if (cert.has_wy_dot_diagnostic) out["nu_plus_wy_dot"] = cert.nu_plus_wy_dot;
  return out;
}

void write_certificate_csv(const std::string& path,
                           const ContractionCertificate& cert) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kInvalidConfig, "cannot write " + path);
  const int m = cert.grid.empty() ? 0 : static_cast<int>(cert.grid[0].point.y.size());
  out << "sample";
  for (int i = 0; i < m; ++i) out << ",y" << i;
  for (int i = 0; i < m; ++i) out << ",s2_" << i;
  out << ",f1_margin,margin,ok\n";
  out.precision(10);
  for (std::size_t k = 0; k < cert.grid.size(); ++k) {
    const auto& s = cert.grid[k];
    out << k;
    for (double v : stacked_point(s.point)) out << ',' << v;
    out << ',' << s.f1_margin << ',' << s.margin << ',' << (s.ok ? 1 : 0) << '\n';
  }
}

Eigen::Matrix2d hierarchical_block(double lambda, double b,
                                   const AxisSlopes& slopes) {
  Eigen::Matrix2d block;
  block << lambda, b, slopes.d_s1 * lambda + slopes.d_s2, slopes.d_s1 * b;
  return block;
}

HierarchicalCheck check_hierarchical_blocks(
    const std::vector<double>& lambdas, const std::vector<double>& b_diag,
    const std::vector<std::vector<AxisSlopes>>& slopes, double epsilon) {
  if (lambdas.size() != b_diag.size() || lambdas.size() != slopes.size()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "lambdas, b_diag and slopes must have equal length");
  }
  HierarchicalCheck out;
  out.verdict = true;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    double first = -std::numeric_limits<double>::infinity();
    double second = -std::numeric_limits<double>::infinity();
    for (const AxisSlopes& s : slopes[i]) {
      first = std::max(first, s.d_s1 * b_diag[i] + lambdas[i]);
      second = std::max(second, s.d_s2 * b_diag[i]);
    }
    const bool ok = !slopes[i].empty() && first < -epsilon && second < -epsilon;
    out.axis_ok.push_back(ok);
    out.first_margin.push_back(first);
    out.second_margin.push_back(second);
    out.verdict = out.verdict && ok;
  }
  return out;
}

HierarchicalCheck check_hierarchical_blocks(
    const std::vector<double>& lambdas, const std::vector<double>& b_diag,
    const std::vector<AxisSlopes>& slopes, double epsilon) {
  std::vector<std::vector<AxisSlopes>> wrapped;
  wrapped.reserve(slopes.size());
  for (const auto& s : slopes) wrapped.push_back({s});
  return check_hierarchical_blocks(lambdas, b_diag, wrapped, epsilon);
}

}  // namespace cguard
