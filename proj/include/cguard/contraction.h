#pragma once

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cguard/linalg.h"

namespace cguard {

/// First-order plant ydot = f(y, u, t) together with its analytic Jacobians.
/// Action and state have the same dimension.
struct PlantModel {
  using Rhs = std::function<VectorXd(const VectorXd&, const VectorXd&, double)>;
  using Jac = std::function<MatrixXd(const VectorXd&, const VectorXd&, double)>;

  int dim_y = 0;
  int dim_u = 0;
  Rhs f;
  Jac jac_y;
  Jac jac_u;
};

/// The pair (W_y, W_u) with z = W_y y and u = W_u^-1 v, plus the quantities
/// the per-axis constraints are written in: eigenvalues of df/dy and the
/// coupling matrix B = W_y (df/du) W_u^-1.
struct CoordinateTransform {
  MatrixXd wy;
  MatrixXd wu;
  MatrixXd wu_inv;
  VectorXd eigenvalues;
  VectorXd coupling_diag;
  MatrixXd coupling;

  int dim() const { return static_cast<int>(wy.rows()); }
  static CoordinateTransform identity(int m);
};

struct EigenBasis {
  MatrixXd wy;
  VectorXd eigenvalues;
};

struct InputTransform {
  MatrixXd wu;
  MatrixXd coupling;
};

enum class WuMethod { kQr, kLu };

// Rows of W_y are unit-norm left eigenvectors of jac_y, ordered by descending
// eigenvalue (stable on ties); each row's largest-magnitude entry is positive.
// Throws kComplexEigenvalues or kNonDiagonalizable (separation < 1e-8).
EigenBasis build_wy(const MatrixXd& jac_y);

// X = P (W_y jac_u), X^T = QR, W_u = P Q^T. R is sign-normalized to a
// positive diagonal so B = P R^T P is upper triangular with b_ii > 0.
InputTransform build_wu_qr(const MatrixXd& wy, const MatrixXd& jac_u);

// P (W_y jac_u) P = LU (Doolittle, no pivoting), W_u = P U P^T, which
// gives B = P L P: upper triangular with unit diagonal. A zero pivot throws
// kPivotFailure.
InputTransform build_wu_lu(const MatrixXd& wy, const MatrixXd& jac_u);

CoordinateTransform build_transform(const MatrixXd& jac_y,
                                    const MatrixXd& jac_u,
                                    WuMethod method = WuMethod::kQr);

/// F = (Theta_dot + Theta J) Theta^-1.
MatrixXd generalized_jacobian(const MatrixXd& jac, const MatrixXd& theta,
                              const MatrixXd& theta_dot);

/// Inner-policy slopes d(pi_z)/d(s1), d(pi_z)/d(s2). For the per-axis
/// architecture these are diagonal.
struct PolicyJacobians {
  MatrixXd d_s1;
  MatrixXd d_s2;
};

struct SplitJacobian {
  MatrixXd f1;
  MatrixXd f2;
};

// Constant part F1 (W_y treated as frozen) and the W_y-rate part F2 of the
// closed-loop generalized Jacobian. An empty wy_dot means zero.
SplitJacobian assemble_f(const MatrixXd& jac_y, const MatrixXd& jac_u,
                         const CoordinateTransform& transform,
                         const PolicyJacobians& policy,
                         const MatrixXd& wy_dot = MatrixXd());

// max eig(M + M^T) < -margin. The margin is applied to the symmetric sum as
// written, not halved.
bool uniformly_negative(const MatrixXd& m, double margin);

/// One sample of the operating region: plant state, integrator state, time.
struct RegionPoint {
  VectorXd y;
  VectorXd s2;
  double t = 0.0;
};

/// Closed-loop view of a policy used by the certifier. `action` returns the
/// applied u; `slopes` returns the inner-policy Jacobians at the same point.
struct ClosedLoopPolicy {
  std::function<VectorXd(const VectorXd& y, const VectorXd& s2)> action;
  std::function<PolicyJacobians(const VectorXd& y, const VectorXd& s2)> slopes;
};

using TransformBuilder =
    std::function<CoordinateTransform(const VectorXd& y, const VectorXd& u,
                                      double t)>;

TransformBuilder fixed_transform(CoordinateTransform transform);
// Rebuilds (W_y, W_u) from the plant Jacobians at each queried point.
TransformBuilder rebuild_transform(PlantModel plant,
                                   WuMethod method = WuMethod::kQr);

// Full tensor grid over the box [lo, hi] with n points per dimension
// (n == 1 samples the box center).
std::vector<VectorXd> box_grid(const VectorXd& lo, const VectorXd& hi, int n);

// Splits stacked (y, s2) grid points into region points.
std::vector<RegionPoint> region_from_grid(const std::vector<VectorXd>& grid,
                                          int dim_y, double t = 0.0);

struct CertificateSample {
  RegionPoint point;
  VectorXd u;
  double f1_margin = 0.0;
  double margin = 0.0;
  bool ok = false;
  std::string error;
};

struct ContractionCertificate {
  double epsilon = 0.0;
  double nu_plus = 0.0;
  // Finite-difference W_y-rate diagnostic; not used by the verdict.
  bool has_wy_dot_diagnostic = false;
  double nu_plus_wy_dot = 0.0;
  std::vector<CertificateSample> grid;
  bool verdict = false;

  int failed_count() const;
  double worst_f1_margin() const;
  double worst_margin() const;
};

struct CertifyOptions {
  bool wy_dot_diagnostic = false;
  double wy_dot_step = 1e-5;
};

// Grid certification of the closed loop. Construction errors at a point are
// recorded on that sample and fail it; they do not abort the sweep. A passing
// grid is necessary but not sufficient for contraction of the whole box.
ContractionCertificate certify_theorem1(const PlantModel& plant,
                                        const TransformBuilder& builder,
                                        const ClosedLoopPolicy& policy,
                                        const std::vector<RegionPoint>& region,
                                        double epsilon,
                                        const CertifyOptions& options = {});

// Summary with at most max_violations failing samples listed.
nlohmann::json to_json(const ContractionCertificate& cert,
                       int max_violations = 100);
// Every grid sample: point, margins, ok.
void write_certificate_csv(const std::string& path,
                           const ContractionCertificate& cert);

struct AxisSlopes {
  double d_s1 = 0.0;
  double d_s2 = 0.0;
};

struct HierarchicalCheck {
  std::vector<bool> axis_ok;
  // Worst values of (d_s1 b + lambda) and (d_s2 b) per axis.
  std::vector<double> first_margin;
  std::vector<double> second_margin;
  bool verdict = false;
};

// Per-axis inequalities of the triangular decomposition:
//   d_s1 * b_ii + lambda_i < -eps  and  d_s2 * b_ii < -eps.
// `slopes[i]` holds every sampled slope pair for axis i.
HierarchicalCheck check_hierarchical_blocks(
    const std::vector<double>& lambdas, const std::vector<double>& b_diag,
    const std::vector<std::vector<AxisSlopes>>& slopes, double epsilon);

// Single-sample convenience overload.
HierarchicalCheck check_hierarchical_blocks(
    const std::vector<double>& lambdas, const std::vector<double>& b_diag,
    const std::vector<AxisSlopes>& slopes, double epsilon);

// The 2x2 diagonal block [[lambda, b], [d_s1 lambda + d_s2, d_s1 b]].
Eigen::Matrix2d hierarchical_block(double lambda, double b,
                                   const AxisSlopes& slopes);

}  // namespace cguard
