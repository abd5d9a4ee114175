#include "cguard/impedance.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "cguard/errors.h"

namespace cguard {
namespace {

VectorXd vec_field(const nlohmann::json& j, const char* key) {
  try {
    const auto v = j.at(key).get<std::vector<double>>();
    return Eigen::Map<const VectorXd>(v.data(), static_cast<int>(v.size()));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig,
                std::string("field '") + key + "': " + e.what());
  }
}

std::vector<double> to_std(const VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace

void ImpedanceGains::validate() const {
  const int m = dim();
  if (m == 0 || k_d.size() != m || k_p.size() != m || k_rl.size() != m) {
    throw Error(ErrorCode::kDimensionMismatch, "gain vectors must share a size");
  }
  for (int i = 0; i < m; ++i) {
    if (!(lambda_d[i] > 0.0) || !(k_d[i] > 0.0) || !(k_p[i] >= 0.0)) {
      throw Error(ErrorCode::kNonPositiveGain,
                  "axis " + std::to_string(i) +
                      ": lambda_d and k_d must be positive, k_p non-negative");
    }
    if (!std::isfinite(k_rl[i])) {
      throw Error(ErrorCode::kNonFiniteInput, "k_rl is not finite");
    }
  }
}

nlohmann::json ImpedanceGains::to_json() const {
  return {{"lambda_d", to_std(lambda_d)},
          {"k_d", to_std(k_d)},
          {"k_p", to_std(k_p)},
          {"k_rl", to_std(k_rl)}};
}

ImpedanceGains ImpedanceGains::from_json(const nlohmann::json& j) {
  ImpedanceGains g;
  g.lambda_d = vec_field(j, "lambda_d");
  g.k_d = vec_field(j, "k_d");
  g.k_p = vec_field(j, "k_p");
  g.k_rl = j.contains("k_rl") ? vec_field(j, "k_rl")
                              : VectorXd::Ones(g.lambda_d.size());
  g.validate();
  return g;
}

CompositeMap gains_to_first_order(const ImpedanceGains& g, RootBranch branch) {
  g.validate();
  const int m = g.dim();
  CompositeMap map;
  map.branch = branch;
  map.k1.resize(m);
  map.k2.resize(m);
  map.lambda_y.resize(m);
  map.b_y.resize(m);
  map.equation_scale.resize(m);
  for (int i = 0; i < m; ++i) {
    const double ld = g.lambda_d[i], kd = g.k_d[i], kp = g.k_p[i];
    if (kp == 0.0) {
      map.k1[i] = 0.0;
      map.k2[i] = kd;
      map.lambda_y[i] = ld;
      map.b_y[i] = kd;
      map.equation_scale[i] = kd;
      continue;
    }
    const double disc = kd * kd - 4.0 * kp * ld;
    if (disc < 0.0) {
      throw Error(ErrorCode::kUnderdampedGains,
                  "axis " + std::to_string(i) + ": K_d^2 - 4 K_p lambda_d = " +
                      std::to_string(disc));
    }
    const double root = std::sqrt(disc);
    const double denom = branch == RootBranch::kPlus ? kd + root : kd - root;
    if (!(denom > 0.0)) {
      throw Error(ErrorCode::kNonPositiveGain,
                  "axis " + std::to_string(i) + ": K2 denominator vanishes");
    }
    map.k1[i] = kp / ld;
    map.k2[i] = 2.0 * kp / denom;
    map.lambda_y[i] = ld / map.k2[i];
    map.b_y[i] = ld;
    map.equation_scale[i] = 1.0;
  }
  return map;
}

VectorXd reduction_residual(const ImpedanceGains& g, const CompositeMap& map,
                            const VectorXd& e, const VectorXd& e_dot,
                            const VectorXd& e_ddot, const VectorXd& u) {
  const VectorXd y = map.composite(e, e_dot);
  const VectorXd y_dot = map.k1.cwiseProduct(e_dot) + map.k2.cwiseProduct(e_ddot);
  const VectorXd s = map.equation_scale;
  const VectorXd reduced = map.lambda_y.cwiseProduct(y_dot) +
                           map.b_y.cwiseProduct(y) +
                           s.cwiseProduct(g.k_rl).cwiseProduct(u);
  const VectorXd original = g.lambda_d.cwiseProduct(e_ddot) +
                            g.k_d.cwiseProduct(e_dot) +
                            g.k_p.cwiseProduct(e) + g.k_rl.cwiseProduct(u);
  return reduced - s.cwiseProduct(original);
}

double AbsorbingCheckResult::feasible_fraction() const {
  if (witnesses.empty()) return 1.0;
  return 1.0 - static_cast<double>(infeasible.size()) / witnesses.size();
}

double AbsorbingCheckResult::min_lambda_tilde() const {
  double lo = std::numeric_limits<double>::infinity();
  for (const auto& row : witnesses)
    for (const auto& w : row)
      if (w.feasible) lo = std::min(lo, w.lambda_tilde);
  return lo;
}

AbsorbingWitness absorb_axis(double y, double y_dot, double zeta,
                             double lambda_y, double b_y) {
  AbsorbingWitness w;
  const double a = y_dot, b = y;
  const double c = lambda_y * y_dot + b_y * y - zeta;
  auto residual = [&](double lt, double bt) {
    return std::abs(zeta + (lt - lambda_y) * y_dot + (bt - b_y) * y);
  };
  if (a == 0.0 && b == 0.0) {
    w.feasible = std::abs(zeta) <= 1e-12;
    w.lambda_tilde = lambda_y;
    w.b_tilde = b_y;
    w.residual = std::abs(zeta);
    return w;
  }
  bool exists = true;
  if (a >= 0.0 && b >= 0.0) exists = c > 0.0;
  if (a <= 0.0 && b <= 0.0) exists = c < 0.0;
  if (!exists) {
    w.lambda_tilde = lambda_y;
    w.b_tilde = b_y;
    w.residual = residual(lambda_y, b_y);
    return w;
  }

  const double nn = a * a + b * b;
  const double shift = (c - a * lambda_y - b * b_y) / nn;
  const double pl = lambda_y + shift * a;
  const double pb = b_y + shift * b;
  double floor = 1e-6 * std::max(lambda_y, b_y);
  if (pl > floor && pb > floor) {
    w.feasible = true;
    w.lambda_tilde = pl;
    w.b_tilde = pb;
    w.residual = residual(pl, pb);
    return w;
  }
  // The nearest admissible point is an end of the segment inside the box.
  for (int attempt = 0; attempt < 6; ++attempt, floor *= 1e-3) {
    double best = std::numeric_limits<double>::infinity();
    double bl = 0.0, bb = 0.0;
    auto consider = [&](double lt, double bt) {
      if (!(lt >= floor && bt >= floor)) return;
      const double d = std::hypot(lt - lambda_y, bt - b_y);
      if (d < best) {
        best = d;
        bl = lt;
        bb = bt;
      }
    };
    if (b != 0.0) consider(floor, (c - a * floor) / b);
    if (a != 0.0) consider((c - b * floor) / a, floor);
    if (std::isfinite(best)) {
      w.feasible = true;
      w.lambda_tilde = bl;
      w.b_tilde = bb;
      w.residual = residual(bl, bb);
      return w;
    }
  }
  w.lambda_tilde = lambda_y;
  w.b_tilde = b_y;
  w.residual = residual(lambda_y, b_y);
  return w;
}

AbsorbingCheckResult absorbing_feasibility(
    const std::vector<AbsorbingSample>& samples, const CompositeMap& map,
    double jump_tolerance) {
  AbsorbingCheckResult out;
  const int m = map.dim();
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const AbsorbingSample& s = samples[k];
    if (s.y.size() != m || s.y_dot.size() != m || s.zeta.size() != m) {
      throw Error(ErrorCode::kDimensionMismatch, "sample dimension mismatch");
    }
    if (!s.y.allFinite() || !s.y_dot.allFinite() || !s.zeta.allFinite()) {
      throw Error(ErrorCode::kNonFiniteInput, "sample is not finite");
    }
    std::vector<AbsorbingWitness> row;
    bool ok = true;
    for (int i = 0; i < m; ++i) {
      row.push_back(absorb_axis(s.y[i], s.y_dot[i], s.zeta[i], map.lambda_y[i],
                                map.b_y[i]));
      ok = ok && row.back().feasible;
    }
    if (!ok) out.infeasible.push_back(static_cast<int>(k));
    if (k > 0) {
      double jump = 0.0;
      for (int i = 0; i < m; ++i) {
        const auto& p = out.witnesses.back()[i];
        const auto& q = row[i];
        if (!p.feasible || !q.feasible) continue;
        jump = std::max(jump, std::abs(q.lambda_tilde - p.lambda_tilde) /
                                  p.lambda_tilde);
        jump = std::max(jump, std::abs(q.b_tilde - p.b_tilde) / p.b_tilde);
      }
      out.max_witness_jump = std::max(out.max_witness_jump, jump);
      if (jump > jump_tolerance) out.jump_flags.push_back(static_cast<int>(k));
    }
    out.witnesses.push_back(std::move(row));
  }
  return out;
}

void write_feasibility_csv(const std::string& path,
                           const AbsorbingCheckResult& r) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kInvalidConfig, "cannot write " + path);
  out << "sample,axis,feasible,lambda_tilde,b_tilde,residual\n";
  out.precision(12);
  for (std::size_t k = 0; k < r.witnesses.size(); ++k) {
    for (std::size_t i = 0; i < r.witnesses[k].size(); ++i) {
      const auto& w = r.witnesses[k][i];
      out << k << ',' << i << ',' << (w.feasible ? 1 : 0) << ','
          << w.lambda_tilde << ',' << w.b_tilde << ',' << w.residual << '\n';
    }
  }
}

Theorem3Check verify_theorem3(const CompositeMap& map,
                              const std::vector<std::vector<AxisSlopes>>& slopes,
                              const VectorXd& k_rl, double epsilon,
                              const AbsorbingCheckResult* witnesses) {
  const int m = map.dim();
  if (static_cast<int>(slopes.size()) != m || k_rl.size() != m) {
    throw Error(ErrorCode::kDimensionMismatch, "one slope list per axis");
  }
  if (!(epsilon > 0.0)) {
    throw Error(ErrorCode::kInvalidConfig, "epsilon must be positive");
  }
  Theorem3Check out;
  out.passed = true;
  for (int i = 0; i < m; ++i) {
    double lo1 = std::numeric_limits<double>::infinity();
    double lo2 = lo1;
    for (const AxisSlopes& s : slopes[i]) {
      lo1 = std::min(lo1, s.d_s1 * k_rl[i]);
      lo2 = std::min(lo2, s.d_s2 * k_rl[i]);
    }
    const bool ok = !slopes[i].empty() && lo1 > epsilon && lo2 > epsilon;
    out.axis_ok.push_back(ok);
    out.min_s1.push_back(lo1);
    out.min_s2.push_back(lo2);
    out.passed = out.passed && ok;
  }
  if (!witnesses) return out;

  const int n = witnesses->samples();
  for (int i = 0; i < m; ++i) {
    if (static_cast<int>(slopes[i].size()) != n) {
      throw Error(ErrorCode::kDimensionMismatch,
                  "slopes and witnesses must cover the same samples");
    }
  }
  out.has_implied = true;
  out.implied_epsilon = witnesses->min_lambda_tilde() * epsilon;
  out.implied.verdict = witnesses->infeasible.empty() && n > 0;
  out.implied.axis_ok.assign(m, out.implied.verdict);
  out.implied.first_margin.assign(m, -std::numeric_limits<double>::infinity());
  out.implied.second_margin.assign(m, -std::numeric_limits<double>::infinity());
  for (int k = 0; k < n; ++k) {
    const auto& row = witnesses->witnesses[k];
    std::vector<double> lambdas(m), b(m);
    std::vector<AxisSlopes> sk(m);
    for (int i = 0; i < m; ++i) {
      lambdas[i] = -row[i].lambda_tilde * row[i].b_tilde;
      b[i] = -row[i].lambda_tilde * k_rl[i];
      sk[i] = slopes[i][k];
    }
    const HierarchicalCheck c =
        check_hierarchical_blocks(lambdas, b, sk, out.implied_epsilon);
    for (int i = 0; i < m; ++i) {
      out.implied.axis_ok[i] = out.implied.axis_ok[i] && c.axis_ok[i];
      out.implied.first_margin[i] =
          std::max(out.implied.first_margin[i], c.first_margin[i]);
      out.implied.second_margin[i] =
          std::max(out.implied.second_margin[i], c.second_margin[i]);
    }
    out.implied.verdict = out.implied.verdict && c.verdict;
  }
  return out;
}

std::vector<VectorXd> recover_tracking_error(const std::vector<VectorXd>& y,
                                             double h, const VectorXd& k1,
                                             const VectorXd& k2,
                                             const VectorXd& e0) {
  const int m = static_cast<int>(e0.size());
  for (int i = 0; i < m; ++i) {
    if (k2[i] == 0.0) throw Error(ErrorCode::kSingularInput, "K2 is singular");
  }
  std::vector<VectorXd> e;
  if (y.empty()) return e;
  e.reserve(y.size());
  e.push_back(e0);
  for (std::size_t k = 0; k + 1 < y.size(); ++k) {
    VectorXd next(m);
    for (int i = 0; i < m; ++i) {
      const double a = k1[i] / k2[i];
      const double y0 = y[k][i];
      const double slope = (y[k + 1][i] - y[k][i]) / h;
      if (a == 0.0) {
        next[i] = e.back()[i] + (y0 * h + 0.5 * slope * h * h) / k2[i];
        continue;
      }
      const double phi = -std::expm1(-a * h) / a;
      next[i] = std::exp(-a * h) * e.back()[i] +
                (y0 * phi + slope * (h - phi) / a) / k2[i];
    }
    e.push_back(std::move(next));
  }
  return e;
}

SyntheticCartesianPlant::SyntheticCartesianPlant(ImpedanceGains gains,
                                                 double amplitude,
                                                 RootBranch branch)
    : gains_(std::move(gains)),
      map_(gains_to_first_order(gains_, branch)),
      amplitude_(amplitude) {}

VectorXd SyntheticCartesianPlant::zeta(const State& s) const {
  return amplitude_ * s.e.array().sin() * s.e_dot.array();
}

VectorXd SyntheticCartesianPlant::acceleration(const State& s,
                                               const VectorXd& u) const {
  const VectorXd rhs = zeta(s) - gains_.k_d.cwiseProduct(s.e_dot) -
                       gains_.k_p.cwiseProduct(s.e) - gains_.k_rl.cwiseProduct(u);
  return rhs.cwiseQuotient(gains_.lambda_d);
}

SyntheticCartesianPlant::State SyntheticCartesianPlant::step(
    const State& s, const VectorXd& u, double delta_t, int substeps) const {
  const double h = delta_t / substeps;
  State x = s;
  for (int k = 0; k < substeps; ++k) {
    const VectorXd k1e = x.e_dot;
    const VectorXd k1v = acceleration(x, u);
    const State x2{x.e + 0.5 * h * k1e, x.e_dot + 0.5 * h * k1v};
    const VectorXd k2e = x2.e_dot;
    const VectorXd k2v = acceleration(x2, u);
    const State x3{x.e + 0.5 * h * k2e, x.e_dot + 0.5 * h * k2v};
    const VectorXd k3e = x3.e_dot;
    const VectorXd k3v = acceleration(x3, u);
    const State x4{x.e + h * k3e, x.e_dot + h * k3v};
    const VectorXd k4e = x4.e_dot;
    const VectorXd k4v = acceleration(x4, u);
    x.e += h / 6.0 * (k1e + 2.0 * k2e + 2.0 * k3e + k4e);
    x.e_dot += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
  }
  return x;
}

PlantModel SyntheticCartesianPlant::first_order_model() const {
  const VectorXd a = -map_.b_y.cwiseQuotient(map_.lambda_y);
  const VectorXd bu = -map_.equation_scale.cwiseProduct(gains_.k_rl)
                           .cwiseQuotient(map_.lambda_y);
  PlantModel p;
  p.dim_y = dim();
  p.dim_u = dim();
  p.f = [a, bu](const VectorXd& y, const VectorXd& u, double) {
    return VectorXd(a.cwiseProduct(y) + bu.cwiseProduct(u));
  };
  p.jac_y = [a](const VectorXd&, const VectorXd&, double) {
    return MatrixXd(a.asDiagonal());
  };
  p.jac_u = [bu](const VectorXd&, const VectorXd&, double) {
    return MatrixXd(bu.asDiagonal());
  };
  return p;
}

CoordinateTransform SyntheticCartesianPlant::identity_transform() const {
  CoordinateTransform t = CoordinateTransform::identity(dim());
  t.eigenvalues = -map_.b_y.cwiseQuotient(map_.lambda_y);
  t.coupling_diag = -map_.equation_scale.cwiseProduct(gains_.k_rl)
                         .cwiseQuotient(map_.lambda_y);
  t.coupling = t.coupling_diag.asDiagonal();
  return t;
}

AbsorbingSample SyntheticCartesianPlant::reduced_sample(const State& s,
                                                        const VectorXd& u) const {
  AbsorbingSample out;
  out.y = map_.composite(s.e, s.e_dot);
  out.y_dot = map_.k1.cwiseProduct(s.e_dot) +
              map_.k2.cwiseProduct(acceleration(s, u));
  out.zeta = map_.equation_scale.cwiseProduct(zeta(s));
  return out;
}

Theorem3DemoConfig Theorem3DemoConfig::defaults() {
  Theorem3DemoConfig c;
  c.gains.lambda_d = VectorXd::Ones(2);
  c.gains.k_d = (VectorXd(2) << 4.0, 5.0).finished();
  c.gains.k_p = (VectorXd(2) << 3.0, 4.0).finished();
  c.gains.k_rl = VectorXd::Ones(2);
  c.s1_slope = VectorXd::Constant(2, 6.0);
  c.s2_slope = VectorXd::Constant(2, 9.0);
  c.e0 = (VectorXd(2) << 1.0, -0.5).finished();
  c.e_dot0 = (VectorXd(2) << 0.0, 0.5).finished();
  return c;
}

nlohmann::json Theorem3DemoConfig::to_json() const {
  return {{"gains", gains.to_json()},
          {"branch", branch == RootBranch::kPlus ? "plus" : "minus"},
          {"amplitude", amplitude},
          {"s1_slope", to_std(s1_slope)},
          {"s2_slope", to_std(s2_slope)},
          {"action_clip", action_clip},
          {"epsilon", epsilon},
          {"horizon", horizon},
          {"delta_t", delta_t},
          {"e0", to_std(e0)},
          {"e_dot0", to_std(e_dot0)}};
}

Theorem3DemoConfig Theorem3DemoConfig::from_json(const nlohmann::json& j) {
  Theorem3DemoConfig c = defaults();
  try {
    if (j.contains("gains")) c.gains = ImpedanceGains::from_json(j["gains"]);
    if (j.contains("branch")) {
      const std::string b = j["branch"].get<std::string>();
      if (b != "plus" && b != "minus") {
        throw Error(ErrorCode::kInvalidConfig, "field 'branch': plus or minus");
      }
      c.branch = b == "plus" ? RootBranch::kPlus : RootBranch::kMinus;
    }
    c.amplitude = j.value("amplitude", c.amplitude);
    if (j.contains("s1_slope")) c.s1_slope = vec_field(j, "s1_slope");
    if (j.contains("s2_slope")) c.s2_slope = vec_field(j, "s2_slope");
    c.action_clip = j.value("action_clip", c.action_clip);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.horizon = j.value("horizon", c.horizon);
    c.delta_t = j.value("delta_t", c.delta_t);
    if (j.contains("e0")) c.e0 = vec_field(j, "e0");
    if (j.contains("e_dot0")) c.e_dot0 = vec_field(j, "e_dot0");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, e.what());
  }
  const int m = c.gains.dim();
  if (c.s1_slope.size() != m || c.s2_slope.size() != m || c.e0.size() != m ||
      c.e_dot0.size() != m) {
    throw Error(ErrorCode::kDimensionMismatch,
                "slopes and initial errors must match the gain dimension");
  }
  if (!(c.delta_t > 0.0) || !(c.horizon > 0.0)) {
    throw Error(ErrorCode::kInvalidConfig, "horizon and delta_t must be positive");
  }
  return c;
}

ConstrainedPolicy theorem3_linear_policy(const SyntheticCartesianPlant& plant,
                                         const Theorem3DemoConfig& c) {
  std::vector<AxisNetwork> axes;
  for (int i = 0; i < plant.dim(); ++i) {
    DenseLayer l;
    l.weights.resize(1, 2);
    l.weights << c.s1_slope[i], c.s2_slope[i];
    l.bias = VectorXd::Zero(1);
    axes.emplace_back(Mlp({l}));
  }
  return ConstrainedPolicy(plant.identity_transform(), std::move(axes), 1e-3,
                           c.action_clip, c.delta_t);
}

nlohmann::json Theorem3DemoResult::summary_json() const {
  return {{"steps", static_cast<int>(t.size())},
          {"feasible_fraction", absorbing.feasible_fraction()},
          {"infeasible_samples", absorbing.infeasible.size()},
          {"max_witness_jump", absorbing.max_witness_jump},
          {"witness_jump_flags", absorbing.jump_flags.size()},
          {"theorem3", theorem3.passed},
          {"implied_block_check", theorem3.implied.verdict},
          {"implied_epsilon", theorem3.implied_epsilon},
          {"final_error", final_error},
          {"recovery_error", recovery_error},
          {"verdict", passed ? "pass" : "fail"}};
}

Theorem3DemoResult run_theorem3_demo(const Theorem3DemoConfig& c) {
  const SyntheticCartesianPlant plant(c.gains, c.amplitude, c.branch);
  ConstrainedPolicy policy = theorem3_linear_policy(plant, c);
  policy.reset();
  const int m = plant.dim();
  const int steps = static_cast<int>(std::lround(c.horizon / c.delta_t));

  Theorem3DemoResult r;
  std::vector<std::vector<AxisSlopes>> slopes(m);
  SyntheticCartesianPlant::State s{c.e0, c.e_dot0};
  for (int k = 0; k < steps; ++k) {
    const VectorXd y = plant.map().composite(s.e, s.e_dot);
    const VectorXd s2 = policy.state().s2;
    const PolicyOutput out = policy_forward(policy, y);
    const PolicyJacobians jac = policy.slopes(y, s2);
    for (int i = 0; i < m; ++i) {
      slopes[i].push_back({jac.d_s1(i, i), jac.d_s2(i, i)});
    }
    r.t.push_back(k * c.delta_t);
    r.e.push_back(s.e);
    r.e_dot.push_back(s.e_dot);
    r.y.push_back(y);
    r.u.push_back(out.u);
    r.samples.push_back(plant.reduced_sample(s, out.u));
    s = plant.step(s, out.u, c.delta_t);
  }
  r.t.push_back(steps * c.delta_t);
  r.e.push_back(s.e);
  r.e_dot.push_back(s.e_dot);
  r.y.push_back(plant.map().composite(s.e, s.e_dot));

  r.absorbing = absorbing_feasibility(r.samples, plant.map());
  const VectorXd k_rl = plant.map().equation_scale.cwiseProduct(c.gains.k_rl);
  r.theorem3 = verify_theorem3(plant.map(), slopes, k_rl, c.epsilon, &r.absorbing);
  r.recovered_e = recover_tracking_error(r.y, c.delta_t, plant.map().k1,
                                         plant.map().k2, c.e0);
  for (std::size_t k = 0; k < r.e.size(); ++k) {
    r.recovery_error = std::max(
        r.recovery_error, (r.recovered_e[k] - r.e[k]).lpNorm<Eigen::Infinity>());
  }
  r.final_error = s.e.norm();
  r.passed = r.absorbing.infeasible.empty() && r.theorem3.passed &&
             r.theorem3.implied.verdict && r.final_error < 1e-3;
  return r;
}

}  // namespace cguard
