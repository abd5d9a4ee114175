// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cguard/contraction.h"
#include "cguard/errors.h"
#include "cguard/experiments.h"
#include "cguard/impedance.h"
#include "cguard/linalg.h"
#include "cguard/mlp.h"
#include "cguard/peg_env.h"
#include "cguard/policy.h"
#include "cguard/ppo.h"
#include "linear_fixtures.h"
#include "test_support.h"

namespace {

using namespace cguard;
using cguard::testing::random_matrix;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

int jobs() {
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

MatrixXd random_diagonalizable(std::mt19937_64& rng, int n, VectorXd* eig) {
  MatrixXd v = random_matrix(rng, n, n) + 2.0 * MatrixXd::Identity(n, n);
  VectorXd d(n);
  std::uniform_real_distribution<double> jitter(-0.2, 0.2);
  for (int i = 0; i < n; ++i) d[i] = -0.5 - 1.3 * i + jitter(rng);
  if (eig) *eig = d;
  return v * d.asDiagonal() * v.inverse();
}

MatrixXd block_diag(const MatrixXd& a, const MatrixXd& b) {
  MatrixXd out = MatrixXd::Zero(a.rows() + b.rows(), a.cols() + b.cols());
  out.topLeftCorner(a.rows(), a.cols()) = a;
  out.bottomRightCorner(b.rows(), b.cols()) = b;
  return out;
}

// ---------------------------------------------------------------- 1
void algebraic_oracles(Outcome& o) {
  std::mt19937_64 rng(101);
  double diag_err = 0.0, tri_err = 0.0, f_err = 0.0, red_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int m = 2 + trial % 3;
    VectorXd eig;
    const MatrixXd jy = random_diagonalizable(rng, m, &eig);
    const EigenBasis basis = build_wy(jy);
    const MatrixXd d = basis.wy * jy * basis.wy.inverse();
    MatrixXd expect = basis.eigenvalues.asDiagonal();
    diag_err = std::max(diag_err, (d - expect).cwiseAbs().maxCoeff());
    std::sort(eig.data(), eig.data() + m, std::greater<>());
    diag_err = std::max(diag_err, (basis.eigenvalues - eig).cwiseAbs().maxCoeff());

    const MatrixXd ju = random_matrix(rng, m, m) + 2.0 * MatrixXd::Identity(m, m);
    const InputTransform in = build_wu_qr(basis.wy, ju);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < i; ++j) tri_err = std::max(tri_err, std::abs(in.coupling(i, j)));

    const CoordinateTransform t = build_transform(jy, ju);
    const PolicyJacobians p{random_matrix(rng, m, 1).asDiagonal(),
                            random_matrix(rng, m, 1).asDiagonal()};
    const MatrixXd wy_dot = trial % 2 ? random_matrix(rng, m, m) : MatrixXd::Zero(m, m);
    const SplitJacobian s = assemble_f(jy, ju, t, p, wy_dot);
    MatrixXd j(2 * m, 2 * m);
    j << jy, ju,
        t.wu.inverse() * (p.d_s1 * (wy_dot + t.wy * jy) + p.d_s2 * t.wy),
        t.wu.inverse() * p.d_s1 * t.wy * ju;
    const MatrixXd full = generalized_jacobian(
        j, block_diag(t.wy, t.wu), block_diag(wy_dot, MatrixXd::Zero(m, m)));
    f_err = std::max(f_err, (s.f1 + s.f2 - full).cwiseAbs().maxCoeff());
  }

  bool branches_ok = true;
  std::uniform_real_distribution<double> pos(0.2, 5.0), coef(-2.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int m = 1 + trial % 3;
    ImpedanceGains g{VectorXd(m), VectorXd(m), VectorXd(m), VectorXd(m)};
    for (int i = 0; i < m; ++i) {
      g.lambda_d[i] = pos(rng);
      g.k_p[i] = pos(rng);
      g.k_d[i] = 2.0 * std::sqrt(g.k_p[i] * g.lambda_d[i]) + pos(rng);
      g.k_rl[i] = coef(rng);
    }
    const CompositeMap plus = gains_to_first_order(g, RootBranch::kPlus);
    const CompositeMap minus = gains_to_first_order(g, RootBranch::kMinus);
    for (int i = 0; i < m; ++i) {
      // Both K2 are roots of lambda_d K2^2 - K_d K2 + K_p = 0.
      const double k2p = plus.k2[i], k2m = minus.k2[i];
      const double ld = g.lambda_d[i], kd = g.k_d[i], kp = g.k_p[i];
      branches_ok &= k2p > 0 && k2m > 0 && k2p <= k2m && plus.lambda_y[i] > 0 &&
                     minus.lambda_y[i] > 0 && plus.b_y[i] > 0 && minus.b_y[i] > 0;
      for (double k2 : {k2p, k2m}) {
        branches_ok &= std::abs(ld * k2 * k2 - kd * k2 + kp) < 1e-9 * (kd * k2 + kp);
      }
      branches_ok &= std::abs(k2p * k2m - kp / ld) < 1e-9 * std::max(1.0, kp / ld);
      branches_ok &= std::abs(k2p + k2m - kd / ld) < 1e-9 * std::max(1.0, kd / ld);
    }
    for (const CompositeMap* map : {&plus, &minus}) {
      VectorXd c[4];
      for (auto& ci : c) ci = VectorXd(m).unaryExpr([&](double) { return coef(rng); });
      const double tt = 3.0 * pos(rng) / 5.0;
      const VectorXd e = c[0] + c[1] * tt + c[2] * tt * tt + c[3] * tt * tt * tt;
      const VectorXd ed = c[1] + 2 * c[2] * tt + 3 * c[3] * tt * tt;
      const VectorXd edd = 2 * c[2] + 6 * c[3] * tt;
      const VectorXd u = VectorXd(m).unaryExpr([&](double) { return coef(rng); });
      red_err = std::max(red_err,
                         reduction_residual(g, *map, e, ed, edd, u).cwiseAbs().maxCoeff());
    }
  }
  o.require(diag_err < 1e-8, "diagonalization");
  o.require(tri_err < 1e-10, "QR triangularity");
  o.require(f_err < 1e-9, "F assembly");
  o.require(red_err < 1e-9, "composite reduction");
  o.require(branches_ok, "root branches");
  o.detail << "diag " << fmt(diag_err) << ", tri " << fmt(tri_err) << ", F "
           << fmt(f_err) << ", reduction " << fmt(red_err) << ", branches "
           << (branches_ok ? "ok" : "bad");
}

// ---------------------------------------------------------------- 2
double rel(const MatrixXd& a, const MatrixXd& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
}

void gradient_suite(Outcome& o) {
  std::mt19937_64 rng(202);
  double chain = 0.0, composite = 0.0, value = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const AxisNetwork net = AxisNetwork::random({32, 32, 32}, rng);
    const VectorXd p = random_matrix(rng, 2, 1);
    const AxisSlopes s = axis_jacobian(net, p[0], p[1]);
    const MatrixXd fd = finite_difference_jacobian(
        [&](const VectorXd& v) { return VectorXd::Constant(1, net(v[0], v[1])); }, p);
    MatrixXd an(1, 2);
    an << s.d_s1, s.d_s2;
    chain = std::max(chain, rel(an, fd));
  }
  for (int trial = 0; trial < 50; ++trial) {
    const MatrixXd jy = random_diagonalizable(rng, 2, nullptr);
    const MatrixXd ju = random_matrix(rng, 2, 2) + 2.0 * MatrixXd::Identity(2, 2);
    const CoordinateTransform t = build_transform(jy, ju);
    PolicyConfig cfg;
    cfg.hidden = {32, 32, 32};
    cfg.seed = trial;
    const ConstrainedPolicy pol = ConstrainedPolicy::random(t, cfg);
    const VectorXd y = random_matrix(rng, 2, 1), s2 = random_matrix(rng, 2, 1);
    const PolicyJacobians pj = pol.slopes(y, s2);
    const MatrixXd fd_y = finite_difference_jacobian(
        [&](const VectorXd& v) { return pol.mean_action(v, s2); }, y);
    const MatrixXd fd_s2 = finite_difference_jacobian(
        [&](const VectorXd& v) { return pol.mean_action(y, v); }, s2);
    composite = std::max(composite, rel(t.wu_inv * pj.d_s1 * t.wy, fd_y));
    composite = std::max(composite, rel(t.wu_inv * pj.d_s2, fd_s2));
  }
  for (int trial = 0; trial < 50; ++trial) {
    const ValueNetwork v = ValueNetwork::random(4, {32, 32, 32}, rng);
    const MatrixXd x = random_matrix(rng, 4, 5);
    const MatrixXd w = random_matrix(rng, 1, 5);
    Mlp::Cache cache;
    v.net().forward_batch(x, &cache);
    Mlp::Gradients g = v.net().zero_gradients();
    v.net().backward(cache, w, &g);
    VectorXd an(v.net().parameter_count());
    Mlp::flatten(g, an.data());
    VectorXd theta(an.size());
    v.net().flatten(theta.data());
    auto loss = [&](const VectorXd& th) {
      Mlp m = v.net();
      m.unflatten(th.data());
      return (m.forward_batch(x).array() * w.array()).sum();
    };
    VectorXd fd(theta.size());
    for (int i = 0; i < theta.size(); ++i) {
      VectorXd a = theta, b = theta;
      a[i] += 1e-6;
      b[i] -= 1e-6;
      fd[i] = (loss(a) - loss(b)) / 2e-6;
    }
    value = std::max(value, rel(an, fd));
  }
  o.require(chain < 1e-5, "axis chain");
  o.require(composite < 1e-5, "composite path");
  o.require(value < 1e-5, "value net");
  o.detail << "max rel err: chain " << fmt(chain) << ", composite "
           << fmt(composite) << ", value " << fmt(value);
}

// ---------------------------------------------------------------- 3
void projection_soundness(Outcome& o) {
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> mag(0.1, 10.0), in(-2.0, 2.0);
  const std::vector<double> lambdas = {0.0, -0.01, -0.5, -3.0, -25.0, -100.0};
  int passed = 0, idempotent = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const double b = (trial % 2 ? 1.0 : -1.0) * mag(rng);
    const int sign = b > 0 ? 1 : -1;
    const AxisNetwork once =
        project_weights(AxisNetwork::random({32, 32, 32}, rng), sign, 1e-3);
    const AxisNetwork twice = project_weights(once, sign, 1e-3);
    VectorXd a(once.net().parameter_count()), c(a.size());
    once.net().flatten(a.data());
    twice.net().flatten(c.data());
    idempotent += a == c;
    std::vector<AxisSlopes> samples;
    for (int k = 0; k < 25; ++k) samples.push_back(axis_jacobian(once, in(rng), in(rng)));
    bool ok = true;
    for (double lam : lambdas) {
      ok &= check_hierarchical_blocks({lam}, {b},
                                      std::vector<std::vector<AxisSlopes>>{samples}, 1e-3)
                .verdict;
    }
    passed += ok;
  }
  o.require(passed == 100, "block check");
  o.require(idempotent == 100, "idempotence");
  o.detail << passed << "/100 nets pass the block check, " << idempotent
           << "/100 idempotent";
}

// ---------------------------------------------------------------- 4
void contraction_behavior(Outcome& o) {
  const double eps = 0.5;
  struct Case {
    const char* name;
    MatrixXd a, b;
  };
  const std::vector<Case> cases = {
      {"scalar", MatrixXd::Constant(1, 1, -1.0), MatrixXd::Ones(1, 1)},
      {"2d", (MatrixXd(2, 2) << -1.0, 0.2, 0.1, -2.0).finished(),
       (MatrixXd(2, 2) << 1.0, 0.1, 0.0, 1.0).finished()}};
  for (const Case& c : cases) {
    const int m = static_cast<int>(c.a.rows());
    const PlantModel plant = cguard::testing::linear_plant(c.a, c.b);
    const CoordinateTransform t = build_transform(c.a, c.b);
    const auto region = region_from_grid(
        box_grid(VectorXd::Constant(2 * m, -1.0), VectorXd::Constant(2 * m, 1.0), 5), m);

    const ConstrainedPolicy good = cguard::testing::linear_certified_policy(t);
    const auto cert =
        certify_theorem1(plant, fixed_transform(t), good.closed_loop(), region, eps);
    VectorXd y0a = VectorXd::Constant(m, 0.5), y0b = VectorXd::Constant(m, -0.3);
    y0b[0] = 0.9;
    const ContractionTrace tr = paired_trajectories(plant, good, y0a, y0b, 1e-3, 3000);
    o.require(cert.verdict, std::string(c.name) + " certificate");
    o.require(tr.fitted_rate <= -eps / 2, std::string(c.name) + " rate");

    const ConstrainedPolicy bad = cguard::testing::linear_certified_policy(t, true);
    const auto bad_cert =
        certify_theorem1(plant, fixed_transform(t), bad.closed_loop(), region, eps);
    o.require(!bad_cert.verdict, std::string(c.name) + " infeasible policy rejected");
    o.detail << c.name << ": margin " << fmt(cert.worst_margin()) << ", rate "
             << fmt(tr.fitted_rate) << " (bound " << fmt(-eps / 2)
             << "), infeasible margin " << fmt(bad_cert.worst_margin()) << "; ";
  }
}

// ---------------------------------------------------------------- 5
void theorem3_pipeline(Outcome& o) {
  Theorem3DemoConfig c = Theorem3DemoConfig::defaults();
  c.amplitude = 0.1;
  c.horizon = 10.0;
  const Theorem3DemoResult r = run_theorem3_demo(c);
  const double feasible = r.absorbing.feasible_fraction();
  o.require(feasible == 1.0, "absorbing feasibility");
  o.require(r.theorem3.passed, "verify_theorem3");
  o.require(!r.theorem3.passed || (r.theorem3.has_implied && r.theorem3.implied.verdict),
            "implied block check");
  o.require(r.final_error < 1e-3, "tracking error");
  o.detail << "feasible " << fmt(100.0 * feasible) << "% of " << r.absorbing.samples()
           << " samples, theorem3 " << (r.theorem3.passed ? "pass" : "fail")
           << ", implied block check "
           << (r.theorem3.implied.verdict ? "pass" : "fail") << ", |e(10s)| "
           << fmt(r.final_error);
}

// ---------------------------------------------------------------- 6, 7
struct TrainedRuns {
  std::vector<Checkpoint> cppo;  // final checkpoint per seed
  std::vector<Checkpoint> ppo;
};

const std::vector<std::uint64_t> kSeeds = {0, 1, 2};

TrainedRuns& trained_runs() {
  static TrainedRuns runs = [] {
    TrainedRuns r;
    const std::filesystem::path root = "acceptance_runs";
    for (std::uint64_t seed : kSeeds) {
      TrainConfig c;
      c.seed = seed;
      c.jobs = jobs();
      const std::string dir = (root / ("cppo_seed" + std::to_string(seed))).string();
      std::fprintf(stderr, "training C-PPO seed %llu\n",
                   static_cast<unsigned long long>(seed));
      r.cppo.push_back(train(TrainMode::kCppo, c, dir).checkpoints.back());
    }
    TrainConfig c;
    c.jobs = jobs();
    std::fprintf(stderr, "training PPO seed 0 (report only)\n");
    r.ppo.push_back(
        train(TrainMode::kPpo, c, (root / "ppo_seed0").string()).checkpoints.back());
    return r;
  }();
  return runs;
}

void experiment_reproduction(Outcome& o) {
  TrainedRuns& runs = trained_runs();
  StabilityOptions so;
  so.tasks = 50;
  so.jobs = jobs();
  const StabilityReport rep = stability_test(runs.cppo, so);
  int tasks = 0, short_fail = 0, long_fail = 0;
  for (std::size_t k = 0; k < rep.rows.size(); ++k) {
    const StabilityRow& row = rep.rows[k];
    tasks += row.tasks;
    short_fail += row.train_horizon_failures;
    long_fail += row.failures;
    o.detail << "seed " << kSeeds[k] << ": success@8s " << fmt(row.train_horizon_success())
             << " fail@16s " << fmt(row.failure_rate()) << "; ";
  }
  const double success = 1.0 - double(short_fail) / tasks;
  const double failure = double(long_fail) / tasks;
  o.require(success >= 0.95, "success at 8 s");
  o.require(failure <= 0.02, "failure at 16 s");
  o.detail << "pooled success@8s " << fmt(success) << " fail@16s " << fmt(failure);

  const StabilityReport ppo = stability_test(runs.ppo, so);
  o.detail << "; PPO (report) success@8s " << fmt(ppo.rows[0].train_horizon_success())
           << " fail@16s " << fmt(ppo.rows[0].failure_rate());
}

void robustness(Outcome& o) {
  TrainedRuns& runs = trained_runs();
  RobustnessOptions ro;
  ro.trials = 1000;
  ro.jobs = jobs();
  const RobustnessReport r = robustness_test(runs.cppo.front(), ro);
  o.require(r.force.max < 0.2, "max force error");
  o.require(r.position.max < 0.05, "max position error");
  o.detail << "C-PPO seed 0: force max " << fmt(r.force.max) << " p99 "
           << fmt(r.force.p99) << ", position max " << fmt(r.position.max) << " p99 "
           << fmt(r.position.p99);
  const RobustnessReport p = robustness_test(runs.ppo.front(), ro);
  o.detail << "; PPO (report) force max " << fmt(p.force.max) << ", position max "
           << fmt(p.position.max);
}

// ---------------------------------------------------------------- 8
void equilibrium_audit_check(Outcome& o) {
  std::mt19937_64 rng(808);
  double err = 0.0;
  for (int k = 0; k < 100; ++k) {
    const PegParams p = sample_params(rng);
    const PegTask t = sample_task(rng);
    const double g = p.k1_sur * std::sin(t.x_d) + p.k2_sur * std::cos(t.x_d);
    VectorXd closed(2);
    closed << t.x_d, g + t.f_d / p.k_sur;
    const VectorXd numeric =
        solve_equilibrium_action(peg_plant_model(p, t), VectorXd::Zero(2));
    err = std::max(err, (numeric - closed).cwiseAbs().maxCoeff());
  }
  PolicyConfig cfg;
  cfg.hidden = {32, 32, 32};
  ConstrainedPolicy pol = ConstrainedPolicy::random(peg_nominal_transform(PegParams{}), cfg);
  const auto region = CertifyRegion::peg_default(3).points();
  const std::vector<PegTask> targets = {{2.0, -1.0, 2.0, 0.0}};
  const EquilibriumAudit healthy = equilibrium_audit(pol, PegParams{}, targets, region);
  pol.mutable_axes()[1].mutable_net().mutable_layers()[0].weights.col(1).setZero();
  const EquilibriumAudit flat = equilibrium_audit(pol, PegParams{}, targets, region);
  o.require(err < 1e-8, "closed form vs numeric");
  o.require(healthy.ok, "projected policy audit");
  o.require(!flat.ok && !flat.s2_slope_nonzero, "flat-s2 flagged");
  o.detail << "max |closed - numeric| " << fmt(err) << ", projected policy "
           << (healthy.ok ? "ok" : "flagged") << ", flat-s2 policy "
           << (flat.s2_slope_nonzero ? "missed" : "flagged");
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<void(Outcome&)> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "algebraic oracles", algebraic_oracles},
      {2, "gradient suite", gradient_suite},
      {3, "projection soundness", projection_soundness},
      {4, "contraction behavior", contraction_behavior},
      {5, "theorem 3 pipeline", theorem3_pipeline},
      {6, "experiment reproduction", experiment_reproduction},
      {7, "robustness", robustness},
      {8, "equilibrium audit", equilibrium_audit_check},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const Criterion& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("AC%d %s %s (%.1f s): %s\n", c.id, o.pass ? "PASS" : "FAIL", c.name,
                secs, o.detail.str().c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
