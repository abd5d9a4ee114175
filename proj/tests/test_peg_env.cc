#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cguard/errors.h"
#include "cguard/peg_env.h"
#include "test_support.h"

namespace cguard {
namespace {

using testing::vec;

PegParams profiled(double k = 10.0, double k1 = 0.01, double k2 = -0.008) {
  PegParams p;
  p.k_sur = k;
  p.k1_sur = k1;
  p.k2_sur = k2;
  return p;
}

// Classical RK4 of tau q' + q = u with tiny steps.
double rk4_lag(double q, double u, double tau, double duration, int steps) {
  const double h = duration / steps;
  auto f = [&](double v) { return (u - v) / tau; };
  for (int i = 0; i < steps; ++i) {
    const double k1 = f(q), k2 = f(q + 0.5 * h * k1), k3 = f(q + 0.5 * h * k2),
                 k4 = f(q + h * k3);
    q += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
  }
  return q;
}

TEST(PegParams, DefaultsAndValidation) {
  const PegParams p;
  EXPECT_DOUBLE_EQ(p.tau_z, 0.0437);
  EXPECT_DOUBLE_EQ(p.tau_x, 0.01);
  EXPECT_NO_THROW(p.validate());
  PegParams bad = p;
  bad.tau_z = 0.0;
  EXPECT_THROW(bad.validate(), Error);
  bad = p;
  bad.delta_t = -0.01;
  EXPECT_THROW(bad.validate(), Error);
  const PegParams back = PegParams::from_json(profiled().to_json());
  EXPECT_EQ(back.to_json(), profiled().to_json());
}

TEST(PegStep, HoldActionKeepsState) {
  const PegParams p = profiled();
  PegState s = initial_state(p, {2.0, -1.0, 1.5, -0.2});
  const PegState n = step(s, p, {s.z, s.x});
  EXPECT_DOUBLE_EQ(n.x, s.x);
  EXPECT_DOUBLE_EQ(n.z, s.z);
  EXPECT_EQ(n.f, contact_force(p, n.x, n.z));
}

TEST(PegStep, AboveSurfaceHasNoForce) {
  const PegParams p = profiled();
  const PegState s = initial_state(p, {2.0, -1.0, 2.0, 5.0});
  EXPECT_EQ(s.f, 0.0);
  EXPECT_EQ(step(s, p, {5.0, 2.0}).f, 0.0);
}

TEST(PegStep, ClosedFormLagMatchesFineRk4) {
  PegParams p;
  const PegState s = initial_state(p, {0.0, 0.0, 0.0, 1.0});
  const PegState n = step(s, p, {0.0, 0.0});
  EXPECT_NEAR(n.z, std::exp(-p.delta_t / 0.0437), 1e-15);
  EXPECT_NEAR(n.z, rk4_lag(1.0, 0.0, 0.0437, p.delta_t, 10000), 1e-12);
}

TEST(PegStep, NonFiniteActionThrows) {
  const PegParams p;
  const PegState s = initial_state(p, {});
  try {
    step(s, p, {std::nan(""), 0.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFiniteAction);
  }
}

// Piecewise-constant actions over 8 s: the exact update against a fine RK4
// reference, and the force recomputed from position after every step.
TEST(PegStep, ExactUpdateAgainstFineReferenceProperty) {
  const PegParams p = profiled(20.0);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  PegState s = initial_state(p, {2.0, -1.0, 1.0, 0.5});
  double x = s.x, z = s.z, worst = 0.0;
  for (int k = 0; k < 800; ++k) {
    const PegAction a{u(rng), u(rng)};
    s = step(s, p, a);
    x = rk4_lag(x, a.u_x, p.tau_x, p.delta_t, 100);
    z = rk4_lag(z, a.u_z, p.tau_z, p.delta_t, 100);
    worst = std::max({worst, std::abs(s.x - x), std::abs(s.z - z)});
    EXPECT_EQ(s.f, p.k_sur * std::min(s.z - surface(p, s.x), 0.0));
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(Surface, ProfileAndSlope) {
  const PegParams p = profiled(5.0, 0.3, -0.2);
  for (double x : {0.0, 1.0, 2.5}) {
    EXPECT_NEAR(surface(p, x), 0.3 * std::sin(x) - 0.2 * std::cos(x), 1e-15);
    EXPECT_NEAR(surface_slope(p, x), 0.3 * std::cos(x) + 0.2 * std::sin(x), 1e-15);
  }
}

TEST(Observe, Designs) {
  PegState s;
  s.x = 1.0;
  s.f = -0.5;
  s.x_d = 1.0;
  s.f_d = -0.5;
  EXPECT_TRUE(observe(s, ObservationDesign::kError).isZero());
  const VectorXd d = observe(s, ObservationDesign::kErrorIntegral, 0.3, -0.2);
  EXPECT_EQ(d.size(), 4);
  EXPECT_DOUBLE_EQ(d[2], 0.3);
  EXPECT_DOUBLE_EQ(d[3], -0.2);
  const VectorXd a = observe(s, ObservationDesign::kRaw);
  EXPECT_DOUBLE_EQ(a[0], 1.0);
  EXPECT_DOUBLE_EQ(a[1], -0.5);
  EXPECT_EQ(parse_observation_design("b"), ObservationDesign::kError);
  EXPECT_EQ(parse_observation_design("d"), ObservationDesign::kErrorIntegral);
  EXPECT_THROW(parse_observation_design("z"), Error);
}

TEST(Reward, ExamplesAndLinearity) {
  PegState s;
  s.x_d = s.x = 2.0;
  s.f_d = s.f = -1.0;
  EXPECT_EQ(reward(s, {0.1, 0.2}, {0.1, 0.2}), 0.0);
  s.x = 1.5;
  const double r1 = reward(s, {}, {});
  s.x = 1.0;
  EXPECT_NEAR(reward(s, {}, {}), 2.0 * r1, 1e-15);
  s.f = -1.25;
  EXPECT_NEAR(reward(s, {0.0, 0.0}, {0.5, -0.25}), -(1.0 + 0.25) - 0.1 * 0.75, 1e-15);
}

TEST(Sampling, DeterministicAndInRange) {
  const PegTask a = sample_task(42), b = sample_task(42);
  EXPECT_EQ(a.x_d, b.x_d);
  EXPECT_EQ(a.z0, b.z0);
  std::mt19937_64 rng(3);
  const TaskRanges r;
  for (int k = 0; k < 10000; ++k) {
    const PegTask t = sample_task(rng, r);
    const PegParams p = sample_params(rng, r);
    ASSERT_GE(t.x_d, 1.0);
    ASSERT_LE(t.x_d, 3.0);
    ASSERT_GE(t.z0, -3.0);
    ASSERT_LE(t.z0, 1.0);
    ASSERT_GE(p.k_sur, 1.0);
    ASSERT_LE(p.k_sur, 31.0);
    ASSERT_LE(std::abs(p.k1_sur), 0.01);
    ASSERT_LE(std::abs(p.k2_sur), 0.01);
    ASSERT_EQ(p.tau_z, 0.0437);
    ASSERT_EQ(p.tau_x, 0.01);
  }
}

TEST(Perturb, Examples) {
  const PegParams p = profiled(10.0, 0.01, 0.01);
  const PegParams same = perturb_params(p, PerturbationDraw{});
  EXPECT_EQ(same.to_json(), p.to_json());
  PerturbationDraw up;
  up.k_sur = 1.0;
  EXPECT_DOUBLE_EQ(perturb_params(p, up).k_sur, 20.0);
  PerturbationDraw down;
  down.tau_x = -1.0;
  down.k_sur = -1.0;
  const PegParams d = perturb_params(p, down);
  EXPECT_DOUBLE_EQ(d.tau_x, 0.5 * p.tau_x);     // 50 % error stays above the floor
  EXPECT_DOUBLE_EQ(d.k_sur, 0.1 * p.k_sur);     // 100 % error is floor-clamped
  std::mt19937_64 rng(4);
  for (int k = 0; k < 1000; ++k) {
    const PegParams r = perturb_params(p, rng);
    ASSERT_GT(r.tau_z, 0.0);
    ASSERT_GT(r.tau_x, 0.0);
    ASSERT_GE(r.k_sur, 0.1 * p.k_sur);
    ASSERT_LE(r.k_sur, 2.0 * p.k_sur);
  }
}

TEST(PegEnv, IntegralsAndHorizon) {
  PegEnv env(PegParams{}, {2.0, -1.0, 1.0, 0.0}, 5);
  const VectorXd e0 = env.error();
  auto r = env.step({0.0, 1.0});
  EXPECT_FALSE(r.done);
  const VectorXd o = env.observe(ObservationDesign::kErrorIntegral);
  EXPECT_NEAR(o[2], e0[0] * 0.01, 1e-15);
  EXPECT_NEAR(o[3], e0[1] * 0.01, 1e-15);
  for (int k = 0; k < 3; ++k) EXPECT_FALSE(env.step({0.0, 1.0}).done);
  EXPECT_TRUE(env.step({0.0, 1.0}).done);
  env.reset();
  EXPECT_EQ(env.steps(), 0);
  EXPECT_TRUE(env.observe(ObservationDesign::kErrorIntegral).tail(2).isZero());
}

TEST(PegPlantModel, JacobiansMatchFiniteDifferences) {
  const PegParams p = profiled(12.0, 0.01, -0.01);
  const PegTask task{2.2, -1.3, 0, 0};
  const PlantModel m = peg_plant_model(p, task);
  std::mt19937_64 rng(5);
  for (int k = 0; k < 20; ++k) {
    const VectorXd y = testing::random_matrix(rng, 2, 1, -0.5, 0.5);
    const VectorXd u = testing::random_matrix(rng, 2, 1, -2.0, 2.0);
    const MatrixXd fy = finite_difference_jacobian(
        [&](const VectorXd& v) { return m.f(v, u, 0.0); }, y);
    const MatrixXd fu = finite_difference_jacobian(
        [&](const VectorXd& v) { return m.f(y, v, 0.0); }, u);
    EXPECT_LT(testing::rel_err(m.jac_y(y, u, 0.0), fy), 1e-7);
    EXPECT_LT(testing::rel_err(m.jac_u(y, u, 0.0), fu), 1e-7);
  }
}

TEST(PegNominalTransform, FlatSurfaceValues) {
  const CoordinateTransform t = peg_nominal_transform(PegParams{});
  MatrixXd swap(2, 2);
  swap << 0, 1, 1, 0;
  EXPECT_LT((t.wy - swap).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(t.eigenvalues[0], -1.0 / 0.0437, 1e-9);
  EXPECT_NEAR(t.eigenvalues[1], -1.0 / 0.01, 1e-9);
  EXPECT_NEAR(t.coupling_diag[0], 16.0 / 0.0437, 1e-9);
  EXPECT_NEAR(t.coupling_diag[1], 100.0, 1e-9);
}

// Closed form: u_x = x_d, K (z - g(x_d)) = f_d.
TEST(Equilibrium, ClosedFormMatchesNewton) {
  std::mt19937_64 rng(6);
  for (int k = 0; k < 50; ++k) {
    const PegParams p = sample_params(rng);
    const PegTask t = sample_task(rng);
    const double g = p.k1_sur * std::sin(t.x_d) + p.k2_sur * std::cos(t.x_d);
    const VectorXd closed = vec({t.x_d, g + t.f_d / p.k_sur});
    const VectorXd newton =
        solve_equilibrium_action(peg_plant_model(p, t), VectorXd::Zero(2));
    EXPECT_LT((newton - closed).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((peg_equilibrium_action(p, t) - closed).cwiseAbs().maxCoeff(), 1e-12);
  }
}

ConstrainedPolicy projected_policy(double clip = 4.0) {
  PolicyConfig cfg;
  cfg.hidden = {8, 8};
  cfg.action_clip = clip;
  return ConstrainedPolicy::random(peg_nominal_transform(PegParams{}), cfg);
}

std::vector<RegionPoint> small_region() {
  return region_from_grid(
      box_grid(VectorXd::Constant(4, -1.0), VectorXd::Constant(4, 1.0), 3), 2);
}

TEST(EquilibriumAudit, ProjectedPolicyWithRoomIsOk) {
  const PegParams p;
  const std::vector<PegTask> targets{{1.0, -2.0, 0, 0}, {3.0, -0.5, 0, 0}};
  const EquilibriumAudit a = equilibrium_audit(projected_policy(), p, targets, small_region());
  EXPECT_TRUE(a.s2_slope_nonzero);
  EXPECT_TRUE(a.all_reachable);
  EXPECT_TRUE(a.ok);
  for (const auto& t : a.targets) {
    EXPECT_LT((t.u_required - t.u_closed_form).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(EquilibriumAudit, TightClipIsUnreachable) {
  const EquilibriumAudit a = equilibrium_audit(
      projected_policy(1e-3), PegParams{}, {{2.0, -1.0, 0, 0}}, small_region());
  EXPECT_FALSE(a.all_reachable);
  EXPECT_FALSE(a.ok);
}

TEST(EquilibriumAudit, FlatIntegralInputIsFlagged) {
  ConstrainedPolicy policy = projected_policy();
  // Cut the s2 input of the first axis: an unprojected network whose output
  // ignores the integrator.
  policy.mutable_axes()[0].mutable_net().mutable_layers()[0].weights.col(1).setZero();
  const EquilibriumAudit a =
      equilibrium_audit(policy, PegParams{}, {{2.0, -1.0, 0, 0}}, small_region());
  EXPECT_FALSE(a.s2_slope_nonzero);
  EXPECT_EQ(a.min_abs_s2_slope[0], 0.0);
  EXPECT_GT(a.min_abs_s2_slope[1], 0.0);
  EXPECT_FALSE(a.ok);
}

std::vector<TrajectorySample> synthetic_log(int n, auto&& err, auto&& action) {
  std::vector<TrajectorySample> log(n);
  for (int k = 0; k < n; ++k) {
    log[k].t = k * 0.01;
    log[k].e_x = err(k);
    log[k].e_f = 0.0;
    log[k].u_z = action(k);
  }
  return log;
}

TEST(Summarize, FailureTaxonomy) {
  const int n = 800;
  auto flat = [](int) { return 0.0; };
  const auto good = summarize(synthetic_log(n, [](int) { return 0.1; }, flat), 0.01);
  EXPECT_FALSE(good.failed);
  EXPECT_NEAR(good.position_error, 0.1, 1e-12);

  const auto stuck = summarize(synthetic_log(n, [](int) { return 0.5; }, flat), 0.01);
  EXPECT_TRUE(stuck.failed);
  EXPECT_EQ(stuck.failure, FailureType::kNonzeroEquilibrium);

  const auto drift =
      summarize(synthetic_log(n, [](int k) { return 0.001 * k; }, flat), 0.01);
  EXPECT_TRUE(drift.failed);
  EXPECT_EQ(drift.failure, FailureType::kDrift);

  const auto chatter = summarize(
      synthetic_log(n, [](int) { return 0.5; }, [](int k) { return k % 2 ? 0.5 : -0.5; }),
      0.01);
  EXPECT_TRUE(chatter.failed);
  EXPECT_EQ(chatter.failure, FailureType::kChattering);
}

TEST(Rollout, DeterministicAndLogged) {
  const ConstrainedPolicy policy = projected_policy();
  const PegTask task{2.0, -1.0, 1.5, 0.5};
  const auto a = rollout_deterministic(policy, PegParams{}, task, 200);
  const auto b = rollout_deterministic(policy, PegParams{}, task, 200);
  ASSERT_EQ(a.size(), 200u);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].x, b[k].x);
    EXPECT_EQ(a[k].f, b[k].f);
  }
}

}  // namespace
}  // namespace cguard
