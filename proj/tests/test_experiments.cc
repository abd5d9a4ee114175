#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <gtest/gtest.h>

#include "cguard/config.h"
#include "cguard/errors.h"
#include "cguard/experiments.h"
#include "linear_fixtures.h"
#include "test_support.h"

namespace cguard {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cguard_exp_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Quantiles, LinearInterpolationOnKnownSample) {
  std::vector<double> v(101);
  std::iota(v.begin(), v.end(), 1.0);
  std::reverse(v.begin(), v.end());
  const Quantiles q = quantiles(v);
  EXPECT_DOUBLE_EQ(q.p50, 51.0);
  EXPECT_DOUBLE_EQ(q.p90, 91.0);
  EXPECT_DOUBLE_EQ(q.p99, 100.0);
  EXPECT_DOUBLE_EQ(q.max, 101.0);
  const Quantiles two = quantiles({0.0, 10.0});
  EXPECT_DOUBLE_EQ(two.p50, 5.0);
  EXPECT_DOUBLE_EQ(two.p90, 9.0);
  EXPECT_DOUBLE_EQ(quantiles({}).max, 0.0);
}

TEST(FitLogRate, RecoversExponentialAndStopsAtFloor) {
  std::vector<double> t, d;
  for (int k = 0; k < 50; ++k) {
    t.push_back(0.1 * k);
    d.push_back(3.0 * std::exp(-2.0 * 0.1 * k));
  }
  EXPECT_NEAR(fit_log_rate(t, d), -2.0, 1e-12);
  // Samples after the first one below the floor are ignored.
  d[30] = 0.0;
  d[31] = 1e6;
  EXPECT_NEAR(fit_log_rate(t, d), -2.0, 1e-12);
  EXPECT_EQ(fit_log_rate({0.0}, {1.0}), 0.0);
}

TEST(Rk4Step, MatchesExponentialDecay) {
  const PlantModel p = testing::linear_plant(MatrixXd::Constant(1, 1, -1.0),
                                             MatrixXd::Zero(1, 1));
  const VectorXd y = rk4_step(p, VectorXd::Ones(1), VectorXd::Zero(1), 0.0, 0.1);
  EXPECT_NEAR(y[0], std::exp(-0.1), 1e-9);
}

TEST(PairedTrajectories, CertifiedScalarPlantContracts) {
  const MatrixXd a = MatrixXd::Constant(1, 1, -1.0), b = MatrixXd::Ones(1, 1);
  const PlantModel plant = testing::linear_plant(a, b);
  const CoordinateTransform t = build_transform(a, b);
  const ConstrainedPolicy pol = testing::linear_certified_policy(t);
  EXPECT_TRUE(pol.feasible());
  const double eps = 0.5;
  const auto region = region_from_grid(
      box_grid(VectorXd::Constant(2, -1.0), VectorXd::Constant(2, 1.0), 5), 1);
  const auto cert =
      certify_theorem1(plant, fixed_transform(t), pol.closed_loop(), region, eps);
  ASSERT_TRUE(cert.verdict);
  const ContractionTrace tr = paired_trajectories(
      plant, pol, testing::vec({0.5}), testing::vec({-0.4}), 1e-3, 3000);
  EXPECT_LE(tr.fitted_rate, -eps / 2);
  EXPECT_LT(tr.distance.back(), tr.distance.front());
}

TEST(PairedTrajectories, IdenticalStartsStayTogether) {
  const MatrixXd a = MatrixXd::Constant(1, 1, -1.0), b = MatrixXd::Ones(1, 1);
  const ConstrainedPolicy pol =
      testing::linear_certified_policy(build_transform(a, b));
  const ContractionTrace tr = paired_trajectories(
      testing::linear_plant(a, b), pol, testing::vec({0.5}), testing::vec({0.5}),
      1e-3, 100);
  for (double d : tr.distance) EXPECT_EQ(d, 0.0);
  EXPECT_EQ(tr.fitted_rate, 0.0);
}

TEST(PairedTrajectories, FlippedPolicyFailsCertificateAndDiverges) {
  const MatrixXd a = MatrixXd::Constant(1, 1, -1.0), b = MatrixXd::Ones(1, 1);
  const PlantModel plant = testing::linear_plant(a, b);
  const CoordinateTransform t = build_transform(a, b);
  const ConstrainedPolicy pol = testing::linear_certified_policy(t, true);
  EXPECT_FALSE(pol.feasible());
  const auto region = region_from_grid(
      box_grid(VectorXd::Constant(2, -1.0), VectorXd::Constant(2, 1.0), 3), 1);
  EXPECT_FALSE(
      certify_theorem1(plant, fixed_transform(t), pol.closed_loop(), region, 0.5)
          .verdict);
  const ContractionTrace tr = paired_trajectories(
      plant, pol, testing::vec({0.1}), testing::vec({-0.1}), 1e-3, 500);
  EXPECT_GT(tr.fitted_rate, 0.0);
}

TEST(EvaluationTasks, DeterministicAndInRange) {
  const TaskRanges r;
  const auto a = evaluation_tasks(200, 7, r), b = evaluation_tasks(200, 7, r);
  const auto c = evaluation_tasks(200, 8, r);
  ASSERT_EQ(a.size(), 200u);
  bool differs = false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].task.f_d, b[k].task.f_d);
    EXPECT_EQ(a[k].params.k_sur, b[k].params.k_sur);
    differs |= a[k].task.f_d != c[k].task.f_d;
    EXPECT_GE(a[k].task.f_d, r.f_d_lo);
    EXPECT_LE(a[k].task.f_d, r.f_d_hi);
    EXPECT_GE(a[k].params.k_sur, r.k_sur_lo);
    EXPECT_LE(a[k].params.k_sur, r.k_sur_hi);
  }
  EXPECT_TRUE(differs);
}

Checkpoint fresh_checkpoint(std::uint64_t seed = 1, std::vector<int> hidden = {8, 8}) {
  TrainConfig c;
  c.seed = seed;
  c.hidden = hidden;
  c.value_hidden = {8, 8};
  Checkpoint ck;
  const Learner l = make_learner(peg_nominal_transform(c.base_params), c);
  ck.policy = l.policy;
  ck.value = l.value;
  ck.episode = 0;
  return ck;
}

TEST(StabilityTest, ZeroCheckpointsIsMissingCheckpoint) {
  try {
    stability_test({});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingCheckpoint);
  }
}

TEST(StabilityTest, RowsAreConsistentAndIndependentOfJobs) {
  std::vector<Checkpoint> cks = {fresh_checkpoint(1), fresh_checkpoint(2)};
  cks[1].episode = 1000;
  StabilityOptions o;
  o.tasks = 6;
  o.horizon_seconds = 4.0;
  o.train_horizon_seconds = 2.0;
  const StabilityReport a = stability_test(cks, o);
  o.jobs = 3;
  const StabilityReport b = stability_test(cks, o);
  ASSERT_EQ(a.rows.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    const StabilityRow& r = a.rows[i];
    EXPECT_EQ(r.tasks, 6);
    EXPECT_EQ(r.failures, r.chattering + r.nonzero_equilibrium + r.drift);
    EXPECT_EQ(r.failures, b.rows[i].failures);
    EXPECT_EQ(r.mean_error, b.rows[i].mean_error);
  }
  EXPECT_EQ(a.rows[1].episode, 1000);

  const auto dir = temp_dir("stab");
  a.write_csv((dir / "s.csv").string());
  std::ifstream in(dir / "s.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header.rfind("episode,mode,tasks,failures,failure_rate", 0), 0u);
  EXPECT_EQ(a.to_json()["rows"].size(), 2u);
  fs::remove_all(dir);
}

TEST(RobustnessTest, ZeroPerturbationMatchesNominalErrors) {
  const Checkpoint ck = fresh_checkpoint(3);
  RobustnessOptions o;
  o.trials = 8;
  o.horizon_seconds = 3.0;
  o.perturbation = PerturbationSpec{0.0, 0.0, 0.0, 0.1};
  const RobustnessReport r = robustness_test(ck, o);
  const auto tasks = evaluation_tasks(8, o.seed, o.ranges);
  const double dt = ck.policy.delta_t();
  ASSERT_EQ(r.force_errors.size(), 8u);
  for (int k = 0; k < 8; ++k) {
    const auto s = summarize(
        rollout_deterministic(ck.policy, tasks[k].params, tasks[k].task, 300), dt);
    EXPECT_NEAR(r.force_errors[k], s.force_error, 1e-12);
    EXPECT_NEAR(r.position_errors[k], s.position_error, 1e-12);
  }
  EXPECT_EQ(r.force.max, *std::max_element(r.force_errors.begin(), r.force_errors.end()));
}

TEST(RobustnessTest, DefaultPerturbationIsDeterministic) {
  const Checkpoint ck = fresh_checkpoint(3);
  RobustnessOptions o;
  o.trials = 6;
  o.horizon_seconds = 2.0;
  const RobustnessReport a = robustness_test(ck, o);
  o.jobs = 2;
  const RobustnessReport b = robustness_test(ck, o);
  EXPECT_EQ(a.force_errors, b.force_errors);
  EXPECT_EQ(a.to_json()["trials"], 6);
}

TEST(CertifyCheckpoint, FreshProjectedPolicyPassesConstraintVerification) {
  const Checkpoint ck = fresh_checkpoint(4, {32, 32, 32});
  const CertifyReport r = certify_checkpoint(ck, PegParams{}, PegTask{},
                                             CertifyRegion::peg_default(3), 1e-3);
  EXPECT_TRUE(r.constraints.satisfied);
  EXPECT_EQ(r.constraints.samples, 81);
  EXPECT_TRUE(r.equilibrium.ok);
  const auto j = r.to_json();
  EXPECT_TRUE(j.contains("contraction"));
  EXPECT_TRUE(j.contains("contraction_rebuilt_transform"));
  EXPECT_EQ(j["verdict"], r.verdict ? "pass" : "fail");
}

TEST(CertifyCheckpoint, SignFlippedPolicyFailsConstraints) {
  Checkpoint ck = fresh_checkpoint(5);
  for (auto& ax : ck.policy.mutable_axes()) {
    ax.mutable_net().mutable_layers().back().weights *= -1.0;
  }
  const CertifyReport r = certify_checkpoint(ck, PegParams{}, PegTask{},
                                             CertifyRegion::peg_default(3), 1e-3);
  EXPECT_FALSE(r.constraints.satisfied);
  EXPECT_FALSE(r.verdict);
  bool positive = false;
  for (double w : r.constraints.worst_s1) positive |= w > 0.0;
  EXPECT_TRUE(positive);
}

TEST(CertifyRegion, DefaultGridSize) {
  EXPECT_EQ(CertifyRegion::peg_default(3).points().size(), 81u);
  EXPECT_EQ(CertifyRegion::peg_default(1).points().size(), 1u);
}

TEST(SizeSweep, RecordsCurvesAndEvaluatesGate) {
  TrainConfig c;
  c.episodes = 2;
  c.envs_per_update = 2;
  c.steps_per_episode = 30;
  c.epochs_per_update = 1;
  c.value_hidden = {8, 8};
  const auto dir = temp_dir("sweep");
  const SweepResult r =
      size_sweep({32, 256}, {TrainMode::kPpo, TrainMode::kCppo}, c, dir.string());
  EXPECT_EQ(r.cells.size(), 4u);
  EXPECT_TRUE(r.gate_evaluated);
  for (const auto& cell : r.cells) EXPECT_EQ(cell.curve.size(), 1u);
  EXPECT_TRUE(fs::exists(dir / "sweep.csv"));
  EXPECT_TRUE(fs::exists(dir / "sweep.json"));
  EXPECT_TRUE(fs::exists(dir / "h256_ppo" / "learning_curve.csv"));
  const SweepResult only_small = size_sweep({32}, {TrainMode::kCppo}, c);
  EXPECT_FALSE(only_small.gate_evaluated);
  fs::remove_all(dir);
}

TEST(Report, WritesPlotsForTrainingArtifacts) {
  TrainConfig c;
  c.episodes = 4;
  c.envs_per_update = 2;
  c.steps_per_episode = 30;
  c.epochs_per_update = 1;
  c.hidden = {8, 8};
  c.value_hidden = {8, 8};
  const auto dir = temp_dir("report");
  train(TrainMode::kCppo, c, (dir / "cppo").string());
  const auto files = write_report(dir.string());
  ASSERT_FALSE(files.empty());
  for (const auto& f : files) {
    EXPECT_TRUE(fs::exists(f)) << f;
    std::ifstream in(f);
    std::string first;
    std::getline(in, first);
    EXPECT_NE(first.find("<svg"), std::string::npos) << f;
  }
  const auto empty = temp_dir("report_empty");
  EXPECT_TRUE(write_report(empty.string()).empty());
  fs::remove_all(dir);
  fs::remove_all(empty);
}

TEST(Svg, HistogramAndLinePlotAreWellFormed) {
  const auto dir = temp_dir("svg");
  svg_line_plot((dir / "l.svg").string(), "t", "x", "y",
                {{"a", {0, 1, 2}, {1, 0.5, 0.25}}});
  svg_histogram((dir / "h.svg").string(), "t", "x", {{"a", {0.1, 0.2, 0.2, 0.9}}});
  for (const char* n : {"l.svg", "h.svg"}) {
    std::ifstream in(dir / n);
    const std::string s((std::istreambuf_iterator<char>(in)), {});
    EXPECT_NE(s.find("<svg"), std::string::npos);
    EXPECT_NE(s.find("</svg>"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(RunConfig, RoundTripAndErrorsNameThePath) {
  RunConfig c;
  c.seed = 42;
  c.certify_grid = 5;
  c.train.episodes = 123;
  const RunConfig back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());

  const auto dir = temp_dir("cfg");
  const std::string bad = (dir / "bad.json").string();
  std::ofstream(bad) << "{ not json";
  try {
    RunConfig::load(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidConfig);
    EXPECT_NE(std::string(e.what()).find(bad), std::string::npos);
  }
  try {
    RunConfig::load((dir / "missing.json").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidConfig);
  }
  const std::string wrong = (dir / "wrong.json").string();
  std::ofstream(wrong) << R"({"train": {"clip_range": 2.0}})";
  EXPECT_THROW(RunConfig::load(wrong), Error);
  fs::remove_all(dir);
}

TEST(RunConfig, EnvironmentOverrides) {
  ::setenv("CGUARD_SEED", "77", 1);
  ::setenv("CGUARD_OUT", "/tmp/somewhere", 1);
  EXPECT_EQ(env_seed().value(), 77u);
  EXPECT_EQ(env_out().value(), "/tmp/somewhere");
  ::unsetenv("CGUARD_SEED");
  ::unsetenv("CGUARD_OUT");
  EXPECT_FALSE(env_seed().has_value());
  EXPECT_FALSE(env_out().has_value());
}

}  // namespace
}  // namespace cguard
