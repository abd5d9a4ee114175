#include "cguard/experiments.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <thread>

#include "cguard/errors.h"

namespace cguard {

void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  jobs = std::clamp(jobs, 1, std::max(n, 1));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  for (int w = 0; w < jobs; ++w) {
    workers.emplace_back([&, w] {
      for (int i = w; i < n; i += jobs) fn(i);
    });
  }
  for (auto& t : workers) t.join();
}

std::vector<SeededTask> evaluation_tasks(int n, std::uint64_t seed,
                                         const TaskRanges& ranges,
                                         const PegParams& base) {
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL);
  std::vector<SeededTask> out;
  for (int k = 0; k < n; ++k) {
    SeededTask t;
    t.params = sample_params(rng, ranges, base.delta_t);
    t.params.tau_x = base.tau_x;
    t.params.tau_z = base.tau_z;
    t.task = sample_task(rng, ranges);
    out.push_back(t);
  }
  return out;
}

void StabilityReport::write_csv(const std::string& path) const {
  std::ofstream out(path);
  out << "episode,mode,tasks,failures,failure_rate,train_horizon_success,"
         "chattering,nonzero_equilibrium,drift,mean_error\n";
  for (const auto& r : rows) {
    out << r.episode << ',' << to_string(r.mode) << ',' << r.tasks << ','
        << r.failures << ',' << r.failure_rate() << ','
        << r.train_horizon_success() << ',' << r.chattering << ','
        << r.nonzero_equilibrium << ',' << r.drift << ',' << r.mean_error
        << '\n';
  }
}

nlohmann::json StabilityReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"episode", r.episode},
                         {"mode", to_string(r.mode)},
                         {"tasks", r.tasks},
                         {"failures", r.failures},
                         {"failure_rate", r.failure_rate()},
                         {"train_horizon_success", r.train_horizon_success()},
                         {"histogram",
                          {{"chattering", r.chattering},
                           {"nonzero_equilibrium", r.nonzero_equilibrium},
                           {"drift", r.drift}}},
                         {"mean_error", r.mean_error}});
  }
  return {{"horizon_seconds", horizon_seconds},
          {"train_horizon_seconds", train_horizon_seconds},
          {"rows", rows_json}};
}

StabilityReport stability_test(const std::vector<Checkpoint>& checkpoints,
                               const StabilityOptions& o) {
  if (checkpoints.empty()) {
    throw Error(ErrorCode::kMissingCheckpoint, "no checkpoints to evaluate");
  }
  StabilityReport report;
  report.horizon_seconds = o.horizon_seconds;
  report.train_horizon_seconds = o.train_horizon_seconds;
  auto tasks = evaluation_tasks(o.tasks, o.seed, o.ranges);
  for (const Checkpoint& original : checkpoints) {
    Checkpoint ck = original;
    if (o.delta_t > 0.0) {
      ck.policy.state().delta_t = o.delta_t;
      for (auto& t : tasks) t.params.delta_t = o.delta_t;
    }
    const double dt = ck.policy.delta_t();
    const int steps = static_cast<int>(std::lround(o.horizon_seconds / dt));
    const int train_steps =
        std::min(steps, static_cast<int>(std::lround(o.train_horizon_seconds / dt)));
    std::vector<EpisodeSummary> full(tasks.size()), shortened(tasks.size());
    parallel_for(static_cast<int>(tasks.size()), o.jobs, [&](int k) {
      auto log = rollout_deterministic(ck.policy, tasks[k].params,
                                       tasks[k].task, steps);
      full[k] = summarize(log, dt, o.criteria);
      log.resize(train_steps);
      shortened[k] = summarize(log, dt, o.criteria);
    });
    StabilityRow row;
    row.episode = ck.episode;
    row.mode = ck.mode;
    row.tasks = static_cast<int>(tasks.size());
    for (std::size_t k = 0; k < tasks.size(); ++k) {
      row.mean_error += full[k].combined_error;
      row.train_horizon_failures += shortened[k].failed ? 1 : 0;
      if (!full[k].failed) continue;
      ++row.failures;
      switch (full[k].failure) {
        case FailureType::kChattering: ++row.chattering; break;
        case FailureType::kDrift: ++row.drift; break;
        default: ++row.nonzero_equilibrium; break;
      }
    }
    if (row.tasks) row.mean_error /= row.tasks;
    report.rows.push_back(row);
  }
  return report;
}

Quantiles quantiles(std::vector<double> v) {
  Quantiles q;
  if (v.empty()) return q;
  std::sort(v.begin(), v.end());
  auto at = [&](double p) {
    const double idx = p * (v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(idx));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (idx - lo) * (v[hi] - v[lo]);
  };
  q.p50 = at(0.5);
  q.p90 = at(0.9);
  q.p99 = at(0.99);
  q.max = v.back();
  return q;
}

nlohmann::json RobustnessReport::to_json() const {
  auto qj = [](const Quantiles& q) {
    return nlohmann::json{{"p50", q.p50}, {"p90", q.p90}, {"p99", q.p99}, {"max", q.max}};
  };
  return {{"episode", episode},
          {"mode", to_string(mode)},
          {"trials", position_errors.size()},
          {"failures", failures},
          {"position_error", qj(position)},
          {"force_error", qj(force)}};
}

void RobustnessReport::write_csv(const std::string& path) const {
  std::ofstream out(path);
  out << "trial,position_error,force_error\n";
  out.precision(10);
  for (std::size_t k = 0; k < position_errors.size(); ++k) {
    out << k << ',' << position_errors[k] << ',' << force_errors[k] << '\n';
  }
}

RobustnessReport robustness_test(const Checkpoint& ck,
                                 const RobustnessOptions& o) {
  RobustnessReport r;
  r.episode = ck.episode;
  r.mode = ck.mode;
  const auto tasks = evaluation_tasks(o.trials, o.seed, o.ranges);
  std::vector<PegParams> perturbed(tasks.size());
  std::mt19937_64 rng(o.seed ^ 0xabcdef12345ULL);
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    perturbed[k] = perturb_params(tasks[k].params, rng, o.perturbation);
  }
  const double dt = ck.policy.delta_t();
  const int steps = static_cast<int>(std::lround(o.horizon_seconds / dt));
  std::vector<EpisodeSummary> s(tasks.size());
  parallel_for(static_cast<int>(tasks.size()), o.jobs, [&](int k) {
    s[k] = summarize(
        rollout_deterministic(ck.policy, perturbed[k], tasks[k].task, steps), dt,
        o.criteria);
  });
  for (const auto& e : s) {
    r.position_errors.push_back(e.position_error);
    r.force_errors.push_back(e.force_error);
    r.failures += e.failed ? 1 : 0;
  }
  r.position = quantiles(r.position_errors);
  r.force = quantiles(r.force_errors);
  return r;
}

void SweepResult::write_csv(const std::string& path) const {
  std::ofstream out(path);
  out << "hidden,mode,episode,mean_return,success_rate\n";
  for (const auto& c : cells) {
    std::string h;
    for (std::size_t i = 0; i < c.hidden.size(); ++i) {
      h += (i ? "x" : "") + std::to_string(c.hidden[i]);
    }
    for (const auto& r : c.curve) {
      out << h << ',' << to_string(c.mode) << ',' << r.episode << ','
          << r.mean_return << ',' << r.success_rate << '\n';
    }
  }
}

nlohmann::json SweepResult::to_json() const {
  nlohmann::json cj = nlohmann::json::array();
  for (const auto& c : cells) {
    cj.push_back({{"hidden", c.hidden},
                  {"mode", to_string(c.mode)},
                  {"final_success", c.final_success}});
  }
  return {{"cells", cj},
          {"gate_evaluated", gate_evaluated},
          {"gate_passed", gate_passed}};
}

SweepResult size_sweep(const std::vector<int>& widths,
                       const std::vector<TrainMode>& modes,
                       const TrainConfig& base, const std::string& out_dir) {
  namespace fs = std::filesystem;
  SweepResult result;
  double cppo32 = -1.0, cppo256 = -1.0;
  for (int w : widths) {
    for (TrainMode mode : modes) {
      TrainConfig c = base;
      c.hidden.assign(3, w);
      std::string sub;
      if (!out_dir.empty()) {
        sub = (fs::path(out_dir) /
               ("h" + std::to_string(w) + "_" + to_string(mode)))
                  .string();
      }
      TrainResult tr = train(mode, c, sub);
      SweepCell cell;
      cell.hidden = c.hidden;
      cell.mode = mode;
      cell.curve = tr.curve;
      const std::size_t n = tr.curve.size();
      const std::size_t from = n - std::max<std::size_t>(1, n / 4);
      for (std::size_t k = from; k < n; ++k) {
        cell.final_success += tr.curve[k].success_rate;
      }
      if (n) cell.final_success /= (n - from);
      if (mode == TrainMode::kCppo && w == 32) cppo32 = cell.final_success;
      if (mode == TrainMode::kCppo && w == 256) cppo256 = cell.final_success;
      result.cells.push_back(std::move(cell));
    }
  }
  if (cppo32 >= 0.0 && cppo256 >= 0.0) {
    result.gate_evaluated = true;
    result.gate_passed = cppo256 >= 0.8 * cppo32;
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    result.write_csv((fs::path(out_dir) / "sweep.csv").string());
    std::ofstream((fs::path(out_dir) / "sweep.json")) << result.to_json().dump(2);
  }
  return result;
}

CertifyRegion CertifyRegion::peg_default(int grid) {
  CertifyRegion r;
  r.y_lo = (VectorXd(2) << -2.0, -2.0).finished();
  r.y_hi = (VectorXd(2) << 2.0, 2.0).finished();
  r.s2_lo = (VectorXd(2) << -2.0, -2.0).finished();
  r.s2_hi = (VectorXd(2) << 2.0, 2.0).finished();
  r.grid = grid;
  return r;
}

std::vector<RegionPoint> CertifyRegion::points() const {
  const int m = static_cast<int>(y_lo.size());
  VectorXd lo(2 * m), hi(2 * m);
  lo << y_lo, s2_lo;
  hi << y_hi, s2_hi;
  return region_from_grid(box_grid(lo, hi, grid), m);
}

nlohmann::json CertifyReport::to_json() const {
  nlohmann::json c;
  c["satisfied"] = constraints.satisfied;
  c["worst_s1"] = constraints.worst_s1;
  c["worst_s2"] = constraints.worst_s2;
  c["epsilon_prime"] = constraints.epsilon_prime;
  c["samples"] = constraints.samples;
  c["saturated"] = constraints.saturated;
  c["saturated_percent"] = 100.0 * constraints.saturated_fraction();
  return {{"epsilon", epsilon},
          {"contraction", cguard::to_json(fixed)},
          {"contraction_rebuilt_transform", cguard::to_json(rebuilt)},
          {"constraints", c},
          {"equilibrium", equilibrium.to_json()},
          {"verdict", verdict ? "pass" : "fail"}};
}

CertifyReport certify_checkpoint(const Checkpoint& ck, const PegParams& params,
                                 const PegTask& task,
                                 const CertifyRegion& region, double epsilon) {
  CertifyReport r;
  r.epsilon = epsilon;
  const PlantModel plant = peg_plant_model(params, task);
  const auto pts = region.points();
  const ClosedLoopPolicy cl = ck.policy.closed_loop();
  r.fixed = certify_theorem1(plant, fixed_transform(ck.policy.transform()), cl,
                             pts, epsilon);
  r.rebuilt = certify_theorem1(plant, rebuild_transform(plant), cl, pts, epsilon);
  r.constraints = verify_constraint_satisfaction(ck.policy, pts, ck.policy.epsilon());
  r.equilibrium = equilibrium_audit(ck.policy, params, {task}, pts);
  r.verdict = r.fixed.verdict && r.constraints.satisfied && r.equilibrium.ok;
  return r;
}

VectorXd rk4_step(const PlantModel& plant, const VectorXd& y, const VectorXd& u,
                  double t, double dt, int substeps) {
  const double h = dt / substeps;
  VectorXd x = y;
  for (int k = 0; k < substeps; ++k) {
    const double tk = t + k * h;
    const VectorXd k1 = plant.f(x, u, tk);
    const VectorXd k2 = plant.f(x + 0.5 * h * k1, u, tk + 0.5 * h);
    const VectorXd k3 = plant.f(x + 0.5 * h * k2, u, tk + 0.5 * h);
    const VectorXd k4 = plant.f(x + h * k3, u, tk + h);
    x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return x;
}

ContractionTrace paired_trajectories(const PlantModel& plant,
                                     ConstrainedPolicy policy,
                                     const VectorXd& y0a, const VectorXd& y0b,
                                     double dt, int steps,
                                     double distance_floor) {
  ConstrainedPolicy pa = policy, pb = policy;
  pa.reset();
  pb.reset();
  const MatrixXd& wy = policy.transform().wy;
  const MatrixXd& wu = policy.transform().wu;
  ContractionTrace trace;
  VectorXd ya = y0a, yb = y0b;
  for (int k = 0; k <= steps; ++k) {
    const double t = k * dt;
    const PolicyOutput oa = policy_forward(pa, ya);
    const PolicyOutput ob = policy_forward(pb, yb);
    VectorXd delta(2 * wy.rows());
    delta << wy * (ya - yb), wu * (oa.u - ob.u);
    trace.t.push_back(t);
    trace.distance.push_back(delta.norm());
    if (k == steps) break;
    ya = rk4_step(plant, ya, oa.u, t, dt);
    yb = rk4_step(plant, yb, ob.u, t, dt);
  }
  trace.fitted_rate = fit_log_rate(trace.t, trace.distance, distance_floor);
  return trace;
}

double fit_log_rate(const std::vector<double>& t,
                    const std::vector<double>& d, double floor) {
  double st = 0, sl = 0, stt = 0, stl = 0;
  int n = 0;
  for (std::size_t k = 0; k < t.size() && k < d.size(); ++k) {
    if (!(d[k] > floor)) break;
    const double l = std::log(d[k]);
    st += t[k];
    sl += l;
    stt += t[k] * t[k];
    stl += t[k] * l;
    ++n;
  }
  if (n < 2) return 0.0;
  const double den = n * stt - st * st;
  return den == 0.0 ? 0.0 : (n * stl - st * sl) / den;
}

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

struct Frame {
  double x0 = 70, y0 = 40, w = 560, h = 320;
  double xmin, xmax, ymin, ymax;
  double px(double x) const { return x0 + (x - xmin) / (xmax - xmin) * w; }
  double py(double y) const { return y0 + h - (y - ymin) / (ymax - ymin) * h; }
};

void widen(double& lo, double& hi) {
  if (!std::isfinite(lo) || !std::isfinite(hi)) {
    lo = 0.0;
    hi = 1.0;
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
}

void axes(std::ostream& out, const Frame& f, const std::string& title,
          const std::string& xl, const std::string& yl) {
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='720' height='420' "
         "font-family='sans-serif' font-size='12'>\n"
      << "<rect width='100%' height='100%' fill='white'/>\n"
      << "<text x='360' y='22' text-anchor='middle' font-size='14'>" << title
      << "</text>\n"
      << "<rect x='" << f.x0 << "' y='" << f.y0 << "' width='" << f.w
      << "' height='" << f.h << "' fill='none' stroke='black'/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = f.xmin + k * (f.xmax - f.xmin) / 4;
    const double yv = f.ymin + k * (f.ymax - f.ymin) / 4;
    out << "<text x='" << f.px(xv) << "' y='" << f.y0 + f.h + 16
        << "' text-anchor='middle'>" << fmt(xv) << "</text>\n"
        << "<text x='" << f.x0 - 6 << "' y='" << f.py(yv) + 4
        << "' text-anchor='end'>" << fmt(yv) << "</text>\n";
  }
  out << "<text x='" << f.x0 + f.w / 2 << "' y='" << f.y0 + f.h + 34
      << "' text-anchor='middle'>" << xl << "</text>\n"
      << "<text x='16' y='" << f.y0 + f.h / 2
      << "' text-anchor='middle' transform='rotate(-90 16 " << f.y0 + f.h / 2
      << ")'>" << yl << "</text>\n";
}

}  // namespace

void svg_line_plot(const std::string& path, const std::string& title,
                   const std::string& x_label, const std::string& y_label,
                   const std::vector<Series>& series) {
  Frame f;
  f.xmin = f.ymin = std::numeric_limits<double>::infinity();
  f.xmax = f.ymax = -std::numeric_limits<double>::infinity();
  for (const auto& s : series) {
    for (double x : s.x) { f.xmin = std::min(f.xmin, x); f.xmax = std::max(f.xmax, x); }
    for (double y : s.y) { f.ymin = std::min(f.ymin, y); f.ymax = std::max(f.ymax, y); }
  }
  widen(f.xmin, f.xmax);
  widen(f.ymin, f.ymax);
  std::ofstream out(path);
  axes(out, f, title, x_label, y_label);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kPalette[i % 8];
    out << "<polyline fill='none' stroke='" << color << "' points='";
    for (std::size_t k = 0; k < s.x.size() && k < s.y.size(); ++k) {
      out << f.px(s.x[k]) << ',' << f.py(s.y[k]) << ' ';
    }
    out << "'/>\n<text x='" << f.x0 + f.w + 8 << "' y='" << f.y0 + 14 + 16 * i
        << "' fill='" << color << "' font-size='11'>" << s.label << "</text>\n";
  }
  out << "</svg>\n";
}

void svg_histogram(
    const std::string& path, const std::string& title, const std::string& x_label,
    const std::vector<std::pair<std::string, std::vector<double>>>& data,
    int bins) {
  Frame f;
  f.xmin = std::numeric_limits<double>::infinity();
  f.xmax = -f.xmin;
  for (const auto& [label, v] : data) {
    for (double x : v) { f.xmin = std::min(f.xmin, x); f.xmax = std::max(f.xmax, x); }
  }
  widen(f.xmin, f.xmax);
  std::vector<std::vector<int>> counts(data.size(), std::vector<int>(bins, 0));
  int peak = 1;
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (double x : data[i].second) {
      int b = static_cast<int>((x - f.xmin) / (f.xmax - f.xmin) * bins);
      b = std::clamp(b, 0, bins - 1);
      peak = std::max(peak, ++counts[i][b]);
    }
  }
  f.ymin = 0.0;
  f.ymax = peak;
  std::ofstream out(path);
  axes(out, f, title, x_label, "count");
  const double bw = f.w / bins;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const char* color = kPalette[i % 8];
    for (int b = 0; b < bins; ++b) {
      if (!counts[i][b]) continue;
      const double top = f.py(counts[i][b]);
      out << "<rect x='" << f.x0 + b * bw << "' y='" << top << "' width='" << bw
          << "' height='" << f.y0 + f.h - top << "' fill='" << color
          << "' fill-opacity='0.45'/>\n";
    }
    out << "<text x='" << f.x0 + f.w + 8 << "' y='" << f.y0 + 14 + 16 * i
        << "' fill='" << color << "' font-size='11'>" << data[i].first
        << "</text>\n";
  }
  out << "</svg>\n";
}

namespace {

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace

std::vector<std::string> write_report(const std::string& run_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(run_dir)) {
    throw Error(ErrorCode::kMissingCheckpoint, "no run directory " + run_dir);
  }
  std::vector<std::string> written;
  std::vector<fs::path> curves;
  for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
    if (entry.path().filename() == "learning_curve.csv") curves.push_back(entry.path());
  }
  std::sort(curves.begin(), curves.end());
  if (!curves.empty()) {
    std::vector<Series> ret, succ;
    for (const auto& p : curves) {
      Series r{fs::relative(p.parent_path(), run_dir).string(), {}, {}};
      if (r.label == ".") r.label = "run";
      Series s = r;
      for (const auto& row : read_csv(p.string())) {
        if (row.size() < 3) continue;
        r.x.push_back(std::stod(row[0]));
        r.y.push_back(-std::stod(row[1]));
        s.x.push_back(std::stod(row[0]));
        s.y.push_back(std::stod(row[2]));
      }
      ret.push_back(std::move(r));
      succ.push_back(std::move(s));
    }
    const auto a = (fs::path(run_dir) / "learning_curve.svg").string();
    svg_line_plot(a, "Learning curve", "episode", "negative mean return", ret);
    const auto b = (fs::path(run_dir) / "success_rate.svg").string();
    svg_line_plot(b, "Training success rate", "episode", "success rate", succ);
    written.push_back(a);
    written.push_back(b);
  }
  const fs::path stab = fs::path(run_dir) / "stability.csv";
  if (fs::exists(stab)) {
    std::map<std::string, Series> by_mode;
    for (const auto& row : read_csv(stab.string())) {
      if (row.size() < 5) continue;
      Series& s = by_mode[row[1]];
      s.label = row[1];
      s.x.push_back(std::stod(row[0]));
      s.y.push_back(std::stod(row[4]));
    }
    std::vector<Series> series;
    for (auto& [k, v] : by_mode) series.push_back(v);
    const auto p = (fs::path(run_dir) / "stability.svg").string();
    svg_line_plot(p, "Failure rate at the stability horizon", "episode",
                  "failure rate", series);
    written.push_back(p);
  }
  for (const char* name : {"robustness_cppo.csv", "robustness_ppo.csv"}) {
    const fs::path rob = fs::path(run_dir) / name;
    if (!fs::exists(rob)) continue;
    std::vector<double> pos, force;
    for (const auto& row : read_csv(rob.string())) {
      if (row.size() < 3) continue;
      pos.push_back(std::stod(row[1]));
      force.push_back(std::stod(row[2]));
    }
    const auto p = (fs::path(run_dir) / (rob.stem().string() + ".svg")).string();
    svg_histogram(p, "Final errors under perturbed parameters", "error",
                  {{"position", pos}, {"force", force}});
    written.push_back(p);
  }
  return written;
}

}  // namespace cguard
