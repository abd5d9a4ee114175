#include "cguard/config.h"

#include <cstdlib>
#include <fstream>

#include "cguard/errors.h"

namespace cguard {
namespace {

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out,
          const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig,
                "field '" + section + "." + key + "': " + e.what());
  }
}

const nlohmann::json& section(const nlohmann::json& j, const char* name) {
  static const nlohmann::json empty = nlohmann::json::object();
  if (!j.contains(name)) return empty;
  if (!j[name].is_object()) {
    throw Error(ErrorCode::kInvalidConfig,
                std::string("field '") + name + "': expected an object");
  }
  return j[name];
}

}  // namespace

nlohmann::json RunConfig::to_json() const {
  std::vector<std::string> modes;
  for (TrainMode m : sweep_modes) modes.push_back(to_string(m));
  return {
      {"schema", kConfigSchema},
      {"seed", seed},
      {"jobs", jobs},
      {"train", train.to_json()},
      {"stability",
       {{"tasks", stability.tasks},
        {"horizon", stability.horizon_seconds},
        {"train_horizon", stability.train_horizon_seconds},
        {"seed", stability.seed},
        {"delta_t", stability.delta_t}}},
      {"robustness",
       {{"trials", robustness.trials},
        {"horizon", robustness.horizon_seconds},
        {"seed", robustness.seed},
        {"perturbation",
         {{"tau", robustness.perturbation.tau},
          {"k_sur", robustness.perturbation.k_sur},
          {"k_profile", robustness.perturbation.k_profile},
          {"floor_fraction", robustness.perturbation.floor_fraction}}}}},
      {"certify", {{"epsilon", certify_epsilon}, {"grid", certify_grid}}},
      {"sweep",
       {{"widths", sweep_widths}, {"modes", modes}, {"episodes", sweep_episodes}}},
      {"theorem3", theorem3.to_json()},
  };
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) {
    throw Error(ErrorCode::kInvalidConfig, "config must be a JSON object");
  }
  RunConfig c;
  if (j.contains("schema") && j["schema"] != kConfigSchema) {
    throw Error(ErrorCode::kInvalidConfig,
                "field 'schema': expected " + std::string(kConfigSchema));
  }
  read(j, "seed", c.seed, "");
  read(j, "jobs", c.jobs, "");
  if (j.contains("train")) {
    c.train = TrainConfig::from_json(section(j, "train"));
    if (!section(j, "train").contains("seed")) c.train.seed = c.seed;
  } else {
    c.train.seed = c.seed;
  }
  const auto& st = section(j, "stability");
  read(st, "tasks", c.stability.tasks, "stability");
  read(st, "horizon", c.stability.horizon_seconds, "stability");
  read(st, "train_horizon", c.stability.train_horizon_seconds, "stability");
  read(st, "seed", c.stability.seed, "stability");
  read(st, "delta_t", c.stability.delta_t, "stability");
  const auto& rb = section(j, "robustness");
  read(rb, "trials", c.robustness.trials, "robustness");
  read(rb, "horizon", c.robustness.horizon_seconds, "robustness");
  read(rb, "seed", c.robustness.seed, "robustness");
  if (rb.contains("perturbation")) {
    const auto& p = rb["perturbation"];
    read(p, "tau", c.robustness.perturbation.tau, "robustness.perturbation");
    read(p, "k_sur", c.robustness.perturbation.k_sur, "robustness.perturbation");
    read(p, "k_profile", c.robustness.perturbation.k_profile,
         "robustness.perturbation");
    read(p, "floor_fraction", c.robustness.perturbation.floor_fraction,
         "robustness.perturbation");
  }
  const auto& ce = section(j, "certify");
  read(ce, "epsilon", c.certify_epsilon, "certify");
  read(ce, "grid", c.certify_grid, "certify");
  const auto& sw = section(j, "sweep");
  read(sw, "widths", c.sweep_widths, "sweep");
  read(sw, "episodes", c.sweep_episodes, "sweep");
  if (sw.contains("modes")) {
    std::vector<std::string> names;
    read(sw, "modes", names, "sweep");
    c.sweep_modes.clear();
    for (const auto& n : names) c.sweep_modes.push_back(parse_train_mode(n));
  }
  if (j.contains("theorem3")) {
    c.theorem3 = Theorem3DemoConfig::from_json(section(j, "theorem3"));
  }
  if (c.jobs < 0 || c.stability.tasks <= 0 || c.robustness.trials <= 0 ||
      c.certify_grid <= 0 || !(c.certify_epsilon > 0.0) || c.sweep_episodes < 0) {
    throw Error(ErrorCode::kInvalidConfig, "counts and epsilon must be positive");
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kInvalidConfig, path + ": cannot open config");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, path + ": " + e.what());
  }
  try {
    return from_json(j);
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + e.detail());
  }
}

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("CGUARD_SEED");
  if (!v || !*v) return std::nullopt;
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw Error(ErrorCode::kInvalidConfig, "CGUARD_SEED is not an integer");
  }
}

std::optional<std::string> env_out() {
  const char* v = std::getenv("CGUARD_OUT");
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

}  // namespace cguard
