#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cguard/experiments.h"
#include "cguard/impedance.h"
#include "cguard/ppo.h"

namespace cguard {

inline constexpr const char* kConfigSchema = "cguard.config.v1";

/// One JSON document with a section per subcommand. Every section is
/// optional; missing keys keep their defaults.
struct RunConfig {
  std::uint64_t seed = 0;
  int jobs = 0;  // 0 picks the core count
  TrainConfig train;
  StabilityOptions stability;
  RobustnessOptions robustness;
  double certify_epsilon = 1e-3;
  int certify_grid = 17;
  std::vector<int> sweep_widths = {32, 64, 128, 256, 512};
  std::vector<TrainMode> sweep_modes = {TrainMode::kPpo, TrainMode::kCppo};
  int sweep_episodes = 1000;
  Theorem3DemoConfig theorem3 = Theorem3DemoConfig::defaults();

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  // Throws InvalidConfig with the path and the offending field.
  static RunConfig load(const std::string& path);
};

// CGUARD_SEED and CGUARD_OUT, when set.
std::optional<std::uint64_t> env_seed();
std::optional<std::string> env_out();

}  // namespace cguard
