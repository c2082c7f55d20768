#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "censor/mixture.hpp"
#include "censor/mlp.hpp"
#include "censor/reward_lab.hpp"
#include "censor/sampler.hpp"
#include "censor/schedule.hpp"

namespace censor {

/// Either {"preset": name} or {"components": [{weight, mean, sigma | cov, label}]}.
LabeledMixture world_from_json(const nlohmann::json& j);
nlohmann::json world_to_json(const LabeledMixture& world);

struct EnsembleSpec {
  std::size_t members = 5;
  std::size_t malign = 10;        // N_M
  std::size_t benign_pool = 50;   // N_B
  double omega = 1.0;             // ensemble guidance weight
  double single_omega = 5.0;      // single / union models
  std::optional<double> union_alpha;
  std::optional<std::size_t> union_iterations;
};

struct UniversalSpec {
  std::size_t backward_steps = 5;
  double backward_step_size = 2e-4;
  std::size_t recurrence = 4;
};

struct FeedbackPlan {
  std::string annotator = "oracle";  // oracle | human
  std::size_t rounds = 3;
  std::size_t quota_malign = 10;
  std::size_t quota_benign = 10;
  std::size_t chunk = 64;
  std::size_t base_iterations = 500;
  std::size_t max_presented_per_round = 20000;
  bool warm_start = false;
};

struct EvalProtocol {
  std::size_t trials = 5;
  std::size_t n = 500;
  std::vector<std::string> arms = {"baseline", "single", "union", "ensemble", "ensemble_universal"};
};

struct RunConfig {
  nlohmann::json world = {{"preset", "benign_dominant"}};
  NoiseSchedule schedule;
  std::size_t num_steps = 1000;
  RewardSpec reward;
  TrainConfig train;
  EnsembleSpec ensemble;
  GuidanceConfig guidance;  // single-model guidance; mode follows the reward kind
  UniversalSpec universal;
  FeedbackPlan feedback;
  EvalProtocol eval;
  RejectionConfig rejection;
  std::uint64_t seed = 0;
  std::string output = "runs/default";

  ImitationConfig imitation() const;
  GuidanceMode guidance_mode() const;
};

nlohmann::json to_json(const RunConfig& c);

/// Parses and validates; unknown keys, type errors and bad values are all
/// collected and reported together in one ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);

/// Every problem with `j`, one "path: message" entry each.
std::vector<std::string> validate_run_config(const nlohmann::json& j);

std::vector<std::string> known_arms();

/// Named experiment settings: mnist_like, tench_like, bedroom_like.
std::vector<std::string> experiment_names();
RunConfig experiment_preset(const std::string& name);

}  // namespace censor
