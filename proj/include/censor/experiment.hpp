#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "censor/config.hpp"
#include "censor/metrics.hpp"
#include "censor/reward_lab.hpp"

namespace censor {

struct LabelPool {
  Points malign;
  Points benign;
  std::size_t presented = 0;
};

/// Walks the uncensored sample stream (chunk c seeded mix_seed(seed, c)) and
/// keeps the first n_malign malign and first n_benign benign points.
LabelPool collect_labels(const EpsModel& model, Annotator& annotator, std::size_t n_malign, std::size_t n_benign,
                         std::size_t chunk, std::uint64_t seed, std::size_t max_presented = 1000000);

/// World, grid, analytic error model and lazily trained reward models for
/// one RunConfig. Everything is a deterministic function of the config.
class Lab {
 public:
  explicit Lab(RunConfig config);

  const RunConfig& config() const { return config_; }
  const LabeledMixture& world() const { return world_; }
  const DiffusionGrid& grid() const { return eps_->grid(); }
  const AnalyticEps& eps() const { return *eps_; }
  OracleAnnotator& oracle() { return oracle_; }

  const LabelPool& labels();
  const EnsembleResult& ensemble();
  const NetReward& single();  // first ensemble member
  const NetReward& union_model();

  /// Guidance settings of a guided arm (throws for unguided arms).
  GuidanceConfig arm_guidance(const std::string& arm) const;

  /// n samples of the arm; rejection arms fill `out.presented`.
  SamplerOutput sample_arm(const std::string& arm, std::size_t n, std::uint64_t seed);

  /// Trial t of every arm draws with mix_seed(config.seed, 1000 + t).
  /// eval.trials x eval.n samples of one arm unless overridden.
  ArmReport evaluate_arm(const std::string& arm, std::vector<Points>* dumps = nullptr,
                         std::optional<std::size_t> trials = std::nullopt, std::optional<std::size_t> n = std::nullopt);
  ArmReport evaluate_with(const std::string& name, const RewardModel& reward, const GuidanceConfig& guidance,
                          std::vector<Points>* dumps = nullptr);

  std::uint64_t trial_seed(std::size_t trial) const { return mix_seed(config_.seed, 1000 + trial); }

 private:
  RunConfig config_;
  LabeledMixture world_;
  std::unique_ptr<AnalyticEps> eps_;
  OracleAnnotator oracle_;
  std::optional<LabelPool> labels_;
  std::optional<EnsembleResult> ensemble_;
  std::optional<NetReward> union_;
  std::optional<RewardEnsemble> combined_;
};

struct ImitationRow {
  RoundReport report;
  ArmReport eval;
};

struct ImitationOutcome {
  std::vector<ImitationRow> rows;  // rows[0] is the uncensored baseline (round 0)
  FeedbackDataset buffer;
  std::vector<NetReward> models;   // one per round
};

/// Imitation run that can be advanced one round at a time. Rounds are
/// evaluated with the censored sampler as soon as they are trained.
class ImitationRun {
 public:
  /// Evaluates the uncensored baseline (row 0) and replays the completed
  /// rounds found in `resume`.
  ImitationRun(Lab& lab, const FeedbackDataset* resume = nullptr);

  bool finished() const { return loop_.finished(); }
  std::size_t current_round() const { return loop_.current_round(); }
  std::size_t restored_rounds() const { return restored_; }
  LabelingRound& labeling() { return loop_.labeling(); }
  const ImitationLoop& loop() const { return loop_; }

  /// Trains on the current round's labels and evaluates; see
  /// ImitationLoop::complete_round for QuotaUnmet.
  const ImitationRow& complete_round(bool allow_partial = false);

  const ImitationOutcome& outcome() const { return out_; }

 private:
  const ImitationRow& record(const RoundReport& report);

  Lab& lab_;
  ImitationLoop loop_;
  ImitationOutcome out_;
  std::size_t restored_ = 0;
};

/// Oracle-annotated imitation rounds, evaluating the censored sampler after
/// each round. A non-empty `resume` buffer replays its completed rounds
/// first (labels are taken from the buffer, models retrained).
ImitationOutcome run_imitation(Lab& lab, Annotator& annotator, const FeedbackDataset* resume = nullptr,
                               const std::function<void(const ImitationOutcome&)>& after_round = {});

struct NonImitationRow {
  std::size_t rounds_equivalent = 0;
  std::size_t quota_malign = 0;
  std::size_t quota_benign = 0;
  std::size_t iterations = 0;
  std::size_t presented = 0;
  ArmReport eval;
  std::optional<NetReward> model;
};

/// Labels rounds * quota from the uncensored stream in one go and trains for
/// the cumulative iterations of `rounds` imitation rounds.
NonImitationRow run_non_imitation(Lab& lab, Annotator& annotator, std::size_t rounds);

/// Mass of the world where the clean reward reaches `threshold`, by grid
/// quadrature (2-D worlds).
double grid_acceptance(const LabeledMixture& world, const RewardModel& reward, double threshold,
                       int resolution = 512);

/// Rows "round,presented,malign_labeled,benign_labeled,kept,iterations,final_loss,
/// label_seconds,malign_fraction,std,ci_low,ci_high,occupancy_tv".
std::string imitation_csv(const ImitationOutcome& outcome);
std::string non_imitation_csv(const std::vector<NonImitationRow>& rows);

}  // namespace censor
