#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "censor/mixture.hpp"
#include "censor/mlp.hpp"
#include "censor/reward_model.hpp"
#include "censor/sampler.hpp"

namespace censor {

enum class Source { oracle, human };

std::string to_string(Source s);
Source source_from_string(const std::string& s);

struct FeedbackRecord {
  Vec x;
  int y = 0;
  std::size_t round = 1;
  Source source = Source::oracle;
  double elapsed_label_seconds = 0.0;
};

/// Append-only buffer of labeled feedback, persisted as JSON lines.
class FeedbackDataset {
 public:
  void append(FeedbackRecord record);
  void append(const std::vector<FeedbackRecord>& records);

  const std::vector<FeedbackRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  std::size_t count_malign() const;
  std::size_t count_benign() const;
  double total_label_seconds() const;

  std::string to_jsonl() const;
  static FeedbackDataset from_jsonl(const std::string& text);

 private:
  std::vector<FeedbackRecord> records_;
};

/// Supplies binary feedback (1 = benign) for a batch of points.
class Annotator {
 public:
  virtual ~Annotator() = default;
  virtual std::vector<int> label(const Points& points) = 0;
  virtual Source source() const = 0;
};

class OracleAnnotator final : public Annotator {
 public:
  explicit OracleAnnotator(LabeledMixture world) : world_(std::move(world)) {}
  std::vector<int> label(const Points& points) override { return oracle_annotate(world_, points); }
  Source source() const override { return Source::oracle; }

 private:
  LabeledMixture world_;
};

struct LabeledPoints {
  Points x;
  std::vector<int> y;

  std::size_t size() const { return y.size(); }
};

LabeledPoints concat(const LabeledPoints& a, const LabeledPoints& b);

struct TimedDataset {
  Points x;
  Vec t;  // continuous diffusion times
  Vec y;

  std::size_t size() const { return static_cast<std::size_t>(y.size()); }
};

/// For every example and copy: a grid time t uniform over all grid indices
/// (or `forced_step`), eps ~ N(0, I) and the record (forward_noise(x, t, eps), t, y).
TimedDataset make_noisy_dataset(const LabeledPoints& data, const DiffusionGrid& grid, std::size_t copies,
                                std::uint64_t seed, std::optional<std::size_t> forced_step = std::nullopt);

struct AugmentConfig {
  bool enabled = true;
  std::size_t variations = 15;  // per example, in [10, 20]
  double jitter_sigma = 0.1;
  double max_rotation_deg = 20.0;  // about the data centroid
};

nlohmann::json to_json(const AugmentConfig& c);
AugmentConfig augment_config_from_json(const nlohmann::json& j);

/// Originals followed by `variations` jittered/rotated copies of each
/// example; applied once, labels copied.
LabeledPoints augment(const LabeledPoints& data, const AugmentConfig& config, std::uint64_t seed);

struct RewardSpec {
  bool time_dependent = true;
  std::vector<int> hidden = {64, 64};
  std::size_t noisy_copies = 10;
  AugmentConfig augment;
};

nlohmann::json to_json(const RewardSpec& s);
RewardSpec reward_spec_from_json(const nlohmann::json& j);

/// Augment, noise (time-dependent rewards), and train one reward net.
/// Initialization and minibatches use config.seed.
NetReward train_reward_model(const LabeledPoints& data, const RewardSpec& spec, const DiffusionGrid& grid,
                             const TrainConfig& config, TrainResult* trace = nullptr);

struct EnsembleResult {
  std::vector<NetReward> members;
  std::vector<LabeledPoints> member_data;  // before augmentation

  RewardEnsemble ensemble() const;
};

/// K members, each on all malign examples plus N_M benign examples drawn
/// with replacement from the pool; member k trains with seed mix_seed(seed, k).
EnsembleResult build_ensemble(const Points& malign, const Points& benign_pool, std::size_t members,
                              const RewardSpec& spec, const DiffusionGrid& grid, const TrainConfig& config,
                              std::uint64_t seed);

/// One model on every malign and pooled benign example. Unless overridden,
/// alpha is scaled by N_M / N_B and iterations by (N_M + N_B) / (2 N_M).
NetReward train_union_baseline(const Points& malign, const Points& benign_pool, const RewardSpec& spec,
                               const DiffusionGrid& grid, TrainConfig config,
                               std::optional<double> alpha_override = std::nullopt,
                               std::optional<std::size_t> iterations_override = std::nullopt);

/// Thrown when a round is completed before its label quotas are met.
class QuotaUnmet : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PendingSample {
  std::size_t id = 0;
  Vec x;
  std::uint64_t seed = 0;
  std::optional<int> label;
  double elapsed_seconds = 0.0;
  Source source = Source::oracle;
};

/// Label collection for one round over a deterministic sample stream.
///
/// Samples are generated in chunks; chunk c of the stream is
/// sampler(chunk, mix_seed(stream_seed, c)). Labels are keyed by sample id.
class LabelingRound {
 public:
  LabelingRound(std::size_t round, BatchSampler sampler, std::uint64_t stream_seed, std::size_t chunk,
                std::size_t quota_malign, std::size_t quota_benign);

  std::size_t round() const { return round_; }
  const std::vector<PendingSample>& presented() const { return presented_; }
  std::span<const PendingSample> next_chunk();

  enum class SubmitStatus { stored, unchanged, unknown_sample, invalid_label };
  SubmitStatus submit(std::size_t id, int label, double elapsed_seconds, Source source);

  std::size_t labeled() const;
  std::size_t labeled_malign() const;
  std::size_t labeled_benign() const;
  bool quota_met() const;
  std::size_t quota_malign() const { return quota_malign_; }
  std::size_t quota_benign() const { return quota_benign_; }

  /// Label chunks in id order with an automatic annotator until the quotas are
  /// met or `max_presented` samples were labeled.
  void run(Annotator& annotator, std::size_t max_presented);

  /// Labeled samples in id order.
  std::vector<FeedbackRecord> records() const;

 private:
  std::size_t round_;
  BatchSampler sampler_;
  std::uint64_t stream_seed_;
  std::size_t chunk_;
  std::size_t quota_malign_, quota_benign_;
  std::size_t chunks_drawn_ = 0;
  std::vector<PendingSample> presented_;
};

/// Per round: the first quota_malign malign and first quota_benign benign
/// records, in buffer order. Extra labels stay in the buffer but are not trained on.
LabeledPoints select_training(const FeedbackDataset& buffer, std::size_t quota_malign, std::size_t quota_benign);

struct ImitationConfig {
  std::size_t rounds = 3;
  std::size_t quota_malign = 10;
  std::size_t quota_benign = 10;
  std::size_t chunk = 64;
  std::size_t base_iterations = 500;  // for one round's worth of kept labels
  std::size_t max_presented_per_round = 20000;
  bool warm_start = false;
  RewardSpec reward;
  TrainConfig train;
  GuidanceConfig guidance;  // used from round 2 on
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const ImitationConfig& c);
ImitationConfig imitation_config_from_json(const nlohmann::json& j);

struct RoundReport {
  std::size_t round = 0;
  std::size_t presented = 0;
  std::size_t malign_labeled = 0;
  std::size_t benign_labeled = 0;
  std::size_t kept = 0;
  std::size_t iterations = 0;
  double final_loss = 0.0;
  double label_seconds = 0.0;
  bool quota_met = true;
};

/// Multi-round label / censor / retrain loop. Round 1 labels uncensored
/// samples; later rounds label samples censored by the current model. Each
/// round retrains from the whole kept buffer with iterations proportional to
/// its size.
class ImitationLoop {
 public:
  ImitationLoop(const EpsModel& model, ImitationConfig config);

  std::size_t current_round() const { return reports_.size() + 1; }
  bool finished() const { return reports_.size() >= config_.rounds; }
  const ImitationConfig& config() const { return config_; }

  /// Labeling state of the current round (created on first access).
  LabelingRound& labeling();

  /// Commit the round's labels and retrain. Throws QuotaUnmet unless the
  /// quotas are met or `allow_partial` is set.
  RoundReport complete_round(bool allow_partial = false);

  /// Re-run the current round from already labeled records (resuming a run
  /// from its buffer); the records must all belong to this round.
  RoundReport restore_round(const std::vector<FeedbackRecord>& records);

  const FeedbackDataset& buffer() const { return buffer_; }
  const std::optional<NetReward>& model() const { return model_; }
  const std::vector<RoundReport>& reports() const { return reports_; }

  BatchSampler round_sampler(std::size_t round) const;
  std::uint64_t stream_seed(std::size_t round) const;
  std::uint64_t train_seed(std::size_t round) const;

 private:
  RoundReport finish_round(const std::vector<FeedbackRecord>& records, bool quota_met);

  const EpsModel& eps_;
  ImitationConfig config_;
  FeedbackDataset buffer_;
  std::optional<NetReward> model_;
  std::optional<LabelingRound> labeling_;
  std::vector<RoundReport> reports_;
};

/// Run the remaining rounds with an automatic annotator. `after_round` is
/// called after each round's training.
std::vector<RoundReport> imitation_loop(ImitationLoop& loop, Annotator& annotator,
                                        const std::function<void(const ImitationLoop&)>& after_round = {});

struct NonImitationResult {
  NetReward model;
  FeedbackDataset buffer;
  std::size_t presented = 0;
};

/// All labels from uncensored sampling (round 1's stream), one training run.
NonImitationResult non_imitation_baseline(const EpsModel& model, Annotator& annotator, const ImitationConfig& config,
                                          std::size_t quota_malign, std::size_t quota_benign,
                                          std::size_t iterations);

}  // namespace censor
