#pragma once

#include <memory>
#include <vector>

#include <json.hpp>

#include "censor/mixture.hpp"
#include "censor/mlp.hpp"
#include "censor/types.hpp"

namespace censor {

/// A (possibly time-dependent) estimate of P(benign | x_t).
///
/// Everything is in the log domain; `t` is continuous diffusion time and is
/// ignored by time-independent models.
class RewardModel {
 public:
  virtual ~RewardModel() = default;

  virtual bool time_dependent() const = 0;
  virtual int dim() const = 0;
  virtual Vec log_reward(const Points& x, double t) const = 0;
  virtual Points grad_log_reward(const Points& x, double t) const = 0;

  Vec reward(const Points& x, double t) const { return log_reward(x, t).array().exp().matrix(); }

  /// Score compared against a rejection threshold on clean samples.
  virtual Vec acceptance_score(const Points& x) const { return reward(x, 0.0); }
};

/// Exact reward of a labeled mixture world.
class ExactReward final : public RewardModel {
 public:
  ExactReward(LabeledMixture world, NoiseSchedule schedule, bool time_dependent = true);

  bool time_dependent() const override { return time_dependent_; }
  int dim() const override { return world_.dim(); }
  Vec log_reward(const Points& x, double t) const override;
  Points grad_log_reward(const Points& x, double t) const override;

 private:
  double effective_time(double t) const { return time_dependent_ ? t : 0.0; }

  LabeledMixture world_;
  NoiseSchedule schedule_;
  bool time_dependent_;
};

/// Reward backed by a sigmoid-head Mlp; time-dependent nets take t/T as an
/// extra trailing input.
class NetReward final : public RewardModel {
 public:
  NetReward(Mlp net, bool time_dependent, double horizon = 1.0);

  bool time_dependent() const override { return time_dependent_; }
  int dim() const override { return net_.input_width() - (time_dependent_ ? 1 : 0); }
  Vec log_reward(const Points& x, double t) const override;
  Points grad_log_reward(const Points& x, double t) const override;

  const Mlp& net() const { return net_; }
  double horizon() const { return horizon_; }

  nlohmann::json to_json() const;
  static NetReward from_json(const nlohmann::json& j);

 private:
  Mat inputs(const Points& x, double t) const;

  Mlp net_;
  bool time_dependent_;
  double horizon_;
};

/// Product-of-members reward (log rewards and their gradients add) used for
/// guidance; rejection uses the member mean instead.
///
/// Member contributions are accumulated in extended precision and rounded
/// once, so K identical members give exactly K times one member's gradient.
class RewardEnsemble final : public RewardModel {
 public:
  explicit RewardEnsemble(std::vector<std::shared_ptr<const RewardModel>> members);

  bool time_dependent() const override { return members_.front()->time_dependent(); }
  int dim() const override { return members_.front()->dim(); }
  Vec log_reward(const Points& x, double t) const override;
  Points grad_log_reward(const Points& x, double t) const override;

  /// (1/K) sum_k r_k(x) at t = 0.
  Vec acceptance_score(const Points& x) const override;
  Vec mean_reward(const Points& x, double t) const;

  std::size_t size() const { return members_.size(); }
  const RewardModel& member(std::size_t k) const { return *members_[k]; }

 private:
  std::vector<std::shared_ptr<const RewardModel>> members_;
};

/// {"kind": "ensemble", "combine_for_guidance": "product", "combine_for_rejection": "mean", "members": [...]}
nlohmann::json ensemble_to_json(const std::vector<NetReward>& members);
std::vector<NetReward> ensemble_members_from_json(const nlohmann::json& j);

}  // namespace censor
