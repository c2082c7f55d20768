#include "censor/reward_model.hpp"

#include <cmath>

namespace censor {

ExactReward::ExactReward(LabeledMixture world, NoiseSchedule schedule, bool time_dependent)
    : world_(std::move(world)), schedule_(schedule), time_dependent_(time_dependent) {}

Vec ExactReward::log_reward(const Points& x, double t) const {
  return world_.marginal_at(effective_time(t), schedule_).log_rewards(x);
}

Points ExactReward::grad_log_reward(const Points& x, double t) const {
  return world_.marginal_at(effective_time(t), schedule_).grad_log_rewards(x);
}

NetReward::NetReward(Mlp net, bool time_dependent, double horizon)
    : net_(std::move(net)), time_dependent_(time_dependent), horizon_(horizon) {
  if (net_.head() != Head::sigmoid || net_.output_width() != 1)
    throw ConfigError("reward net needs a scalar sigmoid head");
}

Mat NetReward::inputs(const Points& x, double t) const {
  return with_time(x, time_dependent_ ? std::optional<double>(t / horizon_) : std::nullopt);
}

Vec NetReward::log_reward(const Points& x, double t) const { return net_.log_output(inputs(x, t)); }

Points NetReward::grad_log_reward(const Points& x, double t) const {
  return net_.grad_log_output(inputs(x, t)).topRows(x.rows());
}

nlohmann::json NetReward::to_json() const {
  nlohmann::json j = net_.to_json();
  j["time_dependent"] = time_dependent_;
  j["horizon"] = horizon_;
  return j;
}

NetReward NetReward::from_json(const nlohmann::json& j) {
  return NetReward(Mlp::from_json(j), j.at("time_dependent").get<bool>(), j.value("horizon", 1.0));
}

RewardEnsemble::RewardEnsemble(std::vector<std::shared_ptr<const RewardModel>> members)
    : members_(std::move(members)) {
  if (members_.empty()) throw ConfigError("ensemble needs at least one member");
  for (const auto& m : members_) {
    if (m->time_dependent() != members_.front()->time_dependent() || m->dim() != members_.front()->dim())
      throw ConfigError("ensemble members disagree on time dependence or dimension");
  }
}

namespace {

template <class Eval>
Mat exact_member_sum(std::size_t k, Eval&& eval) {
  Mat first = eval(0);
  if (k == 1) return first;
  Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic> acc = first.cast<long double>();
  for (std::size_t i = 1; i < k; ++i) acc += eval(i).template cast<long double>();
  return acc.cast<double>();
}

}  // namespace

Vec RewardEnsemble::log_reward(const Points& x, double t) const {
  return exact_member_sum(members_.size(), [&](std::size_t i) -> Mat { return members_[i]->log_reward(x, t); });
}

Points RewardEnsemble::grad_log_reward(const Points& x, double t) const {
  return exact_member_sum(members_.size(), [&](std::size_t i) -> Mat { return members_[i]->grad_log_reward(x, t); });
}

Vec RewardEnsemble::mean_reward(const Points& x, double t) const {
  Vec sum = Vec::Zero(x.cols());
  for (const auto& m : members_) sum += m->reward(x, t);
  return sum / static_cast<double>(members_.size());
}

Vec RewardEnsemble::acceptance_score(const Points& x) const { return mean_reward(x, 0.0); }

nlohmann::json ensemble_to_json(const std::vector<NetReward>& members) {
  nlohmann::json j;
  j["kind"] = "ensemble";
  j["combine_for_guidance"] = "product";
  j["combine_for_rejection"] = "mean";
  j["members"] = nlohmann::json::array();
  for (const auto& m : members) j["members"].push_back(m.to_json());
  return j;
}

std::vector<NetReward> ensemble_members_from_json(const nlohmann::json& j) {
  std::vector<NetReward> out;
  for (const auto& m : j.at("members")) out.push_back(NetReward::from_json(m));
  return out;
}

}  // namespace censor
