#include "censor/reward_lab.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

namespace censor {

std::string to_string(Source s) { return s == Source::oracle ? "oracle" : "human"; }

Source source_from_string(const std::string& s) {
  if (s == "oracle") return Source::oracle;
  if (s == "human") return Source::human;
  throw ConfigError("unknown feedback source '" + s + "'");
}

void FeedbackDataset::append(FeedbackRecord record) {
  if (record.y != 0 && record.y != 1) throw std::invalid_argument("feedback label must be 0 or 1");
  records_.push_back(std::move(record));
}

void FeedbackDataset::append(const std::vector<FeedbackRecord>& records) {
  for (const auto& r : records) append(r);
}

std::size_t FeedbackDataset::count_malign() const {
  return static_cast<std::size_t>(
      std::count_if(records_.begin(), records_.end(), [](const FeedbackRecord& r) { return r.y == 0; }));
}

std::size_t FeedbackDataset::count_benign() const { return records_.size() - count_malign(); }

double FeedbackDataset::total_label_seconds() const {
  double s = 0.0;
  for (const auto& r : records_) s += r.elapsed_label_seconds;
  return s;
}

std::string FeedbackDataset::to_jsonl() const {
  std::string out;
  for (const auto& r : records_) {
    nlohmann::ordered_json j;
    j["x"] = std::vector<double>(r.x.data(), r.x.data() + r.x.size());
    j["y"] = r.y;
    j["round"] = r.round;
    j["source"] = to_string(r.source);
    j["elapsed_label_seconds"] = r.elapsed_label_seconds;
    out += j.dump();
    out += '\n';
  }
  return out;
}

FeedbackDataset FeedbackDataset::from_jsonl(const std::string& text) {
  FeedbackDataset ds;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const auto x = j.at("x").get<std::vector<double>>();
    ds.append({Eigen::Map<const Vec>(x.data(), static_cast<Eigen::Index>(x.size())), j.at("y").get<int>(),
               j.at("round").get<std::size_t>(), source_from_string(j.at("source")),
               j.at("elapsed_label_seconds").get<double>()});
  }
  return ds;
}

LabeledPoints concat(const LabeledPoints& a, const LabeledPoints& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  require_shape(a.x.rows() == b.x.rows(), "concat: dimension mismatch");
  LabeledPoints out;
  out.x.resize(a.x.rows(), a.x.cols() + b.x.cols());
  out.x << a.x, b.x;
  out.y = a.y;
  out.y.insert(out.y.end(), b.y.begin(), b.y.end());
  return out;
}

TimedDataset make_noisy_dataset(const LabeledPoints& data, const DiffusionGrid& grid, std::size_t copies,
                                std::uint64_t seed, std::optional<std::size_t> forced_step) {
  if (copies < 1) throw std::invalid_argument("make_noisy_dataset: copies must be >= 1");
  if (forced_step && *forced_step > grid.num_steps()) throw std::out_of_range("make_noisy_dataset: step off grid");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, grid.num_steps());
  std::normal_distribution<double> normal;
  const auto d = data.x.rows();
  const auto total = static_cast<Eigen::Index>(data.size() * copies);
  TimedDataset out{Points(d, total), Vec(total), Vec(total)};
  Vec eps(d);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t c = 0; c < copies; ++c, ++row) {
      const std::size_t k = forced_step ? *forced_step : pick(rng);
      for (Eigen::Index r = 0; r < d; ++r) eps[r] = normal(rng);
      const double a = grid.alpha(k);
      out.x.col(row) = std::sqrt(a) * data.x.col(static_cast<Eigen::Index>(i)) + std::sqrt(1.0 - a) * eps;
      out.t[row] = grid.time(k);
      out.y[row] = data.y[i];
    }
  }
  return out;
}

nlohmann::json to_json(const AugmentConfig& c) {
  return {{"enabled", c.enabled},
          {"variations", c.variations},
          {"jitter_sigma", c.jitter_sigma},
          {"max_rotation_deg", c.max_rotation_deg}};
}

AugmentConfig augment_config_from_json(const nlohmann::json& j) {
  AugmentConfig c;
  c.enabled = j.value("enabled", c.enabled);
  c.variations = j.value("variations", c.variations);
  c.jitter_sigma = j.value("jitter_sigma", c.jitter_sigma);
  c.max_rotation_deg = j.value("max_rotation_deg", c.max_rotation_deg);
  return c;
}

LabeledPoints augment(const LabeledPoints& data, const AugmentConfig& config, std::uint64_t seed) {
  if (!config.enabled || data.size() == 0) return data;
  if (config.variations < 10 || config.variations > 20)
    throw ConfigError("augment: variations must lie in [10, 20]");
  const auto d = data.x.rows();
  const auto n = static_cast<Eigen::Index>(data.size());
  const Vec centroid = data.x.rowwise().mean();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(-config.max_rotation_deg, config.max_rotation_deg);
  std::normal_distribution<double> normal;

  const auto k = static_cast<Eigen::Index>(config.variations);
  LabeledPoints out;
  out.x.resize(d, n * (k + 1));
  out.x.leftCols(n) = data.x;
  out.y = data.y;
  out.y.reserve(static_cast<std::size_t>(n * (k + 1)));
  Eigen::Index col = n;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index v = 0; v < k; ++v, ++col) {
      Vec p = data.x.col(i) - centroid;
      if (d >= 2) {
        const double th = angle(rng) * std::numbers::pi / 180.0;
        const double c = std::cos(th), s = std::sin(th);
        const double p0 = p[0], p1 = p[1];
        p[0] = c * p0 - s * p1;
        p[1] = s * p0 + c * p1;
      }
      for (Eigen::Index r = 0; r < d; ++r) p[r] += config.jitter_sigma * normal(rng);
      out.x.col(col) = centroid + p;
      out.y.push_back(data.y[static_cast<std::size_t>(i)]);
    }
  }
  return out;
}

nlohmann::json to_json(const RewardSpec& s) {
  return {{"time_dependent", s.time_dependent},
          {"hidden", s.hidden},
          {"noisy_copies", s.noisy_copies},
          {"augment", to_json(s.augment)}};
}

RewardSpec reward_spec_from_json(const nlohmann::json& j) {
  RewardSpec s;
  s.time_dependent = j.value("time_dependent", s.time_dependent);
  s.hidden = j.value("hidden", s.hidden);
  s.noisy_copies = j.value("noisy_copies", s.noisy_copies);
  if (j.contains("augment")) s.augment = augment_config_from_json(j.at("augment"));
  return s;
}

namespace {

NetReward train_reward_impl(const LabeledPoints& data, const RewardSpec& spec, const DiffusionGrid& grid,
                            const TrainConfig& config, const Mlp* init, TrainResult* trace) {
  if (data.size() == 0) throw std::invalid_argument("train_reward_model: empty dataset");
  const auto d = static_cast<int>(data.x.rows());
  const LabeledPoints aug = augment(data, spec.augment, mix_seed(config.seed, 11));

  BinaryDataset ds;
  if (spec.time_dependent) {
    const TimedDataset noisy = make_noisy_dataset(aug, grid, spec.noisy_copies, mix_seed(config.seed, 12));
    ds.inputs.resize(d + 1, noisy.x.cols());
    ds.inputs.topRows(d) = noisy.x;
    ds.inputs.row(d) = (noisy.t / grid.schedule().horizon).transpose();
    ds.labels = noisy.y;
  } else {
    ds.inputs = aug.x;
    ds.labels.resize(static_cast<Eigen::Index>(aug.size()));
    for (std::size_t i = 0; i < aug.size(); ++i) ds.labels[static_cast<Eigen::Index>(i)] = aug.y[i];
  }

  std::vector<int> widths{spec.time_dependent ? d + 1 : d};
  widths.insert(widths.end(), spec.hidden.begin(), spec.hidden.end());
  widths.push_back(1);
  Mlp net(widths, Head::sigmoid, mix_seed(config.seed, 13));
  if (init) {
    if (init->widths() != widths) throw ConfigError("warm start: architecture mismatch");
    net.set_params(init->params());
  }
  TrainResult result = train(net, ds, config);
  if (trace) *trace = std::move(result);
  return NetReward(std::move(net), spec.time_dependent, grid.schedule().horizon);
}

}  // namespace

NetReward train_reward_model(const LabeledPoints& data, const RewardSpec& spec, const DiffusionGrid& grid,
                             const TrainConfig& config, TrainResult* trace) {
  return train_reward_impl(data, spec, grid, config, nullptr, trace);
}

RewardEnsemble EnsembleResult::ensemble() const {
  std::vector<std::shared_ptr<const RewardModel>> ptrs;
  for (const auto& m : members) ptrs.push_back(std::make_shared<NetReward>(m));
  return RewardEnsemble(std::move(ptrs));
}

EnsembleResult build_ensemble(const Points& malign, const Points& benign_pool, std::size_t members,
                              const RewardSpec& spec, const DiffusionGrid& grid, const TrainConfig& config,
                              std::uint64_t seed) {
  if (malign.cols() == 0) throw ConfigError("build_ensemble: empty malign set");
  if (benign_pool.cols() == 0) throw ConfigError("build_ensemble: empty benign pool");
  if (members == 0) throw ConfigError("build_ensemble: need at least one member");
  const auto n_m = malign.cols();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, benign_pool.cols() - 1);
  EnsembleResult result;
  for (std::size_t k = 0; k < members; ++k) {
    LabeledPoints data;
    data.x.resize(malign.rows(), 2 * n_m);
    data.x.leftCols(n_m) = malign;
    data.y.assign(static_cast<std::size_t>(n_m), 0);
    for (Eigen::Index i = 0; i < n_m; ++i) {
      data.x.col(n_m + i) = benign_pool.col(pick(rng));
      data.y.push_back(1);
    }
    TrainConfig member_cfg = config;
    member_cfg.seed = mix_seed(seed, k);
    result.members.push_back(train_reward_model(data, spec, grid, member_cfg));
    result.member_data.push_back(std::move(data));
  }
  return result;
}

NetReward train_union_baseline(const Points& malign, const Points& benign_pool, const RewardSpec& spec,
                               const DiffusionGrid& grid, TrainConfig config, std::optional<double> alpha_override,
                               std::optional<std::size_t> iterations_override) {
  if (malign.cols() == 0) throw ConfigError("train_union_baseline: empty malign set");
  const auto n_m = static_cast<double>(malign.cols());
  const auto n_b = static_cast<double>(benign_pool.cols());
  config.alpha = alpha_override ? *alpha_override : config.alpha * std::min(1.0, n_m / n_b);
  config.iterations = iterations_override
                          ? *iterations_override
                          : static_cast<std::size_t>(std::llround(config.iterations * (n_m + n_b) / (2.0 * n_m)));
  LabeledPoints data;
  data.x.resize(malign.rows(), malign.cols() + benign_pool.cols());
  data.x << malign, benign_pool;
  data.y.assign(static_cast<std::size_t>(malign.cols()), 0);
  data.y.insert(data.y.end(), static_cast<std::size_t>(benign_pool.cols()), 1);
  return train_reward_model(data, spec, grid, config);
}

LabelingRound::LabelingRound(std::size_t round, BatchSampler sampler, std::uint64_t stream_seed, std::size_t chunk,
                             std::size_t quota_malign, std::size_t quota_benign)
    : round_(round),
      sampler_(std::move(sampler)),
      stream_seed_(stream_seed),
      chunk_(chunk),
      quota_malign_(quota_malign),
      quota_benign_(quota_benign) {
  if (chunk_ == 0) throw ConfigError("labeling chunk must be >= 1");
}

std::span<const PendingSample> LabelingRound::next_chunk() {
  const SamplerOutput out = sampler_(chunk_, mix_seed(stream_seed_, chunks_drawn_++));
  const std::size_t first = presented_.size();
  for (Eigen::Index j = 0; j < out.samples.cols(); ++j) {
    PendingSample p;
    p.id = presented_.size();
    p.x = out.samples.col(j);
    p.seed = out.seeds.empty() ? 0 : out.seeds[static_cast<std::size_t>(j)];
    presented_.push_back(std::move(p));
  }
  return std::span<const PendingSample>(presented_).subspan(first);
}

LabelingRound::SubmitStatus LabelingRound::submit(std::size_t id, int label, double elapsed_seconds, Source source) {
  if (id >= presented_.size()) return SubmitStatus::unknown_sample;
  if (label != 0 && label != 1) return SubmitStatus::invalid_label;
  auto& p = presented_[id];
  if (p.label && *p.label == label) return SubmitStatus::unchanged;
  p.label = label;
  p.elapsed_seconds += elapsed_seconds;
  p.source = source;
  return SubmitStatus::stored;
}

std::size_t LabelingRound::labeled() const { return labeled_malign() + labeled_benign(); }

std::size_t LabelingRound::labeled_malign() const {
  return static_cast<std::size_t>(std::count_if(presented_.begin(), presented_.end(),
                                                [](const PendingSample& p) { return p.label && *p.label == 0; }));
}

std::size_t LabelingRound::labeled_benign() const {
  return static_cast<std::size_t>(std::count_if(presented_.begin(), presented_.end(),
                                                [](const PendingSample& p) { return p.label && *p.label == 1; }));
}

bool LabelingRound::quota_met() const {
  return labeled_malign() >= quota_malign_ && labeled_benign() >= quota_benign_;
}

void LabelingRound::run(Annotator& annotator, std::size_t max_presented) {
  std::size_t next = 0;
  while (!quota_met() && labeled() < max_presented) {
    if (next >= presented_.size()) next_chunk();
    const auto begin = static_cast<Eigen::Index>(next);
    const auto count = static_cast<Eigen::Index>(presented_.size() - next);
    Points pts(presented_.front().x.size(), count);
    for (Eigen::Index j = 0; j < count; ++j) pts.col(j) = presented_[static_cast<std::size_t>(begin + j)].x;
    const std::vector<int> labels = annotator.label(pts);
    for (std::size_t j = 0; j < labels.size(); ++j, ++next) {
      if (quota_met() || labeled() >= max_presented) break;
      submit(next, labels[j], 0.0, annotator.source());
    }
  }
}

std::vector<FeedbackRecord> LabelingRound::records() const {
  std::vector<FeedbackRecord> out;
  for (const auto& p : presented_)
    if (p.label) out.push_back({p.x, *p.label, round_, p.source, p.elapsed_seconds});
  return out;
}

LabeledPoints select_training(const FeedbackDataset& buffer, std::size_t quota_malign, std::size_t quota_benign) {
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> per_round;
  std::vector<const FeedbackRecord*> kept;
  for (const auto& r : buffer.records()) {
    auto& [m, b] = per_round[r.round];
    if (r.y == 0 && m < quota_malign) {
      ++m;
      kept.push_back(&r);
    } else if (r.y == 1 && b < quota_benign) {
      ++b;
      kept.push_back(&r);
    }
  }
  LabeledPoints out;
  if (kept.empty()) return out;
  out.x.resize(kept.front()->x.size(), static_cast<Eigen::Index>(kept.size()));
  for (std::size_t i = 0; i < kept.size(); ++i) {
    out.x.col(static_cast<Eigen::Index>(i)) = kept[i]->x;
    out.y.push_back(kept[i]->y);
  }
  return out;
}

nlohmann::json to_json(const ImitationConfig& c) {
  return {{"rounds", c.rounds},
          {"quota_malign", c.quota_malign},
          {"quota_benign", c.quota_benign},
          {"chunk", c.chunk},
          {"base_iterations", c.base_iterations},
          {"max_presented_per_round", c.max_presented_per_round},
          {"warm_start", c.warm_start},
          {"reward", to_json(c.reward)},
          {"train", to_json(c.train)},
          {"guidance", to_json(c.guidance)},
          {"seed", c.seed}};
}

ImitationConfig imitation_config_from_json(const nlohmann::json& j) {
  ImitationConfig c;
  c.rounds = j.value("rounds", c.rounds);
  c.quota_malign = j.value("quota_malign", c.quota_malign);
  c.quota_benign = j.value("quota_benign", c.quota_benign);
  c.chunk = j.value("chunk", c.chunk);
  c.base_iterations = j.value("base_iterations", c.base_iterations);
  c.max_presented_per_round = j.value("max_presented_per_round", c.max_presented_per_round);
  c.warm_start = j.value("warm_start", c.warm_start);
  if (j.contains("reward")) c.reward = reward_spec_from_json(j.at("reward"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("guidance")) c.guidance = guidance_config_from_json(j.at("guidance"));
  c.seed = j.value("seed", c.seed);
  return c;
}

ImitationLoop::ImitationLoop(const EpsModel& model, ImitationConfig config) : eps_(model), config_(std::move(config)) {
  if (config_.rounds < 1) throw ConfigError("imitation: rounds must be >= 1");
  if (config_.quota_malign + config_.quota_benign == 0) throw ConfigError("imitation: quotas must not both be zero");
  config_.train.validate();
  config_.guidance.validate();
}

std::uint64_t ImitationLoop::stream_seed(std::size_t round) const { return mix_seed(config_.seed, 100 + round); }

std::uint64_t ImitationLoop::train_seed(std::size_t round) const { return mix_seed(config_.seed, 200 + round); }

BatchSampler ImitationLoop::round_sampler(std::size_t round) const {
  const EpsModel* eps = &eps_;
  if (round <= 1 || !model_) {
    return [eps](std::size_t n, std::uint64_t seed) { return sample_unguided(*eps, n, seed); };
  }
  auto reward = std::make_shared<NetReward>(*model_);
  GuidanceConfig guidance = config_.guidance;
  return [eps, reward, guidance](std::size_t n, std::uint64_t seed) {
    return sample_censored(*eps, reward.get(), guidance, n, seed);
  };
}

LabelingRound& ImitationLoop::labeling() {
  if (finished()) throw std::logic_error("imitation loop already finished");
  if (!labeling_) {
    const std::size_t r = current_round();
    labeling_.emplace(r, round_sampler(r), stream_seed(r), config_.chunk, config_.quota_malign, config_.quota_benign);
  }
  return *labeling_;
}

RoundReport ImitationLoop::complete_round(bool allow_partial) {
  LabelingRound& lab = labeling();
  if (!lab.quota_met() && !allow_partial) {
    std::ostringstream os;
    os << "quota unmet: " << lab.labeled_malign() << "/" << config_.quota_malign << " malign, "
       << lab.labeled_benign() << "/" << config_.quota_benign << " benign";
    throw QuotaUnmet(os.str());
  }
  return finish_round(lab.records(), lab.quota_met());
}

RoundReport ImitationLoop::restore_round(const std::vector<FeedbackRecord>& records) {
  if (finished()) throw std::logic_error("imitation loop already finished");
  std::size_t m = 0, b = 0;
  for (const auto& rec : records) {
    if (rec.round != current_round()) throw std::invalid_argument("restore_round: record from another round");
    (rec.y == 0 ? m : b)++;
  }
  return finish_round(records, m >= config_.quota_malign && b >= config_.quota_benign);
}

RoundReport ImitationLoop::finish_round(const std::vector<FeedbackRecord>& records, bool quota_met) {
  const std::size_t r = current_round();
  RoundReport report;
  report.round = r;
  report.presented = records.size();
  for (const auto& rec : records) {
    (rec.y == 0 ? report.malign_labeled : report.benign_labeled)++;
    report.label_seconds += rec.elapsed_label_seconds;
  }
  report.quota_met = quota_met;
  buffer_.append(records);

  const LabeledPoints data = select_training(buffer_, config_.quota_malign, config_.quota_benign);
  report.kept = data.size();
  const double per_round = static_cast<double>(config_.quota_malign + config_.quota_benign);
  report.iterations = static_cast<std::size_t>(
      std::llround(static_cast<double>(config_.base_iterations) * static_cast<double>(data.size()) / per_round));
  if (data.size() > 0) {
    TrainConfig cfg = config_.train;
    cfg.iterations = report.iterations;
    cfg.seed = train_seed(r);
    TrainResult trace;
    const Mlp* init = config_.warm_start && model_ ? &model_->net() : nullptr;
    model_ = train_reward_impl(data, config_.reward, eps_.grid(), cfg, init, &trace);
    report.final_loss = trace.loss_trace.empty() ? 0.0 : trace.loss_trace.back();
  }
  labeling_.reset();
  reports_.push_back(report);
  return report;
}

std::vector<RoundReport> imitation_loop(ImitationLoop& loop, Annotator& annotator,
                                        const std::function<void(const ImitationLoop&)>& after_round) {
  while (!loop.finished()) {
    loop.labeling().run(annotator, loop.config().max_presented_per_round);
    loop.complete_round(true);
    if (after_round) after_round(loop);
  }
  return loop.reports();
}

NonImitationResult non_imitation_baseline(const EpsModel& model, Annotator& annotator, const ImitationConfig& config,
                                          std::size_t quota_malign, std::size_t quota_benign,
                                          std::size_t iterations) {
  // Same stream and training seed as round 1 of an ImitationLoop with this config.
  ImitationLoop probe(model, config);
  LabelingRound lab(1, probe.round_sampler(1), probe.stream_seed(1), config.chunk, quota_malign, quota_benign);
  lab.run(annotator, config.max_presented_per_round * std::max<std::size_t>(1, config.rounds));
  NonImitationResult result{NetReward(Mlp::zeros({model.dim() + 1, 1}, Head::sigmoid), true), {}, lab.labeled()};
  result.buffer.append(lab.records());
  TrainConfig cfg = config.train;
  cfg.iterations = iterations;
  cfg.seed = probe.train_seed(1);
  result.model = train_reward_model(select_training(result.buffer, quota_malign, quota_benign), config.reward,
                                    model.grid(), cfg);
  return result;
}

}  // namespace censor
