#include "censor/experiment.hpp"

#include <cmath>
#include <map>
#include <sstream>

namespace censor {

LabelPool collect_labels(const EpsModel& model, Annotator& annotator, std::size_t n_malign, std::size_t n_benign,
                         std::size_t chunk, std::uint64_t seed, std::size_t max_presented) {
  if (chunk == 0) throw ConfigError("collect_labels: chunk must be >= 1");
  std::vector<Vec> mal, ben;
  LabelPool pool;
  for (std::uint64_t c = 0; mal.size() < n_malign || ben.size() < n_benign; ++c) {
    if (pool.presented >= max_presented)
      throw NumericError("collect_labels: quota not reached after " + std::to_string(pool.presented) + " samples");
    const SamplerOutput out = sample_unguided(model, chunk, mix_seed(seed, c));
    const auto labels = annotator.label(out.samples);
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (mal.size() >= n_malign && ben.size() >= n_benign) break;
      ++pool.presented;
      auto& dst = labels[j] == 0 ? mal : ben;
      if (dst.size() < (labels[j] == 0 ? n_malign : n_benign)) dst.push_back(out.samples.col(static_cast<Eigen::Index>(j)));
    }
  }
  const auto pack = [&](const std::vector<Vec>& v) {
    Points p(model.dim(), static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) p.col(static_cast<Eigen::Index>(i)) = v[i];
    return p;
  };
  pool.malign = pack(mal);
  pool.benign = pack(ben);
  return pool;
}

Lab::Lab(RunConfig config)
    : config_(std::move(config)), world_(world_from_json(config_.world)), oracle_(world_) {
  config_.schedule.validate();
  config_.guidance.mode = config_.guidance_mode();
  eps_ = std::make_unique<AnalyticEps>(world_, DiffusionGrid(config_.schedule, config_.num_steps));
}

const LabelPool& Lab::labels() {
  if (!labels_)
    labels_ = collect_labels(*eps_, oracle_, config_.ensemble.malign, config_.ensemble.benign_pool,
                             config_.feedback.chunk, mix_seed(config_.seed, 1));
  return *labels_;
}

const EnsembleResult& Lab::ensemble() {
  if (!ensemble_) {
    const auto& pool = labels();
    ensemble_ = build_ensemble(pool.malign, pool.benign, config_.ensemble.members, config_.reward, grid(),
                               config_.train, mix_seed(config_.seed, 2));
  }
  return *ensemble_;
}

const NetReward& Lab::single() { return ensemble().members.front(); }

const NetReward& Lab::union_model() {
  if (!union_) {
    const auto& pool = labels();
    TrainConfig cfg = config_.train;
    cfg.seed = mix_seed(config_.seed, 3);
    union_ = train_union_baseline(pool.malign, pool.benign, config_.reward, grid(), cfg, config_.ensemble.union_alpha,
                                  config_.ensemble.union_iterations);
  }
  return *union_;
}

GuidanceConfig Lab::arm_guidance(const std::string& arm) const {
  GuidanceConfig g = config_.guidance;
  g.mode = config_.guidance_mode();
  g.backward_steps = 0;
  g.recurrence = 1;
  if (arm == "exact") {
    g.omega = 1.0;
  } else if (arm == "single" || arm == "union" || arm == "single_universal") {
    g.omega = config_.ensemble.single_omega;
  } else if (arm == "ensemble" || arm == "ensemble_universal") {
    g.omega = config_.ensemble.omega;
  } else {
    throw ConfigError("arm '" + arm + "' is not guided");
  }
  if (arm.ends_with("_universal")) {
    g.backward_steps = config_.universal.backward_steps;
    g.backward_step_size = config_.universal.backward_step_size;
    g.recurrence = config_.universal.recurrence;
  }
  return g;
}

SamplerOutput Lab::sample_arm(const std::string& arm, std::size_t n, std::uint64_t seed) {
  if (arm == "baseline") return sample_unguided(*eps_, n, seed);
  if (arm == "rejection" || arm == "rejection_ensemble") {
    const EpsModel* eps = eps_.get();
    BatchSampler base = [eps](std::size_t k, std::uint64_t s) { return sample_unguided(*eps, k, s); };
    RejectionConfig rc = config_.rejection;
    rc.n_target = n;
    if (arm == "rejection") return rejection_sample(base, single(), rc, seed);
    if (!combined_) combined_ = ensemble().ensemble();
    return rejection_sample(base, *combined_, rc, seed);
  }
  const GuidanceConfig g = arm_guidance(arm);
  if (arm == "exact") {
    const ExactReward exact(world_, config_.schedule, config_.reward.time_dependent);
    return sample_censored(*eps_, &exact, g, n, seed);
  }
  if (arm == "single" || arm == "single_universal") return sample_censored(*eps_, &single(), g, n, seed);
  if (arm == "union") return sample_censored(*eps_, &union_model(), g, n, seed);
  if (!combined_) combined_ = ensemble().ensemble();
  return sample_censored(*eps_, &*combined_, g, n, seed);
}

ArmReport Lab::evaluate_arm(const std::string& arm, std::vector<Points>* dumps, std::optional<std::size_t> n_trials,
                            std::optional<std::size_t> n) {
  std::vector<Points> trials;
  std::vector<double> ratios;
  const bool rejection = arm.starts_with("rejection");
  for (std::size_t t = 0; t < n_trials.value_or(config_.eval.trials); ++t) {
    SamplerOutput out = sample_arm(arm, n.value_or(config_.eval.n), trial_seed(t));
    if (rejection) ratios.push_back(out.acceptance_ratio());
    trials.push_back(std::move(out.samples));
  }
  ArmReport report = censor::evaluate_arm(arm, trials, world_, oracle_, ratios);
  if (dumps) *dumps = std::move(trials);
  return report;
}

ArmReport Lab::evaluate_with(const std::string& name, const RewardModel& reward, const GuidanceConfig& guidance,
                             std::vector<Points>* dumps) {
  std::vector<Points> trials;
  for (std::size_t t = 0; t < config_.eval.trials; ++t)
    trials.push_back(sample_censored(*eps_, &reward, guidance, config_.eval.n, trial_seed(t)).samples);
  ArmReport report = censor::evaluate_arm(name, trials, world_, oracle_);
  if (dumps) *dumps = std::move(trials);
  return report;
}

ImitationRun::ImitationRun(Lab& lab, const FeedbackDataset* resume)
    : lab_(lab), loop_(lab.eps(), lab.config().imitation()) {
  std::vector<Points> base_trials;
  for (std::size_t t = 0; t < lab.config().eval.trials; ++t)
    base_trials.push_back(sample_unguided(lab.eps(), lab.config().eval.n, lab.trial_seed(t)).samples);
  out_.rows.push_back({RoundReport{}, censor::evaluate_arm("round_0", base_trials, lab.world(), lab.oracle())});

  if (!resume) return;
  std::map<std::size_t, std::vector<FeedbackRecord>> rounds;
  for (const auto& r : resume->records()) rounds[r.round].push_back(r);
  for (const auto& [r, records] : rounds) {
    if (loop_.finished() || r != loop_.current_round())
      throw ConfigError("buffer holds round " + std::to_string(r) + " out of sequence");
    record(loop_.restore_round(records));
    ++restored_;
  }
}

const ImitationRow& ImitationRun::complete_round(bool allow_partial) {
  return record(loop_.complete_round(allow_partial));
}

const ImitationRow& ImitationRun::record(const RoundReport& report) {
  out_.models.push_back(*loop_.model());
  out_.buffer = loop_.buffer();
  out_.rows.push_back({report, lab_.evaluate_with("round_" + std::to_string(report.round), out_.models.back(),
                                                  loop_.config().guidance)});
  return out_.rows.back();
}

ImitationOutcome run_imitation(Lab& lab, Annotator& annotator, const FeedbackDataset* resume,
                               const std::function<void(const ImitationOutcome&)>& after_round) {
  ImitationRun run(lab, resume);
  if (after_round && run.restored_rounds()) after_round(run.outcome());
  while (!run.finished()) {
    run.labeling().run(annotator, lab.config().feedback.max_presented_per_round);
    run.complete_round(true);
    if (after_round) after_round(run.outcome());
  }
  return run.outcome();
}

NonImitationRow run_non_imitation(Lab& lab, Annotator& annotator, std::size_t rounds) {
  const ImitationConfig cfg = lab.config().imitation();
  NonImitationRow row;
  row.rounds_equivalent = rounds;
  row.quota_malign = rounds * cfg.quota_malign;
  row.quota_benign = rounds * cfg.quota_benign;
  row.iterations = cfg.base_iterations * rounds * (rounds + 1) / 2;
  NonImitationResult res =
      non_imitation_baseline(lab.eps(), annotator, cfg, row.quota_malign, row.quota_benign, row.iterations);
  row.presented = res.presented;
  row.eval = lab.evaluate_with("non_imitation_" + std::to_string(rounds), res.model, cfg.guidance);
  row.model = std::move(res.model);
  return row;
}

double grid_acceptance(const LabeledMixture& world, const RewardModel& reward, double threshold, int resolution) {
  if (world.dim() != 2) throw ShapeError("grid_acceptance needs a 2-D world");
  const GridOracle box = GridOracle::covering(world, resolution);
  const Marginal clean = world.marginal(1.0);
  return grid_expectation(box, [&](const Points& x) {
    const Vec dens = clean.log_densities(x).array().exp();
    const Vec score = reward.acceptance_score(x);
    return Vec((score.array() >= threshold).select(dens, 0.0));
  });
}

std::string imitation_csv(const ImitationOutcome& outcome) {
  std::ostringstream os;
  os << "round,presented,malign_labeled,benign_labeled,kept,iterations,final_loss,label_seconds,"
        "malign_fraction,std,ci_low,ci_high,occupancy_tv\n";
  for (const auto& row : outcome.rows) {
    const auto& r = row.report;
    std::size_t malign = 0;
    double tv = 0.0;
    for (const auto& t : row.eval.trials) {
      malign += t.malign;
      tv += t.occupancy_tv;
    }
    const Interval ci = wilson_interval(malign, row.eval.total());
    os << r.round << ',' << r.presented << ',' << r.malign_labeled << ',' << r.benign_labeled << ',' << r.kept << ','
       << r.iterations << ',' << format_number(r.final_loss) << ',' << format_number(r.label_seconds) << ','
       << format_number(row.eval.mean) << ',' << format_number(row.eval.std) << ',' << format_number(ci.low) << ','
       << format_number(ci.high) << ',' << format_number(tv / static_cast<double>(row.eval.trials.size())) << '\n';
  }
  return os.str();
}

std::string non_imitation_csv(const std::vector<NonImitationRow>& rows) {
  std::ostringstream os;
  os << "rounds_equivalent,quota_malign,quota_benign,iterations,presented,malign_fraction,std\n";
  for (const auto& r : rows)
    os << r.rounds_equivalent << ',' << r.quota_malign << ',' << r.quota_benign << ',' << r.iterations << ','
       << r.presented << ',' << format_number(r.eval.mean) << ',' << format_number(r.eval.std) << '\n';
  return os.str();
}

}  // namespace censor
