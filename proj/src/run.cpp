#include "censor/run.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "censor/experiment.hpp"

namespace censor {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << content;
  }
  fs::rename(tmp, path);
}

RunDir::RunDir(fs::path root) : root_(std::move(root)) {
  fs::create_directories(root_);
  if (fs::exists(root_ / "ledger.json")) {
    ledger_ = json::parse(read_file(root_ / "ledger.json"));
  } else {
    ledger_ = {{"format", 1},
               {"commands", json::array()},
               {"artifacts", json::object()},
               {"human_time", {{"labels", 0}, {"label_seconds", 0.0}, {"by_source", json::object()}}}};
  }
}

bool RunDir::exists(const std::string& rel) const { return fs::exists(root_ / rel); }

std::string RunDir::read(const std::string& rel) const { return read_file(root_ / rel); }

void RunDir::write(const std::string& rel, const std::string& content) {
  write_file(root_ / rel, content);
  ledger_["artifacts"][rel] = sha256_hex(content);
  save_ledger();
}

void RunDir::bind_config(const RunConfig& config) {
  const std::string text = to_json(config).dump(2) + "\n";
  if (exists("config.json") && read("config.json") != text)
    throw ConfigError("run directory " + root_.string() + " already holds a different config");
  write("config.json", text);
  ledger_["config_sha256"] = sha256_hex(text);
  save_ledger();
}

void RunDir::record_command(const std::string& name, const json& options, double wall_seconds) {
  ledger_["commands"].push_back({{"name", name}, {"options", options}, {"wall_seconds", wall_seconds}});
  refresh_human_time();
}

void RunDir::record_session(const json& entry) {
  if (!ledger_.contains("sessions")) ledger_["sessions"] = json::array();
  ledger_["sessions"].push_back(entry);
  save_ledger();
}

void RunDir::refresh_human_time() {
  if (exists("buffer.jsonl")) {
    const FeedbackDataset buf = FeedbackDataset::from_jsonl(read("buffer.jsonl"));
    json by_source = json::object();
    for (const auto& r : buf.records()) {
      const auto key = to_string(r.source);
      by_source[key] = by_source.value(key, 0) + 1;
    }
    ledger_["human_time"] = {{"labels", buf.size()},
                             {"label_seconds", buf.total_label_seconds()},
                             {"by_source", by_source}};
  }
  save_ledger();
}

void RunDir::save_ledger() { write_file(root_ / "ledger.json", ledger_.dump(2) + "\n"); }

namespace {

std::string points_jsonl(const Points& x, const std::vector<int>& labels, const std::vector<std::uint64_t>& seeds = {},
                         std::size_t trial = 0) {
  std::string out;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    ordered_json line;
    line["x"] = std::vector<double>(x.col(j).data(), x.col(j).data() + x.rows());
    if (trial) line["trial"] = trial;
    if (!seeds.empty()) line["seed"] = seeds[static_cast<std::size_t>(j)];
    line["label"] = labels[static_cast<std::size_t>(j)];
    out += line.dump();
    out += '\n';
  }
  return out;
}

void check_options(const std::string& cmd, const json& options, const std::vector<std::string>& allowed) {
  if (options.is_null()) return;
  if (!options.is_object()) throw ConfigError(cmd + ": options must be an object");
  std::vector<std::string> bad;
  for (const auto& [k, v] : options.items())
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) bad.push_back(k);
  if (!bad.empty()) {
    std::string msg = cmd + ": unknown option(s):";
    for (const auto& b : bad) msg += " " + b;
    throw ConfigError(msg);
  }
}

template <class T>
T opt(const json& options, const char* key, T fallback) {
  return options.is_object() ? options.value(key, fallback) : fallback;
}

std::string single_arm_csv(const ArmReport& arm) { return std::string(kArmCsvHeader) + "\n" + arm_rows(arm); }

CommandResult cmd_sample(const json& options, Lab& lab, RunDir& dir) {
  check_options("sample", options, {"n", "arm"});
  const auto n = opt<std::size_t>(options, "n", lab.config().eval.n);
  const auto arm = opt<std::string>(options, "arm", "baseline");
  const SamplerOutput out = lab.sample_arm(arm, n, mix_seed(lab.config().seed, 7));
  const auto labels = lab.oracle().label(out.samples);
  dir.write("samples/" + arm + ".jsonl", points_jsonl(out.samples, labels, out.seeds));
  std::vector<double> ratios;
  if (arm.starts_with("rejection")) ratios.push_back(out.acceptance_ratio());
  const ArmReport report = evaluate_arm(arm, {out.samples}, lab.world(), lab.oracle(), ratios);
  dir.write("metrics/sample_" + arm + ".csv", single_arm_csv(report));
  return {{{"arm", arm}, {"n", out.size()}, {"malign_fraction", report.mean},
           {"world_malign_mass", lab.world().malign_mass()}},
          out.warnings};
}

CommandResult cmd_train_reward(const json& options, Lab& lab, RunDir& dir) {
  check_options("train-reward", options, {});
  const auto& cfg = lab.config();
  const LabelPool pool = collect_labels(lab.eps(), lab.oracle(), cfg.ensemble.malign, cfg.ensemble.malign,
                                        cfg.feedback.chunk, mix_seed(cfg.seed, 1));
  LabeledPoints data;
  data.x.resize(lab.world().dim(), pool.malign.cols() + pool.benign.cols());
  data.x << pool.malign, pool.benign;
  data.y.assign(static_cast<std::size_t>(pool.malign.cols()), 0);
  data.y.insert(data.y.end(), static_cast<std::size_t>(pool.benign.cols()), 1);
  TrainConfig tc = cfg.train;
  tc.seed = mix_seed(cfg.seed, 4);
  TrainResult trace;
  const NetReward model = train_reward_model(data, cfg.reward, lab.grid(), tc, &trace);
  dir.write("checkpoints/reward.json", model.to_json().dump() + "\n");
  std::string csv = "iteration,loss\n";
  for (std::size_t i = 0; i < trace.loss_trace.size(); ++i)
    csv += std::to_string(i + 1) + "," + format_number(trace.loss_trace[i]) + "\n";
  dir.write("metrics/train_reward.csv", csv);
  return {{{"presented", pool.presented},
           {"final_loss", trace.loss_trace.empty() ? 0.0 : trace.loss_trace.back()}},
          {}};
}

double train_accuracy(const NetReward& model, const LabeledPoints& data) {
  const Vec r = model.reward(data.x, 0.0);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < data.size(); ++i) ok += (r[static_cast<Eigen::Index>(i)] >= 0.5) == (data.y[i] == 1);
  return data.size() ? static_cast<double>(ok) / static_cast<double>(data.size()) : 0.0;
}

CommandResult cmd_ensemble(const json& options, Lab& lab, RunDir& dir) {
  check_options("ensemble", options, {});
  const EnsembleResult& ens = lab.ensemble();
  const NetReward& uni = lab.union_model();
  dir.write("checkpoints/ensemble.json", ensemble_to_json(ens.members).dump() + "\n");
  dir.write("checkpoints/union.json", uni.to_json().dump() + "\n");
  std::string csv = "model,train_malign,train_benign,train_accuracy\n";
  for (std::size_t k = 0; k < ens.members.size(); ++k) {
    const auto& d = ens.member_data[k];
    const auto m = static_cast<std::size_t>(std::count(d.y.begin(), d.y.end(), 0));
    csv += "member_" + std::to_string(k) + "," + std::to_string(m) + "," + std::to_string(d.size() - m) + "," +
           format_number(train_accuracy(ens.members[k], d)) + "\n";
  }
  const auto& pool = lab.labels();
  LabeledPoints all;
  all.x.resize(lab.world().dim(), pool.malign.cols() + pool.benign.cols());
  all.x << pool.malign, pool.benign;
  all.y.assign(static_cast<std::size_t>(pool.malign.cols()), 0);
  all.y.insert(all.y.end(), static_cast<std::size_t>(pool.benign.cols()), 1);
  csv += "union," + std::to_string(pool.malign.cols()) + "," + std::to_string(pool.benign.cols()) + "," +
         format_number(train_accuracy(uni, all)) + "\n";
  dir.write("metrics/ensemble.csv", csv);
  return {{{"members", ens.members.size()}, {"presented", pool.presented}}, {}};
}

CommandResult cmd_eval(const json& options, Lab& lab, RunDir& dir) {
  check_options("eval", options, {"arms", "trials", "n"});
  const auto& cfg = lab.config();
  const auto trials = opt<std::size_t>(options, "trials", cfg.eval.trials);
  const auto n = opt<std::size_t>(options, "n", cfg.eval.n);
  if (trials == 0 || n == 0) throw ConfigError("eval: trials and n must be >= 1");
  const auto arms = opt<std::vector<std::string>>(options, "arms", cfg.eval.arms);
  if (arms.empty()) throw ConfigError("eval: no arms");
  const auto known = known_arms();
  for (const auto& a : arms)
    if (std::find(known.begin(), known.end(), a) == known.end()) throw ConfigError("eval: unknown arm '" + a + "'");
  std::vector<ArmReport> reports;
  CommandResult result;
  result.summary["arms"] = json::array();
  for (const auto& arm : arms) {
    std::vector<Points> dumps;
    reports.push_back(lab.evaluate_arm(arm, &dumps, trials, n));
    std::string lines;
    for (std::size_t t = 0; t < dumps.size(); ++t) lines += points_jsonl(dumps[t], lab.oracle().label(dumps[t]), {}, t + 1);
    dir.write("samples/eval_" + arm + ".jsonl", lines);
    result.summary["arms"].push_back({{"arm", arm}, {"mean", reports.back().mean}, {"std", reports.back().std}});
    for (const auto& w : reports.back().warnings) result.warnings.push_back(arm + ": " + w);
  }
  if (reports.size() >= 2) {
    const ArmComparison cmp = compare_arms(reports);
    dir.write("metrics/eval.csv", cmp.csv);
    result.summary["monotone"] = cmp.monotone;
    result.warnings.insert(result.warnings.end(), cmp.warnings.begin(), cmp.warnings.end());
  } else {
    dir.write("metrics/eval.csv", single_arm_csv(reports.front()));
  }
  return result;
}

CommandResult cmd_imitate(const json& options, Lab& lab, RunDir& dir) {
  check_options("imitate", options, {"baselines"});
  if (lab.config().feedback.annotator != "oracle")
    throw ConfigError("imitate: human feedback is collected through `serve`; set feedback.annotator to oracle");
  std::optional<FeedbackDataset> resume;
  if (dir.exists("buffer.jsonl")) resume = FeedbackDataset::from_jsonl(dir.read("buffer.jsonl"));
  const ImitationOutcome out = run_imitation(lab, lab.oracle(), resume ? &*resume : nullptr,
                                             [&](const ImitationOutcome& partial) {
                                               write_imitation_artifacts(dir, partial.buffer, partial.models,
                                                                         imitation_csv(partial));
                                             });
  CommandResult result;
  result.summary["rounds"] = json::array();
  for (const auto& row : out.rows)
    result.summary["rounds"].push_back({{"round", row.report.round},
                                        {"malign_fraction", row.eval.mean},
                                        {"presented", row.report.presented},
                                        {"quota_met", row.report.quota_met}});
  result.summary["buffer"] = out.buffer.size();
  result.summary["resumed_labels"] = resume ? resume->size() : 0;
  for (const auto& row : out.rows)
    if (!row.report.quota_met)
      result.warnings.push_back("round " + std::to_string(row.report.round) + ": label quota not met");

  if (opt(options, "baselines", false)) {
    std::vector<NonImitationRow> rows;
    for (std::size_t k = 2; k <= lab.config().feedback.rounds; ++k) {
      rows.push_back(run_non_imitation(lab, lab.oracle(), k));
      dir.write("checkpoints/non_imitation_" + std::to_string(k) + ".json", rows.back().model->to_json().dump() + "\n");
    }
    dir.write("metrics/non_imitation.csv", non_imitation_csv(rows));
  }
  return result;
}

CommandResult cmd_reject(const json& options, Lab& lab, RunDir& dir) {
  check_options("reject", options, {"reward", "n"});
  const auto which = opt<std::string>(options, "reward", "exact");
  const auto& cfg = lab.config();
  RejectionConfig rc = cfg.rejection;
  rc.n_target = opt<std::size_t>(options, "n", rc.n_target);

  std::unique_ptr<RewardModel> owned;
  const RewardModel* reward = nullptr;
  std::optional<RewardEnsemble> ens;
  if (which == "exact") {
    owned = std::make_unique<ExactReward>(lab.world(), cfg.schedule, false);
    reward = owned.get();
  } else if (which == "single") {
    reward = &lab.single();
  } else if (which == "ensemble") {
    ens = lab.ensemble().ensemble();
    reward = &*ens;
  } else {
    throw ConfigError("reject: reward must be exact, single or ensemble");
  }
  const EpsModel* eps = &lab.eps();
  const BatchSampler base = [eps](std::size_t k, std::uint64_t s) { return sample_unguided(*eps, k, s); };
  const SamplerOutput out = rejection_sample(base, *reward, rc, mix_seed(cfg.seed, 8));
  const auto labels = lab.oracle().label(out.samples);
  dir.write("samples/rejection.jsonl", points_jsonl(out.samples, labels));
  const auto malign = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 0));
  const Interval ci = wilson_interval(malign, out.size());
  const double frac = out.size() ? static_cast<double>(malign) / static_cast<double>(out.size()) : 0.0;
  const std::string grid = lab.world().dim() == 2 ? format_number(grid_acceptance(lab.world(), *reward, rc.threshold)) : "";
  std::string csv = "reward,threshold,presented,accepted,acceptance_ratio,grid_acceptance,malign_fraction,ci_low,ci_high\n";
  csv += which + "," + format_number(rc.threshold) + "," + std::to_string(out.presented) + "," +
         std::to_string(out.accepted) + "," + format_number(out.acceptance_ratio()) + "," + grid + "," +
         format_number(frac) + "," + format_number(ci.low) + "," + format_number(ci.high) + "\n";
  dir.write("metrics/rejection.csv", csv);
  return {{{"acceptance_ratio", out.acceptance_ratio()}, {"accepted", out.accepted}, {"malign_fraction", frac}},
          out.warnings};
}

CommandResult cmd_plotdata(const json& options, Lab& lab, RunDir& dir) {
  check_options("plotdata", options, {"resolution"});
  CommandResult result;
  if (lab.world().dim() != 2) {
    result.warnings.push_back("plot data is only emitted for 2-D worlds");
    return result;
  }
  std::string world_csv = "component,weight,mean_x,mean_y,sigma,label\n";
  for (std::size_t i = 0; i < lab.world().size(); ++i) {
    const auto& c = lab.world().component(i);
    world_csv += std::to_string(i) + "," + format_number(c.weight) + "," + format_number(c.mean[0]) + "," +
                 format_number(c.mean[1]) + "," + format_number(std::sqrt(c.cov.diagonal().maxCoeff())) + "," +
                 (c.label == Label::benign ? "benign" : "malign") + "\n";
  }
  dir.write("plots/world.csv", world_csv);

  std::vector<fs::path> dumps;
  if (fs::exists(dir.path("samples")))
    for (const auto& e : fs::directory_iterator(dir.path("samples")))
      if (e.path().extension() == ".jsonl") dumps.push_back(e.path());
  std::sort(dumps.begin(), dumps.end());
  for (const auto& p : dumps) {
    std::string csv = "x0,x1,label\n";
    std::istringstream in(read_file(p));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line);
      const auto x = j.at("x").get<std::vector<double>>();
      csv += format_number(x[0]) + "," + format_number(x[1]) + "," + std::to_string(j.at("label").get<int>()) + "\n";
    }
    dir.write("plots/" + p.stem().string() + ".csv", csv);
  }

  std::optional<NetReward> single;
  std::optional<RewardEnsemble> ens;
  const RewardModel* field = nullptr;
  if (dir.exists("checkpoints/ensemble.json")) {
    std::vector<std::shared_ptr<const RewardModel>> members;
    for (auto& m : ensemble_members_from_json(json::parse(dir.read("checkpoints/ensemble.json"))))
      members.push_back(std::make_shared<NetReward>(std::move(m)));
    ens.emplace(std::move(members));
    field = &*ens;
  } else if (dir.exists("checkpoints/reward.json")) {
    single = NetReward::from_json(json::parse(dir.read("checkpoints/reward.json")));
    field = &*single;
  }
  if (field) {
    const int res = opt(options, "resolution", 65);
    const GridOracle box = GridOracle::covering(lab.world());
    Points xs(2, static_cast<Eigen::Index>(res) * res);
    for (int a = 0; a < res; ++a)
      for (int b = 0; b < res; ++b)
        xs.col(a * res + b) << box.lo[0] + (box.hi[0] - box.lo[0]) * a / (res - 1),
            box.lo[1] + (box.hi[1] - box.lo[1]) * b / (res - 1);
    const Vec r = field->acceptance_score(xs);
    std::string csv = "x0,x1,reward\n";
    for (Eigen::Index j = 0; j < xs.cols(); ++j)
      csv += format_number(xs(0, j)) + "," + format_number(xs(1, j)) + "," + format_number(r[j]) + "\n";
    dir.write("plots/reward_field.csv", csv);
  }
  result.summary["sample_files"] = dumps.size();
  result.summary["reward_field"] = field != nullptr;
  return result;
}

}  // namespace

void write_imitation_artifacts(RunDir& dir, const FeedbackDataset& buffer, const std::vector<NetReward>& models,
                               const std::string& metrics_csv) {
  dir.write("buffer.jsonl", buffer.to_jsonl());
  for (std::size_t r = 0; r < models.size(); ++r)
    dir.write("checkpoints/round_" + std::to_string(r + 1) + ".json", models[r].to_json().dump() + "\n");
  dir.write("metrics/imitation.csv", metrics_csv);
  dir.refresh_human_time();
}

std::vector<std::string> run_commands() {
  return {"sample", "train-reward", "ensemble", "imitate", "reject", "eval", "plotdata"};
}

CommandResult run_command(const std::string& name, const json& options, const RunConfig& config, RunDir& dir,
                          Lab* shared) {
  const auto cmds = run_commands();
  if (std::find(cmds.begin(), cmds.end(), name) == cmds.end()) throw ConfigError("unknown command '" + name + "'");
  if (shared && to_json(shared->config()) != to_json(config))
    throw std::invalid_argument("run_command: shared lab was built for another config");
  dir.bind_config(config);
  const auto start = std::chrono::steady_clock::now();
  std::optional<Lab> own;
  Lab& lab = shared ? *shared : own.emplace(config);
  CommandResult result;
  if (name == "sample") result = cmd_sample(options, lab, dir);
  else if (name == "train-reward") result = cmd_train_reward(options, lab, dir);
  else if (name == "ensemble") result = cmd_ensemble(options, lab, dir);
  else if (name == "imitate") result = cmd_imitate(options, lab, dir);
  else if (name == "reject") result = cmd_reject(options, lab, dir);
  else if (name == "eval") result = cmd_eval(options, lab, dir);
  else result = cmd_plotdata(options, lab, dir);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  dir.record_command(name, options.is_null() ? json::object() : options, wall);
  result.summary["wall_seconds"] = wall;
  return result;
}

ReplayReport replay(const fs::path& run, const fs::path& scratch) {
  if (fs::exists(scratch) && !fs::is_empty(scratch))
    throw ConfigError("replay target " + scratch.string() + " is not empty");
  const RunDir original(run);
  const RunConfig config = run_config_from_json(json::parse(original.read("config.json")));
  RunDir fresh(scratch);
  // trained models are a function of the config alone, so one lab serves every command
  Lab lab(config);
  for (const auto& c : original.ledger().at("commands"))
    run_command(c.at("name").get<std::string>(), c.at("options"), config, fresh, &lab);

  ReplayReport report;
  for (const auto& [rel, hash] : original.ledger().at("artifacts").items()) {
    report.compared.push_back(rel);
    const bool metric = rel.starts_with("metrics/") && rel.ends_with(".csv");
    if (metric) {
      if (!fresh.exists(rel) || fresh.read(rel) != original.read(rel)) report.mismatched.push_back(rel);
    } else {
      const auto& now = fresh.ledger().at("artifacts");
      if (!now.contains(rel) || now.at(rel) != hash) report.other_mismatched.push_back(rel);
    }
  }
  return report;
}

}  // namespace censor
