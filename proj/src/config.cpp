#include "censor/config.hpp"

#include <algorithm>
#include <set>

namespace censor {

using nlohmann::json;

LabeledMixture world_from_json(const json& j) {
  if (j.contains("preset")) return preset_world(j.at("preset").get<std::string>());
  std::vector<Component> comps;
  for (const auto& c : j.at("components")) {
    Component comp;
    comp.weight = c.at("weight").get<double>();
    const auto mean = c.at("mean").get<std::vector<double>>();
    comp.mean = Eigen::Map<const Vec>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    const auto d = comp.mean.size();
    if (c.contains("cov")) {
      const auto rows = c.at("cov").get<std::vector<std::vector<double>>>();
      if (static_cast<Eigen::Index>(rows.size()) != d) throw ConfigError("cov must be d x d");
      comp.cov.resize(d, d);
      for (Eigen::Index r = 0; r < d; ++r) {
        if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)].size()) != d)
          throw ConfigError("cov must be d x d");
        for (Eigen::Index k = 0; k < d; ++k) comp.cov(r, k) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)];
      }
    } else {
      const double s = c.at("sigma").get<double>();
      comp.cov = Mat::Identity(d, d) * s * s;
    }
    const auto label = c.at("label").get<std::string>();
    if (label != "benign" && label != "malign") throw ConfigError("component label must be benign or malign");
    comp.label = label == "benign" ? Label::benign : Label::malign;
    comps.push_back(std::move(comp));
  }
  return LabeledMixture(std::move(comps));
}

json world_to_json(const LabeledMixture& world) {
  json comps = json::array();
  for (const auto& c : world.components()) {
    json cov = json::array();
    for (Eigen::Index r = 0; r < c.cov.rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(c.cov.cols()));
      for (Eigen::Index k = 0; k < c.cov.cols(); ++k) row[static_cast<std::size_t>(k)] = c.cov(r, k);
      cov.push_back(row);
    }
    comps.push_back({{"weight", c.weight},
                     {"mean", std::vector<double>(c.mean.data(), c.mean.data() + c.mean.size())},
                     {"cov", cov},
                     {"label", c.label == Label::benign ? "benign" : "malign"}});
  }
  return {{"components", comps}};
}

ImitationConfig RunConfig::imitation() const {
  ImitationConfig c;
  c.rounds = feedback.rounds;
  c.quota_malign = feedback.quota_malign;
  c.quota_benign = feedback.quota_benign;
  c.chunk = feedback.chunk;
  c.base_iterations = feedback.base_iterations;
  c.max_presented_per_round = feedback.max_presented_per_round;
  c.warm_start = feedback.warm_start;
  c.reward = reward;
  c.train = train;
  c.guidance = guidance;
  c.guidance.mode = guidance_mode();
  c.seed = seed;
  return c;
}

GuidanceMode RunConfig::guidance_mode() const {
  return reward.time_dependent ? GuidanceMode::time_dependent : GuidanceMode::time_independent;
}

json to_json(const RunConfig& c) {
  json ens = {{"members", c.ensemble.members},
              {"malign", c.ensemble.malign},
              {"benign_pool", c.ensemble.benign_pool},
              {"omega", c.ensemble.omega},
              {"single_omega", c.ensemble.single_omega}};
  if (c.ensemble.union_alpha) ens["union_alpha"] = *c.ensemble.union_alpha;
  if (c.ensemble.union_iterations) ens["union_iterations"] = *c.ensemble.union_iterations;
  json guidance = to_json(c.guidance);
  guidance.erase("mode");
  return {{"world", c.world},
          {"schedule",
           {{"beta_min", c.schedule.beta_min},
            {"beta_max", c.schedule.beta_max},
            {"horizon", c.schedule.horizon},
            {"num_steps", c.num_steps}}},
          {"reward", to_json(c.reward)},
          {"train", to_json(c.train)},
          {"ensemble", ens},
          {"guidance", guidance},
          {"universal",
           {{"backward_steps", c.universal.backward_steps},
            {"backward_step_size", c.universal.backward_step_size},
            {"recurrence", c.universal.recurrence}}},
          {"feedback",
           {{"annotator", c.feedback.annotator},
            {"rounds", c.feedback.rounds},
            {"quota", {c.feedback.quota_malign, c.feedback.quota_benign}},
            {"chunk", c.feedback.chunk},
            {"base_iterations", c.feedback.base_iterations},
            {"max_presented_per_round", c.feedback.max_presented_per_round},
            {"warm_start", c.feedback.warm_start}}},
          {"eval", {{"trials", c.eval.trials}, {"n", c.eval.n}, {"arms", c.eval.arms}}},
          {"rejection",
           {{"threshold", c.rejection.threshold},
            {"n_target", c.rejection.n_target},
            {"max_presented", c.rejection.max_presented},
            {"min_acceptance", c.rejection.min_acceptance},
            {"batch", c.rejection.batch}}},
          {"seed", c.seed},
          {"output", c.output}};
}

namespace {

enum class Kind { number, count, boolean, string, array, object };

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::number: return "a number";
    case Kind::count: return "a non-negative integer";
    case Kind::boolean: return "a boolean";
    case Kind::string: return "a string";
    case Kind::array: return "an array";
    case Kind::object: return "an object";
  }
  return "?";
}

bool has_kind(const json& v, Kind k) {
  switch (k) {
    case Kind::number: return v.is_number();
    case Kind::count: return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
    case Kind::boolean: return v.is_boolean();
    case Kind::string: return v.is_string();
    case Kind::array: return v.is_array();
    case Kind::object: return v.is_object();
  }
  return false;
}

// Collects every problem instead of stopping at the first.
class Checker {
 public:
  explicit Checker(std::vector<std::string>& errors) : errors_(errors) {}

  // Checks `obj` against a key -> kind table; returns false if obj is not an object.
  bool section(const json& obj, const std::string& path, const std::vector<std::pair<std::string, Kind>>& keys) {
    if (!obj.is_object()) {
      error(path, "must be an object");
      return false;
    }
    for (const auto& [k, v] : obj.items()) {
      const auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& p) { return p.first == k; });
      if (it == keys.end())
        error(join(path, k), "unknown key");
      else if (!has_kind(v, it->second))
        error(join(path, k), std::string("must be ") + kind_name(it->second));
    }
    return true;
  }

  void check(bool ok, const std::string& path, const std::string& msg) {
    if (!ok) error(path, msg);
  }

  void error(const std::string& path, const std::string& msg) { errors_.push_back(path + ": " + msg); }

  static std::string join(const std::string& a, const std::string& b) { return a.empty() ? b : a + "." + b; }

 private:
  std::vector<std::string>& errors_;
};

template <class T>
T num(const json& obj, const char* key, T fallback) {
  const auto it = obj.find(key);
  if (it == obj.end() || !it->is_number()) return fallback;
  return it->get<T>();
}

void check_world(Checker& ck, const json& w) {
  if (!w.is_object()) return ck.error("world", "must be an object");
  if (w.contains("preset")) {
    ck.section(w, "world", {{"preset", Kind::string}});
    if (w.at("preset").is_string()) {
      const auto names = preset_names();
      const auto p = w.at("preset").get<std::string>();
      ck.check(std::find(names.begin(), names.end(), p) != names.end(), "world.preset", "unknown preset '" + p + "'");
    }
    return;
  }
  if (!w.contains("components")) return ck.error("world", "needs 'preset' or 'components'");
  ck.section(w, "world", {{"components", Kind::array}});
  if (!w.at("components").is_array()) return;
  std::size_t i = 0;
  for (const auto& c : w.at("components")) {
    const std::string p = "world.components[" + std::to_string(i++) + "]";
    if (!ck.section(c, p,
                    {{"weight", Kind::number}, {"mean", Kind::array}, {"sigma", Kind::number},
                     {"cov", Kind::array}, {"label", Kind::string}}))
      continue;
    for (const char* req : {"weight", "mean", "label"})
      ck.check(c.contains(req), Checker::join(p, req), "missing");
    ck.check(c.contains("sigma") != c.contains("cov"), p, "needs exactly one of 'sigma' or 'cov'");
  }
  try {
    world_from_json(w);
  } catch (const std::exception& e) {
    ck.error("world", e.what());
  }
}

}  // namespace

std::vector<std::string> validate_run_config(const json& j) {
  std::vector<std::string> errors;
  Checker ck(errors);
  if (!ck.section(j, "",
                  {{"world", Kind::object}, {"schedule", Kind::object}, {"reward", Kind::object},
                   {"train", Kind::object}, {"ensemble", Kind::object}, {"guidance", Kind::object},
                   {"universal", Kind::object}, {"feedback", Kind::object}, {"eval", Kind::object},
                   {"rejection", Kind::object}, {"seed", Kind::count}, {"output", Kind::string}}))
    return errors;

  if (j.contains("world")) check_world(ck, j.at("world"));

  if (j.contains("schedule") && ck.section(j.at("schedule"), "schedule",
                                           {{"beta_min", Kind::number}, {"beta_max", Kind::number},
                                            {"horizon", Kind::number}, {"num_steps", Kind::count}})) {
    const auto& s = j.at("schedule");
    const NoiseSchedule sched{num(s, "beta_min", 0.1), num(s, "beta_max", 20.0), num(s, "horizon", 1.0)};
    try {
      sched.validate();
    } catch (const std::exception& e) {
      ck.error("schedule", e.what());
    }
    ck.check(num<std::size_t>(s, "num_steps", 1000) >= 1, "schedule.num_steps", "must be >= 1");
  }

  if (j.contains("reward") && ck.section(j.at("reward"), "reward",
                                         {{"time_dependent", Kind::boolean}, {"hidden", Kind::array},
                                          {"noisy_copies", Kind::count}, {"augment", Kind::object}})) {
    const auto& r = j.at("reward");
    if (r.contains("hidden") && r.at("hidden").is_array()) {
      for (const auto& h : r.at("hidden"))
        ck.check(h.is_number_integer() && h.get<long long>() >= 1, "reward.hidden", "widths must be integers >= 1");
    }
    ck.check(num<std::size_t>(r, "noisy_copies", 1) >= 1, "reward.noisy_copies", "must be >= 1");
    if (r.contains("augment") &&
        ck.section(r.at("augment"), "reward.augment",
                   {{"enabled", Kind::boolean}, {"variations", Kind::count}, {"jitter_sigma", Kind::number},
                    {"max_rotation_deg", Kind::number}})) {
      const auto& a = r.at("augment");
      const auto v = num<std::size_t>(a, "variations", 15);
      ck.check(v >= 10 && v <= 20, "reward.augment.variations", "must lie in [10, 20]");
      ck.check(num(a, "jitter_sigma", 0.1) >= 0.0, "reward.augment.jitter_sigma", "must be >= 0");
      ck.check(num(a, "max_rotation_deg", 20.0) >= 0.0, "reward.augment.max_rotation_deg", "must be >= 0");
    }
  }

  if (j.contains("train") &&
      ck.section(j.at("train"), "train",
                 {{"learning_rate", Kind::number}, {"weight_decay", Kind::number}, {"iterations", Kind::count},
                  {"batch_size", Kind::count}, {"alpha", Kind::number}, {"seed", Kind::count},
                  {"beta1", Kind::number}, {"beta2", Kind::number}, {"adam_eps", Kind::number},
                  {"ema_decay", Kind::number}, {"clamp", Kind::number}})) {
    const auto& t = j.at("train");
    ck.check(num(t, "learning_rate", 3e-4) > 0.0, "train.learning_rate", "must be > 0");
    const double a = num(t, "alpha", 1.0);
    ck.check(a > 0.0 && a <= 1.0, "train.alpha", "must lie in (0, 1]");
    ck.check(num(t, "weight_decay", 0.05) >= 0.0, "train.weight_decay", "must be >= 0");
    ck.check(num<std::size_t>(t, "batch_size", 128) >= 1, "train.batch_size", "must be >= 1");
    const double ema = num(t, "ema_decay", 0.0);
    ck.check(ema >= 0.0 && ema < 1.0, "train.ema_decay", "must lie in [0, 1)");
  }

  if (j.contains("ensemble") &&
      ck.section(j.at("ensemble"), "ensemble",
                 {{"members", Kind::count}, {"malign", Kind::count}, {"benign_pool", Kind::count},
                  {"omega", Kind::number}, {"single_omega", Kind::number}, {"union_alpha", Kind::number},
                  {"union_iterations", Kind::count}})) {
    const auto& e = j.at("ensemble");
    ck.check(num<std::size_t>(e, "members", 5) >= 1, "ensemble.members", "must be >= 1");
    ck.check(num<std::size_t>(e, "malign", 10) >= 1, "ensemble.malign", "must be >= 1");
    ck.check(num<std::size_t>(e, "benign_pool", 50) >= 1, "ensemble.benign_pool", "must be >= 1");
    ck.check(num(e, "omega", 1.0) >= 0.0, "ensemble.omega", "must be >= 0");
    ck.check(num(e, "single_omega", 5.0) >= 0.0, "ensemble.single_omega", "must be >= 0");
    if (e.contains("union_alpha")) {
      const double a = num(e, "union_alpha", 1.0);
      ck.check(a > 0.0 && a <= 1.0, "ensemble.union_alpha", "must lie in (0, 1]");
    }
  }

  if (j.contains("guidance") &&
      ck.section(j.at("guidance"), "guidance",
                 {{"omega", Kind::number}, {"backward_steps", Kind::count}, {"backward_step_size", Kind::number},
                  {"recurrence", Kind::count}, {"jacobian", Kind::string}, {"refine_every_repeat", Kind::boolean}})) {
    const auto& g = j.at("guidance");
    ck.check(num(g, "omega", 1.0) >= 0.0, "guidance.omega", "must be >= 0");
    ck.check(num(g, "backward_step_size", 0.0) >= 0.0, "guidance.backward_step_size", "must be >= 0");
    ck.check(num<std::size_t>(g, "recurrence", 1) >= 1, "guidance.recurrence", "must be >= 1");
    if (g.contains("jacobian") && g.at("jacobian").is_string()) {
      const auto m = g.at("jacobian").get<std::string>();
      ck.check(m == "exact_vjp" || m == "frozen_eps", "guidance.jacobian", "must be exact_vjp or frozen_eps");
    }
  }

  if (j.contains("universal") &&
      ck.section(j.at("universal"), "universal",
                 {{"backward_steps", Kind::count}, {"backward_step_size", Kind::number}, {"recurrence", Kind::count}})) {
    const auto& u = j.at("universal");
    ck.check(num(u, "backward_step_size", 0.0) >= 0.0, "universal.backward_step_size", "must be >= 0");
    ck.check(num<std::size_t>(u, "recurrence", 1) >= 1, "universal.recurrence", "must be >= 1");
  }

  if (j.contains("feedback") &&
      ck.section(j.at("feedback"), "feedback",
                 {{"annotator", Kind::string}, {"rounds", Kind::count}, {"quota", Kind::array},
                  {"chunk", Kind::count}, {"base_iterations", Kind::count},
                  {"max_presented_per_round", Kind::count}, {"warm_start", Kind::boolean}})) {
    const auto& f = j.at("feedback");
    if (f.contains("annotator") && f.at("annotator").is_string()) {
      const auto a = f.at("annotator").get<std::string>();
      ck.check(a == "oracle" || a == "human", "feedback.annotator", "must be oracle or human");
    }
    ck.check(num<std::size_t>(f, "rounds", 1) >= 1, "feedback.rounds", "must be >= 1");
    ck.check(num<std::size_t>(f, "chunk", 1) >= 1, "feedback.chunk", "must be >= 1");
    if (f.contains("quota") && f.at("quota").is_array()) {
      const auto& q = f.at("quota");
      bool ok = q.size() == 2 && std::all_of(q.begin(), q.end(), [](const json& v) { return has_kind(v, Kind::count); });
      ck.check(ok, "feedback.quota", "must be [malign, benign] non-negative integers");
      if (ok) ck.check(q[0].get<std::size_t>() + q[1].get<std::size_t>() > 0, "feedback.quota", "must not be all zero");
    }
  }

  if (j.contains("eval") &&
      ck.section(j.at("eval"), "eval", {{"trials", Kind::count}, {"n", Kind::count}, {"arms", Kind::array}})) {
    const auto& e = j.at("eval");
    ck.check(num<std::size_t>(e, "trials", 1) >= 1, "eval.trials", "must be >= 1");
    if (e.contains("arms") && e.at("arms").is_array()) {
      const auto arms = known_arms();
      for (const auto& a : e.at("arms")) {
        const bool ok = a.is_string() && std::find(arms.begin(), arms.end(), a.get<std::string>()) != arms.end();
        ck.check(ok, "eval.arms", "unknown arm " + a.dump());
      }
    }
  }

  if (j.contains("rejection") &&
      ck.section(j.at("rejection"), "rejection",
                 {{"threshold", Kind::number}, {"n_target", Kind::count}, {"max_presented", Kind::count},
                  {"min_acceptance", Kind::number}, {"batch", Kind::count}})) {
    const auto& r = j.at("rejection");
    const double t = num(r, "threshold", 0.5);
    ck.check(t >= 0.0 && t <= 1.0, "rejection.threshold", "must lie in [0, 1]");
    ck.check(num<std::size_t>(r, "batch", 1) >= 1, "rejection.batch", "must be >= 1");
  }
  return errors;
}

RunConfig run_config_from_json(const json& j) {
  const auto errors = validate_run_config(j);
  if (!errors.empty()) {
    std::string msg = "invalid run config (" + std::to_string(errors.size()) + " problem" +
                      (errors.size() == 1 ? "" : "s") + "):";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  RunConfig c;
  if (j.contains("world")) c.world = j.at("world");
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    c.schedule.beta_min = s.value("beta_min", c.schedule.beta_min);
    c.schedule.beta_max = s.value("beta_max", c.schedule.beta_max);
    c.schedule.horizon = s.value("horizon", c.schedule.horizon);
    c.num_steps = s.value("num_steps", c.num_steps);
  }
  if (j.contains("reward")) c.reward = reward_spec_from_json(j.at("reward"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("ensemble")) {
    const auto& e = j.at("ensemble");
    c.ensemble.members = e.value("members", c.ensemble.members);
    c.ensemble.malign = e.value("malign", c.ensemble.malign);
    c.ensemble.benign_pool = e.value("benign_pool", c.ensemble.benign_pool);
    c.ensemble.omega = e.value("omega", c.ensemble.omega);
    c.ensemble.single_omega = e.value("single_omega", c.ensemble.single_omega);
    if (e.contains("union_alpha")) c.ensemble.union_alpha = e.at("union_alpha").get<double>();
    if (e.contains("union_iterations")) c.ensemble.union_iterations = e.at("union_iterations").get<std::size_t>();
  }
  if (j.contains("guidance")) c.guidance = guidance_config_from_json(j.at("guidance"));
  c.guidance.mode = c.guidance_mode();
  if (j.contains("universal")) {
    const auto& u = j.at("universal");
    c.universal.backward_steps = u.value("backward_steps", c.universal.backward_steps);
    c.universal.backward_step_size = u.value("backward_step_size", c.universal.backward_step_size);
    c.universal.recurrence = u.value("recurrence", c.universal.recurrence);
  }
  if (j.contains("feedback")) {
    const auto& f = j.at("feedback");
    c.feedback.annotator = f.value("annotator", c.feedback.annotator);
    c.feedback.rounds = f.value("rounds", c.feedback.rounds);
    if (f.contains("quota")) {
      c.feedback.quota_malign = f.at("quota")[0].get<std::size_t>();
      c.feedback.quota_benign = f.at("quota")[1].get<std::size_t>();
    }
    c.feedback.chunk = f.value("chunk", c.feedback.chunk);
    c.feedback.base_iterations = f.value("base_iterations", c.feedback.base_iterations);
    c.feedback.max_presented_per_round = f.value("max_presented_per_round", c.feedback.max_presented_per_round);
    c.feedback.warm_start = f.value("warm_start", c.feedback.warm_start);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    c.eval.trials = e.value("trials", c.eval.trials);
    c.eval.n = e.value("n", c.eval.n);
    c.eval.arms = e.value("arms", c.eval.arms);
  }
  if (j.contains("rejection")) {
    const auto& r = j.at("rejection");
    c.rejection.threshold = r.value("threshold", c.rejection.threshold);
    c.rejection.n_target = r.value("n_target", c.rejection.n_target);
    c.rejection.max_presented = r.value("max_presented", c.rejection.max_presented);
    c.rejection.min_acceptance = r.value("min_acceptance", c.rejection.min_acceptance);
    c.rejection.batch = r.value("batch", c.rejection.batch);
  }
  c.seed = j.value("seed", c.seed);
  c.output = j.value("output", c.output);
  return c;
}

std::vector<std::string> known_arms() {
  return {"baseline", "exact", "single", "union", "ensemble", "ensemble_universal", "single_universal",
          "rejection", "rejection_ensemble"};
}

std::vector<std::string> experiment_names() { return {"mnist_like", "tench_like", "bedroom_like"}; }

RunConfig experiment_preset(const std::string& name) {
  RunConfig c;
  c.reward.hidden = {32, 32};
  c.train.learning_rate = 3e-3;
  c.train.weight_decay = 0.05;
  c.train.batch_size = 128;
  if (name == "mnist_like") {
    c.num_steps = 250;
    c.world = {{"preset", "benign_dominant"}};
    c.reward.time_dependent = true;
    c.reward.augment.max_rotation_deg = 20.0;
    c.train.alpha = 0.02;
    c.train.iterations = 1000;
    c.ensemble = {5, 10, 50, 1.0, 5.0, 0.005, 3000};
    c.guidance.omega = 5.0;
    c.universal = {5, 2e-4, 4};
    c.eval = {5, 500, {"baseline", "single", "union", "ensemble", "ensemble_universal"}};
  } else if (name == "tench_like") {
    c.num_steps = 250;
    c.world = {{"preset", "malign_dominant"}};
    c.reward.time_dependent = true;
    c.reward.augment.max_rotation_deg = 30.0;
    c.train.alpha = 0.1;
    c.train.iterations = 500;
    c.feedback.rounds = 3;
    c.feedback.base_iterations = 500;
    c.guidance.omega = 5.0;
    c.universal = {5, 0.002, 4};
    c.eval = {5, 1000, {"baseline", "single"}};
  } else if (name == "bedroom_like") {
    c.world = {{"preset", "bedroom_like"}};
    c.reward.time_dependent = false;
    c.reward.augment.enabled = false;
    c.train.alpha = 0.1;
    c.train.iterations = 5000;
    c.ensemble = {5, 100, 500, 2.0, 10.0, 0.02, 15000};
    c.guidance.omega = 10.0;
    c.universal = {5, 0.002, 4};
    c.eval = {5, 500, {"baseline", "single", "union", "ensemble", "ensemble_universal"}};
  } else {
    throw ConfigError("unknown experiment '" + name + "'");
  }
  c.guidance.mode = c.guidance_mode();
  c.output = "runs/" + name;
  return c;
}

}  // namespace censor
