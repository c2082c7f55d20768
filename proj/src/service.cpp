#include "censor/service.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <regex>
#include <sstream>
#include <thread>

#include "censor/experiment.hpp"
#include "censor/run.hpp"

// after Eigen: <resolv.h> defines _res, which Eigen uses as a parameter name
#include <httplib.h>
#include <json.hpp>

namespace censor {

namespace fs = std::filesystem;
using nlohmann::json;

struct ServiceRun {
  std::mutex mu;
  std::string id;
  std::unique_ptr<RunDir> dir;
  std::unique_ptr<Lab> lab;
  std::unique_ptr<ImitationRun> run;
  std::string active_session;
};

struct ServiceSession {
  enum class State { labeling, training, done, failed };

  std::mutex mu;
  std::condition_variable cv;
  std::string id;
  std::shared_ptr<ServiceRun> run;
  std::size_t round = 0;
  bool auto_label = false;
  State state = State::labeling;
  std::vector<std::size_t> chunk;  // ids of the batch on screen
  // progress as of the last labeling-state access; the loop moves on once trained
  std::size_t presented = 0, malign = 0, benign = 0, quota_malign = 0, quota_benign = 0;
  std::string error;
  json metrics;
  std::thread trainer;
};

namespace {

const char* state_name(ServiceSession::State s) {
  switch (s) {
    case ServiceSession::State::labeling: return "labeling";
    case ServiceSession::State::training: return "training";
    case ServiceSession::State::done: return "done";
    case ServiceSession::State::failed: return "failed";
  }
  return "?";
}

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void fail(httplib::Response& res, int status, const std::string& msg, json extra = json::object()) {
  extra["error"] = msg;
  reply(res, status, extra);
}

bool valid_run_id(const std::string& id) {
  static const std::regex ok("[A-Za-z0-9_.-]+");
  return id != "." && id != ".." && std::regex_match(id, ok);
}

json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json round_metrics(const ImitationRow& row) {
  const auto& r = row.report;
  return {{"round", r.round},          {"presented", r.presented},
          {"malign_labeled", r.malign_labeled}, {"benign_labeled", r.benign_labeled},
          {"kept", r.kept},            {"iterations", r.iterations},
          {"final_loss", r.final_loss}, {"label_seconds", r.label_seconds},
          {"quota_met", r.quota_met},  {"malign_fraction", row.eval.mean},
          {"std", row.eval.std}};
}

// CSV cell: number when it parses completely, null when empty.
json csv_cell(const std::string& s) {
  if (s.empty()) return nullptr;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end && *end == '\0') return v;
  return s;
}

json csv_payload(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  json out = {{"columns", json::array()}, {"rows", json::array()}};
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json cells = json::array();
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      const std::string cell = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      cells.push_back(header ? json(cell) : csv_cell(cell));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (header) out["columns"] = cells;
    else out["rows"].push_back(cells);
    header = false;
  }
  return out;
}

}  // namespace

struct ServiceHandlers {
  Service& svc;

  std::shared_ptr<ServiceSession> session(const std::string& id) {
    std::lock_guard lock(svc.mu_);
    const auto it = svc.sessions_.find(id);
    return it == svc.sessions_.end() ? nullptr : it->second;
  }

  // Loads (once) the run's config, lab and the imitation state restored from its buffer.
  std::shared_ptr<ServiceRun> load_run(const std::string& id) {
    if (!valid_run_id(id) || !fs::exists(svc.root_ / id / "config.json")) return nullptr;
    std::shared_ptr<ServiceRun> run;
    {
      std::lock_guard lock(svc.mu_);
      auto& slot = svc.runs_[id];
      if (!slot) {
        slot = std::make_shared<ServiceRun>();
        slot->id = id;
      }
      run = slot;
    }
    std::lock_guard lock(run->mu);
    if (!run->run) {
      run->dir = std::make_unique<RunDir>(svc.root_ / id);
      run->lab = std::make_unique<Lab>(run_config_from_json(json::parse(run->dir->read("config.json"))));
      std::optional<FeedbackDataset> buffer;
      if (run->dir->exists("buffer.jsonl")) buffer = FeedbackDataset::from_jsonl(run->dir->read("buffer.jsonl"));
      run->run = std::make_unique<ImitationRun>(*run->lab, buffer ? &*buffer : nullptr);
    }
    return run;
  }

  json status(ServiceSession& s) {
    if (s.state == ServiceSession::State::labeling) {
      const auto& lab = s.run->run->labeling();
      s.presented = lab.presented().size();
      s.malign = lab.labeled_malign();
      s.benign = lab.labeled_benign();
      s.quota_malign = lab.quota_malign();
      s.quota_benign = lab.quota_benign();
    }
    json j = {{"session_id", s.id},
              {"run_id", s.run->id},
              {"round", s.round},
              {"status", state_name(s.state)},
              {"auto_label", s.auto_label},
              {"presented", s.presented},
              {"labeled", {{"malign", s.malign}, {"benign", s.benign}}},
              {"quota", {{"malign", s.quota_malign}, {"benign", s.quota_benign}}}};
    if (s.state == ServiceSession::State::done) j["metrics"] = s.metrics;
    if (s.state == ServiceSession::State::failed) j["error"] = s.error;
    return j;
  }

  void create(const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      return fail(res, 400, "body is not JSON");
    }
    if (!body.is_object() || !body.contains("run_id") || !body["run_id"].is_string())
      return fail(res, 400, "run_id (string) is required");
    if (!body.contains("round") || !body["round"].is_number_unsigned())
      return fail(res, 400, "round (positive integer) is required");
    const std::string run_id = body["run_id"];
    const auto round = body["round"].get<std::size_t>();
    const bool auto_label = body.value("auto_label", false);

    std::shared_ptr<ServiceRun> run;
    try {
      run = load_run(run_id);
    } catch (const std::exception& e) {
      return fail(res, 500, std::string("cannot load run: ") + e.what());
    }
    if (!run) return fail(res, 404, "unknown run '" + run_id + "'");

    std::lock_guard lock(run->mu);
    if (!run->active_session.empty())
      return fail(res, 409, "run already has an open session", {{"session_id", run->active_session}});
    if (run->run->finished()) return fail(res, 409, "all rounds are complete");
    if (round != run->run->current_round())
      return fail(res, 409, "round mismatch", {{"expected_round", run->run->current_round()}});

    auto s = std::make_shared<ServiceSession>();
    s->run = run;
    s->round = round;
    s->auto_label = auto_label;
    {
      std::lock_guard g(svc.mu_);
      s->id = "s" + std::to_string(svc.next_session_++);
      svc.sessions_[s->id] = s;
    }
    run->active_session = s->id;
    auto& lab = run->run->labeling();
    reply(res, 201, {{"session_id", s->id},
                     {"round", round},
                     {"quota", {{"malign", lab.quota_malign()}, {"benign", lab.quota_benign()}}}});
  }

  void get(const httplib::Request& req, httplib::Response& res) {
    auto s = session(req.path_params.at("id"));
    if (!s) return fail(res, 404, "unknown session");
    std::lock_guard lock(s->mu);
    reply(res, 200, status(*s));
  }

  void batch(const httplib::Request& req, httplib::Response& res) {
    auto s = session(req.path_params.at("id"));
    if (!s) return fail(res, 404, "unknown session");
    std::lock_guard lock(s->mu);
    if (s->state != ServiceSession::State::labeling) return fail(res, 409, "session is not labeling");
    const Lab& labctx = *s->run->lab;
    auto& lab = s->run->run->labeling();

    if (s->auto_label) {
      lab.run(s->run->lab->oracle(), labctx.config().feedback.max_presented_per_round);
      s->chunk.clear();
      for (const auto& p : lab.presented()) s->chunk.push_back(p.id);
    } else {
      const auto& shown = lab.presented();
      const bool answered = std::all_of(s->chunk.begin(), s->chunk.end(),
                                        [&](std::size_t id) { return shown[id].label.has_value(); });
      if (s->chunk.empty() || (answered && !lab.quota_met())) {
        if (lab.presented().size() >= labctx.config().feedback.max_presented_per_round)
          return fail(res, 409, "presentation limit reached for this round");
        s->chunk.clear();
        for (const auto& p : lab.next_chunk()) s->chunk.push_back(p.id);
      }
    }

    json items = json::array();
    for (const auto id : s->chunk) {
      const auto& p = lab.presented()[id];
      items.push_back({{"sample_id", p.id}, {"x", vec_json(p.x)}, {"label", p.label ? json(*p.label) : json(nullptr)}});
    }
    // Rendering context: component shapes without their labels, plus the
    // points labeled in earlier rounds.
    json components = json::array();
    const auto& world = labctx.world();
    for (std::size_t i = 0; i < world.size(); ++i) {
      const auto& c = world.component(i);
      components.push_back({{"mean", vec_json(c.mean)},
                            {"sigma", std::sqrt(c.cov.diagonal().maxCoeff())},
                            {"weight", c.weight}});
    }
    json history = json::array();
    for (const auto& r : s->run->run->loop().buffer().records())
      history.push_back({{"x", vec_json(r.x)}, {"label", r.y}, {"round", r.round}});
    json out = status(*s);
    out["items"] = std::move(items);
    out["world"] = {{"components", std::move(components)}};
    out["history"] = std::move(history);
    out["quota_met"] = lab.quota_met();
    reply(res, 200, out);
  }

  void labels(const httplib::Request& req, httplib::Response& res) {
    auto s = session(req.path_params.at("id"));
    if (!s) return fail(res, 404, "unknown session");
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      return fail(res, 400, "body is not JSON");
    }
    if (!body.is_object() || !body.contains("labels") || !body["labels"].is_object())
      return fail(res, 400, "labels (object of sample id -> 0|1) is required");
    const json elapsed = body.value("elapsed_ms", json::object());
    if (!elapsed.is_object()) return fail(res, 400, "elapsed_ms must be an object");

    std::lock_guard lock(s->mu);
    if (s->state != ServiceSession::State::labeling) return fail(res, 409, "session is not labeling");
    if (s->auto_label) return fail(res, 409, "session labels automatically");
    auto& lab = s->run->run->labeling();

    struct Entry {
      std::size_t id;
      int label;
      double seconds;
    };
    std::vector<Entry> entries;
    for (const auto& [key, value] : body["labels"].items()) {
      std::size_t id = 0;
      const auto [ptr, ec] = std::from_chars(key.data(), key.data() + key.size(), id);
      if (ec != std::errc() || ptr != key.data() + key.size() || id >= lab.presented().size())
        return fail(res, 422, "unknown sample", {{"sample_id", key}});
      if (!value.is_number_integer() || (value != 0 && value != 1))
        return fail(res, 422, "label must be 0 or 1", {{"sample_id", key}});
      double ms = 0.0;
      if (elapsed.contains(key)) {
        if (!elapsed[key].is_number() || elapsed[key].get<double>() < 0.0)
          return fail(res, 422, "elapsed_ms must be a non-negative number", {{"sample_id", key}});
        ms = elapsed[key].get<double>();
      }
      entries.push_back({id, value.get<int>(), ms / 1000.0});
    }
    for (const auto& [key, value] : elapsed.items())
      if (!body["labels"].contains(key)) return fail(res, 422, "elapsed_ms for a sample without a label", {{"sample_id", key}});

    std::size_t stored = 0, unchanged = 0;
    for (const auto& e : entries)
      (lab.submit(e.id, e.label, e.seconds, Source::human) == LabelingRound::SubmitStatus::stored ? stored : unchanged)++;
    json out = status(*s);
    out["stored"] = stored;
    out["unchanged"] = unchanged;
    out["quota_met"] = lab.quota_met();
    reply(res, 200, out);
  }

  void complete(const httplib::Request& req, httplib::Response& res) {
    auto s = session(req.path_params.at("id"));
    if (!s) return fail(res, 404, "unknown session");
    std::unique_lock lock(s->mu);
    if (s->state != ServiceSession::State::labeling) return fail(res, 409, "session already completed");
    auto& lab = s->run->run->labeling();
    if (s->auto_label) lab.run(s->run->lab->oracle(), s->run->lab->config().feedback.max_presented_per_round);
    if (!lab.quota_met())
      return fail(res, 409, "quota unmet",
                  {{"labeled", {{"malign", lab.labeled_malign()}, {"benign", lab.labeled_benign()}}},
                   {"quota", {{"malign", lab.quota_malign()}, {"benign", lab.quota_benign()}}}});
    status(*s);
    s->state = ServiceSession::State::training;
    if (s->trainer.joinable()) s->trainer.join();
    s->trainer = std::thread([this, s] { train(s); });

    if (req.has_param("wait") && req.get_param_value("wait") != "0") {
      s->cv.wait(lock, [&] { return s->state != ServiceSession::State::training; });
      const int code = s->state == ServiceSession::State::done ? 200 : 500;
      return reply(res, code, status(*s));
    }
    reply(res, 202, status(*s));
  }

  void train(std::shared_ptr<ServiceSession> s) {
    ServiceRun& run = *s->run;
    const auto start = std::chrono::steady_clock::now();
    json metrics;
    std::string error;
    try {
      std::lock_guard lock(run.mu);
      const ImitationRow& row = run.run->complete_round(false);
      metrics = round_metrics(row);
      const auto& out = run.run->outcome();
      write_imitation_artifacts(*run.dir, out.buffer, out.models, imitation_csv(out));
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      run.dir->record_session({{"session_id", s->id}, {"round", s->round}, {"auto_label", s->auto_label},
                               {"wall_seconds", wall}});
      run.active_session.clear();
    } catch (const std::exception& e) {
      error = e.what();
      std::lock_guard lock(run.mu);
      run.active_session.clear();
    }
    std::lock_guard lock(s->mu);
    if (error.empty()) {
      s->metrics = std::move(metrics);
      s->state = ServiceSession::State::done;
    } else {
      s->error = std::move(error);
      s->state = ServiceSession::State::failed;
    }
    s->cv.notify_all();
  }

  void list_runs(httplib::Response& res) {
    json runs = json::array();
    std::vector<fs::path> dirs;
    if (fs::exists(svc.root_))
      for (const auto& e : fs::directory_iterator(svc.root_))
        if (e.is_directory() && fs::exists(e.path() / "config.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      json entry = {{"run_id", d.filename().string()}};
      try {
        const RunConfig cfg = run_config_from_json(json::parse(read_file(d / "config.json")));
        std::size_t done = 0;
        if (fs::exists(d / "buffer.jsonl"))
          for (const auto& r : FeedbackDataset::from_jsonl(read_file(d / "buffer.jsonl")).records())
            done = std::max(done, r.round);
        entry["rounds"] = cfg.feedback.rounds;
        entry["rounds_completed"] = done;
        entry["annotator"] = cfg.feedback.annotator;
      } catch (const std::exception& e) {
        entry["error"] = e.what();
      }
      {
        std::lock_guard lock(svc.mu_);
        if (const auto it = svc.runs_.find(entry["run_id"]); it != svc.runs_.end()) {
          std::unique_lock rl(it->second->mu, std::try_to_lock);
          if (rl.owns_lock() && !it->second->active_session.empty())
            entry["active_session"] = it->second->active_session;
        }
      }
      runs.push_back(entry);
    }
    reply(res, 200, {{"runs", runs}});
  }

  void run_metrics(const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.path_params.at("id");
    if (!valid_run_id(id) || !fs::exists(svc.root_ / id / "config.json")) return fail(res, 404, "unknown run");
    json files = json::object();
    const fs::path dir = svc.root_ / id / "metrics";
    std::vector<fs::path> csvs;
    if (fs::exists(dir))
      for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".csv") csvs.push_back(e.path());
    std::sort(csvs.begin(), csvs.end());
    for (const auto& p : csvs) files[p.stem().string()] = csv_payload(read_file(p));
    json body = {{"run_id", id}, {"metrics", files}};
    if (fs::exists(svc.root_ / id / "ledger.json"))
      body["human_time"] = json::parse(read_file(svc.root_ / id / "ledger.json")).value("human_time", json::object());
    reply(res, 200, body);
  }
};

Service::Service(fs::path root) : root_(std::move(root)) {}

Service::~Service() { wait_idle(); }

void Service::wait_idle() {
  std::vector<std::shared_ptr<ServiceSession>> all;
  {
    std::lock_guard lock(mu_);
    for (auto& [id, s] : sessions_) all.push_back(s);
  }
  for (auto& s : all) {
    std::thread t;
    {
      std::lock_guard lock(s->mu);
      t = std::move(s->trainer);
    }
    if (t.joinable()) t.join();
  }
}

void Service::mount(httplib::Server& server) {
  auto h = std::make_shared<ServiceHandlers>(ServiceHandlers{*this});
  const auto guarded = [](auto fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const std::exception& e) {
        fail(res, 500, e.what());
      }
    };
  };
  server.Post("/api/sessions", guarded([h](const auto& req, auto& res) { h->create(req, res); }));
  server.Get("/api/sessions/:id", guarded([h](const auto& req, auto& res) { h->get(req, res); }));
  server.Get("/api/sessions/:id/batch", guarded([h](const auto& req, auto& res) { h->batch(req, res); }));
  server.Post("/api/sessions/:id/labels", guarded([h](const auto& req, auto& res) { h->labels(req, res); }));
  server.Post("/api/sessions/:id/complete", guarded([h](const auto& req, auto& res) { h->complete(req, res); }));
  server.Get("/api/runs", guarded([h](const auto&, auto& res) { h->list_runs(res); }));
  server.Get("/api/runs/:id/metrics", guarded([h](const auto& req, auto& res) { h->run_metrics(req, res); }));
}

}  // namespace censor
