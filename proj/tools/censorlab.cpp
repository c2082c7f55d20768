// censorlab: run-directory CLI and labeling server.

#include <csignal>
#include <iostream>
#include <optional>

#include "censor/config.hpp"
#include "censor/run.hpp"
#include "censor/service.hpp"

#include <CLI11.hpp>
#include <httplib.h>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace censor;

namespace {

struct ConfigFlags {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> rounds;
  std::string quota;
  std::string annotator;
  std::string out;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("--config", f.config, "JSON run config");
  cmd->add_option("--preset", f.preset, "experiment (mnist_like, ...) or world preset (malign_dominant, ...)");
  cmd->add_option("--seed", f.seed);
  cmd->add_option("--steps", f.steps, "discretization steps N");
  cmd->add_option("--out", f.out, "run directory");
}

void add_feedback_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("--rounds", f.rounds);
  cmd->add_option("--quota", f.quota, "malign,benign labels per round");
  cmd->add_option("--annotator", f.annotator, "oracle | human");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);)
    if (!item.empty()) out.push_back(item);
  return out;
}

// Base config (file, experiment preset or world preset) with flag overrides
// applied to the JSON tree before validation, so every bad key is reported.
RunConfig build_config(const ConfigFlags& f) {
  json j;
  if (!f.config.empty()) {
    j = json::parse(read_file(f.config));
  } else {
    const auto exps = experiment_names();
    const bool is_exp = std::find(exps.begin(), exps.end(), f.preset) != exps.end();
    j = to_json(is_exp ? experiment_preset(f.preset) : RunConfig{});
    if (!f.preset.empty() && !is_exp) j["world"] = {{"preset", f.preset}};
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (!f.config.empty() && !f.preset.empty()) j["world"] = {{"preset", f.preset}};
  if (f.seed) j["seed"] = *f.seed;
  if (f.steps) j["schedule"]["num_steps"] = *f.steps;
  if (f.rounds) j["feedback"]["rounds"] = *f.rounds;
  if (!f.quota.empty()) {
    const auto parts = split(f.quota, ',');
    if (parts.size() != 2) throw ConfigError("--quota expects malign,benign");
    j["feedback"]["quota"] = {std::stoul(parts[0]), std::stoul(parts[1])};
  }
  if (!f.annotator.empty()) j["feedback"]["annotator"] = f.annotator;
  if (!f.out.empty()) j["output"] = f.out;
  return run_config_from_json(j);
}

void print_result(const CommandResult& r) {
  std::cout << r.summary.dump(2) << "\n";
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
}

httplib::Server* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"censorlab: censored sampling of diffusion models on labeled mixtures"};
  app.require_subcommand(1);

  // world
  auto* world = app.add_subcommand("world", "list or show preset worlds");
  world->require_subcommand(1);
  world->add_subcommand("list", "preset names");
  std::string world_name;
  world->add_subcommand("show", "components and masses of a preset")->add_option("name", world_name)->required();

  ConfigFlags f;
  json options = json::object();

  std::size_t n = 0;
  std::string arm = "baseline";
  auto* sample = app.add_subcommand("sample", "draw samples of one arm (baseline = unguided)");
  add_config_flags(sample, f);
  sample->add_option("--n", n, "number of samples");
  sample->add_option("--arm", arm);

  auto* train = app.add_subcommand("train-reward", "train one reward model on oracle labels");
  add_config_flags(train, f);

  auto* ens = app.add_subcommand("ensemble", "train the bootstrap ensemble and the union baseline");
  add_config_flags(ens, f);

  bool baselines = false;
  auto* imitate = app.add_subcommand("imitate", "multi-round imitation learning (resumes from buffer.jsonl)");
  add_config_flags(imitate, f);
  add_feedback_flags(imitate, f);
  imitate->add_flag("--baselines", baselines, "also train the matched non-imitation baselines");

  std::string reward = "exact";
  auto* reject = app.add_subcommand("reject", "rejection sampling against a reward");
  add_config_flags(reject, f);
  reject->add_option("--reward", reward, "exact | single | ensemble");
  reject->add_option("--n", n, "accepted samples wanted");

  auto* eval = app.add_subcommand("eval", "malign fraction per arm over trials");
  add_config_flags(eval, f);
  std::string arms;
  std::size_t trials = 0;
  eval->add_option("--arms", arms, "comma separated (default: the config's eval.arms)");
  eval->add_option("--trials", trials);
  eval->add_option("--n", n, "samples per trial");

  auto* plot = app.add_subcommand("plotdata", "CSV files for plotting samples, world and reward field");
  add_config_flags(plot, f);

  std::string root = "runs", host = "127.0.0.1", run_name;
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "HTTP labeling sessions over the runs in --root");
  serve->add_option("--root", root);
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_option("--run", run_name, "bind the given config into <root>/<run> first");
  serve->add_option("--config", f.config);
  serve->add_option("--preset", f.preset);
  serve->add_option("--seed", f.seed);
  add_feedback_flags(serve, f);

  std::string replay_run, replay_into;
  auto* rep = app.add_subcommand("replay", "re-run a run's commands and compare its metric CSVs");
  rep->add_option("run", replay_run)->required();
  rep->add_option("--into", replay_into, "scratch directory (default <run>.replay)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (world->parsed()) {
      if (world->got_subcommand("list")) {
        for (const auto& name : preset_names()) {
          const auto w = preset_world(name);
          std::cout << name << "  malign_mass=" << w.malign_mass() << "  components=" << w.size() << "\n";
        }
      } else {
        const auto w = preset_world(world_name);
        json j = world_to_json(w);
        j["malign_mass"] = w.malign_mass();
        j["benign_mass"] = w.benign_mass();
        std::cout << j.dump(2) << "\n";
      }
      return 0;
    }

    if (rep->parsed()) {
      const fs::path into = replay_into.empty() ? fs::path(replay_run + ".replay") : fs::path(replay_into);
      const ReplayReport r = replay(replay_run, into);
      std::cout << json({{"compared", r.compared},
                         {"mismatched", r.mismatched},
                         {"other_mismatched", r.other_mismatched},
                         {"identical", r.identical()}})
                       .dump(2)
                << "\n";
      return r.identical() ? 0 : 1;
    }

    if (serve->parsed()) {
      if (!run_name.empty()) {
        RunDir dir(fs::path(root) / run_name);
        dir.bind_config(build_config(f));
      }
      Service service(root);
      httplib::Server server;
      service.mount(server);
      g_server = &server;
      std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
      });
      std::cerr << "serving " << root << " on http://" << host << ":" << port << "\n";
      if (!server.listen(host, port)) {
        std::cerr << "error: cannot listen on " << host << ":" << port << "\n";
        return 1;
      }
      return 0;
    }

    std::string name;
    if (sample->parsed()) {
      name = "sample";
      options["arm"] = arm;
      if (n) options["n"] = n;
    } else if (train->parsed()) {
      name = "train-reward";
    } else if (ens->parsed()) {
      name = "ensemble";
    } else if (imitate->parsed()) {
      name = "imitate";
      if (baselines) options["baselines"] = true;
    } else if (reject->parsed()) {
      name = "reject";
      options["reward"] = reward;
      if (n) options["n"] = n;
    } else if (eval->parsed()) {
      name = "eval";
      if (!arms.empty()) options["arms"] = split(arms, ',');
      if (trials) options["trials"] = trials;
      if (n) options["n"] = n;
    } else {
      name = "plotdata";
    }
    const RunConfig config = build_config(f);
    RunDir dir(config.output);
    print_result(run_command(name, options, config, dir));
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
