#include <doctest.h>

#include "censor/experiment.hpp"
#include "censor/run.hpp"
#include "../support.hpp"

using namespace censor;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
  return run_config_from_json(nlohmann::json::parse(R"({
    "world": {"preset": "malign_dominant"},
    "schedule": {"num_steps": 40},
    "reward": {"hidden": [8], "noisy_copies": 2},
    "train": {"learning_rate": 0.01, "alpha": 0.1, "iterations": 60, "batch_size": 32},
    "ensemble": {"members": 2, "malign": 4, "benign_pool": 8},
    "feedback": {"rounds": 2, "quota": [3, 3], "base_iterations": 60, "chunk": 16},
    "guidance": {"omega": 3},
    "eval": {"trials": 2, "n": 40, "arms": ["baseline", "single"]},
    "seed": 5
  })"));
}

}  // namespace

TEST_CASE("sha256 known answer") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("run dir stamps every artifact and guards its config") {
  scratch::TempDir tmp("rundir");
  RunDir dir(tmp.path / "r");
  dir.write("metrics/a.csv", "x\n1\n");
  CHECK(read_file(tmp.path / "r/metrics/a.csv") == "x\n1\n");
  CHECK(dir.ledger().at("artifacts").at("metrics/a.csv") == sha256_hex("x\n1\n"));
  CHECK(fs::exists(tmp.path / "r/ledger.json"));

  const RunConfig c = tiny_config();
  dir.bind_config(c);
  dir.bind_config(c);
  RunConfig other = c;
  other.seed = 6;
  CHECK_THROWS_AS(dir.bind_config(other), ConfigError);

  // a reopened directory keeps its ledger
  RunDir again(tmp.path / "r");
  CHECK(again.ledger().at("artifacts").contains("metrics/a.csv"));
  CHECK_THROWS_AS(again.bind_config(other), ConfigError);
}

TEST_CASE("commands validate their names and options") {
  scratch::TempDir tmp("opts");
  RunDir dir(tmp.path);
  const RunConfig c = tiny_config();
  CHECK_THROWS_AS(run_command("paint", {}, c, dir), ConfigError);
  CHECK_THROWS_AS(run_command("sample", {{"colour", 1}}, c, dir), ConfigError);
  CHECK_THROWS_AS(run_command("sample", {{"arm", "nonsense"}}, c, dir), ConfigError);
  RunConfig human = c;
  human.feedback.annotator = "human";
  RunDir hdir(tmp.path / "h");
  CHECK_THROWS_AS(run_command("imitate", {}, human, hdir), ConfigError);
}

TEST_CASE("a run replays byte for byte") {
  scratch::TempDir tmp("replay");
  const RunConfig c = tiny_config();
  {
    RunDir dir(tmp.path / "run");
    run_command("sample", {{"n", 50}}, c, dir);
    run_command("train-reward", {}, c, dir);
    run_command("eval", {{"trials", 2}, {"n", 30}}, c, dir);
    CHECK(dir.ledger().at("commands").size() == 3);
    CHECK(dir.exists("samples/baseline.jsonl"));
    CHECK(dir.exists("checkpoints/reward.json"));
    CHECK(dir.exists("metrics/eval.csv"));
  }
  const auto report = replay(tmp.path / "run", tmp.path / "again");
  CHECK(report.identical());
  CHECK(report.other_mismatched.empty());
  CHECK(report.compared.size() >= 3);
  // replay never writes into a used directory
  CHECK_THROWS(replay(tmp.path / "run", tmp.path / "again"));
}

TEST_CASE("imitation resumes from a partial buffer") {
  scratch::TempDir tmp("resume");
  const RunConfig c = tiny_config();
  RunDir full(tmp.path / "full");
  const auto res = run_command("imitate", {}, c, full);
  CHECK(res.summary.at("rounds").size() == 3);  // round 0 is the uncensored baseline

  // keep only round one's labels, then let the command finish the job
  const auto buffer = FeedbackDataset::from_jsonl(full.read("buffer.jsonl"));
  FeedbackDataset first;
  for (const auto& r : buffer.records())
    if (r.round == 1) first.append(r);
  REQUIRE(first.size() < buffer.size());
  RunDir part(tmp.path / "part");
  part.bind_config(c);
  part.write("buffer.jsonl", first.to_jsonl());
  const auto resumed = run_command("imitate", {}, c, part);
  CHECK(resumed.summary.at("resumed_labels") == first.size());
  CHECK(part.read("buffer.jsonl") == full.read("buffer.jsonl"));
  CHECK(part.read("metrics/imitation.csv") == full.read("metrics/imitation.csv"));
}

TEST_CASE("a shared lab gives the same files as fresh ones") {
  scratch::TempDir tmp("shared");
  const RunConfig c = tiny_config();
  Lab lab(c);
  RunDir a(tmp.path / "a"), b(tmp.path / "b");
  for (const char* cmd : {"ensemble", "eval", "reject"}) {
    const nlohmann::json o = std::string(cmd) == "reject" ? nlohmann::json{{"reward", "ensemble"}, {"n", 20}}
                                                          : nlohmann::json::object();
    run_command(cmd, o, c, a);
    run_command(cmd, o, c, b, &lab);
  }
  for (const char* f : {"metrics/ensemble.csv", "metrics/eval.csv", "metrics/rejection.csv"})
    CHECK(a.read(f) == b.read(f));
  RunConfig other = c;
  other.seed = 9;
  RunDir d(tmp.path / "d");
  CHECK_THROWS(run_command("sample", {}, other, d, &lab));
}
