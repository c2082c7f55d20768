#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "censor/config.hpp"
#include "censor/reward_lab.hpp"

namespace censor {

class Lab;

std::string sha256_hex(std::string_view data);
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& content);

/// A run directory: config.json, buffer.jsonl, checkpoints/, samples/,
/// metrics/, plots/ and ledger.json. Every file written through it is
/// hash-stamped in the ledger.
class RunDir {
 public:
  explicit RunDir(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path path(const std::string& rel) const { return root_ / rel; }
  bool exists(const std::string& rel) const;
  std::string read(const std::string& rel) const;
  void write(const std::string& rel, const std::string& content);

  /// Stores config.json; refuses to mix two different configs in one run.
  void bind_config(const RunConfig& config);

  const nlohmann::json& ledger() const { return ledger_; }
  /// Appends a command entry and rewrites ledger.json.
  void record_command(const std::string& name, const nlohmann::json& options, double wall_seconds);
  /// Appends a labeling-session entry (rounds trained through the service).
  void record_session(const nlohmann::json& entry);
  /// Human-time totals recomputed from buffer.jsonl (if present).
  void refresh_human_time();

 private:
  void save_ledger();

  std::filesystem::path root_;
  nlohmann::json ledger_;
};

struct CommandResult {
  nlohmann::json summary;
  std::vector<std::string> warnings;
};

/// Subcommands that write into a run directory: sample, train-reward,
/// ensemble, imitate, reject, eval, plotdata.
std::vector<std::string> run_commands();

/// Runs one subcommand and records it in the ledger. Throws ConfigError for
/// unknown commands or options. `shared` (built from the same config) keeps
/// trained models across calls.
CommandResult run_command(const std::string& name, const nlohmann::json& options, const RunConfig& config,
                          RunDir& dir, Lab* shared = nullptr);

struct ReplayReport {
  std::vector<std::string> compared;
  std::vector<std::string> mismatched;  // metric CSVs whose bytes differ
  std::vector<std::string> other_mismatched;

  bool identical() const { return mismatched.empty(); }
};

/// Re-executes every recorded command of `run` into `scratch` and compares
/// the metric CSVs byte for byte (other artifacts by hash).
ReplayReport replay(const std::filesystem::path& run, const std::filesystem::path& scratch);

/// Buffer as written by the imitation loop, shared with the HTTP service.
void write_imitation_artifacts(RunDir& dir, const FeedbackDataset& buffer, const std::vector<NetReward>& models,
                               const std::string& metrics_csv);

}  // namespace censor
