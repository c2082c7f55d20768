#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>

namespace httplib {
class Server;
}

namespace censor {

struct ServiceRun;
struct ServiceSession;

/// HTTP labeling sessions over the run directories below `root`.
///
///   POST /api/sessions                  {run_id, round, auto_label?}
///   GET  /api/sessions/{id}             status, quota progress, round metrics
///   GET  /api/sessions/{id}/batch       current chunk plus world context
///   POST /api/sessions/{id}/labels      {labels: {id: 0|1}, elapsed_ms: {id: ms}}
///   POST /api/sessions/{id}/complete    trains in the background (?wait=1 blocks)
///   GET  /api/runs
///   GET  /api/runs/{id}/metrics
class Service {
 public:
  explicit Service(std::filesystem::path root);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  void mount(httplib::Server& server);

  /// Blocks until no round is training.
  void wait_idle();

 private:
  friend struct ServiceHandlers;

  std::filesystem::path root_;
  std::mutex mu_;  // guards the two maps, not their contents
  std::map<std::string, std::shared_ptr<ServiceRun>> runs_;
  std::map<std::string, std::shared_ptr<ServiceSession>> sessions_;
  std::size_t next_session_ = 1;
};

}  // namespace censor
