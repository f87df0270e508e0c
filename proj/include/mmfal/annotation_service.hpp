#pragma once

#include "mmfal/active_learning.hpp"

#include <json.hpp>

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

namespace httplib {
class Server;
}

namespace mmfal {

struct PendingQuery {
  std::string query_id;
  TupleId tuple_id = 0;
  int iteration = 0;
  std::vector<std::pair<ModalityKind, std::string>> samples;  // modality, sample_id
};

/// Snapshot served by GET /api/v1/status.
struct LoopStatus {
  int iteration = 0;
  double d = 0.0;
  std::size_t pending_count = 0;
  std::optional<EvalReport> last_metrics;
  bool waiting = false;
  bool finished = false;
};

/// Oracle fed by human submissions. label() publishes one batch and blocks
/// until every query in it is answered, the timeout passes or shutdown() is
/// called (both raise OracleTimeout, leaving the pool untouched).
class LiveOracle final : public Oracle {
 public:
  enum class Submit { Accepted, Unknown, Duplicate };

  /// A zero timeout waits indefinitely.
  explicit LiveOracle(std::chrono::milliseconds timeout = std::chrono::milliseconds(0)) : timeout_(timeout) {}

  std::vector<FibrosisStage> label(const CandidatePool& pool, const std::vector<TupleId>& ids) override;

  Submit submit(const std::string& query_id, FibrosisStage stage);
  std::vector<PendingQuery> pending() const;
  LoopStatus status() const;
  /// Called by the loop after each evaluated round.
  void record(const ALRecord& record, const CandidatePool& pool);
  void finish();
  void shutdown();

 private:
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::chrono::milliseconds timeout_;
  std::vector<PendingQuery> batch_;
  std::map<std::string, FibrosisStage> answers_;
  std::set<std::string> answered_before_;
  LoopStatus status_;
  bool shutdown_ = false;
};

struct ServiceOptions {
  std::string host = "127.0.0.1";
  /// 0 picks a free port.
  int port = 8080;
  /// Served at "/" when set (the annotation UI build).
  std::filesystem::path static_dir;
  /// When non-empty, API calls must send "Authorization: Bearer <token>".
  std::string token;
};

/// HTTP front end for a LiveOracle:
///   GET  /api/v1/queries           pending items
///   POST /api/v1/labels            {"query_id", "stage"}
///   GET  /api/v1/status            {iteration, d, pending_count, last_metrics}
///   GET  /api/v1/images/{sample}   image bytes
class AnnotationService {
 public:
  AnnotationService(LiveOracle& oracle, ServiceOptions options);
  ~AnnotationService();
  AnnotationService(const AnnotationService&) = delete;
  AnnotationService& operator=(const AnnotationService&) = delete;

  /// Registers image files by sample id (replaces earlier entries).
  void set_images(const DatasetIndex& index);
  /// Binds and starts serving on a background thread. Throws IoError when
  /// the address cannot be bound.
  void start();
  void stop();
  int port() const { return port_; }

 private:
  void routes();

  LiveOracle& oracle_;
  ServiceOptions options_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
  mutable std::mutex images_mutex_;
  std::map<std::string, std::filesystem::path> images_;
};

nlohmann::json to_json(const PendingQuery& q);
nlohmann::json to_json(const LoopStatus& s);

}  // namespace mmfal
