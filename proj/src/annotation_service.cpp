#include "mmfal/annotation_service.hpp"

#include <httplib.h>

#include <fstream>
#include <sstream>

namespace mmfal {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// LiveOracle
// ---------------------------------------------------------------------------

std::vector<FibrosisStage> LiveOracle::label(const CandidatePool& pool, const std::vector<TupleId>& ids) {
  std::unique_lock lock(mutex_);
  if (shutdown_) throw OracleTimeout("annotation service is shutting down");
  batch_.clear();
  answers_.clear();
  for (TupleId id : ids) {
    PendingQuery q;
    q.tuple_id = id;
    q.iteration = pool.iteration();
    q.query_id = "t" + std::to_string(q.iteration) + "-" + std::to_string(id);
    for (const auto& [m, s] : pool.tuple(id).parts) q.samples.emplace_back(m, s.sample_id);
    batch_.push_back(std::move(q));
  }
  status_.pending_count = batch_.size();
  status_.waiting = true;

  auto done = [&] { return shutdown_ || answers_.size() == batch_.size(); };
  bool complete;
  if (timeout_.count() > 0) {
    complete = cv_.wait_for(lock, timeout_, done);
  } else {
    cv_.wait(lock, done);
    complete = true;
  }
  if (!complete || answers_.size() != batch_.size()) {
    batch_.clear();
    answers_.clear();
    status_.pending_count = 0;
    status_.waiting = false;
    throw OracleTimeout(shutdown_ ? "annotation service is shutting down" : "timed out waiting for labels");
  }

  std::vector<FibrosisStage> out;
  out.reserve(batch_.size());
  for (const auto& q : batch_) {
    out.push_back(answers_.at(q.query_id));
    answered_before_.insert(q.query_id);
  }
  // The loop applies these labels next; reflect the new iteration right away.
  status_.iteration = pool.iteration() + 1;
  status_.d = static_cast<double>(pool.labeled_count() + batch_.size()) / static_cast<double>(pool.initial_size());
  status_.pending_count = 0;
  status_.waiting = false;
  batch_.clear();
  answers_.clear();
  return out;
}

LiveOracle::Submit LiveOracle::submit(const std::string& query_id, FibrosisStage stage) {
  {
    std::lock_guard lock(mutex_);
    if (answered_before_.count(query_id) || answers_.count(query_id)) return Submit::Duplicate;
    const bool known = std::any_of(batch_.begin(), batch_.end(), [&](const auto& q) { return q.query_id == query_id; });
    if (!known) return Submit::Unknown;
    answers_.emplace(query_id, stage);
    status_.pending_count = batch_.size() - answers_.size();
  }
  cv_.notify_all();
  return Submit::Accepted;
}

std::vector<PendingQuery> LiveOracle::pending() const {
  std::lock_guard lock(mutex_);
  std::vector<PendingQuery> out;
  for (const auto& q : batch_) {
    if (!answers_.count(q.query_id)) out.push_back(q);
  }
  return out;
}

LoopStatus LiveOracle::status() const {
  std::lock_guard lock(mutex_);
  return status_;
}

void LiveOracle::record(const ALRecord& record, const CandidatePool& pool) {
  std::lock_guard lock(mutex_);
  status_.iteration = pool.iteration();
  status_.d = record.d;
  status_.last_metrics = record.eval;
}

void LiveOracle::finish() {
  std::lock_guard lock(mutex_);
  status_.finished = true;
}

void LiveOracle::shutdown() {
  {
    std::lock_guard lock(mutex_);
    shutdown_ = true;
  }
  cv_.notify_all();
}

json to_json(const PendingQuery& q) {
  json images = json::array();
  for (const auto& [m, sid] : q.samples) {
    images.push_back({{"modality", std::string(to_string(m))}, {"sample_id", sid}, {"url", "/api/v1/images/" + sid}});
  }
  return {{"query_id", q.query_id}, {"iteration", q.iteration}, {"images", images}};
}

json to_json(const LoopStatus& s) {
  return {{"iteration", s.iteration},
          {"d", s.d},
          {"pending_count", s.pending_count},
          {"last_metrics", s.last_metrics ? json(*s.last_metrics) : json(nullptr)},
          {"waiting", s.waiting},
          {"finished", s.finished}};
}

// ---------------------------------------------------------------------------
// HTTP
// ---------------------------------------------------------------------------

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json; charset=utf-8");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

std::string content_type(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".bmp") return "image/bmp";
  if (ext == ".tif" || ext == ".tiff") return "image/tiff";
  return "application/octet-stream";
}

}  // namespace

AnnotationService::AnnotationService(LiveOracle& oracle, ServiceOptions options)
    : oracle_(oracle), options_(std::move(options)), server_(std::make_unique<httplib::Server>()) {
  // httplib's default also sets SO_REUSEPORT, which lets a second server share a busy port.
  server_->set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof yes);
  });
  routes();
}

AnnotationService::~AnnotationService() { stop(); }

void AnnotationService::set_images(const DatasetIndex& index) {
  std::lock_guard lock(images_mutex_);
  images_.clear();
  for (const auto& p : index.patients()) {
    for (const auto& [m, samples] : p.samples) {
      for (const auto& s : samples) images_.emplace(s.sample_id, s.source_path);
    }
  }
}

void AnnotationService::routes() {
  auto& srv = *server_;

  if (!options_.token.empty()) {
    srv.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
      if (req.path.rfind("/api/", 0) != 0) return httplib::Server::HandlerResponse::Unhandled;
      if (req.get_header_value("Authorization") == "Bearer " + options_.token) {
        return httplib::Server::HandlerResponse::Unhandled;
      }
      send_error(res, 401, "missing or invalid token");
      return httplib::Server::HandlerResponse::Handled;
    });
  }

  srv.Get("/api/v1/queries", [this](const httplib::Request&, httplib::Response& res) {
    json items = json::array();
    for (const auto& q : oracle_.pending()) items.push_back(to_json(q));
    send_json(res, 200, items);
  });

  srv.Get("/api/v1/status", [this](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, to_json(oracle_.status()));
  });

  srv.Post("/api/v1/labels", [this](const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::parse_error&) {
      send_error(res, 400, "body is not valid JSON");
      return;
    }
    if (!body.is_object() || !body.contains("query_id") || !body.contains("stage") ||
        !body.at("query_id").is_string() || !body.at("stage").is_string()) {
      send_error(res, 400, "expected {\"query_id\": string, \"stage\": \"F0\"..\"F4\"}");
      return;
    }
    FibrosisStage stage;
    try {
      stage = parse_stage(body.at("stage").get<std::string>());
    } catch (const Error&) {
      send_error(res, 400, "stage must be one of F0, F1, F2, F3, F4");
      return;
    }
    const std::string id = body.at("query_id");
    switch (oracle_.submit(id, stage)) {
      case LiveOracle::Submit::Accepted:
        send_json(res, 200, {{"query_id", id}, {"stage", std::string(to_string(stage))}, {"accepted", true}});
        break;
      case LiveOracle::Submit::Unknown:
        send_error(res, 404, "unknown query id '" + id + "'");
        break;
      case LiveOracle::Submit::Duplicate:
        send_error(res, 409, "query '" + id + "' is already labeled");
        break;
    }
  });

  srv.Get(R"(/api/v1/images/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    std::filesystem::path path;
    {
      std::lock_guard lock(images_mutex_);
      auto it = images_.find(req.matches[1].str());
      if (it == images_.end()) {
        send_error(res, 404, "unknown sample id");
        return;
      }
      path = it->second;
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      send_error(res, 404, "image file missing");
      return;
    }
    std::ostringstream bytes;
    bytes << in.rdbuf();
    res.status = 200;
    res.set_content(bytes.str(), content_type(path));
  });

  if (!options_.static_dir.empty()) srv.set_mount_point("/", options_.static_dir.string());
}

void AnnotationService::start() {
  if (thread_.joinable()) return;
  if (options_.port == 0) {
    port_ = server_->bind_to_any_port(options_.host);
    if (port_ < 0) throw IoError("cannot bind " + options_.host);
  } else {
    if (!server_->bind_to_port(options_.host, options_.port)) {
      throw IoError("cannot bind " + options_.host + ":" + std::to_string(options_.port) + " (port in use?)");
    }
    port_ = options_.port;
  }
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

void AnnotationService::stop() {
  if (!thread_.joinable()) return;
  server_->stop();
  thread_.join();
}

}  // namespace mmfal
