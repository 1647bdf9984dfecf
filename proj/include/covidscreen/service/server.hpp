#pragma once

#include <cstdio>
#include <memory>
#include <mutex>
#include <random>
#include <string>

#include "covidscreen/service/case_store.hpp"
#include "covidscreen/service/config.hpp"
#include "covidscreen/service/model_registry.hpp"

namespace httplib {
class Server;
}

namespace covidscreen::service {

// JSON-over-HTTP screening API:
//   GET  /v1/health
//   POST /v1/predict                 multipart: image (file), modality (ct|cxr)
//   GET  /v1/cases?triage=&limit=&offset=
//   GET  /v1/cases/{id}
//   GET  /v1/cases/{id}/image        source image as PNG
//   GET  /v1/cases/{id}/cam?class=&alpha=
//   POST /v1/cases/{id}/triage       {"decision", "note", "reviewer"}
//   POST /v1/admin/reload            {"modality", "checkpoint"} (both optional)
class ScreeningService {
 public:
  explicit ScreeningService(ServiceConfig config);
  ~ScreeningService();

  // Loads the configured checkpoints. Failures are logged and leave the
  // modality unloaded (the service then reports "degraded").
  void load_configured_models();

  // Binds to config.host:config.port (0 picks a free port); returns the port.
  int bind();
  // Serves until stop(); call after bind().
  void serve();
  // Blocks until serve() accepts connections.
  void wait_until_ready() const;
  void stop();

  ModelRegistry& models() { return models_; }
  CaseStore& store() { return *store_; }
  const ServiceConfig& config() const { return config_; }

 private:
  void routes();
  void log_request(const std::string& line);
  std::string new_case_id();

  ServiceConfig config_;
  std::unique_ptr<CaseStore> store_;
  ModelRegistry models_;
  std::unique_ptr<httplib::Server> http_;
  std::mutex reload_mutex_;
  std::mutex log_mutex_;
  std::FILE* log_ = nullptr;
  std::mutex id_mutex_;
  std::mt19937_64 id_rng_;
};

}  // namespace covidscreen::service
