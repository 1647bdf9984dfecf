#pragma once

#include <json.hpp>

#include <cstddef>
#include <filesystem>
#include <string>

namespace covidscreen::service {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string ct_checkpoint;
  std::string cxr_checkpoint;
  std::string store = "covidscreen-cases.db";
  // Model replicas per modality; bounds concurrent inference.
  int workers = 1;
  int http_threads = 8;
  // When set, every endpoint except /v1/health requires
  // "Authorization: Bearer <token>".
  std::string api_token;
  std::size_t max_upload_bytes = 32u << 20;
  // Request log destination (JSON lines); empty means stderr.
  std::string request_log;

  void validate() const;
};

void to_json(nlohmann::json& j, const ServiceConfig& c);
void from_json(const nlohmann::json& j, ServiceConfig& c);

// Reads the JSON config file (when given) and applies COVIDSCREEN_HOST,
// COVIDSCREEN_PORT, COVIDSCREEN_CT_CHECKPOINT, COVIDSCREEN_CXR_CHECKPOINT,
// COVIDSCREEN_STORE, COVIDSCREEN_WORKERS, COVIDSCREEN_API_TOKEN and
// COVIDSCREEN_REQUEST_LOG on top.
ServiceConfig load_service_config(const std::filesystem::path& file = {});
void apply_environment(ServiceConfig& c);

}  // namespace covidscreen::service
