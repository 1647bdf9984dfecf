#include "covidscreen/service/config.hpp"

#include <cstdlib>
#include <fstream>

#include "covidscreen/core/error.hpp"

namespace covidscreen::service {

void ServiceConfig::validate() const {
  if (port < 0 || port > 65535) throw InvalidArgument("port must lie in [0, 65535]");
  if (workers < 1) throw InvalidArgument("workers must be >= 1");
  if (http_threads < 1) throw InvalidArgument("http_threads must be >= 1");
  if (store.empty()) throw InvalidArgument("store path is required");
  if (max_upload_bytes == 0) throw InvalidArgument("max_upload_bytes must be > 0");
}

void to_json(nlohmann::json& j, const ServiceConfig& c) {
  j = nlohmann::json{{"host", c.host},
                     {"port", c.port},
                     {"ct_checkpoint", c.ct_checkpoint},
                     {"cxr_checkpoint", c.cxr_checkpoint},
                     {"store", c.store},
                     {"workers", c.workers},
                     {"http_threads", c.http_threads},
                     {"api_token_set", !c.api_token.empty()},
                     {"max_upload_bytes", c.max_upload_bytes},
                     {"request_log", c.request_log}};
}

void from_json(const nlohmann::json& j, ServiceConfig& c) {
  ServiceConfig d;
  d.host = j.value("host", d.host);
  d.port = j.value("port", d.port);
  d.ct_checkpoint = j.value("ct_checkpoint", d.ct_checkpoint);
  d.cxr_checkpoint = j.value("cxr_checkpoint", d.cxr_checkpoint);
  d.store = j.value("store", d.store);
  d.workers = j.value("workers", d.workers);
  d.http_threads = j.value("http_threads", d.http_threads);
  d.api_token = j.value("api_token", d.api_token);
  d.max_upload_bytes = j.value("max_upload_bytes", d.max_upload_bytes);
  d.request_log = j.value("request_log", d.request_log);
  c = d;
}

namespace {

const char* env(const char* name) {
  const char* v = std::getenv(name);
  return v && *v ? v : nullptr;
}

int env_int(const char* name, const char* value) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(value, &used);
    if (used != std::string(value).size()) throw std::invalid_argument(name);
    return v;
  } catch (const std::exception&) {
    throw InvalidArgument(std::string(name) + " must be an integer, got '" + value + "'");
  }
}

}  // namespace

void apply_environment(ServiceConfig& c) {
  if (const char* v = env("COVIDSCREEN_HOST")) c.host = v;
  if (const char* v = env("COVIDSCREEN_PORT")) c.port = env_int("COVIDSCREEN_PORT", v);
  if (const char* v = env("COVIDSCREEN_CT_CHECKPOINT")) c.ct_checkpoint = v;
  if (const char* v = env("COVIDSCREEN_CXR_CHECKPOINT")) c.cxr_checkpoint = v;
  if (const char* v = env("COVIDSCREEN_STORE")) c.store = v;
  if (const char* v = env("COVIDSCREEN_WORKERS")) c.workers = env_int("COVIDSCREEN_WORKERS", v);
  if (const char* v = env("COVIDSCREEN_API_TOKEN")) c.api_token = v;
  if (const char* v = env("COVIDSCREEN_REQUEST_LOG")) c.request_log = v;
}

ServiceConfig load_service_config(const std::filesystem::path& file) {
  ServiceConfig c;
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw MissingFile("service config not found: " + file.string());
    try {
      c = nlohmann::json::parse(in).get<ServiceConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument("invalid service config " + file.string() + ": " + e.what());
    }
  }
  apply_environment(c);
  c.validate();
  return c;
}

}  // namespace covidscreen::service
