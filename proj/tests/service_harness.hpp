#pragma once

#include <thread>

#include "covidscreen/nn/checkpoint.hpp"
#include "covidscreen/preprocess/image_io.hpp"
#include "covidscreen/service/server.hpp"
#include "support.hpp"

// After Eigen: <resolv.h> defines a `_res` macro that clashes with Eigen parameter names.
#include <httplib.h>

namespace covidscreen::testing {

// Tiny randomly initialized checkpoints for the API tests.
inline std::filesystem::path write_tiny_checkpoint(const std::filesystem::path& dir, nn::ModelKind kind,
                                                   std::uint64_t seed) {
  nn::ModelSpec spec = tiny_spec(kind);
  if (kind == nn::ModelKind::kCXR) spec = with_constant_aux(spec);
  auto net = nn::make_network<float>(spec, seed);
  const auto path = dir / (nn::to_string(kind) + "_" + std::to_string(seed) + ".ckpt");
  nn::write_checkpoint(path, nn::snapshot(*net, {{"seed", seed}}));
  return path;
}

inline std::string png_bytes(const preprocess::RasterImage& img) {
  const auto b = preprocess::encode_png(img);
  return std::string(b.begin(), b.end());
}

// Service on an ephemeral port, served from a background thread.
class RunningService {
 public:
  explicit RunningService(service::ServiceConfig cfg) : svc_(prepare(std::move(cfg))) {
    svc_.load_configured_models();
    port_ = svc_.bind();
    thread_ = std::thread([this] { svc_.serve(); });
    svc_.wait_until_ready();
  }
  ~RunningService() {
    svc_.stop();
    thread_.join();
  }

  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(120, 0);
    return c;
  }
  service::ScreeningService& service() { return svc_; }

 private:
  static service::ServiceConfig prepare(service::ServiceConfig cfg) {
    cfg.host = "127.0.0.1";
    cfg.port = 0;
    if (cfg.request_log.empty()) cfg.request_log = "/dev/null";
    return cfg;
  }

  service::ScreeningService svc_;
  int port_ = 0;
  std::thread thread_;
};

inline httplib::Result predict(httplib::Client& c, const std::string& bytes, const std::string& modality,
                               const std::string& filename = "scan.png") {
  httplib::MultipartFormDataItems items{{"image", bytes, filename, "application/octet-stream"},
                                        {"modality", modality, "", ""}};
  return c.Post("/v1/predict", items);
}

}  // namespace covidscreen::testing
