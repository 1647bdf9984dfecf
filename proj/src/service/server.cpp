#include "covidscreen/service/server.hpp"

#include <httplib.h>

#include <charconv>
#include <chrono>
#include <cstdio>

#include "covidscreen/core/error.hpp"
#include "covidscreen/explain/grad_cam.hpp"
#include "covidscreen/preprocess/image_io.hpp"
#include "covidscreen/preprocess/pipeline.hpp"
#include "covidscreen/train/dataset.hpp"

namespace covidscreen::service {

namespace {

struct HttpError {
  int status;
  std::string message;
};

void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::optional<Modality> modality_param(const httplib::Request& req) {
  std::string text;
  if (req.has_file("modality")) {
    text = req.get_file_value("modality").content;
  } else if (req.has_param("modality")) {
    text = req.get_param_value("modality");
  } else {
    return std::nullopt;
  }
  return parse_modality(text);
}

std::size_t size_param(const httplib::Request& req, const char* name, std::size_t fallback, std::size_t max) {
  if (!req.has_param(name)) return fallback;
  const std::string v = req.get_param_value(name);
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || out > max) {
    throw HttpError{422, std::string("invalid ") + name + " '" + v + "'"};
  }
  return out;
}

double alpha_param(const httplib::Request& req) {
  if (!req.has_param("alpha")) return 0.4;
  const std::string v = req.get_param_value("alpha");
  double a = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), a);
  if (ec != std::errc() || p != v.data() + v.size() || !(a >= 0.0 && a <= 1.0)) {
    throw HttpError{422, "alpha must be a number in [0, 1], got '" + v + "'"};
  }
  return a;
}

// Decoded source image, forced to RGB.
preprocess::RasterImage decode_rgb(std::string_view bytes) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(bytes.data());
  return preprocess::to_rgb(preprocess::decode_image(std::span(p, bytes.size())).image);
}

std::string png_string(const preprocess::RasterImage& img) {
  const auto bytes = preprocess::encode_png(img);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace

ScreeningService::ScreeningService(ServiceConfig config)
    : config_(std::move(config)),
      models_(config_.workers),
      http_(std::make_unique<httplib::Server>()),
      id_rng_(std::random_device{}()) {
  config_.validate();
  store_ = std::make_unique<CaseStore>(config_.store);
  if (!config_.request_log.empty()) {
    log_ = std::fopen(config_.request_log.c_str(), "a");
    if (!log_) throw Error("cannot open request log " + config_.request_log);
  }
  http_->new_task_queue = [n = config_.http_threads] { return new httplib::ThreadPool(static_cast<std::size_t>(n)); };
  http_->set_payload_max_length(config_.max_upload_bytes);
  routes();
}

ScreeningService::~ScreeningService() {
  stop();
  if (log_) std::fclose(log_);
}

void ScreeningService::load_configured_models() {
  for (auto [modality, path] : {std::pair{Modality::kCT, config_.ct_checkpoint},
                                std::pair{Modality::kCXR, config_.cxr_checkpoint}}) {
    if (path.empty()) continue;
    try {
      models_.load(modality, path);
    } catch (const std::exception& e) {
      log_request(nlohmann::json{{"ts", utc_now()}, {"event", "model_load_failed"},
                                 {"modality", std::string(to_string(modality))}, {"error", e.what()}}
                      .dump());
    }
  }
}

int ScreeningService::bind() {
  if (config_.port == 0) {
    const int port = http_->bind_to_any_port(config_.host);
    if (port < 0) throw Error("cannot bind " + config_.host);
    return port;
  }
  if (!http_->bind_to_port(config_.host, config_.port)) {
    throw Error("cannot bind " + config_.host + ":" + std::to_string(config_.port));
  }
  return config_.port;
}

void ScreeningService::serve() { http_->listen_after_bind(); }

void ScreeningService::wait_until_ready() const { http_->wait_until_ready(); }

void ScreeningService::stop() {
  if (http_) http_->stop();
}

void ScreeningService::log_request(const std::string& line) {
  std::lock_guard lock(log_mutex_);
  std::FILE* out = log_ ? log_ : stderr;
  std::fprintf(out, "%s\n", line.c_str());
  std::fflush(out);
}

std::string ScreeningService::new_case_id() {
  std::lock_guard lock(id_mutex_);
  char buf[33];
  std::snprintf(buf, sizeof(buf), "%016llx%016llx", static_cast<unsigned long long>(id_rng_()),
                static_cast<unsigned long long>(id_rng_()));
  return buf;
}

void ScreeningService::routes() {
  using httplib::Request;
  using httplib::Response;
  using Handler = std::function<void(const Request&, Response&)>;

  // Shared error mapping and timing for every route.
  auto wrap = [](Handler fn) {
    return [fn = std::move(fn)](const Request& req, Response& res) {
      const auto start = std::chrono::steady_clock::now();
      try {
        fn(req, res);
      } catch (const HttpError& e) {
        send_json(res, {{"error", e.message}}, e.status);
      } catch (const UndecodableImage& e) {
        send_json(res, {{"error", e.what()}}, 400);
      } catch (const InvalidClass& e) {
        send_json(res, {{"error", e.what()}}, 422);
      } catch (const std::exception& e) {
        send_json(res, {{"error", e.what()}}, 500);
      }
      const double ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      res.set_header("X-Elapsed-Ms", std::to_string(ms));
    };
  };

  http_->set_pre_routing_handler([this](const Request& req, Response& res) {
    if (config_.api_token.empty() || req.path == "/v1/health") return httplib::Server::HandlerResponse::Unhandled;
    if (req.get_header_value("Authorization") == "Bearer " + config_.api_token) {
      return httplib::Server::HandlerResponse::Unhandled;
    }
    send_json(res, {{"error", "missing or invalid API token"}}, 401);
    return httplib::Server::HandlerResponse::Handled;
  });

  http_->set_logger([this](const Request& req, const Response& res) {
    nlohmann::json line{{"ts", utc_now()},
                        {"method", req.method},
                        {"path", req.path},
                        {"status", res.status},
                        {"remote", req.remote_addr}};
    if (res.has_header("X-Elapsed-Ms")) line["duration_ms"] = std::stod(res.get_header_value("X-Elapsed-Ms"));
    log_request(line.dump());
  });

  http_->Get("/v1/health", wrap([this](const Request&, Response& res) {
    const nlohmann::json models = models_.status();
    nlohmann::json versions = nlohmann::json::object();
    for (const auto& [k, v] : models.items()) versions[k] = v.is_null() ? nlohmann::json() : v.at("model_version");
    send_json(res, {{"status", models_.any_loaded() ? "ok" : "degraded"},
                    {"model_version", versions},
                    {"models", models}});
  }));

  http_->Post("/v1/predict", wrap([this](const Request& req, Response& res) {
    const auto modality = modality_param(req);
    if (!modality) throw HttpError{422, "modality must be 'ct' or 'cxr'"};
    const auto model = models_.get(*modality);
    if (!model) throw HttpError{503, "no " + lower(std::string(to_string(*modality))) + " model is loaded"};
    if (!req.has_file("image")) throw HttpError{400, "multipart field 'image' is required"};
    const std::string& bytes = req.get_file_value("image").content;
    const preprocess::RasterImage image = decode_rgb(bytes);
    const std::string sha = store_->put_image(bytes);

    CaseRecord c;
    if (auto prior = store_->find_prediction(sha, *modality, model->version())) {
      c.probabilities = prior->probabilities;
      c.predicted_label = prior->predicted_label;
    } else {
      auto lease = model->acquire();
      auto& net = lease.net();
      Rng unused(0);
      const auto x = preprocess::run_pipeline(image, preprocess::PipelineMode::kEval, unused, net.spec().preprocess);
      const auto pred = net.predict(net.forward(train::to_tensor<float>(x.values), nn::Mode::kInfer)).front();
      for (const auto& [label, p] : pred.probabilities) c.probabilities.emplace_back(std::string(to_string(label)), p);
      c.predicted_label = pred.predicted_label;
    }
    c.case_id = new_case_id();
    c.image_sha256 = sha;
    c.modality = *modality;
    c.model_version = model->version();
    c.created_at = c.updated_at = utc_now();
    store_->insert(c);

    nlohmann::json body = to_json(c);
    if (*modality == Modality::kCXR) body["binary"] = c.predicted_label == Label::kCovid19 ? 1 : 0;
    send_json(res, body);
  }));

  http_->Get("/v1/cases", wrap([this](const Request& req, Response& res) {
    CaseQuery q;
    if (req.has_param("triage")) {
      q.triage = parse_triage(req.get_param_value("triage"));
      if (!q.triage) throw HttpError{422, "unknown triage state '" + req.get_param_value("triage") + "'"};
    }
    q.limit = size_param(req, "limit", 50, 500);
    q.offset = size_param(req, "offset", 0, std::numeric_limits<std::size_t>::max() / 2);
    const CasePage page = store_->list(q);
    nlohmann::json cases = nlohmann::json::array();
    for (const auto& c : page.cases) cases.push_back(to_json(c));
    send_json(res, {{"cases", cases}, {"total", page.total}, {"limit", q.limit}, {"offset", q.offset}});
  }));

  http_->Get(R"(/v1/cases/([0-9a-zA-Z_-]+))", wrap([this](const Request& req, Response& res) {
    const auto c = store_->get(req.matches[1]);
    if (!c) throw HttpError{404, "unknown case " + std::string(req.matches[1])};
    send_json(res, to_json(*c));
  }));

  http_->Get(R"(/v1/cases/([0-9a-zA-Z_-]+)/image)", wrap([this](const Request& req, Response& res) {
    const auto c = store_->get(req.matches[1]);
    if (!c) throw HttpError{404, "unknown case " + std::string(req.matches[1])};
    const auto bytes = store_->image(c->image_sha256);
    if (!bytes) throw HttpError{500, "source image missing from the store"};
    res.set_content(png_string(decode_rgb(*bytes)), "image/png");
  }));

  http_->Get(R"(/v1/cases/([0-9a-zA-Z_-]+)/cam)", wrap([this](const Request& req, Response& res) {
    const auto c = store_->get(req.matches[1]);
    if (!c) throw HttpError{404, "unknown case " + std::string(req.matches[1])};
    Label target = Label::kCovid19;
    if (req.has_param("class")) {
      const auto parsed = parse_label(req.get_param_value("class"));
      if (!parsed) throw HttpError{422, "unknown class '" + req.get_param_value("class") + "'"};
      target = *parsed;
    }
    const double alpha = alpha_param(req);
    const auto model = models_.get(c->modality);
    if (!model) throw HttpError{503, "no model is loaded for this case's modality"};

    char alpha_key[32];
    std::snprintf(alpha_key, sizeof(alpha_key), "%.6f", alpha);
    const std::string key = c->case_id + "|" + std::string(to_string(target)) + "|" + alpha_key + "|" + model->version();
    std::string png;
    if (auto cached = store_->cam(key)) {
      png = std::move(*cached);
    } else {
      const auto bytes = store_->image(c->image_sha256);
      if (!bytes) throw HttpError{500, "source image missing from the store"};
      const preprocess::RasterImage image = decode_rgb(*bytes);
      explain::CamResult cam;
      {
        auto lease = model->acquire();
        cam = explain::grad_cam(lease.net(), image, target, c->case_id);
      }
      png = png_string(explain::render_overlay_on_source(image, cam, alpha));
      store_->put_cam(key, c->case_id, png);
    }
    res.set_header("X-Model-Version", model->version());
    res.set_content(png, "image/png");
  }));

  http_->Post(R"(/v1/cases/([0-9a-zA-Z_-]+)/triage)", wrap([this](const Request& req, Response& res) {
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception&) {
      throw HttpError{422, "request body must be JSON"};
    }
    if (!body.is_object() || !body.contains("decision") || !body.at("decision").is_string()) {
      throw HttpError{422, "field 'decision' is required"};
    }
    const auto decision = parse_triage(body.at("decision").get<std::string>());
    if (!decision) throw HttpError{422, "invalid decision '" + body.at("decision").get<std::string>() + "'"};
    const std::string note = body.value("note", std::string());
    const std::string reviewer = body.value("reviewer", std::string());
    const auto c = store_->set_triage(req.matches[1], *decision, note, reviewer);
    if (!c) throw HttpError{404, "unknown case " + std::string(req.matches[1])};
    send_json(res, to_json(*c));
  }));

  http_->Post("/v1/admin/reload", wrap([this](const Request& req, Response& res) {
    std::lock_guard lock(reload_mutex_);
    nlohmann::json body = nlohmann::json::object();
    if (!req.body.empty()) {
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::exception&) {
        throw HttpError{422, "request body must be JSON"};
      }
    }
    std::vector<std::pair<Modality, std::string>> todo;
    if (body.contains("modality")) {
      const auto m = parse_modality(body.at("modality").get<std::string>());
      if (!m) throw HttpError{422, "modality must be 'ct' or 'cxr'"};
      std::string path = body.value("checkpoint", std::string());
      if (path.empty()) path = *m == Modality::kCT ? config_.ct_checkpoint : config_.cxr_checkpoint;
      if (path.empty()) throw HttpError{422, "no checkpoint configured for this modality"};
      todo.emplace_back(*m, path);
    } else {
      if (!config_.ct_checkpoint.empty()) todo.emplace_back(Modality::kCT, config_.ct_checkpoint);
      if (!config_.cxr_checkpoint.empty()) todo.emplace_back(Modality::kCXR, config_.cxr_checkpoint);
    }
    for (const auto& [m, path] : todo) {
      try {
        models_.load(m, path);
      } catch (const std::exception& e) {
        throw HttpError{400, std::string("reload failed: ") + e.what()};
      }
      if (m == Modality::kCT) config_.ct_checkpoint = path;
      else config_.cxr_checkpoint = path;
    }
    send_json(res, {{"status", models_.any_loaded() ? "ok" : "degraded"}, {"models", models_.status()}});
  }));
}

}  // namespace covidscreen::service
