#include "covidscreen/train/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "covidscreen/core/error.hpp"
#include "covidscreen/train/loss.hpp"

namespace covidscreen::train {

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be > 0");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (max_epochs < 1) throw InvalidArgument("max_epochs must be >= 1");
  if (early_stop_patience < 1) throw InvalidArgument("early_stop_patience must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw InvalidArgument("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw InvalidArgument("adam_eps must be > 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"optimizer", "adam"},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"loss", "bce"},
                     {"batch_size", c.batch_size},
                     {"max_epochs", c.max_epochs},
                     {"max_steps", c.max_steps},
                     {"early_stop_patience", c.early_stop_patience},
                     {"seed", c.seed},
                     {"class_weighting", c.class_weighting}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  d.learning_rate = j.value("learning_rate", d.learning_rate);
  d.beta1 = j.value("beta1", d.beta1);
  d.beta2 = j.value("beta2", d.beta2);
  d.adam_eps = j.value("adam_eps", d.adam_eps);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.max_epochs = j.value("max_epochs", d.max_epochs);
  d.max_steps = j.value("max_steps", d.max_steps);
  d.early_stop_patience = j.value("early_stop_patience", d.early_stop_patience);
  d.seed = j.value("seed", d.seed);
  d.class_weighting = j.value("class_weighting", d.class_weighting);
  if (j.contains("optimizer") && j.at("optimizer") != "adam") {
    throw InvalidArgument("only the adam optimizer is supported");
  }
  d.validate();
  c = d;
}

namespace {

// JSON has no infinities; -inf (no best yet) is stored as null.
nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

double number_or(const nlohmann::json& j, const char* key, double fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  return j.at(key).get<double>();
}

}  // namespace

void to_json(nlohmann::json& j, const TrainState& s) {
  j = nlohmann::json{{"step", s.step},
                     {"epoch", s.epoch},
                     {"batch_in_epoch", s.batch_in_epoch},
                     {"epoch_loss_sum", s.epoch_loss_sum},
                     {"epoch_loss_count", s.epoch_loss_count},
                     {"best_metric", finite_or_null(s.best_metric)},
                     {"best_epoch", s.best_epoch},
                     {"stale_epochs", s.stale_epochs}};
}

void from_json(const nlohmann::json& j, TrainState& s) {
  s.step = j.at("step").get<std::uint64_t>();
  s.epoch = j.at("epoch").get<int>();
  s.batch_in_epoch = j.at("batch_in_epoch").get<std::size_t>();
  s.epoch_loss_sum = j.at("epoch_loss_sum").get<double>();
  s.epoch_loss_count = j.at("epoch_loss_count").get<std::size_t>();
  s.best_metric = number_or(j, "best_metric", -std::numeric_limits<double>::infinity());
  s.best_epoch = j.at("best_epoch").get<int>();
  s.stale_epochs = j.at("stale_epochs").get<int>();
}

namespace {

nlohmann::json record_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"step", r.step},
          {"train_loss", r.train_loss},
          {"val_auc", finite_or_null(r.val_auc)},
          {"val_accuracy", finite_or_null(r.val_accuracy)},
          {"improved", r.improved}};
}

EpochRecord record_from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.step = j.at("step").get<std::uint64_t>();
  r.train_loss = j.at("train_loss").get<double>();
  r.val_auc = number_or(j, "val_auc", std::numeric_limits<double>::quiet_NaN());
  r.val_accuracy = number_or(j, "val_accuracy", std::numeric_limits<double>::quiet_NaN());
  r.improved = j.at("improved").get<bool>();
  return r;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

bool all_finite(const nn::NamedTensors<float>& tensors, bool grads) {
  for (const auto& t : tensors) {
    const Tensor<float>* x = grads ? t.grad : t.value;
    if (x && !x->all_finite()) return false;
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------- Trainer

Trainer::Trainer(nn::Network<float>& net, TrainConfig config, const Dataset& train, const Dataset* val,
                 std::filesystem::path out_dir)
    : net_(net),
      config_(config),
      train_(train),
      val_(val),
      out_dir_(std::move(out_dir)),
      train_batches_(train, net.spec().preprocess, config.seed),
      adam_(config.adam()) {
  config_.validate();
  if (val_) val_batches_ = std::make_unique<BatchBuilder>(*val_, net.spec().preprocess, config.seed);
  if (net.spec().kind == nn::ModelKind::kAux) {
    throw InvalidArgument("auxiliary extractors are not trained by this loop");
  }
  if (config_.class_weighting && !train.empty()) {
    std::array<std::size_t, 3> counts{};
    for (std::size_t i = 0; i < train.size(); ++i) ++counts[label_index(train.label(i))];
    const double n = static_cast<double>(train.size());
    if (net.spec().kind == nn::ModelKind::kCT) {
      for (int k = 0; k < 3; ++k) {
        class_weights_[k] = counts[k] ? n / (3.0 * static_cast<double>(counts[k])) : 0.0;
      }
    } else {
      const double pos = static_cast<double>(counts[label_index(Label::kCovid19)]);
      const double neg = n - pos;
      const double wp = pos > 0 ? n / (2.0 * pos) : 0.0;
      const double wn = neg > 0 ? n / (2.0 * neg) : 0.0;
      class_weights_ = {wp, wn, wn};
    }
  }
}

std::vector<std::size_t> Trainer::epoch_order(int epoch) const {
  std::vector<std::size_t> order(train_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = Rng::derive(config_.seed, {static_cast<std::uint64_t>(epoch), 0x5348554646ull});
  rng.shuffle(order.begin(), order.end());
  return order;
}

double Trainer::train_batch(std::span<const std::size_t> indices, int epoch) {
  const auto trainable = net_.trainable();
  const Tensor<float> x =
      train_batches_.inputs<float>(indices, preprocess::PipelineMode::kTrain, static_cast<std::uint64_t>(epoch));
  const Tensor<float> y = targets<float>(train_, indices, net_.spec().kind);
  nn::zero_grads(trainable);
  const Tensor<float> logits = net_.forward(x, nn::Mode::kTrain);
  Tensor<float> grad;
  double loss = 0.0;
  const bool softmax = net_.spec().activation == nn::HeadActivation::kSoftmax;
  if (!config_.class_weighting) {
    loss = softmax ? softmax_cross_entropy(logits, y, grad) : bce_with_logits(logits, y, grad);
  } else {
    // Per-sample weights; the loss is the weighted mean of per-sample losses.
    double weighted = 0.0;
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const auto b = static_cast<Eigen::Index>(k);
      Tensor<float> zl(1, logits.channels(), 1, 1), yl(1, logits.channels(), 1, 1), gl;
      zl.rows().row(0) = logits.rows().row(b);
      yl.rows().row(0) = y.rows().row(b);
      const double w = class_weights_[label_index(train_.label(indices[k]))];
      weighted += w * (softmax ? softmax_cross_entropy(zl, yl, gl) : bce_with_logits(zl, yl, gl));
      if (grad.empty()) grad = Tensor<float>(logits.shape());
      grad.rows().row(b) = gl.rows().row(0) * static_cast<float>(w / static_cast<double>(indices.size()));
    }
    loss = weighted / static_cast<double>(indices.size());
  }
  if (!std::isfinite(loss)) return loss;
  net_.backward(grad);
  if (!all_finite(trainable, true)) return std::numeric_limits<double>::quiet_NaN();
  adam_.step(trainable);
  if (!all_finite(trainable, false)) return std::numeric_limits<double>::quiet_NaN();
  return loss;
}

void Trainer::validate_epoch(EpochRecord& record) {
  double metric = -record.train_loss;
  if (val_) {
    const auto scored = score_dataset(net_, *val_, config_.batch_size, val_batches_.get());
    const auto report = metrics::build_report(scored, eval_mode_for(net_.spec()));
    record.val_auc = report.auc;
    record.val_accuracy = report.accuracy;
    metric = std::isnan(report.auc) ? report.accuracy : report.auc;
  }
  record.improved = metric > state_.best_metric;
  if (record.improved) {
    state_.best_metric = metric;
    state_.best_epoch = record.epoch;
    state_.stale_epochs = 0;
  } else {
    ++state_.stale_epochs;
  }
}

nn::Checkpoint Trainer::checkpoint() const {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : history_) history.push_back(record_json(r));
  const nlohmann::json cfg = config_;
  nlohmann::json meta{{"step", state_.step},
                      {"epoch", state_.epoch},
                      {"seed", config_.seed},
                      {"config_hash", nn::sha256_hex(cfg.dump().data(), cfg.dump().size()).substr(0, 16)},
                      {"train_config", cfg},
                      {"train_state", state_},
                      {"history", history}};
  nn::Checkpoint ck = nn::snapshot(net_, meta);
  adam_.save(ck);
  return ck;
}

void Trainer::resume(const nn::Checkpoint& ckpt) {
  if (!ckpt.metadata.contains("train_state")) {
    throw VersionMismatch("checkpoint carries no training state to resume from");
  }
  nn::restore(net_, ckpt);
  adam_.load(ckpt);
  adam_.set_learning_rate(config_.learning_rate);
  state_ = ckpt.metadata.at("train_state").get<TrainState>();
  history_.clear();
  for (const auto& r : ckpt.metadata.value("history", nlohmann::json::array())) {
    history_.push_back(record_from_json(r));
  }
}

void Trainer::restore_snapshot(const nn::Checkpoint& snap) {
  nn::restore(net_, snap);
  adam_.load(snap);
  state_ = snap.metadata.at("train_state").get<TrainState>();
  history_.clear();
  for (const auto& r : snap.metadata.at("history")) history_.push_back(record_from_json(r));
}

void Trainer::write_outputs(const nn::Checkpoint& last, bool improved) {
  if (out_dir_.empty()) return;
  std::filesystem::create_directories(out_dir_);
  nn::write_checkpoint(out_dir_ / "last.ckpt", last);
  if (improved) nn::write_checkpoint(out_dir_ / "best.ckpt", last);
  std::ofstream tsv(out_dir_ / "history.tsv", std::ios::trunc);
  tsv << "epoch\tstep\ttrain_loss\tval_auc\tval_accuracy\timproved\n";
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : history_) {
    tsv << r.epoch << '\t' << r.step << '\t' << fmt("%.6f", r.train_loss) << '\t' << fmt("%.6f", r.val_auc)
        << '\t' << fmt("%.6f", r.val_accuracy) << '\t' << (r.improved ? 1 : 0) << '\n';
    rows.push_back(record_json(r));
  }
  std::ofstream(out_dir_ / "history.json", std::ios::trunc) << rows.dump(2) << '\n';
}

TrainResult Trainer::run() {
  if (train_.empty()) throw EmptySplit("training split is empty");
  if (val_ && val_->empty()) throw EmptySplit("validation split is empty");
  TrainResult result;
  const std::size_t bs = static_cast<std::size_t>(config_.batch_size);
  const std::size_t n_batches = (train_.size() + bs - 1) / bs;
  std::ofstream steps_log;
  if (!out_dir_.empty()) {
    std::filesystem::create_directories(out_dir_);
    const bool fresh = state_.step == 0;
    steps_log.open(out_dir_ / "steps.tsv", fresh ? std::ios::trunc : std::ios::app);
    if (fresh) steps_log << "step\tepoch\tloss\n";
  }
  auto step_limit_hit = [&] { return config_.max_steps > 0 && state_.step >= config_.max_steps; };

  while (state_.epoch < config_.max_epochs && !step_limit_hit()) {
    const nn::Checkpoint snapshot = checkpoint();
    const int epoch = state_.epoch;
    const auto order = epoch_order(epoch);
    while (state_.batch_in_epoch < n_batches && !step_limit_hit()) {
      const std::size_t begin = state_.batch_in_epoch * bs;
      const std::size_t end = std::min(begin + bs, order.size());
      const double loss = train_batch(std::span(order).subspan(begin, end - begin), epoch);
      if (!std::isfinite(loss)) {
        const std::uint64_t bad_step = state_.step + 1;
        restore_snapshot(snapshot);
        if (!out_dir_.empty()) nn::write_checkpoint(out_dir_ / "last.ckpt", snapshot);
        throw DivergenceDetected("non-finite loss or weights at step " + std::to_string(bad_step) +
                                 "; restored the state at step " + std::to_string(state_.step));
      }
      ++state_.step;
      ++state_.batch_in_epoch;
      state_.epoch_loss_sum += loss;
      ++state_.epoch_loss_count;
      result.step_losses.push_back(loss);
      if (steps_log.is_open()) steps_log << state_.step << '\t' << epoch + 1 << '\t' << fmt("%.9g", loss) << '\n';
    }
    if (state_.batch_in_epoch < n_batches) {
      // Step budget ran out mid-epoch.
      write_outputs(checkpoint(), false);
      break;
    }
    EpochRecord record;
    record.epoch = epoch + 1;
    record.step = state_.step;
    record.train_loss = state_.epoch_loss_sum / static_cast<double>(std::max<std::size_t>(1, state_.epoch_loss_count));
    validate_epoch(record);
    ++state_.epoch;
    state_.batch_in_epoch = 0;
    state_.epoch_loss_sum = 0.0;
    state_.epoch_loss_count = 0;
    history_.push_back(record);
    write_outputs(checkpoint(), record.improved);
    if (on_epoch_end && on_epoch_end(record)) break;
    if (state_.stale_epochs >= config_.early_stop_patience) {
      result.early_stopped = true;
      break;
    }
  }
  result.history = history_;
  result.state = state_;
  return result;
}

// ---------------------------------------------------------------- evaluation

metrics::EvalMode eval_mode_for(const nn::ModelSpec& spec) {
  return spec.kind == nn::ModelKind::kCT ? metrics::EvalMode::kCT3 : metrics::EvalMode::kCXRBinary;
}

template <typename Scalar>
std::vector<metrics::ScoredExample> score_dataset(nn::Network<Scalar>& net, const Dataset& dataset,
                                                  int batch_size, BatchBuilder* builder) {
  std::unique_ptr<BatchBuilder> local;
  if (!builder) {
    local = std::make_unique<BatchBuilder>(dataset, net.spec().preprocess, 0);
    builder = local.get();
  }
  std::vector<metrics::ScoredExample> out;
  out.reserve(dataset.size());
  const std::size_t bs = static_cast<std::size_t>(std::max(1, batch_size));
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < dataset.size(); begin += bs) {
    idx.clear();
    for (std::size_t i = begin; i < std::min(begin + bs, dataset.size()); ++i) idx.push_back(i);
    const Tensor<Scalar> x = builder->inputs<Scalar>(idx, preprocess::PipelineMode::kEval, 0);
    const auto preds = net.predict(net.forward(x, nn::Mode::kInfer));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out.push_back({dataset.image_id(idx[k]), dataset.label(idx[k]), preds[k].covid_score(),
                     preds[k].predicted_label});
    }
  }
  return out;
}

template <typename Scalar>
metrics::EvalReport evaluate(nn::Network<Scalar>& net, const Dataset& dataset, int batch_size) {
  if (dataset.empty()) throw EmptySplit("evaluation split is empty");
  return metrics::build_report(score_dataset(net, dataset, batch_size), eval_mode_for(net.spec()));
}

template <typename Scalar>
metrics::EvalReport cross_dataset_eval(nn::Network<Scalar>& net, const std::filesystem::path& manifest,
                                       std::optional<Split> split, const std::map<std::string, Label>& label_map,
                                       int batch_size) {
  data::LoadOptions options;
  options.label_aliases = label_map;
  data::DatasetManifest m;
  try {
    m = data::load_manifest(manifest, options);
  } catch (const UnknownLabel& e) {
    throw LabelMappingError(std::string(e.what()) + " (add it to the label mapping)");
  }
  const ManifestDataset ds = split ? ManifestDataset(m, *split) : ManifestDataset(m);
  return evaluate(net, ds, batch_size);
}

template std::vector<metrics::ScoredExample> score_dataset(nn::Network<float>&, const Dataset&, int, BatchBuilder*);
template std::vector<metrics::ScoredExample> score_dataset(nn::Network<double>&, const Dataset&, int, BatchBuilder*);
template metrics::EvalReport evaluate(nn::Network<float>&, const Dataset&, int);
template metrics::EvalReport evaluate(nn::Network<double>&, const Dataset&, int);
template metrics::EvalReport cross_dataset_eval(nn::Network<float>&, const std::filesystem::path&,
                                                std::optional<Split>, const std::map<std::string, Label>&, int);
template metrics::EvalReport cross_dataset_eval(nn::Network<double>&, const std::filesystem::path&,
                                                std::optional<Split>, const std::map<std::string, Label>&, int);

}  // namespace covidscreen::train
