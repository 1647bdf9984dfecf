// Acceptance checks: one PASS/FAIL line per criterion, non-zero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include "covidscreen/explain/grad_cam.hpp"
#include "covidscreen/metrics/metrics.hpp"
#include "covidscreen/nn/checkpoint.hpp"
#include "covidscreen/nn/pyramid_attention.hpp"
#include "covidscreen/preprocess/pipeline.hpp"
#include "covidscreen/train/trainer.hpp"
#include "service_harness.hpp"

using namespace covidscreen;
using covidscreen::testing::square_dataset;
using covidscreen::testing::square_image;
using covidscreen::testing::TempDir;
using covidscreen::testing::tiny_spec;
using covidscreen::testing::with_constant_aux;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

template <typename Scalar>
Tensor<Scalar> random_tensor(Rng& rng, Eigen::Index n, Eigen::Index c, Eigen::Index h, Eigen::Index w) {
  Tensor<Scalar> t(n, c, h, w);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(rng.normal());
  return t;
}

template <typename Scalar>
double dot(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return (a.array().template cast<double>() * b.array().template cast<double>()).sum();
}

std::vector<float> values_with_prefix(nn::Network<float>& net, const std::string& prefix) {
  std::vector<float> out;
  for (const auto& t : net.tensors()) {
    if (t.name.rfind(prefix, 0) == 0) out.insert(out.end(), t.value->data(), t.value->data() + t.value->size());
  }
  return out;
}

// ------------------------------------------------------------------ metrics

Outcome metric_oracle() {
  const auto t0 = Clock::now();
  Rng rng(20240601);
  double worst = 0.0;
  double min_tied = 1.0, max_tied = 0.0;
  int sets = 0;
  while (sets < 200) {
    const int n = 2 + static_cast<int>(rng.below(49));
    // A mix of continuous scores and scores on a coarse grid, so ties are common but not universal.
    const int levels = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, n / 3))));
    const double grid_share = rng.uniform(0.3, 1.0);
    std::vector<double> scores(static_cast<std::size_t>(n));
    std::unique_ptr<bool[]> positive(new bool[static_cast<std::size_t>(n)]);
    int pos = 0;
    for (int i = 0; i < n; ++i) {
      scores[static_cast<std::size_t>(i)] =
          rng.uniform() < grid_share ? static_cast<double>(rng.below(static_cast<std::uint64_t>(levels))) / levels
                                     : rng.uniform();
      positive[static_cast<std::size_t>(i)] = rng.below(2) == 0;
      pos += positive[static_cast<std::size_t>(i)];
    }
    if (pos == 0 || pos == n) continue;
    std::map<double, int> counts;
    for (double s : scores) ++counts[s];
    int tied = 0;
    for (double s : scores) tied += counts[s] > 1;
    const double tied_frac = static_cast<double>(tied) / n;
    if (tied_frac < 0.2) continue;

    double wins = 0.0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (!positive[static_cast<std::size_t>(i)] || positive[static_cast<std::size_t>(j)]) continue;
        const double a = scores[static_cast<std::size_t>(i)], b = scores[static_cast<std::size_t>(j)];
        wins += a > b ? 1.0 : a == b ? 0.5 : 0.0;
      }
    }
    const double oracle = wins / (static_cast<double>(pos) * (n - pos));
    const double auc = metrics::roc_auc(scores, std::span<const bool>(positive.get(), scores.size())).auc;
    worst = std::max(worst, std::abs(auc - oracle));
    min_tied = std::min(min_tied, tied_frac);
    max_tied = std::max(max_tied, tied_frac);
    ++sets;
  }
  const double elapsed = seconds_since(t0);
  return {worst <= 1e-9 && elapsed < 10.0,
          fmt("200 sets, n <= 50, tied fraction %.2f..%.2f, max |AUC - oracle| %.1e, %.2f s", min_tied, max_tied, worst,
              elapsed)};
}

Outcome table_arithmetic() {
  const double ct = metrics::f_measure(0.720, 0.858);
  const double cxr = metrics::f_measure(0.987, 0.982);
  return {std::abs(ct - 0.783) <= 0.0005 && std::abs(cxr - 0.984) <= 0.0005,
          fmt("F(0.720, 0.858) = %.5f, F(0.987, 0.982) = %.5f", ct, cxr)};
}

// --------------------------------------------------------------- preprocess

Outcome preprocessing_suite() {
  const preprocess::PreprocessConfig cfg;
  Rng rng(77);
  double worst_mean = 0.0, worst_std = 0.0;
  bool shapes_ok = true;
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 16 + static_cast<int>(rng.below(1100));
    const int w = 16 + static_cast<int>(rng.below(1100));
    const int c = rng.below(2) == 0 ? 1 : 3;
    preprocess::RasterImage img(h, w, c);
    for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = static_cast<std::uint8_t>(rng.below(256));
    Rng unused(0);
    const auto out = preprocess::run_pipeline(img, preprocess::PipelineMode::kEval, unused, cfg);
    shapes_ok &= out.values.height() == 256 && out.values.width() == 256 && out.values.channels() == 3;
    const Eigen::ArrayXd v = out.values.pixels().cast<double>();
    const double mean = v.mean();
    const double sd = std::sqrt((v - mean).square().mean());
    worst_mean = std::max(worst_mean, std::abs(mean));
    worst_std = std::max(worst_std, std::abs(sd - 1.0));
  }

  double worst_kernel = 0.0;
  for (int window : {3, 5, 7}) {
    for (double sigma : {0.0, 0.5, 0.8, 1.3, 2.0}) {
      worst_kernel = std::max(worst_kernel, std::abs(preprocess::gaussian_kernel(window, sigma).sum() - 1.0));
    }
  }

  Rng unused(0);
  const auto flat = preprocess::run_pipeline(preprocess::RasterImage(300, 200, 3, 77), preprocess::PipelineMode::kEval,
                                             unused, cfg);
  const bool constant_ok = flat.degenerate && flat.values.pixels().abs().maxCoeff() == 0.0f;

  preprocess::RasterImage probe(181, 233, 3);
  for (Eigen::Index i = 0; i < probe.size(); ++i) probe.data()[i] = static_cast<std::uint8_t>(rng.below(256));
  Rng a(1), b(999);
  const bool eval_exact = preprocess::run_pipeline(probe, preprocess::PipelineMode::kEval, a, cfg).values ==
                          preprocess::run_pipeline(probe, preprocess::PipelineMode::kEval, b, cfg).values;

  return {shapes_ok && worst_mean < 1e-5 && worst_std < 1e-4 && worst_kernel <= 1e-12 && constant_ok && eval_exact,
          fmt("20 shapes -> 256x256x3: %s, max |mean| %.1e, max |std-1| %.1e, max |kernel sum-1| %.1e, constant "
              "image degenerate zeros: %s, EVAL bit-exact: %s",
              shapes_ok ? "yes" : "no", worst_mean, worst_std, worst_kernel, constant_ok ? "yes" : "no",
              eval_exact ? "yes" : "no")};
}

// ------------------------------------------------------------ architecture

Outcome architecture_shapes() {
  std::ostringstream detail;
  bool ok = true;
  Rng rng(5);

  auto ct = nn::make_network<float>(nn::ModelSpec::ct(), 1);
  for (Eigen::Index b : {1, 2, 7}) {
    const auto logits = ct->forward(random_tensor<float>(rng, b, 3, 256, 256), nn::Mode::kInfer);
    const bool shape_ok = logits.shape() == Tensor<float>::Shape{b, 3, 1, 1};
    ok &= shape_ok;
    detail << "CT B=" << b << " -> " << logits.shape().str() << "; ";
  }
  const auto feats = ct->features(random_tensor<float>(rng, 1, 3, 256, 256), nn::Mode::kInferRecord);
  const auto& backbone = ct->last_backbone_output();
  nn::PyramidAttention<float> attention(1024, nn::AttentionConfig{});
  attention.init(rng);
  const auto standalone = attention.forward(random_tensor<float>(rng, 1, 1024, 8, 8), nn::Mode::kInfer);
  const Tensor<float>::Shape grid{1, 1024, 8, 8};
  ok &= backbone.shape() == grid && feats.shape() == grid && standalone.shape() == grid;
  detail << "attention " << backbone.shape().str() << " -> " << feats.shape().str() << "; ";
  ct.reset();

  // CXR with real (randomly initialized, frozen) DenseNet-121 auxiliary extractors.
  TempDir dir("acceptance_aux");
  for (auto [name, dim] : {std::pair{"chexpert6", 6}, std::pair{"pneumonia2", 2}}) {
    auto aux = nn::make_network<float>(nn::ModelSpec::aux_extractor(name, dim), static_cast<std::uint64_t>(dim));
    nn::write_checkpoint(dir / (std::string(name) + ".ckpt"), nn::snapshot(*aux));
  }
  auto cxr = nn::make_network<float>(nn::ModelSpec::cxr(), 2,
                                     {{"chexpert6", dir / "chexpert6.ckpt"}, {"pneumonia2", dir / "pneumonia2.ckpt"}});
  cxr->forward(random_tensor<float>(rng, 1, 3, 256, 256), nn::Mode::kInferRecord);
  const Eigen::Index concat = cxr->last_head_input().channels();
  ok &= concat == 1032;
  detail << "CXR head input " << concat << "; ";

  const auto aux_before = values_with_prefix(*cxr, "aux.");
  const auto head_before = values_with_prefix(*cxr, "head.");
  train::InMemoryDataset data;
  for (int i = 0; i < 50; ++i) {
    data.add("x" + std::to_string(i), square_image(rng, 256, i % 2 == 0 ? static_cast<int>(rng.below(4)) : -1),
             i % 2 == 0 ? Label::kCovid19 : Label::kNormal);
  }
  train::TrainConfig tc;
  tc.learning_rate = 1e-4;
  tc.batch_size = 1;
  tc.max_epochs = 1;
  tc.max_steps = 50;
  tc.seed = 6;
  train::Trainer trainer(*cxr, tc, data, nullptr);
  const auto result = trainer.run();
  const bool frozen = !aux_before.empty() && values_with_prefix(*cxr, "aux.") == aux_before;
  const bool head_moved = values_with_prefix(*cxr, "head.") != head_before;
  ok &= frozen && head_moved && result.state.step == 50;
  detail << "aux tensors (" << aux_before.size() << " values) bit-identical after " << result.state.step
         << " steps: " << (frozen ? "yes" : "no") << ", head updated: " << (head_moved ? "yes" : "no");
  return {ok, detail.str()};
}

// ---------------------------------------------------------------- gradients

Outcome gradient_check() {
  constexpr double kEps = 1e-4;
  Rng rng(31);
  auto net = nn::make_network<double>(nn::ModelSpec::ct(), 12);
  const auto x = random_tensor<double>(rng, 1, 3, 256, 256);
  const auto r = random_tensor<double>(rng, 1, 3, 1, 1);

  // Eval-mode statistics throughout; the loss is <logits, r>.
  const auto feats = net->features(x, nn::Mode::kInferRecord);
  net->head(feats, nn::Mode::kInferRecord);
  nn::zero_grads(net->attention_and_head());
  net->attention_backward(net->head_backward(r));

  std::vector<nn::NamedTensor<double>> attention, head;
  for (const auto& t : net->attention_and_head()) {
    if (t.grad == nullptr) continue;  // running statistics
    (t.name.rfind("attention.", 0) == 0 ? attention : head).push_back(t);
  }
  if (attention.empty() || head.empty()) return {false, "attention or head parameters missing"};

  double worst = 0.0;
  int checked = 0, nonzero = 0;
  std::string worst_name;
  // Returns whether the sampled parameter has a non-zero analytic gradient.
  auto probe = [&](const nn::NamedTensor<double>& t, bool through_attention) {
    const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(t.value->size())));
    const double analytic = t.grad->data()[i];
    const double saved = t.value->data()[i];
    auto loss = [&] {
      return through_attention ? dot(net->forward(x, nn::Mode::kInfer), r)
                               : dot(net->head(feats, nn::Mode::kInfer), r);
    };
    t.value->data()[i] = saved + kEps;
    const double up = loss();
    t.value->data()[i] = saved - kEps;
    const double down = loss();
    t.value->data()[i] = saved;
    const double numeric = (up - down) / (2 * kEps);
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    const double rel = scale > 0.0 ? std::abs(analytic - numeric) / scale : 0.0;
    if (rel >= worst) worst = rel, worst_name = t.name;
    ++checked;
    return analytic != 0.0;
  };
  // Dead ReLU units give exact zeros; those are checked too but do not count
  // towards the 12 informative samples per group.
  auto sample_group = [&](const std::vector<nn::NamedTensor<double>>& group, bool through_attention) {
    int informative = 0;
    for (int attempt = 0; attempt < 60 && informative < 12; ++attempt) {
      informative += probe(group[rng.below(group.size())], through_attention);
    }
    return informative;
  };
  const int att = sample_group(attention, true);
  const int hd = sample_group(head, false);
  nonzero = att + hd;
  return {att >= 12 && hd >= 12 && worst < 1e-3,
          fmt("%d parameters with non-zero gradient (%d attention, %d head; %d sampled in total), DenseNet-121 at "
              "256x256, double, eps 1e-4: max rel error %.2e (%s)",
              nonzero, att, hd, checked, worst, worst_name.c_str())};
}

// ------------------------------------------------------------------ overfit

Outcome overfit() {
  const auto t0 = Clock::now();
  auto net = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), 5);
  const auto data = square_dataset(20, 13);
  train::TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 4;
  tc.max_steps = 300;
  tc.max_epochs = 300;
  tc.early_stop_patience = 300;
  tc.seed = 5;
  train::Trainer trainer(*net, tc, data, nullptr);
  double accuracy = 0.0;
  trainer.on_epoch_end = [&](const train::EpochRecord&) {
    accuracy = train::evaluate(*net, data).accuracy3;
    return accuracy == 1.0;
  };
  const auto result = trainer.run();
  const double elapsed = seconds_since(t0);
  return {accuracy == 1.0 && result.state.step <= 300 && elapsed < 300.0,
          fmt("train accuracy %.3f after %llu steps (lr 1e-3, batch 4, augmentation on), %.1f s", accuracy,
              static_cast<unsigned long long>(result.state.step), elapsed)};
}

// ----------------------------------------------------------------- Grad-CAM

Outcome cam_localization() {
  // Binary square-present task on the CXR architecture (pooled head).
  auto net = nn::make_network<float>(with_constant_aux(tiny_spec(nn::ModelKind::kCXR)), 1);
  const auto data = square_dataset(200, 101);
  train::TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 8;
  tc.max_epochs = 30;
  tc.early_stop_patience = 30;
  tc.seed = 1;
  train::Trainer trainer(*net, tc, data, nullptr);
  double accuracy = 0.0;
  trainer.on_epoch_end = [&](const train::EpochRecord& r) {
    if (r.epoch < 10) return false;
    accuracy = train::evaluate(*net, data).accuracy;
    return accuracy == 1.0;
  };
  const auto result = trainer.run();

  Rng rng(202);
  constexpr int kHeldOut = 100;
  int localized = 0;
  double mass_sum = 0.0;
  bool in_range = true;
  auto check_range = [&](const explain::CamResult& cam) {
    for (const auto* m : {&cam.heatmap, &cam.upsampled}) in_range &= m->minCoeff() >= 0.0f && m->maxCoeff() <= 1.0f;
  };
  for (int i = 0; i < kHeldOut; ++i) {
    const int q = i % 4;
    const auto img = square_image(rng, 64, q, 4);
    const auto cam = explain::grad_cam(*net, img, Label::kCovid19);
    check_range(cam);
    check_range(explain::grad_cam(*net, img, Label::kNormal));
    const auto& u = cam.upsampled;
    const double total = u.cast<double>().sum();
    const double inside = u.block((q / 2) * 32, (q % 2) * 32, 32, 32).cast<double>().sum();
    const double frac = total > 0.0 ? inside / total : 0.0;
    mass_sum += frac;
    localized += frac >= 0.6;
  }
  for (int i = 0; i < 20; ++i) check_range(explain::grad_cam(*net, square_image(rng, 64, -1), Label::kCovid19));
  return {accuracy == 1.0 && localized >= 80 && in_range,
          fmt("train accuracy %.3f after %d epochs; %d/%d held-out images with >= 60%% of mass in the square's "
              "quadrant (mean %.2f); all maps in [0,1]: %s",
              accuracy, result.state.epoch, localized, kHeldOut, mass_sum / kHeldOut, in_range ? "yes" : "no")};
}

// -------------------------------------------------------------- determinism

Outcome determinism() {
  const auto data = square_dataset(16, 8);
  auto first_epoch = [&](std::uint64_t seed) {
    auto net = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), 3);
    train::TrainConfig tc;
    tc.learning_rate = 1e-3;
    tc.batch_size = 4;
    tc.max_epochs = 1;
    tc.seed = seed;
    return train::Trainer(*net, tc, data, nullptr).run().step_losses;
  };
  const auto log_a = first_epoch(21), log_b = first_epoch(21);
  const bool losses_equal = !log_a.empty() && log_a == log_b;

  const auto cfg = tiny_spec(nn::ModelKind::kCT).preprocess;
  train::BatchBuilder b1(data, cfg, 42), b2(data, cfg, 42), b3(data, cfg, 43);
  const std::vector<std::size_t> idx{0, 3, 5, 9};
  const auto t1 = b1.inputs<float>(idx, preprocess::PipelineMode::kTrain, 2);
  const auto t2 = b2.inputs<float>(idx, preprocess::PipelineMode::kTrain, 2);
  const auto t3 = b3.inputs<float>(idx, preprocess::PipelineMode::kTrain, 2);
  const bool aug_equal = (t1.array() == t2.array()).all();
  const bool aug_seeded = !(t1.array() == t3.array()).all();

  TempDir dir("acceptance_ckpt");
  Rng rng(4);
  auto net = nn::make_network<float>(nn::ModelSpec::ct(), 9);
  nn::write_checkpoint(dir / "ct.ckpt", nn::snapshot(*net));
  auto loaded = nn::load_network<float>(dir / "ct.ckpt");
  const auto x = random_tensor<float>(rng, 2, 3, 256, 256);
  const bool reload_equal = (net->forward(x, nn::Mode::kInfer).array() == loaded->forward(x, nn::Mode::kInfer).array()).all();

  return {losses_equal && aug_equal && aug_seeded && reload_equal,
          fmt("first-epoch loss log (%zu steps) identical: %s; augmented batch bit-identical: %s (other seed differs: "
              "%s); DenseNet-121 save/load forward bit-identical: %s",
              log_a.size(), losses_equal ? "yes" : "no", aug_equal ? "yes" : "no", aug_seeded ? "yes" : "no",
              reload_equal ? "yes" : "no")};
}

// ------------------------------------------------------------------ service

Outcome service_contract() {
  using testing::predict;
  using testing::RunningService;
  TempDir dir("acceptance_service");
  const auto ct = testing::write_tiny_checkpoint(dir.path(), nn::ModelKind::kCT, 1);
  Rng rng(4);
  const std::string image = testing::png_bytes(square_image(rng, 96, 3));
  std::vector<std::string> failures;
  auto expect = [&](bool cond, const std::string& what) {
    if (!cond) failures.push_back(what);
  };
  service::ServiceConfig cfg;
  cfg.store = (dir / "cases.db").string();

  {
    RunningService bare(cfg);
    auto c = bare.client();
    auto h = c.Get("/v1/health");
    expect(h && h->status == 200 && json::parse(h->body).at("status") == "degraded", "health without model");
    expect(predict(c, image, "ct")->status == 503, "predict without model -> 503");
  }

  cfg.ct_checkpoint = ct.string();
  std::string id;
  json before;
  {
    RunningService s(cfg);
    auto c = s.client();
    auto h = c.Get("/v1/health");
    expect(h && h->status == 200 && json::parse(h->body).at("status") == "ok", "health with model");
    auto r = predict(c, image, "ct");
    expect(r && r->status == 200, "predict -> 200");
    const json body = json::parse(r->body);
    expect(body.at("probabilities").size() == 3, "three probabilities");
    id = body.at("case_id");
    expect(predict(c, "definitely not an image", "ct", "notes.txt")->status == 400, "undecodable upload -> 400");
    expect(predict(c, image, "mri")->status == 422, "unknown modality -> 422");

    const std::string url = "/v1/cases/" + id + "/cam?class=covid&alpha=0.4";
    auto a = c.Get(url), b = c.Get(url);
    expect(a && a->status == 200 && b && a->body == b->body, "CAM render byte-identical on repeat");

    auto t = c.Post("/v1/cases/" + id + "/triage", R"({"decision":"NEEDS_REVIEW","note":"check","reviewer":"r1"})",
                    "application/json");
    expect(t && t->status == 200, "triage -> 200");
    before = json::parse(c.Get("/v1/cases/" + id)->body);
    expect(before.at("triage") == "NEEDS_REVIEW" && before.at("triage_note") == "check", "triage round trip");
  }
  {
    RunningService s(cfg);
    auto c = s.client();
    auto r = c.Get("/v1/cases/" + id);
    expect(r && r->status == 200 && json::parse(r->body) == before, "case survives restart");
  }
  std::string detail = "health, predict 200/400/422/503, CAM byte identity, triage round trip, restart persistence";
  if (!failures.empty()) {
    detail = "failed:";
    for (const auto& f : failures) detail += " [" + f + "]";
  }
  return {failures.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
      {"metric oracle equivalence", metric_oracle},
      {"table arithmetic reproduction", table_arithmetic},
      {"preprocessing suite", preprocessing_suite},
      {"architecture shape suite", architecture_shapes},
      {"gradient checks", gradient_check},
      {"overfit smoke test", overfit},
      {"Grad-CAM localization", cam_localization},
      {"determinism", determinism},
      {"service contract", service_contract},
  };
  int failed = 0, ran = 0;
  // An optional argument runs only the criteria whose name contains it.
  const char* only = argc > 1 ? argv[1] : nullptr;
  for (const auto& [name, check] : checks) {
    if (only && name.find(only) == std::string::npos) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    ++ran;
    std::printf("%s  %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed == 0 && ran > 0 ? 0 : 1;
}
