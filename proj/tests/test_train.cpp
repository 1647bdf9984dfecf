#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "covidscreen/nn/checkpoint.hpp"
#include "covidscreen/preprocess/image_io.hpp"
#include "covidscreen/train/adam.hpp"
#include "covidscreen/train/loss.hpp"
#include "covidscreen/train/trainer.hpp"
#include "support.hpp"

using namespace covidscreen;
using namespace covidscreen::train;
using covidscreen::testing::square_dataset;
using covidscreen::testing::TempDir;
using covidscreen::testing::tiny_spec;
using covidscreen::testing::with_constant_aux;

namespace {

Tensor<double> row(std::initializer_list<double> v) {
  Tensor<double> t(1, static_cast<Eigen::Index>(v.size()), 1, 1);
  Eigen::Index i = 0;
  for (double x : v) t.data()[i++] = x;
  return t;
}

std::vector<float> flatten(nn::Network<float>& net, const std::string& prefix = "") {
  std::vector<float> out;
  for (const auto& t : net.tensors()) {
    if (t.name.rfind(prefix, 0) != 0) continue;
    out.insert(out.end(), t.value->data(), t.value->data() + t.value->size());
  }
  return out;
}

TrainConfig small_config(std::uint64_t seed) {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.batch_size = 4;
  c.max_epochs = 2;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Loss, WorkedExamples) {
  EXPECT_NEAR(bce_loss(row({0.5}), row({1.0})), std::log(2.0), 1e-9);
  EXPECT_NEAR(bce_loss(row({0.9, 0.1}), row({1.0, 0.0})), -std::log(0.9), 1e-9);
  EXPECT_NEAR(bce_loss(row({0.9, 0.1}), row({1.0, 0.0})), 0.105361, 5e-7);
  EXPECT_LT(bce_loss(row({1.0, 0.0}), row({1.0, 0.0})), 1e-6);
  EXPECT_THROW(bce_loss(row({0.5, 0.5}), row({1.0})), ShapeMismatch);
}

TEST(Loss, LogitFormMatchesProbabilityForm) {
  Rng rng(3);
  Tensor<double> z(5, 3, 1, 1), y(5, 3, 1, 1), g;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    z.data()[i] = rng.normal(0.0, 3.0);
    y.data()[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
  }
  const double a = bce_with_logits(z, y, g);
  EXPECT_NEAR(a, bce_loss(nn::sigmoid(z), y), 1e-9);
  // Gradient by central differences.
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    Tensor<double> zp = z, zm = z, scratch;
    zp.data()[i] += 1e-6;
    zm.data()[i] -= 1e-6;
    const double numeric = (bce_with_logits(zp, y, scratch) - bce_with_logits(zm, y, scratch)) / 2e-6;
    EXPECT_NEAR(g.data()[i], numeric, 1e-7);
  }
  // Saturated logits stay finite.
  Tensor<double> big = Tensor<double>::constant(z.shape(), 1e4);
  EXPECT_TRUE(std::isfinite(bce_with_logits(big, y, g)));
}

TEST(Loss, SoftmaxCrossEntropyGradient) {
  Rng rng(4);
  Tensor<double> z(3, 3, 1, 1), y(3, 3, 1, 1), g;
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.normal();
  for (Eigen::Index b = 0; b < 3; ++b) y(b, b, 0, 0) = 1.0;
  softmax_cross_entropy(z, y, g);
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    Tensor<double> zp = z, zm = z, scratch;
    zp.data()[i] += 1e-6;
    zm.data()[i] -= 1e-6;
    const double numeric =
        (softmax_cross_entropy(zp, y, scratch) - softmax_cross_entropy(zm, y, scratch)) / 2e-6;
    EXPECT_NEAR(g.data()[i], numeric, 1e-7);
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor<float> w = Tensor<float>::constant({1, 3, 1, 1}, 1.0f);
  Tensor<float> g(1, 3, 1, 1);
  g.data()[0] = 2.0f;
  g.data()[1] = -0.5f;
  nn::NamedTensors<float> params{{"w", &w, &g}};
  Adam<float> adam(AdamConfig{0.1, 0.9, 0.999, 1e-8});
  adam.step(params);
  EXPECT_NEAR(w.data()[0], 0.9f, 1e-6);
  EXPECT_NEAR(w.data()[1], 1.1f, 1e-6);
  EXPECT_FLOAT_EQ(w.data()[2], 1.0f);
  EXPECT_EQ(adam.steps(), 1u);
}

TEST(TrainConfig, Defaults) {
  const TrainConfig c;
  EXPECT_DOUBLE_EQ(c.learning_rate, 1e-5);
  EXPECT_DOUBLE_EQ(c.beta1, 0.9);
  EXPECT_DOUBLE_EQ(c.beta2, 0.999);
  EXPECT_DOUBLE_EQ(c.adam_eps, 1e-8);
  EXPECT_EQ(c.batch_size, 16);
  EXPECT_EQ(c.max_epochs, 50);
  EXPECT_EQ(c.early_stop_patience, 7);
  EXPECT_FALSE(c.class_weighting);
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<TrainConfig>().learning_rate, c.learning_rate);
  TrainConfig bad;
  bad.learning_rate = 0.0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = TrainConfig{};
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), InvalidArgument);
}

TEST(Dataset, TargetsAndModeWiring) {
  const auto ds = square_dataset(6, 1);
  const std::vector<std::size_t> idx{0, 1};
  const auto ct = targets<float>(ds, idx, nn::ModelKind::kCT);
  EXPECT_EQ(ct(0, 0, 0, 0), 1.0f);  // COVID19 slot
  EXPECT_EQ(ct(1, 2, 0, 0), 1.0f);  // NORMAL slot
  EXPECT_EQ(ct.rows().sum(), 2.0f);
  const auto cxr = targets<float>(ds, idx, nn::ModelKind::kCXR);
  EXPECT_EQ(cxr.channels(), 1);
  EXPECT_EQ(cxr(0, 0, 0, 0), 1.0f);
  EXPECT_EQ(cxr(1, 0, 0, 0), 0.0f);

  preprocess::PreprocessConfig cfg;
  cfg.target_size = {64, 64, 3};
  BatchBuilder b(ds, cfg, 5);
  using preprocess::PipelineMode;
  const auto e0 = b.inputs<float>(idx, PipelineMode::kEval, 0);
  const auto e1 = b.inputs<float>(idx, PipelineMode::kEval, 3);
  EXPECT_TRUE((e0.array() == e1.array()).all());
  const auto t0 = b.inputs<float>(idx, PipelineMode::kTrain, 0);
  const auto t0b = b.inputs<float>(idx, PipelineMode::kTrain, 0);
  const auto t1 = b.inputs<float>(idx, PipelineMode::kTrain, 1);
  EXPECT_TRUE((t0.array() == t0b.array()).all());
  EXPECT_FALSE((t0.array() == t1.array()).all());
  EXPECT_FALSE((t0.array() == e0.array()).all());
  // A sample's stream does not depend on batch composition.
  const std::vector<std::size_t> one{1};
  const auto solo = b.inputs<float>(one, PipelineMode::kTrain, 0);
  EXPECT_TRUE((solo.rows().row(0).array() == t0.rows().row(1).array()).all());
}

TEST(Trainer, FirstBatchLossNearLn2) {
  const auto ds = square_dataset(8, 2);
  std::vector<std::size_t> idx(8);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto net = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), seed);
    BatchBuilder b(ds, net->spec().preprocess, seed);
    const auto x = b.inputs<float>(idx, preprocess::PipelineMode::kTrain, 0);
    const auto y = targets<float>(ds, idx, nn::ModelKind::kCT);
    Tensor<float> g;
    const double loss = bce_with_logits(net->forward(x, nn::Mode::kTrain), y, g);
    EXPECT_NEAR(loss, std::log(2.0), 0.15) << "seed " << seed;
  }
}

TEST(Trainer, SameSeedSameTrajectory) {
  const auto ds = square_dataset(12, 3);
  std::vector<std::vector<double>> runs;
  for (int r = 0; r < 2; ++r) {
    auto net = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), 11);
    TrainConfig cfg = small_config(11);
    cfg.max_epochs = 1;
    Trainer t(*net, cfg, ds, nullptr);
    runs.push_back(t.run().step_losses);
  }
  ASSERT_EQ(runs[0].size(), 3u);
  EXPECT_EQ(runs[0], runs[1]);
  for (double l : runs[0]) EXPECT_TRUE(std::isfinite(l));
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  const auto train = square_dataset(10, 4);
  const auto val = square_dataset(6, 5);
  TempDir dir("resume");

  auto full = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), 21);
  Trainer a(*full, small_config(21), train, &val);
  const auto ra = a.run();
  ASSERT_EQ(ra.history.size(), 2u);

  auto first = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), 21);
  TrainConfig one = small_config(21);
  one.max_epochs = 1;
  Trainer b(*first, one, train, &val, dir.path());
  b.run();
  ASSERT_TRUE(std::filesystem::exists(dir / "last.ckpt"));
  ASSERT_TRUE(std::filesystem::exists(dir / "history.tsv"));

  const auto ckpt = nn::read_checkpoint(dir / "last.ckpt");
  auto resumed = nn::network_from_checkpoint<float>(ckpt);
  Trainer c(*resumed, small_config(21), train, &val);
  c.resume(ckpt);
  const auto rc = c.run();
  ASSERT_EQ(rc.history.size(), 2u);
  EXPECT_EQ(flatten(*full), flatten(*resumed));
  EXPECT_EQ(ra.history[1].train_loss, rc.history[1].train_loss);
  EXPECT_EQ(ra.state.best_epoch, rc.state.best_epoch);
}

TEST(Trainer, ResumeMidEpochViaStepBudget) {
  const auto train = square_dataset(12, 6);
  auto full = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), 8);
  TrainConfig cfg = small_config(8);
  cfg.max_epochs = 1;
  Trainer a(*full, cfg, train, nullptr);
  a.run();

  auto part = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), 8);
  TrainConfig limited = cfg;
  limited.max_steps = 2;
  Trainer b(*part, limited, train, nullptr);
  b.run();
  EXPECT_EQ(b.state().step, 2u);
  EXPECT_EQ(b.state().batch_in_epoch, 2u);
  const auto ckpt = b.checkpoint();
  Trainer c(*part, cfg, train, nullptr);
  c.resume(ckpt);
  c.run();
  EXPECT_EQ(flatten(*full), flatten(*part));
}

TEST(Trainer, ResumeRejectsOtherArchitecture) {
  const auto train = square_dataset(4, 7);
  auto net = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), 1);
  Trainer t(*net, small_config(1), train, nullptr);
  auto spec = tiny_spec(nn::ModelKind::kCT);
  spec.hidden = 8;
  auto other = nn::make_network<float>(spec, 1);
  Trainer o(*other, small_config(1), train, nullptr);
  EXPECT_THROW(t.resume(o.checkpoint()), VersionMismatch);
}

TEST(Trainer, EmptySplits) {
  InMemoryDataset empty;
  const auto train = square_dataset(4, 7);
  auto net = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), 1);
  Trainer a(*net, small_config(1), empty, nullptr);
  EXPECT_THROW(a.run(), EmptySplit);
  Trainer b(*net, small_config(1), train, &empty);
  EXPECT_THROW(b.run(), EmptySplit);
  EXPECT_THROW(evaluate(*net, empty), EmptySplit);
}

TEST(Trainer, DivergenceRestoresLastFiniteState) {
  const auto train = square_dataset(8, 8);
  TempDir dir("diverge");
  auto net = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), 2);
  const auto before = flatten(*net);
  TrainConfig cfg = small_config(2);
  cfg.learning_rate = 1e30;
  Trainer t(*net, cfg, train, nullptr, dir.path());
  EXPECT_THROW(t.run(), DivergenceDetected);
  EXPECT_EQ(t.state().step, 0u);
  EXPECT_EQ(flatten(*net), before);
  const auto saved = nn::load_network<float>(dir / "last.ckpt");
  EXPECT_EQ(flatten(*saved), before);
}

TEST(Trainer, EveryTrainableBlockChangesAfterOneStep) {
  const auto train = square_dataset(4, 9);
  auto net = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), 3);
  auto block_of = [](const std::string& name) {
    // backbone.features.<block>.*, attention.<part>.*, head.<layer>.*
    const auto first = name.find('.');
    const auto second = name.find('.', first + 1);
    if (name.rfind("backbone.", 0) == 0) return name.substr(0, name.find('.', second + 1));
    return name.substr(0, second);
  };
  std::map<std::string, std::vector<float>> before;
  for (const auto& t : net->trainable()) {
    auto& v = before[t.name];
    v.assign(t.value->data(), t.value->data() + t.value->size());
  }
  TrainConfig cfg = small_config(3);
  cfg.max_steps = 1;
  Trainer(*net, cfg, train, nullptr).run();
  std::map<std::string, bool> changed;
  for (const auto& t : net->trainable()) {
    const auto& v = before[t.name];
    bool diff = false;
    for (Eigen::Index i = 0; i < t.value->size(); ++i) diff |= v[static_cast<std::size_t>(i)] != t.value->data()[i];
    changed[block_of(t.name)] = changed[block_of(t.name)] || diff;
  }
  EXPECT_GE(changed.size(), 6u);
  for (const auto& [block, moved] : changed) EXPECT_TRUE(moved) << block;
}

TEST(Trainer, CxrTrainingLeavesAuxiliaryWeightsUntouched) {
  TempDir dir("aux");
  for (auto [name, dim] : {std::pair{"chexpert6", 6}, std::pair{"pneumonia2", 2}}) {
    auto spec = nn::ModelSpec::aux_extractor(name, dim, nn::DenseNetConfig::tiny());
    spec.preprocess.target_size = {64, 64, 3};
    auto aux = nn::make_network<float>(spec, static_cast<std::uint64_t>(dim));
    nn::write_checkpoint(dir / (std::string(name) + ".ckpt"), nn::snapshot(*aux));
  }
  auto net = nn::make_network<float>(tiny_spec(nn::ModelKind::kCXR), 4,
                                     {{"chexpert6", dir / "chexpert6.ckpt"}, {"pneumonia2", dir / "pneumonia2.ckpt"}});
  const auto aux_before = flatten(*net, "aux.");
  const auto main_before = flatten(*net, "head.");
  ASSERT_FALSE(aux_before.empty());
  const auto train = square_dataset(8, 10);
  TrainConfig cfg = small_config(4);
  cfg.max_steps = 4;
  Trainer(*net, cfg, train, nullptr).run();
  EXPECT_EQ(flatten(*net, "aux."), aux_before);
  EXPECT_NE(flatten(*net, "head."), main_before);
}

TEST(Trainer, ClassWeightingRuns) {
  auto train = square_dataset(6, 11);
  auto net = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), 5);
  TrainConfig cfg = small_config(5);
  cfg.class_weighting = true;
  cfg.max_epochs = 1;
  const auto r = Trainer(*net, cfg, train, nullptr).run();
  for (double l : r.step_losses) EXPECT_TRUE(std::isfinite(l));
}

TEST(Trainer, WritesHistoryAndBestCheckpoint) {
  const auto train = square_dataset(8, 12);
  const auto val = square_dataset(4, 13);
  TempDir dir("history");
  auto net = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), 6);
  Trainer t(*net, small_config(6), train, &val, dir.path());
  int calls = 0;
  t.on_epoch_end = [&](const EpochRecord&) { return ++calls == 1; };
  const auto r = t.run();
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(r.history.size(), 1u);
  EXPECT_TRUE(r.history[0].improved);
  EXPECT_TRUE(std::filesystem::exists(dir / "best.ckpt"));
  std::ifstream steps(dir / "steps.tsv");
  std::string line;
  int lines = 0;
  while (std::getline(steps, line)) ++lines;
  EXPECT_EQ(lines, 3);  // header + 2 steps
  const auto ck = nn::read_checkpoint(dir / "last.ckpt");
  EXPECT_EQ(ck.metadata.at("step"), 2);
  EXPECT_TRUE(ck.metadata.contains("config_hash"));
  EXPECT_EQ(ck.metadata.at("seed"), 6);
}

TEST(Evaluate, CrossDatasetLabelMapping) {
  TempDir dir("xeval");
  const auto ds = square_dataset(4, 14);
  std::ofstream m(dir / "manifest.csv");
  m << "image_id,path,label,patient_id,modality,split\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::string file = ds.image_id(i) + ".png";
    preprocess::write_image(dir / file, ds.load(i));
    m << ds.image_id(i) << ',' << file << ',' << (ds.label(i) == Label::kCovid19 ? "CT_COVID" : "CT_NonCOVID")
      << ",p" << i << ",CT,TEST\n";
  }
  m.close();
  auto net = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), 7);
  EXPECT_THROW(cross_dataset_eval(*net, dir / "manifest.csv", Split::kTest, {{"CT_COVID", Label::kCovid19}}),
               LabelMappingError);
  const auto report = cross_dataset_eval(
      *net, dir / "manifest.csv", Split::kTest,
      {{"CT_COVID", Label::kCovid19}, {"CT_NonCOVID", Label::kNormal}});
  EXPECT_EQ(report.n, 4u);
  const auto plain = evaluate(*net, ds);
  EXPECT_DOUBLE_EQ(report.auc, plain.auc);
  EXPECT_DOUBLE_EQ(report.accuracy, plain.accuracy);
}
