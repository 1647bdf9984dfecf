#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "covidscreen/cli/cli.hpp"
#include "covidscreen/core/tensor_file.hpp"
#include "covidscreen/data/manifest.hpp"
#include "covidscreen/metrics/metrics.hpp"
#include "covidscreen/nn/checkpoint.hpp"
#include "covidscreen/preprocess/image_io.hpp"
#include "support.hpp"

using namespace covidscreen;
using covidscreen::testing::TempDir;
using nlohmann::json;

namespace {

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "covidscreen");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = covidscreen::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json read_json(const std::filesystem::path& p) { return json::parse(slurp(p)); }

// <root>/COVID19 holds bright-square images, <root>/NORMAL plain ones.
void write_square_tree(const std::filesystem::path& root, int per_class) {
  Rng rng(12);
  std::filesystem::create_directories(root / "COVID19");
  std::filesystem::create_directories(root / "NORMAL");
  for (int i = 0; i < per_class; ++i) {
    const std::string name = "p" + std::to_string(i) + "_s0.png";
    preprocess::write_image(root / "COVID19" / name,
                            covidscreen::testing::square_image(rng, 64, static_cast<int>(rng.below(4))));
    preprocess::write_image(root / "NORMAL" / name, covidscreen::testing::square_image(rng, 64, -1));
  }
}

const char* kTinyTrainConfig = R"({
  "model": {"backbone": "densenet-tiny", "head": {"hidden": 16},
            "preprocess": {"target_size": [64, 64, 3]}},
  "train": {"batch_size": 4, "max_epochs": 2, "learning_rate": 0.001}
})";

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  const CliRun none = invoke({});
  EXPECT_EQ(none.code, covidscreen::cli::kExitUsage);
  EXPECT_NE(none.err.find("Usage"), std::string::npos);
  EXPECT_EQ(invoke({"frobnicate"}).code, covidscreen::cli::kExitUsage);
  EXPECT_EQ(invoke({"eval", "--ckpt", "x.ckpt"}).code, covidscreen::cli::kExitUsage);
  EXPECT_EQ(invoke({"cam", "--ckpt", "a", "--image", "b", "--out", "c", "--alpha", "1.5"}).code, covidscreen::cli::kExitUsage);
  EXPECT_EQ(invoke({"--help"}).code, covidscreen::cli::kExitOk);
}

TEST(Cli, MissingCheckpointIsRuntimeFailure) {
  TempDir dir("cli");
  const CliRun r = invoke({"eval", "--ckpt", (dir / "missing.ckpt").string(), "--data", dir.path().string(), "--report",
                     (dir / "report").string()});
  EXPECT_EQ(r.code, covidscreen::cli::kExitRuntime);
  EXPECT_NE(r.err.find((dir / "missing.ckpt").string()), std::string::npos);
}

TEST(Cli, RocFromScoreFile) {
  TempDir dir("cli");
  Rng rng(4);
  std::ostringstream text;
  std::vector<double> scores;
  std::unique_ptr<bool[]> pos(new bool[40]);
  text << "# score label\n";
  for (int i = 0; i < 40; ++i) {
    scores.push_back(static_cast<double>(rng.below(5)) / 4);
    pos[i] = i % 3 == 0;
    text << scores.back() << ' ' << (pos[i] ? (i % 2 ? "1" : "covid") : (i % 2 ? "0" : "NORMAL")) << '\n';
  }
  std::ofstream(dir / "scores.txt") << text.str();
  const CliRun r = invoke({"roc", "--scores", (dir / "scores.txt").string(), "--out", (dir / "roc.txt").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto expected = metrics::roc_auc(scores, std::span<const bool>(pos.get(), 40));
  double auc = 0;
  ASSERT_EQ(std::sscanf(r.out.c_str(), "AUC %lf", &auc), 1);
  EXPECT_NEAR(auc, expected.auc, 1e-9);
  std::istringstream points(slurp(dir / "roc.txt"));
  double fpr, tpr;
  std::size_t n = 0;
  while (points >> fpr >> tpr) ++n;
  EXPECT_EQ(n, expected.points.size());
  EXPECT_TRUE(std::filesystem::exists(dir / "roc.txt.run_config.json"));

  std::ofstream(dir / "one.txt") << "0.4 1\n0.6 1\n";
  EXPECT_EQ(invoke({"roc", "--scores", (dir / "one.txt").string(), "--out", (dir / "x.txt").string()}).code,
            covidscreen::cli::kExitRuntime);
}

TEST(Cli, DataIndexSplitValidate) {
  TempDir dir("cli");
  write_square_tree(dir / "tree", 10);
  const auto manifest = (dir / "all.csv").string();
  ASSERT_EQ(invoke({"data", "index", "--root", (dir / "tree").string(), "--out", manifest}).code, 0);
  EXPECT_EQ(data::load_manifest(manifest).records.size(), 20u);

  const auto a = (dir / "a.csv").string(), b = (dir / "b.csv").string(), c = (dir / "c.csv").string();
  const CliRun split = invoke({"data", "split", "--manifest", manifest, "--out", a, "--ratios", "0.6,0.2,0.2", "--seed", "5",
                         "--no-group-by-patient"});
  ASSERT_EQ(split.code, 0) << split.err;
  EXPECT_NE(split.out.find("TRAIN"), std::string::npos);
  ASSERT_EQ(invoke({"--seed", "5", "data", "split", "--manifest", manifest, "--out", b, "--ratios", "0.6,0.2,0.2",
                 "--no-group-by-patient"})
                .code,
            0);
  ASSERT_EQ(invoke({"data", "split", "--manifest", manifest, "--out", c, "--ratios", "0.6,0.2,0.2", "--seed", "6",
                 "--no-group-by-patient"})
                .code,
            0);
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_NE(slurp(a), slurp(c));
  const auto counts = data::count_splits(data::load_manifest(a));
  EXPECT_EQ(counts[0][0], 6u);
  EXPECT_EQ(counts[1][2], 2u);
  EXPECT_EQ(read_json(a + ".run_config.json").at("seed"), 5);
  EXPECT_EQ(invoke({"data", "split", "--manifest", manifest, "--out", a, "--ratios", "0.6,0.6"}).code, covidscreen::cli::kExitUsage);

  const CliRun strict = invoke({"data", "validate", "--manifest", manifest});
  EXPECT_EQ(strict.code, covidscreen::cli::kExitRuntime);
  EXPECT_NE(strict.out.find("20 failed"), std::string::npos);
  EXPECT_EQ(invoke({"data", "validate", "--manifest", manifest, "--lenient"}).code, 0);
}

TEST(Cli, PreprocessWritesTensors) {
  TempDir dir("cli");
  write_square_tree(dir / "tree", 2);
  std::ofstream(dir / "pp.json") << R"({"target_size": [32, 32, 3]})";
  auto run = [&](const std::string& mode, const std::string& seed, const std::string& out) {
    return invoke({"preprocess", "--in", (dir / "tree").string(), "--out", (dir / out).string(), "--mode", mode,
                "--seed", seed, "--config", (dir / "pp.json").string()});
  };
  ASSERT_EQ(run("eval", "1", "e1").code, 0);
  ASSERT_EQ(run("eval", "2", "e2").code, 0);
  ASSERT_EQ(run("train", "1", "t1").code, 0);
  ASSERT_EQ(run("train", "1", "t1b").code, 0);
  ASSERT_EQ(run("train", "2", "t2").code, 0);
  const std::string rel = "COVID19/p0_s0.png.cstn";
  const auto t = read_tensor_file(dir / "e1" / rel);
  EXPECT_EQ(t.dims, (std::vector<std::uint64_t>{32, 32, 3}));
  EXPECT_EQ(slurp(dir / "e1" / rel), slurp(dir / "e2" / rel));
  EXPECT_EQ(slurp(dir / "t1" / rel), slurp(dir / "t1b" / rel));
  EXPECT_NE(slurp(dir / "t1" / rel), slurp(dir / "t2" / rel));
  EXPECT_EQ(read_json(dir / "e1/run_config.json").at("resolved").at("preprocess").at("target_size")[0], 32);
  EXPECT_NE(slurp(dir / "e1/index.tsv").find(rel), std::string::npos);
}

TEST(Cli, TrainEvalPredictCam) {
  TempDir dir("cli");
  write_square_tree(dir / "tree", 8);
  std::ofstream(dir / "train.json") << kTinyTrainConfig;
  auto train = [&](const std::string& out) {
    return invoke({"train", "--model", "ct", "--config", (dir / "train.json").string(), "--data",
                (dir / "tree").string(), "--out", (dir / out).string(), "--seed", "3", "--ratios", "0.5,0.25,0.25"});
  };
  const CliRun first = train("run1");
  ASSERT_EQ(first.code, 0) << first.err;
  EXPECT_NE(first.out.find("epoch 2"), std::string::npos);
  for (const char* f : {"last.ckpt", "best.ckpt", "history.tsv", "history.json", "steps.tsv", "run_config.json",
                        "manifest.csv"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / "run1" / f)) << f;
  }
  const json rc = read_json(dir / "run1/run_config.json");
  EXPECT_EQ(rc.at("resolved").at("train").at("seed"), 3);
  EXPECT_EQ(rc.at("resolved").at("model").at("backbone").at("name"), "densenet-tiny");

  // Same seed, same inputs: same loss log and weights.
  ASSERT_EQ(train("run2").code, 0);
  EXPECT_EQ(slurp(dir / "run1/steps.tsv"), slurp(dir / "run2/steps.tsv"));
  EXPECT_EQ(nn::read_checkpoint(dir / "run1/last.ckpt").tensors, nn::read_checkpoint(dir / "run2/last.ckpt").tensors);

  const auto ckpt = (dir / "run1/best.ckpt").string();
  const CliRun ev = invoke({"eval", "--ckpt", ckpt, "--data", (dir / "run1/manifest.csv").string(), "--report",
                      (dir / "report").string(), "--split", "all"});
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_NE(ev.out.find("Precision"), std::string::npos);
  const json report = read_json(dir / "report/report.json");
  EXPECT_GE(report.at("auc").get<double>(), 0.0);
  EXPECT_TRUE(std::filesystem::exists(dir / "report/roc.txt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "report/run_config.json"));

  const auto image = (dir / "tree/COVID19/p1_s0.png").string();
  const CliRun pr = invoke({"predict", "--ckpt", ckpt, "--image", image, "--out", (dir / "pred.json").string()});
  ASSERT_EQ(pr.code, 0) << pr.err;
  const json pred = json::parse(pr.out);
  // One-vs-all sigmoid outputs; the label is their argmax.
  std::string best;
  double best_p = -1;
  for (const auto& [k, v] : pred.at("probabilities").items()) {
    EXPECT_GE(v.get<double>(), 0.0);
    EXPECT_LE(v.get<double>(), 1.0);
    if (v.get<double>() > best_p) best_p = v.get<double>(), best = k;
  }
  EXPECT_EQ(pred.at("probabilities").size(), 3u);
  EXPECT_EQ(pred.at("predicted_label"), best);
  EXPECT_EQ(pred.at("model_version").get<std::string>().size(), 12u);

  const CliRun cam = invoke({"cam", "--ckpt", ckpt, "--image", image, "--class", "covid", "--alpha", "0.4", "--out",
                       (dir / "cam.png").string(), "--heatmap", (dir / "cam.cstn").string()});
  ASSERT_EQ(cam.code, 0) << cam.err;
  const auto overlay = preprocess::read_image(dir / "cam.png").image;
  EXPECT_EQ(overlay.height(), 64);
  EXPECT_EQ(overlay.channels(), 3);
  EXPECT_EQ(read_tensor_file(dir / "cam.cstn").dims, (std::vector<std::uint64_t>{8, 8}));
  EXPECT_EQ(invoke({"cam", "--ckpt", ckpt, "--image", image, "--class", "flu", "--out", (dir / "x.png").string()}).code,
            covidscreen::cli::kExitUsage);

  // Resume continues the finished run for one more epoch.
  const CliRun more = invoke({"train", "--model", "ct", "--config", (dir / "train.json").string(), "--data",
                        (dir / "tree").string(), "--out", (dir / "run1").string(), "--resume", "--epochs", "3"});
  ASSERT_EQ(more.code, 0) << more.err;
  EXPECT_NE(more.out.find("epoch 3"), std::string::npos);
  EXPECT_EQ(more.out.find("epoch 2"), std::string::npos);
}

TEST(Cli, CrossDatasetLabelMapping) {
  TempDir dir("cli");
  Rng rng(1);
  std::filesystem::create_directories(dir / "ext/CT_COVID");
  std::filesystem::create_directories(dir / "ext/CT_NonCOVID");
  for (int i = 0; i < 3; ++i) {
    preprocess::write_image(dir / ("ext/CT_COVID/" + std::to_string(i) + ".png"),
                            covidscreen::testing::square_image(rng, 64, 0));
    preprocess::write_image(dir / ("ext/CT_NonCOVID/" + std::to_string(i) + ".png"),
                            covidscreen::testing::square_image(rng, 64, -1));
  }
  const auto ckpt = (dir / "ct.ckpt").string();
  ASSERT_EQ(invoke({"init-model", "--model", "ct", "--backbone", "densenet-tiny", "--input-size", "64", "--hidden", "16",
                 "--out", ckpt})
                .code,
            0);
  const CliRun unmapped = invoke({"eval", "--ckpt", ckpt, "--data", (dir / "ext").string(), "--report", (dir / "r").string()});
  EXPECT_EQ(unmapped.code, covidscreen::cli::kExitRuntime);
  const CliRun partial = invoke({"eval", "--ckpt", ckpt, "--data", (dir / "ext").string(), "--report", (dir / "r").string(),
                           "--label-map", "CT_COVID=COVID19"});
  EXPECT_EQ(partial.code, covidscreen::cli::kExitRuntime);
  const CliRun mapped = invoke({"eval", "--ckpt", ckpt, "--data", (dir / "ext").string(), "--report", (dir / "r").string(),
                          "--label-map", "CT_COVID=COVID19,CT_NonCOVID=NORMAL"});
  ASSERT_EQ(mapped.code, 0) << mapped.err;
  EXPECT_EQ(read_json(dir / "r/report.json").at("n"), 6);
}
