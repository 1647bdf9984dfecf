#include "covidscreen/cli/cli.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "covidscreen/core/error.hpp"
#include "covidscreen/core/tensor_file.hpp"
#include "covidscreen/data/manifest.hpp"
#include "covidscreen/data/split.hpp"
#include "covidscreen/data/validate.hpp"
#include "covidscreen/explain/grad_cam.hpp"
#include "covidscreen/metrics/metrics.hpp"
#include "covidscreen/nn/checkpoint.hpp"
#include "covidscreen/preprocess/image_io.hpp"
#include "covidscreen/service/config.hpp"
#include "covidscreen/service/server.hpp"
#include "covidscreen/train/dataset.hpp"
#include "covidscreen/train/trainer.hpp"

namespace covidscreen::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kVersion = "1.0.0";

// A flag value that only turns out to be invalid after parsing.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string run_config;
  std::vector<std::string> argv;
};

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream o(path);
  if (!o) throw InvalidArgument("cannot write " + path.string());
  o << j.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream o(path, std::ios::binary);
  if (!o) throw InvalidArgument("cannot write " + path.string());
  o << text;
}

// Every command records its resolved settings next to its outputs; --run-config
// overrides the location.
void record_run(const Context& ctx, const fs::path& default_path, const std::string& command, json resolved) {
  const fs::path path = ctx.run_config.empty() ? default_path : fs::path(ctx.run_config);
  if (path.empty()) return;
  write_json(path, json{{"command", command},
                        {"version", kVersion},
                        {"seed", ctx.seed},
                        {"argv", ctx.argv},
                        {"resolved", std::move(resolved)}});
}

fs::path beside(const fs::path& file) { return fs::path(file.string() + ".run_config.json"); }

Modality modality_from(const std::string& text) {
  const auto m = parse_modality(text);
  if (!m) throw UsageError("unknown modality '" + text + "' (expected ct or cxr)");
  return *m;
}

Label label_from(const std::string& text) {
  const auto l = parse_label(text);
  if (!l) throw UsageError("unknown class '" + text + "' (expected covid, other_pneumonia or normal)");
  return *l;
}

data::SplitRatios parse_ratios(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double x = 0;
    try {
      x = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw UsageError("--ratios: '" + item + "' is not a number");
    v.push_back(x);
  }
  if (v.size() != 3) throw UsageError("--ratios expects three comma-separated values (train,val,test)");
  const data::SplitRatios r{v[0], v[1], v[2]};
  if (r.train < 0 || r.val < 0 || r.test < 0 || std::abs(r.train + r.val + r.test - 1.0) > 1e-9) {
    throw UsageError("--ratios must be non-negative and sum to 1");
  }
  return r;
}

std::map<std::string, Label> parse_label_map(const std::vector<std::string>& entries) {
  std::map<std::string, Label> map;
  for (const auto& list : entries) {
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos || eq == 0) throw UsageError("label mapping '" + item + "' must be NAME=LABEL");
      map[item.substr(0, eq)] = label_from(item.substr(eq + 1));
    }
  }
  return map;
}

std::map<std::string, fs::path> parse_aux(const std::vector<std::string>& entries) {
  std::map<std::string, fs::path> out;
  for (const auto& e : entries) {
    const auto eq = e.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--aux expects NAME=CHECKPOINT, got '" + e + "'");
    out[e.substr(0, eq)] = e.substr(eq + 1);
  }
  return out;
}

json to_json(const std::map<std::string, Label>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = to_string(v);
  return j;
}

json to_json(const std::map<std::string, fs::path>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = v.string();
  return j;
}

json to_json(const data::SplitRatios& r) { return json::array({r.train, r.val, r.test}); }

// A manifest file, or a `<root>/<class>/<image>` directory.
data::DatasetManifest load_data(const fs::path& path, Modality modality,
                                const std::map<std::string, Label>& aliases = {}) {
  data::LoadOptions options;
  options.label_aliases = aliases;
  if (fs::is_directory(path)) return data::index_directory(path, modality, options);
  return data::load_manifest(path, options);
}

// Rewrites record paths as absolute so the manifest can be saved anywhere.
void absolutize(data::DatasetManifest& m) {
  for (auto& r : m.records) r.path = fs::absolute(m.resolve(r));
  m.root.clear();
}

std::string counts_table(const data::SplitCounts& counts) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-6s %10s %16s %10s %10s\n", "split", "COVID19", "OTHER_PNEUMONIA", "NORMAL",
                "total");
  os << line;
  std::array<std::size_t, 4> sums{};
  for (Split s : kAllSplits) {
    const auto& row = counts[split_index(s)];
    const std::size_t total = row[0] + row[1] + row[2];
    std::snprintf(line, sizeof line, "%-6s %10zu %16zu %10zu %10zu\n", std::string(to_string(s)).c_str(), row[0],
                  row[1], row[2], total);
    os << line;
    for (int k = 0; k < 3; ++k) sums[k] += row[k];
    sums[3] += total;
  }
  std::snprintf(line, sizeof line, "%-6s %10zu %16zu %10zu %10zu\n", "all", sums[0], sums[1], sums[2], sums[3]);
  os << line;
  return os.str();
}

std::string short_version(const fs::path& ckpt) { return nn::file_sha256(ckpt).substr(0, 12); }

preprocess::RasterImage read_rgb(const fs::path& path) {
  return preprocess::to_rgb(preprocess::read_image(path).image);
}

// ---------------------------------------------------------------- data

struct DataValidateOptions {
  std::string data;
  std::string modality = "ct";
  bool lenient = false;
  std::string out;
};

int data_validate(Context& ctx, const DataValidateOptions& o) {
  auto manifest = load_data(o.data, modality_from(o.modality));
  std::size_t failed = 0;
  std::ostringstream report;
  report << "image_id\tok\twidth\theight\tbit_depth\treason\n";
  for (auto& record : manifest.records) {
    data::ValidationResult r;
    try {
      r = data::validate_image(manifest, record, !o.lenient);
    } catch (const Error& e) {
      r.ok = false;
      r.reason = e.what();
    }
    if (!r.ok) {
      ++failed;
      ctx.out << record.image_id << ": " << r.reason << '\n';
    }
    report << record.image_id << '\t' << (r.ok ? 1 : 0) << '\t' << r.width << '\t' << r.height << '\t'
           << r.bit_depth << '\t' << r.reason << '\n';
  }
  ctx.out << "checked " << manifest.records.size() << " images (" << (o.lenient ? "lenient" : "strict") << "), "
          << failed << " failed\n";
  if (!o.out.empty()) {
    write_text(fs::path(o.out) / "validation.tsv", report.str());
  }
  record_run(ctx, o.out.empty() ? fs::path() : fs::path(o.out) / "run_config.json", "data validate",
             {{"data", o.data}, {"modality", o.modality}, {"strict", !o.lenient}, {"failed", failed}});
  if (failed > 0) {
    ctx.err << "error: " << failed << " of " << manifest.records.size() << " images failed validation\n";
    return kExitRuntime;
  }
  return kExitOk;
}

struct DataIndexOptions {
  std::string root;
  std::string modality = "ct";
  std::string out;
  std::vector<std::string> aliases;
};

int data_index(Context& ctx, const DataIndexOptions& o) {
  const auto aliases = parse_label_map(o.aliases);
  data::LoadOptions options;
  options.label_aliases = aliases;
  auto manifest = data::index_directory(o.root, modality_from(o.modality), options);
  absolutize(manifest);
  data::save_manifest(manifest, o.out);
  ctx.out << "indexed " << manifest.records.size() << " images into " << o.out << '\n';
  record_run(ctx, beside(o.out), "data index",
             {{"root", o.root}, {"modality", o.modality}, {"out", o.out}, {"aliases", to_json(aliases)}});
  return kExitOk;
}

struct DataSplitOptions {
  std::string data;
  std::string modality = "ct";
  std::string out;
  std::string ratios = "0.7,0.1,0.2";
  std::optional<bool> group_by_patient;
  std::string append_test;
};

int data_split(Context& ctx, const DataSplitOptions& o) {
  const auto ratios = parse_ratios(o.ratios);
  const Modality modality = modality_from(o.modality);
  auto manifest = load_data(o.data, modality);
  if (manifest.records.empty()) throw EmptySplit("no records to split in " + o.data);
  const bool group = o.group_by_patient.value_or(manifest.records.front().modality == Modality::kCT);
  manifest.splits.clear();
  data::apply_split(manifest, data::stratified_split(manifest.records, ratios, ctx.seed, group));
  if (!o.append_test.empty()) {
    auto extra = load_data(o.append_test, modality);
    absolutize(extra);
    absolutize(manifest);
    data::append_to_split(manifest, extra.records, Split::kTest);
  } else {
    absolutize(manifest);
  }
  data::save_manifest(manifest, o.out);
  ctx.out << counts_table(data::count_splits(manifest));
  record_run(ctx, beside(o.out), "data split",
             {{"data", o.data},
              {"modality", o.modality},
              {"out", o.out},
              {"ratios", to_json(ratios)},
              {"group_by_patient", group},
              {"append_test", o.append_test}});
  return kExitOk;
}

// ---------------------------------------------------------------- preprocess

struct PreprocessOptions {
  std::string in;
  std::string out;
  std::string mode = "eval";
  std::string config;
  std::uint64_t epoch = 0;
};

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff";
}

int preprocess_cmd(Context& ctx, const PreprocessOptions& o) {
  preprocess::PreprocessConfig cfg;
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw MissingFile("cannot open preprocess config " + o.config);
    cfg = json::parse(in).get<preprocess::PreprocessConfig>();
  }
  cfg.validate();
  const auto mode = o.mode == "train" ? preprocess::PipelineMode::kTrain : preprocess::PipelineMode::kEval;
  if (!fs::is_directory(o.in)) throw MissingFile("input directory not found: " + o.in);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(o.in)) {
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  fs::create_directories(o.out);
  std::ostringstream index;
  index << "source\ttensor\tdegenerate\n";
  for (std::size_t i = 0; i < files.size(); ++i) {
    const auto rel = fs::relative(files[i], o.in);
    const auto img = preprocess::read_image(files[i]).image;
    const auto t = train::preprocess_sample(img, mode, ctx.seed, o.epoch, i, cfg);
    const fs::path dest = fs::path(o.out) / (rel.string() + ".cstn");
    fs::create_directories(dest.parent_path());
    const std::array<std::uint64_t, 3> dims = {static_cast<std::uint64_t>(t.values.height()),
                                               static_cast<std::uint64_t>(t.values.width()),
                                               static_cast<std::uint64_t>(t.values.channels())};
    write_tensor_file(dest, dims, std::span<const float>(t.values.data(), static_cast<std::size_t>(t.values.size())));
    index << rel.string() << '\t' << rel.string() << ".cstn\t" << (t.degenerate ? 1 : 0) << '\n';
    if (t.degenerate) ctx.err << "warning: " << rel.string() << " has zero variance; wrote zeros\n";
  }
  write_text(fs::path(o.out) / "index.tsv", index.str());
  ctx.out << "preprocessed " << files.size() << " images into " << o.out << '\n';
  record_run(ctx, fs::path(o.out) / "run_config.json", "preprocess",
             {{"in", o.in}, {"out", o.out}, {"mode", o.mode}, {"epoch", o.epoch}, {"preprocess", cfg}});
  return kExitOk;
}

// ---------------------------------------------------------------- models

struct SpecOverrides {
  std::string backbone;
  int input_size = 0;
  std::optional<int> hidden;
  bool constant_aux = false;
};

void apply_overrides(nn::ModelSpec& spec, const SpecOverrides& o) {
  if (!o.backbone.empty()) spec.backbone = nn::DenseNetConfig::from_name(o.backbone);
  if (o.input_size > 0) spec.preprocess.target_size = {o.input_size, o.input_size, 3};
  if (o.hidden) spec.hidden = *o.hidden;
  if (o.constant_aux) {
    for (auto& a : spec.aux) {
      a.constant = true;
      a.values.assign(static_cast<std::size_t>(a.dim), 0.5);
    }
  }
}

std::size_t parameter_count(nn::Network<float>& net) {
  std::size_t n = 0;
  for (const auto& t : net.trainable()) n += static_cast<std::size_t>(t.value->size());
  return n;
}

struct InitModelOptions {
  std::string model = "ct";
  std::string out;
  SpecOverrides spec;
  std::string aux_name = "chexpert6";
  int aux_dim = 6;
  std::vector<std::string> aux;
};

int init_model(Context& ctx, const InitModelOptions& o) {
  nn::ModelSpec spec = o.model == "ct"    ? nn::ModelSpec::ct()
                       : o.model == "cxr" ? nn::ModelSpec::cxr()
                                          : nn::ModelSpec::aux_extractor(o.aux_name, o.aux_dim);
  apply_overrides(spec, o.spec);
  const auto aux = parse_aux(o.aux);
  auto net = nn::make_network<float>(spec, ctx.seed, aux);
  nn::write_checkpoint(o.out, nn::snapshot(*net, {{"seed", ctx.seed}, {"created_by", "init-model"}}));
  ctx.out << "wrote " << o.out << " (" << o.model << ", " << parameter_count(*net) << " trainable parameters)\n";
  record_run(ctx, beside(o.out), "init-model",
             {{"model", net->spec()}, {"out", o.out}, {"aux_checkpoints", to_json(aux)}});
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainOptions {
  std::string model;
  std::string config;
  std::string data;
  std::string out;
  std::string init;
  bool resume = false;
  std::optional<int> epochs;
  std::optional<double> lr;
  std::optional<int> batch_size;
  std::optional<std::uint64_t> max_steps;
  std::optional<int> patience;
  bool class_weighting = false;
  std::string ratios = "0.7,0.1,0.2";
  std::optional<bool> group_by_patient;
  SpecOverrides spec;
  std::vector<std::string> aux;
};

int train_cmd(Context& ctx, const TrainOptions& o) {
  const nn::ModelKind kind = o.model == "ct" ? nn::ModelKind::kCT : nn::ModelKind::kCXR;
  json file = json::object();
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw MissingFile("cannot open training config " + o.config);
    file = json::parse(in);
  }

  nn::ModelSpec spec = kind == nn::ModelKind::kCT ? nn::ModelSpec::ct() : nn::ModelSpec::cxr();
  if (file.contains("model")) {
    json m = file.at("model");
    if (!m.contains("kind")) m["kind"] = o.model;
    spec = m.get<nn::ModelSpec>();
  }
  apply_overrides(spec, o.spec);
  if (spec.kind != kind) throw UsageError("--model " + o.model + " does not match the configured model kind");

  train::TrainConfig tc = file.contains("train") ? file.at("train").get<train::TrainConfig>() : train::TrainConfig{};
  if (ctx.seed_given) tc.seed = ctx.seed;
  if (o.epochs) tc.max_epochs = *o.epochs;
  if (o.lr) tc.learning_rate = *o.lr;
  if (o.batch_size) tc.batch_size = *o.batch_size;
  if (o.max_steps) tc.max_steps = *o.max_steps;
  if (o.patience) tc.early_stop_patience = *o.patience;
  if (o.class_weighting) tc.class_weighting = true;
  tc.validate();
  ctx.seed = tc.seed;

  auto aux = parse_aux(o.aux);
  if (file.contains("aux_checkpoints")) {
    for (const auto& [k, v] : file.at("aux_checkpoints").items()) aux.emplace(k, v.get<std::string>());
  }

  const fs::path out(o.out);
  fs::create_directories(out);
  const Modality modality = kind == nn::ModelKind::kCT ? Modality::kCT : Modality::kCXR;

  // Data: reuse the split of a resumed run, otherwise split when needed.
  data::DatasetManifest manifest;
  const auto ratios = parse_ratios(o.ratios);
  bool group = false;
  if (o.resume && fs::exists(out / "manifest.csv")) {
    manifest = data::load_manifest(out / "manifest.csv");
  } else {
    manifest = load_data(o.data, modality);
    group = o.group_by_patient.value_or(modality == Modality::kCT);
    if (!manifest.fully_assigned()) {
      manifest.splits.clear();
      data::apply_split(manifest, data::stratified_split(manifest.records, ratios, tc.seed, group));
    }
    absolutize(manifest);
    data::save_manifest(manifest, out / "manifest.csv");
  }

  std::unique_ptr<nn::Network<float>> net;
  std::optional<nn::Checkpoint> resume_from;
  if (o.resume) {
    resume_from = nn::read_checkpoint(out / "last.ckpt");
    net = nn::network_from_checkpoint<float>(*resume_from);
  } else if (!o.init.empty()) {
    net = nn::load_network<float>(o.init);
    if (net->spec().kind != kind) throw UsageError("--init checkpoint is not a " + o.model + " model");
  } else {
    net = nn::make_network<float>(spec, tc.seed, aux);
  }

  record_run(ctx, out / "run_config.json", "train",
             {{"model", net->spec()},
              {"train", tc},
              {"data", o.data},
              {"ratios", to_json(ratios)},
              {"group_by_patient", group},
              {"init", o.init},
              {"resume", o.resume},
              {"aux_checkpoints", to_json(aux)}});

  const train::ManifestDataset train_set(manifest, Split::kTrain);
  const train::ManifestDataset val_set(manifest, Split::kVal);
  train::Trainer trainer(*net, tc, train_set, val_set.empty() ? nullptr : &val_set, out);
  if (resume_from) trainer.resume(*resume_from);
  trainer.on_epoch_end = [&ctx](const train::EpochRecord& r) {
    char line[200];
    std::snprintf(line, sizeof line, "epoch %d step %llu loss %.6f val_auc %.4f val_acc %.4f%s\n", r.epoch,
                  static_cast<unsigned long long>(r.step), r.train_loss, r.val_auc, r.val_accuracy,
                  r.improved ? " *" : "");
    ctx.out << line << std::flush;
    return false;
  };
  const auto result = trainer.run();
  ctx.out << "trained " << result.state.step << " steps over " << result.state.epoch << " epochs"
          << (result.early_stopped ? " (early stop)" : "") << "; best epoch " << result.state.best_epoch
          << "; checkpoints in " << out.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalOptions {
  std::string ckpt;
  std::string data;
  std::string report;
  std::string split = "test";
  std::vector<std::string> label_map;
  int batch_size = 16;
};

int eval_cmd(Context& ctx, const EvalOptions& o) {
  auto net = nn::load_network<float>(o.ckpt);
  const Modality modality = net->spec().kind == nn::ModelKind::kCXR ? Modality::kCXR : Modality::kCT;
  if (net->spec().kind == nn::ModelKind::kAux) throw UsageError("auxiliary extractors cannot be evaluated");
  std::optional<Split> split;
  if (o.split != "all") {
    split = parse_split(o.split);
    if (!split) throw UsageError("--split must be train, val, test or all");
  }
  const auto label_map = parse_label_map(o.label_map);

  metrics::EvalReport report;
  if (!label_map.empty() && !fs::is_directory(o.data)) {
    report = train::cross_dataset_eval(*net, o.data, split, label_map, o.batch_size);
  } else {
    data::DatasetManifest manifest;
    try {
      manifest = load_data(o.data, modality, label_map);
    } catch (const UnknownLabel& e) {
      if (label_map.empty()) throw;
      throw LabelMappingError(e.what());
    }
    // Unassigned manifests (e.g. a bare directory) are evaluated whole.
    const bool assigned = !manifest.splits.empty();
    const auto dataset = split && assigned ? train::ManifestDataset(manifest, *split) : train::ManifestDataset(manifest);
    report = train::evaluate(*net, dataset, o.batch_size);
  }

  const fs::path dir(o.report);
  fs::create_directories(dir);
  const std::string table = metrics::format_table(report, net->spec().kind == nn::ModelKind::kCT ? "ct" : "cxr");
  write_text(dir / "report.txt", table);
  write_json(dir / "report.json", metrics::report_to_json(report));
  write_text(dir / "roc.txt", metrics::roc_points_text(report.roc));
  std::ostringstream scores;
  scores << "image_id\ttrue_label\tscore\tpredicted_label\n";
  for (const auto& e : report.examples) {
    scores << e.image_id << '\t' << to_string(e.true_label) << '\t' << e.score << '\t' << to_string(e.predicted_label)
           << '\n';
  }
  write_text(dir / "scores.tsv", scores.str());
  ctx.out << table;
  record_run(ctx, dir / "run_config.json", "eval",
             {{"ckpt", o.ckpt},
              {"model_version", short_version(o.ckpt)},
              {"data", o.data},
              {"split", o.split},
              {"label_map", to_json(label_map)},
              {"batch_size", o.batch_size}});
  return kExitOk;
}

// ---------------------------------------------------------------- predict / cam

struct PredictOptions {
  std::string ckpt;
  std::vector<std::string> images;
  std::string out;
};

int predict_cmd(Context& ctx, const PredictOptions& o) {
  auto net = nn::load_network<float>(o.ckpt);
  if (net->spec().kind == nn::ModelKind::kAux) throw UsageError("auxiliary extractors do not screen images");
  const std::string version = short_version(o.ckpt);
  json all = json::array();
  for (const auto& path : o.images) {
    Rng unused(ctx.seed);
    const auto x = preprocess::run_pipeline(read_rgb(path), preprocess::PipelineMode::kEval, unused,
                                            net->spec().preprocess);
    const auto pred = net->predict(net->forward(train::to_tensor<float>(x.values), nn::Mode::kInfer)).front();
    json probs = json::object();
    for (const auto& [label, p] : pred.probabilities) probs[std::string(to_string(label))] = p;
    json j{{"image", path},
           {"probabilities", probs},
           {"predicted_label", to_string(pred.predicted_label)},
           {"model_version", version}};
    if (net->spec().kind == nn::ModelKind::kCXR) j["binary"] = pred.binary;
    ctx.out << j.dump() << '\n';
    all.push_back(j);
  }
  if (!o.out.empty()) write_json(o.out, all);
  record_run(ctx, o.out.empty() ? fs::path() : beside(o.out), "predict",
             {{"ckpt", o.ckpt}, {"model_version", version}, {"images", o.images}, {"out", o.out}});
  return kExitOk;
}

struct CamOptions {
  std::string ckpt;
  std::string image;
  std::string cls = "covid";
  double alpha = 0.4;
  std::string out;
  std::string heatmap;
  std::string layer = "backbone";
  bool model_resolution = false;
};

int cam_cmd(Context& ctx, const CamOptions& o) {
  const Label target = label_from(o.cls);
  auto net = nn::load_network<float>(o.ckpt);
  const auto image = read_rgb(o.image);
  const auto cam = explain::grad_cam(*net, image, target, o.image, explain::parse_cam_layer(o.layer));
  const auto overlay = o.model_resolution
                           ? explain::render_overlay(preprocess::resize(image, net->spec().input()), cam, o.alpha)
                           : explain::render_overlay_on_source(image, cam, o.alpha);
  preprocess::write_image(o.out, overlay);
  if (!o.heatmap.empty()) explain::write_heatmap(o.heatmap, cam.heatmap);
  ctx.out << "wrote " << o.out << " (class " << to_string(target) << ", grid " << cam.heatmap.rows() << "x"
          << cam.heatmap.cols() << (cam.degenerate ? ", degenerate: no positive evidence" : "") << ")\n";
  record_run(ctx, beside(o.out), "cam",
             {{"ckpt", o.ckpt},
              {"model_version", short_version(o.ckpt)},
              {"image", o.image},
              {"class", to_string(target)},
              {"alpha", o.alpha},
              {"out", o.out},
              {"heatmap", o.heatmap},
              {"layer", o.layer},
              {"model_resolution", o.model_resolution}});
  return kExitOk;
}

// ---------------------------------------------------------------- roc

struct RocOptions {
  std::string scores;
  std::string out;
  std::string positive = "COVID19";
};

// Lines of "score label"; the label is 0/1 or a class name. '#' starts a comment.
int roc_cmd(Context& ctx, const RocOptions& o) {
  const Label positive = label_from(o.positive);
  std::ifstream in(o.scores);
  if (!in) throw MissingFile("cannot open score file " + o.scores);
  std::vector<double> scores;
  std::vector<char> flags;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string score_text, label_text, extra;
    if (!(ls >> score_text)) continue;
    if (!(ls >> label_text) || (ls >> extra)) {
      throw InvalidArgument(o.scores + ":" + std::to_string(line_no) + ": expected 'score label'");
    }
    std::size_t used = 0;
    double s = 0;
    try {
      s = std::stod(score_text, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != score_text.size() || !std::isfinite(s)) {
      throw InvalidArgument(o.scores + ":" + std::to_string(line_no) + ": bad score '" + score_text + "'");
    }
    bool pos = false;
    if (label_text == "1") {
      pos = true;
    } else if (label_text != "0") {
      const auto l = parse_label(label_text);
      if (!l) throw UnknownLabel(o.scores + ":" + std::to_string(line_no) + ": unknown label '" + label_text + "'");
      pos = *l == positive;
    }
    scores.push_back(s);
    flags.push_back(pos ? 1 : 0);
  }
  std::unique_ptr<bool[]> positive_flags(new bool[flags.size()]);
  for (std::size_t i = 0; i < flags.size(); ++i) positive_flags[i] = flags[i] != 0;
  const auto roc = metrics::roc_auc(scores, std::span<const bool>(positive_flags.get(), flags.size()));
  write_text(o.out, metrics::roc_points_text(roc));
  const auto n_pos = static_cast<std::size_t>(std::count(flags.begin(), flags.end(), 1));
  char text[96];
  std::snprintf(text, sizeof text, "AUC %.9f\n", roc.auc);
  ctx.out << text;
  ctx.err << scores.size() << " scores (" << n_pos << " positive), " << roc.points.size() << " ROC points -> "
          << o.out << '\n';
  record_run(ctx, beside(o.out), "roc",
             {{"scores", o.scores}, {"out", o.out}, {"positive", to_string(positive)}, {"auc", roc.auc}});
  return kExitOk;
}

// ---------------------------------------------------------------- serve

struct ServeOptions {
  std::string config;
  std::optional<std::string> host;
  std::optional<int> port;
  std::optional<std::string> ct_ckpt;
  std::optional<std::string> cxr_ckpt;
  std::optional<std::string> store;
  std::optional<std::string> token;
  std::optional<int> workers;
  std::optional<std::string> request_log;
};

std::atomic<bool> g_stop_requested{false};

extern "C" void handle_stop_signal(int) { g_stop_requested = true; }

int serve_cmd(Context& ctx, const ServeOptions& o) {
  auto cfg = service::load_service_config(o.config.empty() ? fs::path() : fs::path(o.config));
  if (o.host) cfg.host = *o.host;
  if (o.port) cfg.port = *o.port;
  if (o.ct_ckpt) cfg.ct_checkpoint = *o.ct_ckpt;
  if (o.cxr_ckpt) cfg.cxr_checkpoint = *o.cxr_ckpt;
  if (o.store) cfg.store = *o.store;
  if (o.token) cfg.api_token = *o.token;
  if (o.workers) cfg.workers = *o.workers;
  if (o.request_log) cfg.request_log = *o.request_log;
  cfg.validate();
  record_run(ctx, beside(cfg.store), "serve", cfg);

  service::ScreeningService svc(cfg);
  svc.load_configured_models();
  const int port = svc.bind();
  ctx.out << "listening on http://" << cfg.host << ":" << port << '\n' << std::flush;

  g_stop_requested = false;
  std::signal(SIGINT, handle_stop_signal);
  std::signal(SIGTERM, handle_stop_signal);
  std::atomic<bool> serving{true};
  std::thread watcher([&] {
    while (serving && !g_stop_requested) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    svc.stop();
  });
  svc.serve();
  serving = false;
  watcher.join();
  std::signal(SIGINT, SIG_DFL);
  std::signal(SIGTERM, SIG_DFL);
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"COVID-19 screening toolkit for chest CT and X-ray images", "covidscreen"};
  app.set_version_flag("--version", kVersion);
  app.fallthrough();
  app.require_subcommand(1);

  Context ctx{out, err, 0, false, {}, {}};
  for (int i = 0; i < argc; ++i) ctx.argv.emplace_back(argv[i]);
  app.add_option("--seed", ctx.seed, "Seed for every random stream (default 0)");
  app.add_option("--run-config", ctx.run_config, "Write the resolved run configuration here");
  const auto modality_check = CLI::IsMember({"ct", "cxr"}, CLI::ignore_case);

  // data
  auto* data_cmd = app.add_subcommand("data", "Dataset manifests: index, validate, split");
  data_cmd->require_subcommand(1);
  DataValidateOptions dv;
  auto* dv_cmd = data_cmd->add_subcommand("validate", "Check images against the dataset bounds");
  dv_cmd->add_option("--data,--manifest", dv.data, "Manifest file or <root>/<class>/<image> directory")->required();
  dv_cmd->add_option("--modality", dv.modality, "Modality of a directory dataset")->check(modality_check);
  dv_cmd->add_flag("--lenient", dv.lenient, "Only require decodable images");
  dv_cmd->add_option("--out", dv.out, "Directory for validation.tsv");

  DataIndexOptions di;
  auto* di_cmd = data_cmd->add_subcommand("index", "Build a manifest from a <root>/<class>/<image> directory");
  di_cmd->add_option("--root", di.root, "Dataset root")->required();
  di_cmd->add_option("--modality", di.modality, "ct or cxr")->check(modality_check);
  di_cmd->add_option("--out", di.out, "Manifest to write")->required();
  di_cmd->add_option("--label-map", di.aliases, "Extra class directory names, NAME=LABEL[,...]");

  DataSplitOptions ds;
  auto* ds_cmd = data_cmd->add_subcommand("split", "Stratified train/val/test split");
  ds_cmd->add_option("--data,--manifest", ds.data, "Manifest file or dataset directory")->required();
  ds_cmd->add_option("--modality", ds.modality, "Modality of a directory dataset")->check(modality_check);
  ds_cmd->add_option("--out", ds.out, "Manifest to write")->required();
  ds_cmd->add_option("--ratios", ds.ratios, "train,val,test fractions");
  ds_cmd->add_flag("--group-by-patient,!--no-group-by-patient", ds.group_by_patient,
                   "Keep each patient in one split (default: on for CT, off for CXR)");
  ds_cmd->add_option("--append-test", ds.append_test, "Manifest or directory appended to TEST only");

  // preprocess
  PreprocessOptions pp;
  auto* pp_cmd = app.add_subcommand("preprocess", "Run the preprocessing pipeline into tensor files");
  pp_cmd->add_option("--in", pp.in, "Input image directory")->required();
  pp_cmd->add_option("--out", pp.out, "Output directory")->required();
  pp_cmd->add_option("--mode", pp.mode, "train or eval")->check(CLI::IsMember({"train", "eval"}));
  pp_cmd->add_option("--config", pp.config, "Preprocess config (JSON)");
  pp_cmd->add_option("--epoch", pp.epoch, "Epoch index of the augmentation stream");

  // init-model
  InitModelOptions im;
  auto* im_cmd = app.add_subcommand("init-model", "Write a randomly initialized checkpoint");
  im_cmd->add_option("--model", im.model, "ct, cxr or aux")->check(CLI::IsMember({"ct", "cxr", "aux"}));
  im_cmd->add_option("--out", im.out, "Checkpoint to write")->required();
  im_cmd->add_option("--backbone", im.spec.backbone, "densenet121 or densenet-tiny");
  im_cmd->add_option("--input-size", im.spec.input_size, "Square model input side");
  im_cmd->add_option("--hidden", im.spec.hidden, "Hidden fully-connected width (0: none)");
  im_cmd->add_flag("--constant-aux", im.spec.constant_aux, "Use constant stub auxiliary extractors (cxr)");
  im_cmd->add_option("--aux", im.aux, "Auxiliary extractor checkpoint NAME=FILE (cxr)");
  im_cmd->add_option("--aux-name", im.aux_name, "Extractor name (aux)");
  im_cmd->add_option("--aux-dim", im.aux_dim, "Extractor output width (aux)");

  // train
  TrainOptions tr;
  auto* tr_cmd = app.add_subcommand("train", "Train a CT or CXR model");
  tr_cmd->add_option("--model", tr.model, "ct or cxr")->required()->check(modality_check);
  tr_cmd->add_option("--config", tr.config, "JSON with optional 'model', 'train' and 'aux_checkpoints'");
  tr_cmd->add_option("--data", tr.data, "Manifest file or dataset directory")->required();
  tr_cmd->add_option("--out", tr.out, "Run directory")->required();
  tr_cmd->add_option("--init", tr.init, "Start from this checkpoint's weights");
  tr_cmd->add_flag("--resume", tr.resume, "Continue from <out>/last.ckpt");
  tr_cmd->add_option("--epochs", tr.epochs, "Maximum epochs");
  tr_cmd->add_option("--lr", tr.lr, "Adam learning rate");
  tr_cmd->add_option("--batch-size", tr.batch_size, "Batch size");
  tr_cmd->add_option("--max-steps", tr.max_steps, "Stop after this many optimizer steps");
  tr_cmd->add_option("--patience", tr.patience, "Early-stopping patience in epochs");
  tr_cmd->add_flag("--class-weighting", tr.class_weighting, "Inverse-frequency class weights");
  tr_cmd->add_option("--ratios", tr.ratios, "Split fractions when the data is unassigned");
  tr_cmd->add_flag("--group-by-patient,!--no-group-by-patient", tr.group_by_patient, "Patient-disjoint split");
  tr_cmd->add_option("--backbone", tr.spec.backbone, "densenet121 or densenet-tiny");
  tr_cmd->add_option("--input-size", tr.spec.input_size, "Square model input side");
  tr_cmd->add_option("--hidden", tr.spec.hidden, "Hidden fully-connected width");
  tr_cmd->add_flag("--constant-aux", tr.spec.constant_aux, "Constant stub auxiliary extractors (cxr)");
  tr_cmd->add_option("--aux", tr.aux, "Auxiliary extractor checkpoint NAME=FILE (cxr)");

  // eval
  EvalOptions ev;
  auto* ev_cmd = app.add_subcommand("eval", "Evaluate a checkpoint and write a report");
  ev_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  ev_cmd->add_option("--data", ev.data, "Manifest file or dataset directory")->required();
  ev_cmd->add_option("--report", ev.report, "Report directory")->required();
  ev_cmd->add_option("--split", ev.split, "train, val, test or all");
  ev_cmd->add_option("--label-map", ev.label_map, "Foreign label names, NAME=LABEL[,...]");
  ev_cmd->add_option("--batch-size", ev.batch_size, "Inference batch size")->check(CLI::PositiveNumber);

  // predict
  PredictOptions pr;
  auto* pr_cmd = app.add_subcommand("predict", "Screen images with a checkpoint");
  pr_cmd->add_option("--ckpt", pr.ckpt, "Checkpoint")->required();
  pr_cmd->add_option("--image", pr.images, "Image file(s)")->required();
  pr_cmd->add_option("--out", pr.out, "Also write the results as a JSON array");

  // cam
  CamOptions cm;
  auto* cm_cmd = app.add_subcommand("cam", "Render a Grad-CAM overlay");
  cm_cmd->add_option("--ckpt", cm.ckpt, "Checkpoint")->required();
  cm_cmd->add_option("--image", cm.image, "Image file")->required();
  cm_cmd->add_option("--class", cm.cls, "Target class (covid, other_pneumonia, normal)");
  cm_cmd->add_option("--alpha", cm.alpha, "Heatmap opacity")->check(CLI::Range(0.0, 1.0));
  cm_cmd->add_option("--out", cm.out, "Overlay image to write")->required();
  cm_cmd->add_option("--heatmap", cm.heatmap, "Also write the raw grid as a tensor file");
  cm_cmd->add_option("--layer", cm.layer, "Feature map for the heatmap")
      ->check(CLI::IsMember({"backbone", "attention"}));
  cm_cmd->add_flag("--model-resolution", cm.model_resolution, "Render at the model input size");

  // roc
  RocOptions rc;
  auto* rc_cmd = app.add_subcommand("roc", "ROC curve and AUC from a score file");
  rc_cmd->add_option("--scores", rc.scores, "Lines of 'score label'")->required();
  rc_cmd->add_option("--out", rc.out, "Two-column fpr/tpr output")->required();
  rc_cmd->add_option("--positive", rc.positive, "Positive class for named labels");

  // serve
  ServeOptions sv;
  auto* sv_cmd = app.add_subcommand("serve", "Run the screening HTTP service");
  sv_cmd->add_option("--config", sv.config, "Service config (JSON)");
  sv_cmd->add_option("--host", sv.host, "Bind address");
  sv_cmd->add_option("--port", sv.port, "Port (0 picks a free one)");
  sv_cmd->add_option("--ct-ckpt", sv.ct_ckpt, "CT checkpoint");
  sv_cmd->add_option("--cxr-ckpt", sv.cxr_ckpt, "CXR checkpoint");
  sv_cmd->add_option("--store", sv.store, "Case store database");
  sv_cmd->add_option("--token", sv.token, "Static API token");
  sv_cmd->add_option("--workers", sv.workers, "Model replicas per modality");
  sv_cmd->add_option("--request-log", sv.request_log, "Request log file (JSON lines)");

  if (argc <= 1) {
    err << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }
  ctx.seed_given = app.get_option("--seed")->count() > 0;

  try {
    if (dv_cmd->parsed()) return data_validate(ctx, dv);
    if (di_cmd->parsed()) return data_index(ctx, di);
    if (ds_cmd->parsed()) return data_split(ctx, ds);
    if (pp_cmd->parsed()) return preprocess_cmd(ctx, pp);
    if (im_cmd->parsed()) return init_model(ctx, im);
    if (tr_cmd->parsed()) return train_cmd(ctx, tr);
    if (ev_cmd->parsed()) return eval_cmd(ctx, ev);
    if (pr_cmd->parsed()) return predict_cmd(ctx, pr);
    if (cm_cmd->parsed()) return cam_cmd(ctx, cm);
    if (rc_cmd->parsed()) return roc_cmd(ctx, rc);
    if (sv_cmd->parsed()) return serve_cmd(ctx, sv);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\nRun with --help for more information.\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace covidscreen::cli
