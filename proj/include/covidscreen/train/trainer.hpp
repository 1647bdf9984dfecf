#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "covidscreen/metrics/metrics.hpp"
#include "covidscreen/nn/checkpoint.hpp"
#include "covidscreen/nn/network.hpp"
#include "covidscreen/train/adam.hpp"
#include "covidscreen/train/dataset.hpp"

namespace covidscreen::train {

struct TrainConfig {
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 16;
  int max_epochs = 50;
  // Stop after this many optimizer steps in total; 0 = no limit.
  std::uint64_t max_steps = 0;
  int early_stop_patience = 7;
  std::uint64_t seed = 0;
  // Inverse-frequency per-class loss weights.
  bool class_weighting = false;

  void validate() const;
  AdamConfig adam() const { return {learning_rate, beta1, beta2, adam_eps}; }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainState {
  std::uint64_t step = 0;
  int epoch = 0;                    // epochs completed
  std::size_t batch_in_epoch = 0;   // batches of `epoch` already consumed
  double epoch_loss_sum = 0.0;      // partial sums of the epoch in progress
  std::size_t epoch_loss_count = 0;
  double best_metric = -std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int stale_epochs = 0;
};

void to_json(nlohmann::json& j, const TrainState& s);
void from_json(const nlohmann::json& j, TrainState& s);

struct EpochRecord {
  int epoch = 0;  // 1-based
  std::uint64_t step = 0;
  double train_loss = 0.0;
  // Validation AUC (NaN when the split holds one class) and accuracy.
  double val_auc = std::numeric_limits<double>::quiet_NaN();
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();
  bool improved = false;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::vector<double> step_losses;  // this run only
  TrainState state;
  bool early_stopped = false;
};

// Optimizes every trainable tensor of the network with Adam on the one-vs-all
// BCE loss (categorical cross-entropy for softmax heads).
//
// When `out_dir` is set, each epoch writes last.ckpt (weights, optimizer and
// loop state), best.ckpt (best validation AUC, accuracy when AUC is
// undefined), history.tsv / history.json and appends to steps.tsv.
class Trainer {
 public:
  Trainer(nn::Network<float>& net, TrainConfig config, const Dataset& train, const Dataset* val,
          std::filesystem::path out_dir = {});

  // Continues from a last.ckpt written by a previous run. VersionMismatch
  // when the checkpoint belongs to a different architecture.
  void resume(const nn::Checkpoint& ckpt);

  // Throws EmptySplit, or DivergenceDetected after restoring (and saving) the
  // state at the start of the failing epoch.
  TrainResult run();

  // Called after every epoch; returning true stops training.
  std::function<bool(const EpochRecord&)> on_epoch_end;

  nn::Checkpoint checkpoint() const;
  const TrainState& state() const { return state_; }

 private:
  std::vector<std::size_t> epoch_order(int epoch) const;
  double train_batch(std::span<const std::size_t> indices, int epoch);
  void validate_epoch(EpochRecord& record);
  void restore_snapshot(const nn::Checkpoint& snap);
  void write_outputs(const nn::Checkpoint& last, bool improved);

  nn::Network<float>& net_;
  TrainConfig config_;
  const Dataset& train_;
  const Dataset* val_;
  std::filesystem::path out_dir_;
  BatchBuilder train_batches_;
  std::unique_ptr<BatchBuilder> val_batches_;
  Adam<float> adam_;
  TrainState state_;
  std::vector<EpochRecord> history_;
  std::array<double, 3> class_weights_{1.0, 1.0, 1.0};
};

// Scores every image with the EVAL pipeline. The score is the COVID19
// probability; the predicted label is the argmax class (CT) or the 0.5
// threshold decision (CXR).
template <typename Scalar>
std::vector<metrics::ScoredExample> score_dataset(nn::Network<Scalar>& net, const Dataset& dataset,
                                                  int batch_size = 16, BatchBuilder* builder = nullptr);

metrics::EvalMode eval_mode_for(const nn::ModelSpec& spec);

// Throws EmptySplit on an empty dataset.
template <typename Scalar>
metrics::EvalReport evaluate(nn::Network<Scalar>& net, const Dataset& dataset, int batch_size = 16);

// Evaluates on another dataset's manifest whose label names are translated by
// `label_map` (e.g. "CT_COVID" -> COVID19). Images are not bounds-checked.
// Throws LabelMappingError when a label in the data has no mapping.
template <typename Scalar>
metrics::EvalReport cross_dataset_eval(nn::Network<Scalar>& net, const std::filesystem::path& manifest,
                                       std::optional<Split> split,
                                       const std::map<std::string, Label>& label_map,
                                       int batch_size = 16);

}  // namespace covidscreen::train
