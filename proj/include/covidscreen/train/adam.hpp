#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "covidscreen/nn/checkpoint.hpp"
#include "covidscreen/nn/layers.hpp"

namespace covidscreen::train {

struct AdamConfig {
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment estimates are kept per tensor name so the
// state can be stored next to the weights in a checkpoint.
template <typename Scalar>
class Adam {
 public:
  explicit Adam(const AdamConfig& config = {}) : config_(config) {}

  void step(const nn::NamedTensors<Scalar>& params);
  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

  // "optim.m.<name>" / "optim.v.<name>" tensors plus metadata key "optim_t".
  void save(nn::Checkpoint& ckpt) const;
  void load(const nn::Checkpoint& ckpt);

 private:
  struct Moments {
    // Kept in the model's precision so checkpoints hold them losslessly.
    Eigen::Array<Scalar, Eigen::Dynamic, 1> m, v;
    std::array<std::uint64_t, 4> dims{};
  };
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace covidscreen::train
