#include "covidscreen/train/adam.hpp"

#include <cmath>

namespace covidscreen::train {

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
void Adam<Scalar>::step(const nn::NamedTensors<Scalar>& params) {
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double lr = config_.learning_rate;
  for (const auto& p : params) {
    if (!p.grad) continue;
    const Eigen::Index n = p.value->size();
    Moments& s = state_[p.name];
    if (s.m.size() != n) {
      s.m = Array<Scalar>::Zero(n);
      s.v = Array<Scalar>::Zero(n);
      s.dims = {static_cast<std::uint64_t>(p.value->batch()), static_cast<std::uint64_t>(p.value->channels()),
                static_cast<std::uint64_t>(p.value->height()), static_cast<std::uint64_t>(p.value->width())};
    }
    const auto& g = p.grad->array();
    s.m = Scalar(b1) * s.m + Scalar(1.0 - b1) * g;
    s.v = Scalar(b2) * s.v + Scalar(1.0 - b2) * g.square();
    p.value->array() -=
        Scalar(lr) * (s.m / Scalar(c1)) / ((s.v / Scalar(c2)).sqrt() + Scalar(config_.eps));
  }
}

template <typename Scalar>
void Adam<Scalar>::save(nn::Checkpoint& ckpt) const {
  ckpt.metadata["optim_t"] = t_;
  ckpt.metadata["optim"] = {{"learning_rate", config_.learning_rate},
                            {"beta1", config_.beta1},
                            {"beta2", config_.beta2},
                            {"eps", config_.eps}};
  for (const auto& [name, s] : state_) {
    nn::StoredArray m, v;
    m.dims = v.dims = s.dims;
    m.values.assign(s.m.data(), s.m.data() + s.m.size());
    v.values.assign(s.v.data(), s.v.data() + s.v.size());
    ckpt.tensors["optim.m." + name] = std::move(m);
    ckpt.tensors["optim.v." + name] = std::move(v);
  }
}

template <typename Scalar>
void Adam<Scalar>::load(const nn::Checkpoint& ckpt) {
  state_.clear();
  t_ = ckpt.metadata.value("optim_t", std::uint64_t{0});
  const std::string mp = "optim.m.";
  for (const auto& [name, m] : ckpt.tensors) {
    if (name.compare(0, mp.size(), mp) != 0) continue;
    const std::string param = name.substr(mp.size());
    const auto v = ckpt.tensors.find("optim.v." + param);
    if (v == ckpt.tensors.end()) throw CorruptCheckpoint("optimizer state lacks " + param);
    Moments s;
    s.dims = m.dims;
    s.m = Eigen::Map<const Eigen::ArrayXd>(m.values.data(), static_cast<Eigen::Index>(m.values.size()))
              .cast<Scalar>();
    s.v = Eigen::Map<const Eigen::ArrayXd>(v->second.values.data(),
                                           static_cast<Eigen::Index>(v->second.values.size()))
              .cast<Scalar>();
    state_[param] = std::move(s);
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace covidscreen::train
