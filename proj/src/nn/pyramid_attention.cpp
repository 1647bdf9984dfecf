#include "covidscreen/nn/pyramid_attention.hpp"

namespace covidscreen::nn {

template <typename Scalar>
PyramidAttention<Scalar>::PyramidAttention(Index channels, const AttentionConfig& config)
    : channels_(channels),
      pyramid_channels_(config.pyramid_channels),
      main_(channels, channels, 1, 1, 0, true),
      global_(channels, channels, 1, 1, 0, true) {
  if (config.kernels.empty()) throw InvalidArgument("attention needs at least one pyramid level");
  if (pyramid_channels_ != 1 && pyramid_channels_ != channels) {
    throw InvalidArgument("pyramid channels must be 1 or " + std::to_string(channels));
  }
  Index in = channels;
  for (int k : config.kernels) {
    if (k < 1 || k % 2 == 0) throw InvalidArgument("pyramid kernels must be odd");
    auto level = std::make_unique<Level>();
    level->down = Conv2d<Scalar>(in, pyramid_channels_, k, 2, k / 2, true);
    level->lateral = Conv2d<Scalar>(pyramid_channels_, pyramid_channels_, k, 1, k / 2, true);
    levels_.push_back(std::move(level));
    in = pyramid_channels_;
  }
}

template <typename Scalar>
void PyramidAttention<Scalar>::init(Rng& rng) {
  main_.init(rng);
  global_.init(rng);
  for (auto& l : levels_) {
    l->down.init(rng);
    l->lateral.init(rng);
  }
}

template <typename Scalar>
Tensor<Scalar> PyramidAttention<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  if (x.channels() != channels_ || x.batch() < 1) {
    throw ShapeMismatch("attention expects " + std::to_string(channels_) + " channels, got " +
                        x.shape().str());
  }
  const std::size_t n_levels = levels_.size();
  std::vector<Tensor<Scalar>> lateral(n_levels);
  Tensor<Scalar> d = x;
  for (std::size_t i = 0; i < n_levels; ++i) {
    d = levels_[i]->relu.forward(levels_[i]->down.forward(d, mode), mode);
    lateral[i] = levels_[i]->lateral.forward(d, mode);
  }
  Tensor<Scalar> merged = std::move(lateral[n_levels - 1]);
  for (std::size_t i = n_levels - 1; i-- > 0;) {
    Tensor<Scalar> up =
        levels_[i + 1]->up.forward(merged, lateral[i].height(), lateral[i].width(), mode);
    up.array() += lateral[i].array();
    merged = std::move(up);
  }
  Tensor<Scalar> att = up_out_.forward(merged, x.height(), x.width(), mode);

  Tensor<Scalar> main = main_.forward(x, mode);
  Tensor<Scalar> glob = global_.forward(gap_.forward(x, mode), mode);
  Tensor<Scalar> out(x.shape());
  for (Index n = 0; n < x.batch(); ++n) {
    auto o = out.sample(n);
    const auto m = main.sample(n);
    const auto a = att.sample(n);
    if (pyramid_channels_ == 1) {
      o.noalias() = (m.array().rowwise() * a.row(0).array()).matrix();
    } else {
      o.noalias() = m.cwiseProduct(a);
    }
    o.colwise() += glob.sample(n).col(0);
  }
  if (records(mode)) {
    main_out_ = std::move(main);
    attention_ = std::move(att);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> PyramidAttention<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  if (main_out_.empty()) throw InvalidArgument("attention backward without a recorded forward pass");
  const Index batch = grad_out.batch();
  Tensor<Scalar> g_main(main_out_.shape());
  Tensor<Scalar> g_att(attention_.shape());
  Tensor<Scalar> g_glob(batch, channels_, 1, 1);
  for (Index n = 0; n < batch; ++n) {
    const auto g = grad_out.sample(n);
    const auto m = main_out_.sample(n);
    const auto a = attention_.sample(n);
    if (pyramid_channels_ == 1) {
      g_main.sample(n).noalias() = (g.array().rowwise() * a.row(0).array()).matrix();
      g_att.sample(n).row(0).noalias() = g.cwiseProduct(m).colwise().sum();
    } else {
      g_main.sample(n).noalias() = g.cwiseProduct(a);
      g_att.sample(n).noalias() = g.cwiseProduct(m);
    }
    g_glob.sample(n).col(0) = g.rowwise().sum();
  }
  Tensor<Scalar> gx = main_.backward(g_main);
  gx.array() += gap_.backward(global_.backward(g_glob)).array();

  // Undo the coarse-to-fine merge: the merged gradient at level i is the
  // lateral gradient of level i and, upsampled back, the merged gradient of i+1.
  const std::size_t n_levels = levels_.size();
  std::vector<Tensor<Scalar>> g_lateral(n_levels);
  g_lateral[0] = up_out_.backward(g_att);
  for (std::size_t i = 0; i + 1 < n_levels; ++i) {
    g_lateral[i + 1] = levels_[i + 1]->up.backward(g_lateral[i]);
  }
  Tensor<Scalar> g_d = levels_[n_levels - 1]->lateral.backward(g_lateral[n_levels - 1]);
  for (std::size_t i = n_levels; i-- > 0;) {
    Tensor<Scalar> g_in = levels_[i]->down.backward(levels_[i]->relu.backward(g_d));
    if (i == 0) {
      gx.array() += g_in.array();
    } else {
      g_in.array() += levels_[i - 1]->lateral.backward(g_lateral[i - 1]).array();
      g_d = std::move(g_in);
    }
  }
  return gx;
}

template <typename Scalar>
void PyramidAttention<Scalar>::collect(const std::string& prefix, NamedTensors<Scalar>& out) {
  main_.collect(prefix + "main.", out);
  global_.collect(prefix + "global.", out);
  for (std::size_t i = 0; i < levels_.size(); ++i) {
    levels_[i]->down.collect(prefix + "down" + std::to_string(i + 1) + ".", out);
    levels_[i]->lateral.collect(prefix + "lateral" + std::to_string(i + 1) + ".", out);
  }
}

template class PyramidAttention<float>;
template class PyramidAttention<double>;

}  // namespace covidscreen::nn
