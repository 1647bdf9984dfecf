#include "covidscreen/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace covidscreen::nn {

template <typename Scalar>
using RowMatrix = typename Tensor<Scalar>::RowMajorMatrix;

// ---------------------------------------------------------------- Conv2d

template <typename Scalar>
Conv2d<Scalar>::Conv2d(Index in_channels, Index out_channels, int kernel, int stride, int padding,
                       bool bias)
    : in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      stride_(stride),
      padding_(padding),
      has_bias_(bias),
      weight_({out_channels, in_channels, kernel, kernel}),
      bias_(bias ? typename Tensor<Scalar>::Shape{out_channels, 1, 1, 1}
                 : typename Tensor<Scalar>::Shape{}) {}

template <typename Scalar>
void Conv2d<Scalar>::init(Rng& rng) {
  // He normal, fan-in, ReLU gain.
  const double stddev = std::sqrt(2.0 / static_cast<double>(in_ * kernel_ * kernel_));
  for (Index i = 0; i < weight_.value.size(); ++i) {
    weight_.value.data()[i] = static_cast<Scalar>(rng.normal(0.0, stddev));
  }
  if (has_bias_) bias_.value.set_zero();
}

template <typename Scalar>
void Conv2d<Scalar>::im2col(const Scalar* x, Index h, Index w, RowMatrix<Scalar>& cols) const {
  const Index oh = out_extent(h);
  const Index ow = out_extent(w);
  cols.resize(in_ * kernel_ * kernel_, oh * ow);
  for (Index c = 0; c < in_; ++c) {
    const Scalar* plane = x + c * h * w;
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        Scalar* row = cols.data() + ((c * kernel_ + ky) * kernel_ + kx) * oh * ow;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * stride_ - padding_ + ky;
          Scalar* dst = row + oy * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, Scalar(0));
            continue;
          }
          const Scalar* src = plane + iy * w;
          for (Index ox = 0; ox < ow; ++ox) {
            const Index ix = ox * stride_ - padding_ + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void Conv2d<Scalar>::col2im(const RowMatrix<Scalar>& cols, Index h, Index w, Scalar* gx) const {
  const Index oh = out_extent(h);
  const Index ow = out_extent(w);
  for (Index c = 0; c < in_; ++c) {
    Scalar* plane = gx + c * h * w;
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        const Scalar* row = cols.data() + ((c * kernel_ + ky) * kernel_ + kx) * oh * ow;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * stride_ - padding_ + ky;
          if (iy < 0 || iy >= h) continue;
          Scalar* dst = plane + iy * w;
          const Scalar* src = row + oy * ow;
          for (Index ox = 0; ox < ow; ++ox) {
            const Index ix = ox * stride_ - padding_ + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  if (x.channels() != in_) {
    throw ShapeMismatch("conv expects " + std::to_string(in_) + " input channels, got " +
                        x.shape().str());
  }
  const Index oh = out_extent(x.height());
  const Index ow = out_extent(x.width());
  if (oh <= 0 || ow <= 0) throw ShapeMismatch("conv input too small: " + x.shape().str());
  Tensor<Scalar> y(x.batch(), out_, oh, ow);
  const typename Tensor<Scalar>::ConstMatrixMap w(weight_.value.data(), out_,
                                                  in_ * kernel_ * kernel_);
  RowMatrix<Scalar> cols;
  for (Index n = 0; n < x.batch(); ++n) {
    auto out = y.sample(n);
    if (pointwise()) {
      out.noalias() = w * x.sample(n);
    } else {
      im2col(x.sample_data(n), x.height(), x.width(), cols);
      out.noalias() = w * cols;
    }
    if (has_bias_) {
      out.colwise() += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(
          bias_.value.data(), out_);
    }
  }
  if (records(mode)) input_ = x;
  return y;
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  const Tensor<Scalar>& x = input_;
  if (x.empty()) throw InvalidArgument("conv backward without a recorded forward pass");
  Tensor<Scalar> gx(x.shape());
  const typename Tensor<Scalar>::ConstMatrixMap w(weight_.value.data(), out_,
                                                  in_ * kernel_ * kernel_);
  typename Tensor<Scalar>::MatrixMap gw(weight_.grad.data(), out_, in_ * kernel_ * kernel_);
  RowMatrix<Scalar> cols;
  RowMatrix<Scalar> gcols;
  for (Index n = 0; n < x.batch(); ++n) {
    const auto gy = grad_out.sample(n);
    if (pointwise()) {
      gw.noalias() += gy * x.sample(n).transpose();
      gx.sample(n).noalias() = w.transpose() * gy;
    } else {
      im2col(x.sample_data(n), x.height(), x.width(), cols);
      gw.noalias() += gy * cols.transpose();
      gcols.noalias() = w.transpose() * gy;
      col2im(gcols, x.height(), x.width(), gx.sample_data(n));
    }
    if (has_bias_) {
      Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias_.grad.data(), out_) +=
          gy.rowwise().sum();
    }
  }
  return gx;
}

template <typename Scalar>
void Conv2d<Scalar>::collect(const std::string& prefix, NamedTensors<Scalar>& out) {
  out.push_back({prefix + "weight", &weight_.value, &weight_.grad});
  if (has_bias_) out.push_back({prefix + "bias", &bias_.value, &bias_.grad});
}

// ---------------------------------------------------------------- BatchNorm2d

template <typename Scalar>
BatchNorm2d<Scalar>::BatchNorm2d(Index channels, double eps, double momentum)
    : channels_(channels),
      eps_(eps),
      momentum_(momentum),
      gamma_({channels, 1, 1, 1}),
      beta_({channels, 1, 1, 1}),
      running_mean_(channels, 1, 1, 1),
      running_var_(Tensor<Scalar>::constant({channels, 1, 1, 1}, Scalar(1))) {
  gamma_.value.array().setOnes();
}

template <typename Scalar>
Tensor<Scalar> BatchNorm2d<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  if (x.channels() != channels_) {
    throw ShapeMismatch("batch-norm expects " + std::to_string(channels_) + " channels, got " +
                        x.shape().str());
  }
  const Index n = x.batch();
  const Index hw = x.plane();
  Eigen::Array<Scalar, Eigen::Dynamic, 1> mean(channels_), inv_std(channels_);
  const bool batch_stats = mode == Mode::kTrain;
  if (records(mode)) batch_stats_ = batch_stats;
  if (batch_stats) {
    const double count = static_cast<double>(n * hw);
    Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(channels_);
    Eigen::ArrayXd sq = Eigen::ArrayXd::Zero(channels_);
    for (Index b = 0; b < n; ++b) {
      const auto s = x.sample(b);
      sum += s.template cast<double>().rowwise().sum().array();
    }
    const Eigen::ArrayXd mu = sum / count;
    for (Index b = 0; b < n; ++b) {
      const auto s = x.sample(b).template cast<double>();
      sq += (s.colwise() - mu.matrix()).array().square().rowwise().sum();
    }
    const Eigen::ArrayXd var = sq / count;
    mean = mu.cast<Scalar>();
    inv_std = (var + eps_).rsqrt().cast<Scalar>();
    const double unbiased = count > 1 ? count / (count - 1) : 1.0;
    running_mean_.array() =
        Scalar(1 - momentum_) * running_mean_.array() + Scalar(momentum_) * mean;
    running_var_.array() = Scalar(1 - momentum_) * running_var_.array() +
                           (momentum_ * unbiased * var).cast<Scalar>();
  } else {
    mean = running_mean_.array();
    inv_std = (running_var_.array() + Scalar(eps_)).rsqrt();
  }

  Tensor<Scalar> y(x.shape());
  Tensor<Scalar> xhat;
  const bool keep = records(mode);
  if (keep) xhat = Tensor<Scalar>(x.shape());
  for (Index b = 0; b < n; ++b) {
    const auto s = x.sample(b);
    auto o = y.sample(b);
    for (Index c = 0; c < channels_; ++c) {
      const auto normalized = (s.row(c).array() - mean[c]) * inv_std[c];
      if (keep) xhat.sample(b).row(c).array() = normalized;
      o.row(c).array() = normalized * gamma_.value.data()[c] + beta_.value.data()[c];
    }
  }
  if (keep) {
    xhat_ = std::move(xhat);
    inv_std_ = inv_std;
  }
  (void)hw;
  return y;
}

template <typename Scalar>
Tensor<Scalar> BatchNorm2d<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  if (xhat_.empty()) throw InvalidArgument("batch-norm backward without a recorded forward pass");
  const Index n = grad_out.batch();
  const Index hw = grad_out.plane();
  Eigen::Array<Scalar, Eigen::Dynamic, 1> sum_g = Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(channels_);
  Eigen::Array<Scalar, Eigen::Dynamic, 1> sum_gx = Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(channels_);
  for (Index b = 0; b < n; ++b) {
    const auto g = grad_out.sample(b);
    const auto xh = xhat_.sample(b);
    sum_g += g.rowwise().sum().array();
    sum_gx += g.cwiseProduct(xh).rowwise().sum().array();
  }
  gamma_.grad.array() += sum_gx;
  beta_.grad.array() += sum_g;

  Tensor<Scalar> gx(grad_out.shape());
  const Scalar m = static_cast<Scalar>(n * hw);
  for (Index b = 0; b < n; ++b) {
    const auto g = grad_out.sample(b);
    const auto xh = xhat_.sample(b);
    auto out = gx.sample(b);
    for (Index c = 0; c < channels_; ++c) {
      const Scalar scale = gamma_.value.data()[c] * inv_std_[c];
      if (batch_stats_) {
        out.row(c).array() = scale / m *
                             (m * g.row(c).array() - sum_g[c] - xh.row(c).array() * sum_gx[c]);
      } else {
        out.row(c).array() = scale * g.row(c).array();
      }
    }
  }
  return gx;
}

template <typename Scalar>
void BatchNorm2d<Scalar>::collect(const std::string& prefix, NamedTensors<Scalar>& out) {
  out.push_back({prefix + "weight", &gamma_.value, &gamma_.grad});
  out.push_back({prefix + "bias", &beta_.value, &beta_.grad});
  out.push_back({prefix + "running_mean", &running_mean_, nullptr});
  out.push_back({prefix + "running_var", &running_var_, nullptr});
}

// ---------------------------------------------------------------- ReLU

template <typename Scalar>
Tensor<Scalar> ReLU<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  Tensor<Scalar> y(x.shape());
  y.array() = x.array().max(Scalar(0));
  if (records(mode)) output_ = y;
  return y;
}

template <typename Scalar>
Tensor<Scalar> ReLU<Scalar>::backward(const Tensor<Scalar>& grad_out) const {
  Tensor<Scalar> gx(grad_out.shape());
  gx.array() = (output_.array() > Scalar(0)).select(grad_out.array(), Scalar(0));
  return gx;
}

// ---------------------------------------------------------------- MaxPool2d

template <typename Scalar>
Tensor<Scalar> MaxPool2d<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  const Index oh = (x.height() + 2 * padding_ - kernel_) / stride_ + 1;
  const Index ow = (x.width() + 2 * padding_ - kernel_) / stride_ + 1;
  Tensor<Scalar> y(x.batch(), x.channels(), oh, ow);
  const bool keep = records(mode);
  if (keep) {
    argmax_.assign(static_cast<std::size_t>(y.size()), 0);
    input_shape_ = x.shape();
  }
  Index out_index = 0;
  for (Index n = 0; n < x.batch(); ++n) {
    for (Index c = 0; c < x.channels(); ++c) {
      const Index base = (n * x.channels() + c) * x.plane();
      const Scalar* plane = x.data() + base;
      for (Index oy = 0; oy < oh; ++oy) {
        for (Index ox = 0; ox < ow; ++ox, ++out_index) {
          Scalar best = -std::numeric_limits<Scalar>::infinity();
          Index best_at = -1;
          for (int ky = 0; ky < kernel_; ++ky) {
            const Index iy = oy * stride_ - padding_ + ky;
            if (iy < 0 || iy >= x.height()) continue;
            for (int kx = 0; kx < kernel_; ++kx) {
              const Index ix = ox * stride_ - padding_ + kx;
              if (ix < 0 || ix >= x.width()) continue;
              const Scalar v = plane[iy * x.width() + ix];
              if (best_at < 0 || v > best) {
                best = v;
                best_at = iy * x.width() + ix;
              }
            }
          }
          y.data()[out_index] = best;
          if (keep) argmax_[static_cast<std::size_t>(out_index)] = base + best_at;
        }
      }
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> MaxPool2d<Scalar>::backward(const Tensor<Scalar>& grad_out) const {
  Tensor<Scalar> gx(input_shape_);
  for (Index i = 0; i < grad_out.size(); ++i) {
    gx.data()[argmax_[static_cast<std::size_t>(i)]] += grad_out.data()[i];
  }
  return gx;
}

// ---------------------------------------------------------------- AvgPool2d

template <typename Scalar>
Tensor<Scalar> AvgPool2d<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  const Index oh = x.height() / kernel_;
  const Index ow = x.width() / kernel_;
  if (oh == 0 || ow == 0) throw ShapeMismatch("avg-pool input too small: " + x.shape().str());
  Tensor<Scalar> y(x.batch(), x.channels(), oh, ow);
  const Scalar inv = Scalar(1) / Scalar(kernel_ * kernel_);
  for (Index nc = 0; nc < x.batch() * x.channels(); ++nc) {
    const Scalar* in = x.data() + nc * x.plane();
    Scalar* out = y.data() + nc * oh * ow;
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        Scalar acc = 0;
        for (int ky = 0; ky < kernel_; ++ky) {
          for (int kx = 0; kx < kernel_; ++kx) {
            acc += in[(oy * kernel_ + ky) * x.width() + ox * kernel_ + kx];
          }
        }
        out[oy * ow + ox] = acc * inv;
      }
    }
  }
  if (records(mode)) input_shape_ = x.shape();
  return y;
}

template <typename Scalar>
Tensor<Scalar> AvgPool2d<Scalar>::backward(const Tensor<Scalar>& grad_out) const {
  Tensor<Scalar> gx(input_shape_);
  const Index oh = grad_out.height();
  const Index ow = grad_out.width();
  const Scalar inv = Scalar(1) / Scalar(kernel_ * kernel_);
  for (Index nc = 0; nc < gx.batch() * gx.channels(); ++nc) {
    const Scalar* g = grad_out.data() + nc * oh * ow;
    Scalar* out = gx.data() + nc * gx.plane();
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        for (int ky = 0; ky < kernel_; ++ky) {
          for (int kx = 0; kx < kernel_; ++kx) {
            out[(oy * kernel_ + ky) * gx.width() + ox * kernel_ + kx] = g[oy * ow + ox] * inv;
          }
        }
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------- GlobalAvgPool

template <typename Scalar>
Tensor<Scalar> GlobalAvgPool<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  Tensor<Scalar> y(x.batch(), x.channels(), 1, 1);
  for (Index n = 0; n < x.batch(); ++n) {
    Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(y.sample_data(n), x.channels()) =
        x.sample(n).rowwise().mean();
  }
  if (records(mode)) input_shape_ = x.shape();
  return y;
}

template <typename Scalar>
Tensor<Scalar> GlobalAvgPool<Scalar>::backward(const Tensor<Scalar>& grad_out) const {
  Tensor<Scalar> gx(input_shape_);
  const Scalar inv = Scalar(1) / Scalar(gx.plane());
  for (Index n = 0; n < gx.batch(); ++n) {
    const Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> g(grad_out.sample_data(n),
                                                                       gx.channels());
    gx.sample(n).colwise() = g * inv;
  }
  return gx;
}

// ---------------------------------------------------------------- Linear

template <typename Scalar>
Linear<Scalar>::Linear(Index in_features, Index out_features)
    : in_(in_features),
      out_(out_features),
      weight_({out_features, in_features, 1, 1}),
      bias_({out_features, 1, 1, 1}) {}

template <typename Scalar>
void Linear<Scalar>::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
  for (Index i = 0; i < weight_.value.size(); ++i) {
    weight_.value.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  }
  for (Index i = 0; i < bias_.value.size(); ++i) {
    bias_.value.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  }
}

template <typename Scalar>
Tensor<Scalar> Linear<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  if (x.sample_size() != in_) {
    throw ShapeMismatch("linear layer expects " + std::to_string(in_) + " features, got " +
                        x.shape().str());
  }
  Tensor<Scalar> y(x.batch(), out_, 1, 1);
  const typename Tensor<Scalar>::ConstMatrixMap w(weight_.value.data(), out_, in_);
  y.rows().noalias() = x.rows() * w.transpose();
  y.rows().rowwise() +=
      Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias_.value.data(), out_);
  if (records(mode)) {
    input_ = x;
    input_shape_ = x.shape();
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> Linear<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  if (input_.empty()) throw InvalidArgument("linear backward without a recorded forward pass");
  typename Tensor<Scalar>::MatrixMap gw(weight_.grad.data(), out_, in_);
  const typename Tensor<Scalar>::ConstMatrixMap w(weight_.value.data(), out_, in_);
  gw.noalias() += grad_out.rows().transpose() * input_.rows();
  Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias_.grad.data(), out_) +=
      grad_out.rows().colwise().sum();
  Tensor<Scalar> gx(input_shape_);
  gx.rows().noalias() = grad_out.rows() * w;
  return gx;
}

template <typename Scalar>
void Linear<Scalar>::collect(const std::string& prefix, NamedTensors<Scalar>& out) {
  out.push_back({prefix + "weight", &weight_.value, &weight_.grad});
  out.push_back({prefix + "bias", &bias_.value, &bias_.grad});
}

// ---------------------------------------------------------------- BilinearResize

namespace {

struct Tap {
  Index i0, i1;
  double a;
};

std::vector<Tap> bilinear_taps(Index out_len, Index in_len) {
  std::vector<Tap> taps(static_cast<std::size_t>(out_len));
  const double scale = static_cast<double>(in_len) / static_cast<double>(out_len);
  for (Index o = 0; o < out_len; ++o) {
    double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in_len - 1));
    const Index i0 = static_cast<Index>(std::floor(s));
    const Index i1 = std::min<Index>(i0 + 1, in_len - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, s - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> BilinearResize<Scalar>::forward(const Tensor<Scalar>& x, Index out_h, Index out_w,
                                               Mode mode) {
  Tensor<Scalar> y(x.batch(), x.channels(), out_h, out_w);
  const auto ty = bilinear_taps(out_h, x.height());
  const auto tx = bilinear_taps(out_w, x.width());
  for (Index nc = 0; nc < x.batch() * x.channels(); ++nc) {
    const Scalar* in = x.data() + nc * x.plane();
    Scalar* out = y.data() + nc * out_h * out_w;
    for (Index oy = 0; oy < out_h; ++oy) {
      const Tap& vy = ty[static_cast<std::size_t>(oy)];
      for (Index ox = 0; ox < out_w; ++ox) {
        const Tap& vx = tx[static_cast<std::size_t>(ox)];
        const Scalar ay = static_cast<Scalar>(vy.a);
        const Scalar ax = static_cast<Scalar>(vx.a);
        const Scalar top = (1 - ax) * in[vy.i0 * x.width() + vx.i0] + ax * in[vy.i0 * x.width() + vx.i1];
        const Scalar bot = (1 - ax) * in[vy.i1 * x.width() + vx.i0] + ax * in[vy.i1 * x.width() + vx.i1];
        out[oy * out_w + ox] = (1 - ay) * top + ay * bot;
      }
    }
  }
  if (records(mode)) input_shape_ = x.shape();
  return y;
}

template <typename Scalar>
Tensor<Scalar> BilinearResize<Scalar>::backward(const Tensor<Scalar>& grad_out) const {
  Tensor<Scalar> gx(input_shape_);
  const Index out_h = grad_out.height();
  const Index out_w = grad_out.width();
  const auto ty = bilinear_taps(out_h, gx.height());
  const auto tx = bilinear_taps(out_w, gx.width());
  for (Index nc = 0; nc < gx.batch() * gx.channels(); ++nc) {
    const Scalar* g = grad_out.data() + nc * out_h * out_w;
    Scalar* out = gx.data() + nc * gx.plane();
    for (Index oy = 0; oy < out_h; ++oy) {
      const Tap& vy = ty[static_cast<std::size_t>(oy)];
      for (Index ox = 0; ox < out_w; ++ox) {
        const Tap& vx = tx[static_cast<std::size_t>(ox)];
        const Scalar ay = static_cast<Scalar>(vy.a);
        const Scalar ax = static_cast<Scalar>(vx.a);
        const Scalar v = g[oy * out_w + ox];
        out[vy.i0 * gx.width() + vx.i0] += (1 - ay) * (1 - ax) * v;
        out[vy.i0 * gx.width() + vx.i1] += (1 - ay) * ax * v;
        out[vy.i1 * gx.width() + vx.i0] += ay * (1 - ax) * v;
        out[vy.i1 * gx.width() + vx.i1] += ay * ax * v;
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------- concat

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.batch() != b.batch() || a.height() != b.height() || a.width() != b.width()) {
    throw ShapeMismatch("cannot concatenate " + a.shape().str() + " and " + b.shape().str());
  }
  Tensor<Scalar> out(a.batch(), a.channels() + b.channels(), a.height(), a.width());
  for (Index n = 0; n < a.batch(); ++n) {
    std::copy(a.sample_data(n), a.sample_data(n) + a.sample_size(), out.sample_data(n));
    std::copy(b.sample_data(n), b.sample_data(n) + b.sample_size(),
              out.sample_data(n) + a.sample_size());
  }
  return out;
}

template <typename Scalar>
void split_channels(const Tensor<Scalar>& x, Index channels, Tensor<Scalar>& head,
                    Tensor<Scalar>& tail) {
  head = Tensor<Scalar>(x.batch(), channels, x.height(), x.width());
  tail = Tensor<Scalar>(x.batch(), x.channels() - channels, x.height(), x.width());
  for (Index n = 0; n < x.batch(); ++n) {
    std::copy(x.sample_data(n), x.sample_data(n) + head.sample_size(), head.sample_data(n));
    std::copy(x.sample_data(n) + head.sample_size(), x.sample_data(n) + x.sample_size(),
              tail.sample_data(n));
  }
}

#define COVIDSCREEN_INSTANTIATE(S)                                                     \
  template class Conv2d<S>;                                                           \
  template class BatchNorm2d<S>;                                                      \
  template class ReLU<S>;                                                             \
  template class MaxPool2d<S>;                                                        \
  template class AvgPool2d<S>;                                                        \
  template class GlobalAvgPool<S>;                                                    \
  template class Linear<S>;                                                           \
  template class BilinearResize<S>;                                                   \
  template Tensor<S> concat_channels(const Tensor<S>&, const Tensor<S>&);             \
  template void split_channels(const Tensor<S>&, Index, Tensor<S>&, Tensor<S>&);

COVIDSCREEN_INSTANTIATE(float)
COVIDSCREEN_INSTANTIATE(double)

#undef COVIDSCREEN_INSTANTIATE

}  // namespace covidscreen::nn
