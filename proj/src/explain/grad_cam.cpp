#include "covidscreen/explain/grad_cam.hpp"

#include <algorithm>
#include <cmath>

#include "covidscreen/core/error.hpp"
#include "covidscreen/core/tensor_file.hpp"
#include "covidscreen/preprocess/image_io.hpp"
#include "covidscreen/preprocess/pipeline.hpp"
#include "covidscreen/train/dataset.hpp"

namespace covidscreen::explain {

namespace {

// Gradient seed selecting the class score in the logits.
template <typename Scalar>
Tensor<Scalar> score_seed(const nn::Network<Scalar>& net, Label target) {
  const auto& spec = net.spec();
  Tensor<Scalar> seed(1, spec.outputs, 1, 1);
  if (spec.kind == nn::ModelKind::kCT) {
    seed(0, label_index(target), 0, 0) = Scalar(1);
  } else if (spec.kind == nn::ModelKind::kCXR) {
    if (target == Label::kOtherPneumonia) {
      throw InvalidClass("the CXR model scores only COVID19 and NORMAL");
    }
    seed(0, 0, 0, 0) = target == Label::kCovid19 ? Scalar(1) : Scalar(-1);
  } else {
    throw InvalidClass("auxiliary extractors have no screening classes");
  }
  return seed;
}

}  // namespace

CamLayer parse_cam_layer(const std::string& name) {
  if (name == "backbone") return CamLayer::kBackbone;
  if (name == "attention") return CamLayer::kAttention;
  throw InvalidArgument("unknown CAM layer '" + name + "' (expected backbone or attention)");
}

template <typename Scalar>
CamResult grad_cam(nn::Network<Scalar>& net, const Tensor<Scalar>& input, Label target, CamLayer layer) {
  if (input.batch() != 1) throw ShapeMismatch("grad_cam expects a single image, got " + input.shape().str());
  const Tensor<Scalar> seed = score_seed(net, target);
  const bool backbone = layer == CamLayer::kBackbone;
  const Tensor<Scalar> feats = net.features(input, backbone ? nn::Mode::kInferRecord : nn::Mode::kInfer);
  net.head(feats, nn::Mode::kInferRecord);
  Tensor<Scalar> da = net.head_backward(seed);
  if (backbone) da = net.attention_backward(da);
  nn::zero_grads(net.attention_and_head());
  const Tensor<Scalar>& a = backbone ? net.last_backbone_output() : feats;

  CamResult out = cam_from_gradients(a.sample(0).template cast<double>(), da.sample(0).template cast<double>(),
                                     static_cast<int>(a.height()), static_cast<int>(a.width()),
                                     static_cast<int>(input.height()), static_cast<int>(input.width()));
  out.target_class = target;
  return out;
}

CamResult cam_from_gradients(const Eigen::MatrixXd& activations, const Eigen::MatrixXd& grad, int height,
                             int width, int input_height, int input_width) {
  if (activations.rows() != grad.rows() || activations.cols() != grad.cols() ||
      activations.cols() != static_cast<Eigen::Index>(height) * width) {
    throw ShapeMismatch("activation and gradient maps disagree");
  }
  const Eigen::VectorXd alpha = grad.rowwise().mean();
  const Eigen::RowVectorXd sum = alpha.transpose() * activations;

  CamResult out;
  out.heatmap = Heatmap::Zero(height, width);
  const double peak = sum.maxCoeff();
  if (!(peak > 0.0)) {
    out.degenerate = true;
  } else {
    const Eigen::RowVectorXd relu = sum.cwiseMax(0.0);
    const double lo = relu.minCoeff();
    const double range = peak - lo;
    for (Eigen::Index i = 0; i < relu.size(); ++i) {
      // A flat positive map carries no localization; it is shown uniformly.
      out.heatmap.data()[i] = range > 0.0 ? static_cast<float>((relu[i] - lo) / range) : 1.0f;
    }
  }
  out.upsampled = upsample(out.heatmap, input_height, input_width);
  return out;
}

template <typename Scalar>
CamResult grad_cam(nn::Network<Scalar>& net, const preprocess::RasterImage& image, Label target,
                   const std::string& image_id, CamLayer layer) {
  Rng unused(0);
  const auto x = preprocess::run_pipeline(image, preprocess::PipelineMode::kEval, unused, net.spec().preprocess);
  CamResult r = grad_cam(net, train::to_tensor<Scalar>(x.values), target, layer);
  r.image_id = image_id;
  return r;
}

Heatmap upsample(const Heatmap& map, int height, int width) {
  preprocess::Image<float> src(static_cast<int>(map.rows()), static_cast<int>(map.cols()), 1);
  std::copy(map.data(), map.data() + map.size(), src.data());
  const auto dst = preprocess::resize(src, preprocess::TargetSize{height, width, 1});
  Heatmap out(height, width);
  std::copy(dst.data(), dst.data() + dst.size(), out.data());
  return out.cwiseMax(0.0f).cwiseMin(1.0f);
}

std::array<std::uint8_t, 3> jet(float v) {
  const double x = std::clamp(static_cast<double>(v), 0.0, 1.0);
  auto channel = [x](double center) {
    return preprocess::saturate_u8(255.0 * std::clamp(1.5 - std::abs(4.0 * x - center), 0.0, 1.0));
  };
  return {channel(3.0), channel(2.0), channel(1.0)};
}

preprocess::RasterImage render_overlay(const preprocess::RasterImage& image, const Heatmap& map, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("alpha must lie in [0, 1]");
  if (map.rows() != image.height() || map.cols() != image.width()) {
    throw ShapeMismatch("heatmap is " + std::to_string(map.rows()) + "x" + std::to_string(map.cols()) +
                        " but the image is " + std::to_string(image.height()) + "x" +
                        std::to_string(image.width()));
  }
  const preprocess::RasterImage rgb = preprocess::to_rgb(image);
  preprocess::RasterImage out(rgb.height(), rgb.width(), 3);
  for (int y = 0; y < rgb.height(); ++y) {
    for (int x = 0; x < rgb.width(); ++x) {
      const auto color = jet(map(y, x));
      for (int c = 0; c < 3; ++c) {
        out.at(y, x, c) = preprocess::saturate_u8((1.0 - alpha) * rgb.at(y, x, c) + alpha * color[c]);
      }
    }
  }
  return out;
}

preprocess::RasterImage render_overlay(const preprocess::RasterImage& image, const CamResult& cam, double alpha) {
  return render_overlay(image, cam.upsampled, alpha);
}

preprocess::RasterImage render_overlay_on_source(const preprocess::RasterImage& image, const CamResult& cam,
                                                 double alpha) {
  return render_overlay(image, upsample(cam.upsampled, image.height(), image.width()), alpha);
}

void write_heatmap(const std::filesystem::path& path, const Heatmap& map) {
  const std::array<std::uint64_t, 2> dims{static_cast<std::uint64_t>(map.rows()),
                                          static_cast<std::uint64_t>(map.cols())};
  write_tensor_file(path, dims, std::span<const float>(map.data(), static_cast<std::size_t>(map.size())));
}

template CamResult grad_cam(nn::Network<float>&, const Tensor<float>&, Label, CamLayer);
template CamResult grad_cam(nn::Network<double>&, const Tensor<double>&, Label, CamLayer);
template CamResult grad_cam(nn::Network<float>&, const preprocess::RasterImage&, Label, const std::string&,
                            CamLayer);
template CamResult grad_cam(nn::Network<double>&, const preprocess::RasterImage&, Label, const std::string&,
                            CamLayer);

}  // namespace covidscreen::explain
