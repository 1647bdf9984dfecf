#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <string>

#include "covidscreen/core/labels.hpp"
#include "covidscreen/nn/network.hpp"
#include "covidscreen/preprocess/image.hpp"

namespace covidscreen::explain {

using Heatmap = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct CamResult {
  Heatmap heatmap;    // feature-grid resolution, values in [0, 1]
  Heatmap upsampled;  // model input resolution, values in [0, 1]
  Label target_class = Label::kCovid19;
  std::string image_id;
  // The weighted activation sum was <= 0 everywhere; both maps are zero.
  bool degenerate = false;
};

// Feature map the heatmap is computed on: the backbone's final rectified
// output (gradients routed through the attention block) or the attention
// output itself.
enum class CamLayer { kBackbone, kAttention };

// Throws InvalidArgument for names other than "backbone" and "attention".
CamLayer parse_cam_layer(const std::string& name);

// Grad-CAM for a single preprocessed image (1, 3, H, W). The class score is
// the pre-activation logit; for the binary CXR head NORMAL uses the negated
// logit. InvalidClass when the head has no score for `target`. Weights are
// left untouched.
template <typename Scalar>
CamResult grad_cam(nn::Network<Scalar>& net, const Tensor<Scalar>& input, Label target,
                   CamLayer layer = CamLayer::kBackbone);

// The map itself: weights alpha_k are the spatial means of `grad` (C x HW)
// and the map is ReLU(sum_k alpha_k A_k) over `activations` (C x HW),
// min-max normalized, then upsampled to the input size.
CamResult cam_from_gradients(const Eigen::MatrixXd& activations, const Eigen::MatrixXd& grad, int height,
                             int width, int input_height, int input_width);

// Runs the EVAL preprocessing pipeline of the network's spec first.
template <typename Scalar>
CamResult grad_cam(nn::Network<Scalar>& net, const preprocess::RasterImage& image, Label target,
                   const std::string& image_id = {}, CamLayer layer = CamLayer::kBackbone);

// Bilinear resize with half-pixel centers.
Heatmap upsample(const Heatmap& map, int height, int width);

// Jet colormap of v in [0, 1] as RGB bytes.
std::array<std::uint8_t, 3> jet(float v);

// Alpha-blends the jet-colored map over the image (grayscale is expanded to
// RGB): out = (1 - alpha) * image + alpha * jet(map). ShapeMismatch when the
// map and image sizes differ.
preprocess::RasterImage render_overlay(const preprocess::RasterImage& image, const Heatmap& map, double alpha);
preprocess::RasterImage render_overlay(const preprocess::RasterImage& image, const CamResult& cam, double alpha);
// Resizes the upsampled map to the image's own size before blending.
preprocess::RasterImage render_overlay_on_source(const preprocess::RasterImage& image, const CamResult& cam,
                                                 double alpha);

// Raw map in the binary tensor container, dims (H, W).
void write_heatmap(const std::filesystem::path& path, const Heatmap& map);

}  // namespace covidscreen::explain
