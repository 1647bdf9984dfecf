#include <gtest/gtest.h>

#include "covidscreen/core/tensor_file.hpp"
#include "covidscreen/explain/grad_cam.hpp"
#include "covidscreen/nn/checkpoint.hpp"
#include "covidscreen/preprocess/image_io.hpp"
#include "support.hpp"

using namespace covidscreen;
using namespace covidscreen::explain;
using covidscreen::testing::square_image;
using covidscreen::testing::TempDir;
using covidscreen::testing::tiny_spec;
using covidscreen::testing::with_constant_aux;

namespace {

std::vector<float> weights(nn::Network<float>& net) {
  std::vector<float> out;
  for (const auto& t : net.tensors()) out.insert(out.end(), t.value->data(), t.value->data() + t.value->size());
  return out;
}

Tensor<float>* find(nn::Network<float>& net, const std::string& name) {
  for (const auto& t : net.tensors()) {
    if (t.name == name) return t.value;
  }
  return nullptr;
}

// A CT network whose class scores depend on the input (random init) and an
// image that yields a non-degenerate COVID19 map.
struct Fixture {
  std::unique_ptr<nn::Network<float>> net = nn::make_network<float>(tiny_spec(nn::ModelKind::kCT), 17);
  preprocess::RasterImage image;
  Fixture() {
    Rng rng(5);
    image = square_image(rng, 64, 1);
  }
};

}  // namespace

TEST(GradCam, ShapesAndRange) {
  Fixture f;
  for (Label target : kAllLabels) {
    const CamResult cam = grad_cam(*f.net, f.image, target, "x");
    EXPECT_EQ(cam.heatmap.rows(), 8);
    EXPECT_EQ(cam.heatmap.cols(), 8);
    EXPECT_EQ(cam.upsampled.rows(), 64);
    EXPECT_EQ(cam.upsampled.cols(), 64);
    EXPECT_GE(cam.heatmap.minCoeff(), 0.0f);
    EXPECT_LE(cam.heatmap.maxCoeff(), 1.0f);
    EXPECT_GE(cam.upsampled.minCoeff(), 0.0f);
    EXPECT_LE(cam.upsampled.maxCoeff(), 1.0f);
    if (!cam.degenerate) {
      EXPECT_FLOAT_EQ(cam.heatmap.maxCoeff(), 1.0f);
    }
    EXPECT_EQ(cam.target_class, target);
    EXPECT_EQ(cam.image_id, "x");
  }
}

TEST(GradCam, NegativeWeightedSumGivesFlaggedZeroMap) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Constant(4, 16, 1.0);
  Eigen::MatrixXd g = Eigen::MatrixXd::Constant(4, 16, -0.5);
  const CamResult cam = cam_from_gradients(a, g, 4, 4, 32, 32);
  EXPECT_TRUE(cam.degenerate);
  EXPECT_EQ(cam.heatmap.maxCoeff(), 0.0f);
  EXPECT_EQ(cam.upsampled.maxCoeff(), 0.0f);
  EXPECT_EQ(cam.upsampled.rows(), 32);

  Fixture f;
  find(*f.net, "head.fc2.weight")->set_zero();
  EXPECT_TRUE(grad_cam(*f.net, f.image, Label::kCovid19).degenerate);
}

TEST(GradCam, WeightedSumByHand) {
  // Two channels on a 1x3 grid; alpha = (1, -1).
  Eigen::MatrixXd a(2, 3), g(2, 3);
  a << 1, 2, 3, 0, 0, 4;
  g << 1, 1, 1, -1, -1, -1;
  // sum = (1, 2, -1) -> relu (1, 2, 0) -> (0.5, 1, 0)
  const CamResult cam = cam_from_gradients(a, g, 1, 3, 1, 3);
  EXPECT_FALSE(cam.degenerate);
  EXPECT_FLOAT_EQ(cam.heatmap(0, 0), 0.5f);
  EXPECT_FLOAT_EQ(cam.heatmap(0, 1), 1.0f);
  EXPECT_FLOAT_EQ(cam.heatmap(0, 2), 0.0f);
}

TEST(GradCam, LeavesWeightsUnchanged) {
  Fixture f;
  const auto before = weights(*f.net);
  grad_cam(*f.net, f.image, Label::kCovid19);
  EXPECT_EQ(weights(*f.net), before);
  for (const auto& t : f.net->trainable()) EXPECT_EQ(t.grad->array().abs().maxCoeff(), 0.0f) << t.name;
}

TEST(GradCam, InvariantToOtherClassScoreOffsets) {
  Fixture f;
  const CamResult ref = grad_cam(*f.net, f.image, Label::kCovid19);
  Tensor<float>* bias = find(*f.net, "head.fc2.bias");
  ASSERT_NE(bias, nullptr);
  bias->data()[1] += 3.0f;
  bias->data()[2] -= 7.0f;
  const CamResult moved = grad_cam(*f.net, f.image, Label::kCovid19);
  EXPECT_EQ(ref.heatmap, moved.heatmap);
}

TEST(GradCam, LayerChoice) {
  Fixture f;
  bool compared = false;
  for (Label target : kAllLabels) {
    const CamResult backbone = grad_cam(*f.net, f.image, target, "x", CamLayer::kBackbone);
    const CamResult attention = grad_cam(*f.net, f.image, target, "x", CamLayer::kAttention);
    EXPECT_EQ(backbone.heatmap.rows(), attention.heatmap.rows());
    EXPECT_EQ(grad_cam(*f.net, f.image, target).heatmap, backbone.heatmap);
    if (backbone.degenerate) continue;
    EXPECT_NE(backbone.heatmap, attention.heatmap);
    compared = true;
  }
  EXPECT_TRUE(compared);
  EXPECT_EQ(f.net->last_backbone_output().channels(), f.net->feature_channels());
  EXPECT_EQ(parse_cam_layer("attention"), CamLayer::kAttention);
  EXPECT_THROW(parse_cam_layer("head"), InvalidArgument);
}

TEST(GradCam, CxrClasses) {
  auto net = nn::make_network<float>(with_constant_aux(tiny_spec(nn::ModelKind::kCXR)), 3);
  Rng rng(2);
  const auto img = square_image(rng, 64, 2);
  EXPECT_THROW(grad_cam(*net, img, Label::kOtherPneumonia), InvalidClass);
  const CamResult covid = grad_cam(*net, img, Label::kCovid19);
  const CamResult normal = grad_cam(*net, img, Label::kNormal);
  // The NORMAL score is the negated logit, so the two maps cannot both
  // light up the same cell.
  for (Eigen::Index i = 0; i < covid.heatmap.size(); ++i) {
    EXPECT_FALSE(covid.heatmap.data()[i] > 0.0f && normal.heatmap.data()[i] > 0.0f) << i;
  }
  EXPECT_FALSE(covid.degenerate && normal.degenerate);
}

TEST(GradCam, UpsampledPeakStaysNearGridPeak) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Heatmap grid(8, 8);
    // Background clutter below a single dominant cell.
    for (Eigen::Index i = 0; i < grid.size(); ++i) grid.data()[i] = static_cast<float>(rng.uniform(0.0, 0.5));
    const auto gr = static_cast<Eigen::Index>(rng.below(8));
    const auto gc = static_cast<Eigen::Index>(rng.below(8));
    grid(gr, gc) = 1.0f;
    Eigen::Index ur, uc;
    const Heatmap up = upsample(grid, 64, 64);
    up.maxCoeff(&ur, &uc);
    // Source cell centers sit at 8k + 3.5.
    EXPECT_LE(std::abs((ur - 3.5) / 8.0 - gr), 1.0);
    EXPECT_LE(std::abs((uc - 3.5) / 8.0 - gc), 1.0);
  }
}

TEST(Overlay, AlphaEndpointsAndDeterminism) {
  Fixture f;
  const CamResult cam = grad_cam(*f.net, f.image, Label::kCovid19);
  const auto src = f.image;
  EXPECT_EQ(render_overlay(src, cam, 0.0), src);
  const auto pure = render_overlay(src, cam, 1.0);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const auto c = jet(cam.upsampled(y, x));
      for (int k = 0; k < 3; ++k) ASSERT_EQ(pure.at(y, x, k), c[k]);
    }
  }
  const auto a = preprocess::encode_png(render_overlay(src, cam, 0.4));
  const auto b = preprocess::encode_png(render_overlay(src, grad_cam(*f.net, f.image, Label::kCovid19), 0.4));
  EXPECT_EQ(a, b);
  const preprocess::RasterImage small(32, 32, 3);
  EXPECT_THROW(render_overlay(small, cam, 0.5), ShapeMismatch);
  EXPECT_THROW(render_overlay(src, cam, 1.5), InvalidArgument);
  // Source-resolution rendering resizes the map instead.
  const preprocess::RasterImage big(100, 80, 1, 90);
  const auto on_src = render_overlay_on_source(big, cam, 0.0);
  EXPECT_EQ(on_src.height(), 100);
  EXPECT_EQ(on_src.at(50, 40, 2), 90);
}

TEST(Overlay, JetEndpoints) {
  EXPECT_EQ(jet(0.0f), (std::array<std::uint8_t, 3>{0, 0, 128}));
  EXPECT_EQ(jet(0.5f), (std::array<std::uint8_t, 3>{128, 255, 128}));
  EXPECT_EQ(jet(1.0f), (std::array<std::uint8_t, 3>{128, 0, 0}));
}

TEST(Overlay, HeatmapExport) {
  TempDir dir("heat");
  Heatmap m(2, 3);
  m << 0, 0.25f, 0.5f, 0.75f, 1, 0.125f;
  write_heatmap(dir / "h.cst", m);
  const auto t = read_tensor_file(dir / "h.cst");
  EXPECT_EQ(t.dims, (std::vector<std::uint64_t>{2, 3}));
  EXPECT_EQ(t.values, (std::vector<float>{0, 0.25f, 0.5f, 0.75f, 1, 0.125f}));
}
