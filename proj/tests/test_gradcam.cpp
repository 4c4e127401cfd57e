#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "attnsteer/error.hpp"
#include "attnsteer/gradcam.hpp"
#include "attnsteer/gradcheck.hpp"
#include "cam_oracle.hpp"

using namespace attnsteer;

namespace {

Tensor random_image(const ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> px(spec.channels * spec.height * spec.width);
  for (auto& v : px) v = u(rng);
  return Tensor({1, spec.channels, spec.height, spec.width}, px);
}

ModelSpec tiny_spec() {
  ModelSpec spec;
  spec.height = spec.width = 8;
  spec.conv_blocks = {{3, 3, 1, 1}, {2, 3, 1, 2}};
  spec.fc_widths = {5, 2};
  spec.num_attributes = 2;
  return spec;
}

std::pair<std::size_t, CamMap> first_nondegenerate(const ModelState& state, const Tensor& image) {
  for (std::size_t k = 0; k < state.spec.num_attributes; ++k) {
    auto cam = compute_cam(state, image, k);
    if (!cam.degenerate) return {k, cam};
  }
  return {0, compute_cam(state, image, 0)};
}

}  // namespace

TEST(GradCam, SingleChannelSumLogitIsActivationMap) {
  std::vector<double> a{0.0, 0.5, 2.0, 1.0, 0.25, 0.0, 4.0, 0.75, 1.5, 0.0, 0.0, 3.0, 0.1, 0.2, 0.3, 0.4};
  Tensor acts({1, 1, 4, 4}, a, true);
  Tensor logit = reshape(sum(acts), {1, 1});
  auto batch = cam_from_activations(acts, logit, Tensor({1, 1}, {1.0}), CamMode::report);
  auto cam = cam_row(batch, 0, 0);
  ASSERT_FALSE(cam.degenerate);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ(cam.grid[i], a[i] / 4.0);
}

TEST(GradCam, NegativeEvidenceIsDegenerate) {
  Tensor acts({1, 1, 4, 4}, std::vector<double>(16, 0.5), true);
  Tensor logit = reshape(neg(sum(acts)), {1, 1});
  auto cam = cam_row(cam_from_activations(acts, logit, Tensor({1, 1}, {1.0}), CamMode::report), 0, 0);
  EXPECT_TRUE(cam.degenerate);
  EXPECT_EQ(cam.grid, std::vector<double>(16, 0.0));
  EXPECT_EQ(cam.hard_set, std::vector<std::uint8_t>(16, 0));
}

TEST(GradCam, MatchesFiniteDifferenceOracle) {
  ModelSpec spec;
  for (std::uint64_t trial = 0; trial < 2; ++trial) {
    auto state = init_model(spec, 100 + trial);
    Tensor image = random_image(spec, 200 + trial);
    auto [attr, cam] = first_nondegenerate(state, image);
    ASSERT_FALSE(cam.degenerate);
    auto oracle = attnsteer::testing::fd_cam_grid(state, image, attr);
    EXPECT_LT(relative_error(cam.grid, oracle), 1e-3) << "trial " << trial;
  }
}

TEST(GradCam, InvariantToScalingTheAttributeRow) {
  ModelSpec spec;
  auto state = init_model(spec, 3);
  Tensor image = random_image(spec, 4);
  auto [attr, before] = first_nondegenerate(state, image);
  ASSERT_FALSE(before.degenerate);

  auto values = state.tensors();
  const std::size_t w_idx = values.size() - 2, b_idx = values.size() - 1;
  std::vector<double> w(values[w_idx].data().begin(), values[w_idx].data().end());
  std::vector<double> b(values[b_idx].data().begin(), values[b_idx].data().end());
  const std::size_t row = values[w_idx].size(1);
  for (std::size_t j = 0; j < row; ++j) w[attr * row + j] *= 3.7;
  b[attr] *= 3.7;
  values[w_idx] = Tensor(values[w_idx].shape(), w);
  values[b_idx] = Tensor(values[b_idx].shape(), b);

  auto after = compute_cam(state.with_values(values), image, attr);
  for (std::size_t i = 0; i < before.grid.size(); ++i) EXPECT_NEAR(before.grid[i], after.grid[i], 1e-9);
}

TEST(GradCam, ModesAgreeOnValues) {
  ModelSpec spec;
  auto state = init_model(spec, 11);
  Tensor image = random_image(spec, 12);
  auto trainable = state.trainable();
  for (std::size_t attr = 0; attr < spec.num_attributes; ++attr) {
    auto report = compute_cam(state, image, attr, CamMode::report);
    auto full = compute_cam(trainable, image, attr, CamMode::train_full);
    auto detached = compute_cam(trainable, image, attr, CamMode::train_detached);
    EXPECT_FALSE(report.grid_tensor.requires_grad());
    for (std::size_t i = 0; i < report.grid.size(); ++i) {
      EXPECT_NEAR(report.grid[i], full.grid[i], 1e-12);
      EXPECT_NEAR(report.grid[i], detached.grid[i], 1e-12);
    }
    if (!full.degenerate) {
      EXPECT_TRUE(full.grid_tensor.requires_grad());
      EXPECT_TRUE(detached.grid_tensor.requires_grad());
    }
  }
}

TEST(GradCam, Invariants) {
  ModelSpec spec;
  auto state = init_model(spec, 21);
  for (std::uint64_t s = 0; s < 4; ++s) {
    Tensor image = random_image(spec, 30 + s);
    for (std::size_t attr = 0; attr < spec.num_attributes; ++attr) {
      auto cam = compute_cam(state, image, attr);
      ASSERT_EQ(cam.grid.size(), 64u);
      double peak = 0.0;
      for (std::size_t i = 0; i < cam.grid.size(); ++i) {
        EXPECT_GE(cam.grid[i], 0.0);
        EXPECT_LE(cam.grid[i], 1.0);
        EXPECT_EQ(cam.hard_set[i] == 1, cam.grid[i] > 0.5);
        peak = std::max(peak, cam.grid[i]);
      }
      EXPECT_EQ(peak, cam.degenerate ? 0.0 : 1.0);
    }
  }
}

TEST(GradCam, BatchedRowsEqualSingleImageMaps) {
  ModelSpec spec;
  auto state = init_model(spec, 8);
  std::vector<Tensor> images;
  std::vector<double> pixels;
  for (std::uint64_t s = 0; s < 3; ++s) {
    images.push_back(random_image(spec, 50 + s));
    pixels.insert(pixels.end(), images.back().data().begin(), images.back().data().end());
  }
  Tensor batch({3, 1, spec.height, spec.width}, pixels);
  const std::vector<std::size_t> attrs{2, 0, 1};
  std::vector<double> target(3 * spec.num_attributes, 0.0);
  for (std::size_t b = 0; b < 3; ++b) target[b * spec.num_attributes + attrs[b]] = 1.0;

  auto trainable = state.trainable();
  GraphModeGuard guard(GraphMode::train);
  auto out = forward(trainable, batch);
  auto cams = cam_from_activations(out.last_conv_acts, out.logits, Tensor({3, spec.num_attributes}, target),
                                   CamMode::train_full);
  for (std::size_t b = 0; b < 3; ++b) {
    auto row = cam_row(cams, b, attrs[b]);
    auto single = compute_cam(state, images[b], attrs[b]);
    EXPECT_EQ(row.degenerate, single.degenerate);
    for (std::size_t i = 0; i < row.grid.size(); ++i) EXPECT_NEAR(row.grid[i], single.grid[i], 1e-12);
  }
}

TEST(GradCam, TrainFullGridDifferentiatesIntoConvParameters) {
  const ModelSpec spec = tiny_spec();
  auto state = init_model(spec, 6);
  Tensor image = random_image(spec, 7);
  auto [attr, probe] = first_nondegenerate(state, image);
  ASSERT_FALSE(probe.degenerate);

  std::vector<double> weights(probe.grid.size());
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = std::sin(1.0 + static_cast<double>(i));
  Tensor pattern({probe.height, probe.width}, weights);
  const std::size_t conv_params = 2 * spec.conv_blocks.size();
  auto params = state.tensors();

  ScalarFn f = [&](const std::vector<Tensor>& conv) {
    auto values = params;
    for (std::size_t i = 0; i < conv_params; ++i) values[i] = conv[i];
    auto cam = compute_cam(state.with_values(values), image, attr, CamMode::train_full);
    return sum(mul(cam.grid_tensor, pattern));
  };
  std::vector<Tensor> inputs(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(conv_params));
  for (auto& t : inputs) t = Tensor(t.shape(), {t.data().begin(), t.data().end()}, true);

  GraphModeGuard guard(GraphMode::train);
  auto grads = backward(f(inputs), inputs);
  double norm = 0.0;
  for (auto& g : grads)
    for (double v : g.data()) norm += v * v;
  EXPECT_GT(norm, 0.0);
  auto report = check_gradients(f, inputs, 1e-6);
  EXPECT_LT(report.max_rel_error, 1e-3);
}

TEST(GradCam, AttributeOutOfRange) {
  ModelSpec spec;
  auto state = init_model(spec, 1);
  EXPECT_THROW(compute_cam(state, random_image(spec, 1), 4), UsageError);
}

TEST(Heatmap, LutRunsRedToBlue) {
  const auto& lut = heatmap_lut();
  EXPECT_GT(lut[0][0], 100);
  EXPECT_EQ(lut[0][2], 0);
  EXPECT_EQ(lut[255][0], 0);
  EXPECT_GT(lut[255][2], 100);
}

TEST(Heatmap, DegenerateMapIsUniformLowestColor) {
  CamMap cam;
  cam.height = cam.width = 8;
  cam.grid.assign(64, 0.0);
  cam.hard_set.assign(64, 0);
  cam.degenerate = true;
  auto img = render_heatmap(cam, 64, 64);
  const auto& low = heatmap_lut()[0];
  for (std::size_t i = 0; i < 64 * 64; ++i) {
    for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(img.pixels[i * 3 + c], low[c]);
  }
}

TEST(Heatmap, HotCellFillsTopLeftBlock) {
  CamMap cam;
  cam.height = cam.width = 8;
  cam.grid.assign(64, 0.0);
  cam.grid[0] = 1.0;
  cam.hard_set.assign(64, 0);
  cam.hard_set[0] = 1;
  auto img = render_heatmap(cam, 64, 48);
  const auto& hot = heatmap_lut()[255];
  for (std::size_t y = 0; y < 64; ++y) {
    for (std::size_t x = 0; x < 48; ++x) {
      const bool in_block = y < 8 && x < 6;
      const bool is_hot = std::equal(hot.begin(), hot.end(), img.pixels.begin() + static_cast<std::ptrdiff_t>((y * 48 + x) * 3));
      EXPECT_EQ(in_block, is_hot) << y << "," << x;
    }
  }
}

TEST(Heatmap, GoldenBytes) {
  CamMap cam;
  cam.height = cam.width = 8;
  for (std::size_t i = 0; i < 64; ++i) cam.grid.push_back(static_cast<double>((i * 37) % 64) / 63.0);
  for (double v : cam.grid) cam.hard_set.push_back(v > 0.5);
  auto png = encode_png(render_heatmap(cam, 64, 64));
  EXPECT_EQ(sha256_hex(png), "4b673dcdd2952115f06c194e28b3b89679fd2d900b96f91c3835d610b952e831");
}

TEST(Heatmap, ZeroTargetRejected) {
  CamMap cam;
  cam.height = cam.width = 4;
  cam.grid.assign(16, 0.0);
  cam.hard_set.assign(16, 0);
  EXPECT_THROW(render_heatmap(cam, 0, 10), UsageError);
}

TEST(Heatmap, GrayAndJsonExports) {
  CamMap cam;
  cam.height = 2;
  cam.width = 3;
  cam.attribute = 1;
  cam.grid = {0.0, 0.25, 1.0, 0.5, 0.75, 0.1};
  cam.hard_set = {0, 0, 1, 0, 1, 0};
  auto gray = cam_to_gray(cam);
  EXPECT_EQ(gray.pixels, (std::vector<std::uint8_t>{0, 64, 255, 128, 191, 26}));
  auto pgm = encode_pgm(gray);
  EXPECT_EQ(std::string(pgm.begin(), pgm.begin() + 11), "P5\n3 2\n255\n");
  auto j = cam_to_json(cam);
  EXPECT_EQ(j["grid"][1][1], 0.75);
  EXPECT_EQ(j["hard_set"][0][2], 1);
  EXPECT_EQ(j["attribute"], 1);
}
