#include "voxfuse/distill.hpp"
#include "voxfuse/ops.hpp"
#include "voxfuse/scene.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>

namespace vf {
namespace {

class FixedImage final : public SuperResDenoiser {
 public:
  explicit FixedImage(Tensor v) : v_(std::move(v)) {}
  Var denoise(Graph& g, Var, Var, int) const override { return g.constant(v_); }
  ParameterSet& params() override { return p_; }

 private:
  Tensor v_;
  ParameterSet p_;
};

class HalfOfNoisy final : public SuperResDenoiser {
 public:
  Var denoise(Graph&, Var noisy, Var, int) const override { return scale(noisy, 0.5); }
  ParameterSet& params() override { return p_; }

 private:
  ParameterSet p_;
};

SuperResUNet pass_through(Rng& rng) {
  UNetConfig cfg;
  cfg.channels = 3;
  cfg.width = 4;
  cfg.embedding = 4;
  cfg.zero_init_head = true;
  cfg.prefix = "superres";
  return SuperResUNet(cfg, rng);
}

// Brute force: every tile independently picks its best hypothesis.
double remix_oracle(const Tensor& r, std::span<const Tensor> hyps, Index patch) {
  const Index H = r.dim(0), W = r.dim(1);
  double total = 0.0;
  for (Index ty = 0; ty < H; ty += patch)
    for (Index tx = 0; tx < W; tx += patch) {
      double best = std::numeric_limits<double>::infinity();
      for (const Tensor& h : hyps) {
        double e = 0.0;
        for (Index y = ty; y < std::min(H, ty + patch); ++y)
          for (Index x = tx; x < std::min(W, tx + patch); ++x)
            for (Index c = 0; c < 3; ++c) {
              const double d = r[(y * W + x) * 3 + c] - h[(y * W + x) * 3 + c];
              e += d * d;
            }
        best = std::min(best, e);
      }
      total += best;
    }
  return total / static_cast<double>(r.size());
}

TEST(PatchRemix, SingleHypothesisIsMse) {
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const Tensor r = uniform({12, 10, 3}, rng, 0, 1), h = uniform({12, 10, 3}, rng, 0, 1);
    EXPECT_NEAR(patch_remix_loss(r, std::vector<Tensor>{h}, 4), mean_squared_error(r, h), 1e-12);
    EXPECT_NEAR(mse_distill_loss(r, h), patch_remix_loss(r, std::vector<Tensor>{h}, 5), 1e-12);
  }
}

TEST(PatchRemix, TilewiseMatchGivesZero) {
  Rng rng(2);
  const Tensor a = uniform({8, 8, 3}, rng, 0, 1), b = uniform({8, 8, 3}, rng, 0, 1);
  Tensor r = a;
  for (Index y = 0; y < 4; ++y)
    for (Index x = 4; x < 8; ++x)
      for (Index c = 0; c < 3; ++c) r[(y * 8 + x) * 3 + c] = b[(y * 8 + x) * 3 + c];
  const RemixResult out = patch_remix(r, std::vector<Tensor>{a, b}, 4);
  EXPECT_EQ(out.loss, 0.0);
  EXPECT_EQ(out.selection, (std::vector<Index>{0, 1, 0, 0}));
}

TEST(PatchRemix, ConstantExample) {
  const Tensor r({8, 8, 3}, 0.25);
  const std::vector<Tensor> hyps{Tensor({8, 8, 3}, 0.0), Tensor({8, 8, 3}, 1.0)};
  const RemixResult out = patch_remix(r, hyps, 4);
  EXPECT_NEAR(out.loss, 0.0625, 1e-15);
  for (Index s : out.selection) EXPECT_EQ(s, 0);
}

TEST(PatchRemix, MatchesBruteForceWithPartialTiles) {
  Rng rng(3);
  const Tensor r = uniform({11, 9, 3}, rng, 0, 1);
  std::vector<Tensor> hyps;
  for (int k = 0; k < 4; ++k) hyps.push_back(uniform({11, 9, 3}, rng, 0, 1));
  EXPECT_NEAR(patch_remix_loss(r, hyps, 4), remix_oracle(r, hyps, 4), 1e-12);
}

TEST(PatchRemix, TiesGoToLowestIndex) {
  const Tensor r({4, 4, 3}, 0.5);
  const std::vector<Tensor> hyps{Tensor({4, 4, 3}, 0.25), Tensor({4, 4, 3}, 0.75)};
  EXPECT_EQ(patch_remix(r, hyps, 2).selection, (std::vector<Index>(4, 0)));
}

TEST(PatchRemix, OrderInvariantAndMonotoneInK) {
  Rng rng(4);
  const Tensor r = uniform({8, 8, 3}, rng, 0, 1);
  std::vector<Tensor> hyps;
  for (int k = 0; k < 5; ++k) hyps.push_back(uniform({8, 8, 3}, rng, 0, 1));
  double previous = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k <= hyps.size(); ++k) {
    const double l = patch_remix_loss(r, std::span(hyps).first(k), 4);
    EXPECT_LE(l, previous);
    previous = l;
  }
  std::vector<Tensor> shuffled = hyps;
  std::reverse(shuffled.begin(), shuffled.end());
  std::swap(shuffled[0], shuffled[2]);
  EXPECT_EQ(patch_remix_loss(r, shuffled, 4), patch_remix_loss(r, hyps, 4));
}

TEST(PatchRemix, RejectsBadInput) {
  const Tensor r({4, 4, 3});
  EXPECT_THROW(patch_remix_loss(r, std::vector<Tensor>{}, 2), std::invalid_argument);
  EXPECT_THROW(patch_remix_loss(r, std::vector<Tensor>{Tensor({4, 5, 3})}, 2), ShapeError);
  EXPECT_THROW(patch_remix_loss(r, std::vector<Tensor>{r}, 0), std::invalid_argument);
}

TEST(PatchRemix, GradientFollowsSelectedHypothesis) {
  Rng rng(5);
  std::vector<Tensor> hyps{uniform({6, 6, 3}, rng, 0, 1), uniform({6, 6, 3}, rng, 0, 1)};
  Graph g;
  Var r = g.parameter("render", uniform({6, 6, 3}, rng, 0, 1));
  Var loss = patch_remix_loss(r, hyps, 3);
  EXPECT_LE(grad_check(g, loss, {}).max_relative_error, 1e-6);
  EXPECT_NEAR(g.value(loss).item(), patch_remix_loss(g.value(r), hyps, 3), 1e-15);
}

TEST(MseDistill, Examples) {
  const Tensor a({4, 4, 3}, 0.2);
  EXPECT_EQ(mse_distill_loss(a, a), 0.0);
  EXPECT_NEAR(mse_distill_loss(a, Tensor({4, 4, 3}, 0.7)), 0.25, 1e-15);
}

TEST(Sds, PerfectDenoiserGivesZeroGradient) {
  Rng rng(6);
  const Tensor render = uniform({4, 4, 3}, rng, 0, 1);
  const FixedImage oracle(to_chw(render));
  const NoiseSchedule s = make_linear_schedule(10, 0.1, 0.6);
  const Tensor g = sds_gradient(render, oracle, Tensor({2, 2, 3}, 0.5), 4, s, rng);
  for (Index i = 0; i < g.size(); ++i) EXPECT_EQ(g[i], 0.0);
}

TEST(Sds, ConstantOffsetScalesByWeight) {
  Rng rng(7);
  const Tensor render = uniform({4, 4, 3}, rng, 0, 1);
  Tensor shifted = to_chw(render);
  shifted.array() += 0.2;
  const FixedImage net(shifted);
  const NoiseSchedule s = make_linear_schedule(10, 0.1, 0.6);
  const Tensor g = sds_gradient(render, net, Tensor({2, 2, 3}, 0.5), 7, s, rng);
  for (Index i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], -(1.0 - s.alpha_bar(7)) * 0.2, 1e-15);
}

TEST(Sds, RecordedNoiseTrace) {
  const Tensor render({2, 2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.15, 0.25, 0.35});
  const HalfOfNoisy net;
  const NoiseSchedule s = make_linear_schedule(10, 0.1, 0.6);
  Rng rng(8), replay(8);
  const Tensor g = sds_gradient(render, net, Tensor({1, 1, 3}, 0.5), 3, s, rng);
  const Tensor eps = to_hwc(randn({3, 2, 2}, replay));
  const double ab = s.alpha_bar(3);
  for (Index i = 0; i < 12; ++i) {
    const double noisy = std::sqrt(ab) * render[i] + std::sqrt(1.0 - ab) * eps[i];
    EXPECT_NEAR(g[i], (1.0 - ab) * (render[i] - 0.5 * noisy), 1e-15);
  }
}

TEST(Sds, TimestepRange) {
  const NoiseSchedule s = make_linear_schedule(100, 1e-4, 0.02);
  Rng rng(9);
  int lo = 1000, hi = 0;
  for (int i = 0; i < 5000; ++i) {
    const int t = sample_sds_timestep(s, rng);
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  EXPECT_EQ(lo, 2);
  EXPECT_EQ(hi, 98);
}

HypothesisBank two_camera_bank(std::vector<Tensor> a, std::vector<Tensor> b) {
  HypothesisBank bank;
  bank.cameras = camera_ring({2, 4.0, 0.0, 0.0, 0.6}, a.front().dim(0), a.front().dim(1));
  bank.hypotheses = {std::move(a), std::move(b)};
  return bank;
}

TEST(Heatmap, IdenticalHypothesesGiveZero) {
  Rng rng(10);
  const Tensor h = uniform({5, 5, 3}, rng, 0, 1);
  const Tensor heat = variance_heatmap(two_camera_bank({h, h, h}, {h, h, h}), 1);
  EXPECT_EQ(heat.shape(), (Shape{5, 5}));
  for (Index i = 0; i < heat.size(); ++i) EXPECT_EQ(heat[i], 0.0);
}

TEST(Heatmap, TwoSampleVariance) {
  const Tensor z({3, 3, 3}, 0.0), o({3, 3, 3}, 1.0);
  const Tensor heat = variance_heatmap(two_camera_bank({z, o}, {z, z}), 0);
  for (Index i = 0; i < heat.size(); ++i) EXPECT_DOUBLE_EQ(heat[i], 0.5);
  EXPECT_THROW(variance_heatmap(two_camera_bank({z, o}, {z, z}), 2), std::out_of_range);
}

class BankFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(11);
    spec.resolution = 6;
    spec.channels = 4;
    grid = VoxelGrid{spec, uniform(spec.feature_shape(), rng, -1, 1)};
    decoder = make_decoder(4, {8}, rng);
    cams = camera_ring({3, 4.0, 0.1, 0.0, 0.7}, 8, 8);
    rc.samples_per_ray = 8;
  }
  GridSpec spec;
  VoxelGrid grid;
  FieldDecoder decoder;
  std::vector<Camera> cams;
  RenderConfig rc;
  NoiseSchedule sched = make_linear_schedule(10, 0.1, 0.6);
};

TEST_F(BankFixture, PassThroughHypothesesEqualUpsampledRender) {
  Rng rng(12);
  const SuperResUNet net = pass_through(rng);
  const HypothesisBank bank = build_hypothesis_bank(net, grid, decoder, cams, 5, 2, sched, rc, 3);
  ASSERT_EQ(bank.size(), 3);
  ASSERT_EQ(bank.k(), 5);
  for (Index c = 0; c < 3; ++c) {
    const Tensor low = render(grid, decoder, cams[static_cast<std::size_t>(c)].with_resolution(4, 4), rc).image;
    const Tensor up = to_hwc(upsample_bilinear(to_chw(low), 2));
    for (const Tensor& h : bank.hypotheses[static_cast<std::size_t>(c)]) test::expect_near(h, up, 1e-15);
    EXPECT_EQ(bank.conditioning[static_cast<std::size_t>(c)], low);
  }
}

TEST_F(BankFixture, StochasticDenoiserGivesVariance) {
  Rng rng(13);
  UNetConfig cfg;
  cfg.channels = 3;
  cfg.width = 4;
  cfg.embedding = 4;
  cfg.prefix = "superres";
  const SuperResUNet net(cfg, rng);
  const HypothesisBank bank = build_hypothesis_bank(net, grid, decoder, cams, 4, 2, sched, rc, 3);
  EXPECT_GT(variance_heatmap(bank, 0).array().maxCoeff(), 0.0);
  // Per-camera seeding: the first camera's stack does not depend on how many cameras follow.
  const HypothesisBank one = build_hypothesis_bank(net, grid, decoder, std::span(cams).first(1), 4, 2, sched, rc, 3);
  EXPECT_EQ(one.hypotheses[0], bank.hypotheses[0]);
}

TEST_F(BankFixture, ZeroStepsReturnUpsampledStart) {
  const HypothesisBank bank = two_camera_bank({Tensor({8, 8, 3}, 0.2)}, {Tensor({8, 8, 3}, 0.2)});
  DistillConfig cfg;
  cfg.resolution = 11;
  cfg.steps = 0;
  cfg.patch = 4;
  cfg.render = rc;
  const DistillResult out = distill(grid, decoder, bank, cfg);
  EXPECT_EQ(out.grid.features, upsample_grid(grid, 11).features);
  EXPECT_EQ(out.decoder.params, decoder.params);
  EXPECT_TRUE(out.losses.empty());
}

TEST_F(BankFixture, DistillReducesLossOnConsistentBank) {
  Rng rng(14);
  const VoxelGrid truth{spec, uniform(spec.feature_shape(), rng, -1, 1)};
  HypothesisBank bank;
  for (const Camera& c : camera_ring({6, 4.0, 0.2, 0.0, 0.7}, 8, 8)) {
    bank.cameras.push_back(c);
    bank.hypotheses.push_back(std::vector<Tensor>(2, render(truth, decoder, c, rc).image));
  }
  DistillConfig cfg;
  cfg.resolution = 6;
  cfg.steps = 60;
  cfg.patch = 4;
  cfg.learning_rate = 0.05;
  cfg.batch_cameras = 2;
  cfg.render = rc;
  const DistillResult out = distill(grid, decoder, bank, cfg);
  ASSERT_EQ(out.losses.size(), 60u);
  const double first = (out.losses[0] + out.losses[1] + out.losses[2]) / 3.0;
  const double last = (out.losses[57] + out.losses[58] + out.losses[59]) / 3.0;
  EXPECT_LT(last, 0.5 * first);
}

TEST_F(BankFixture, SeededDistillIsDeterministic) {
  HypothesisBank bank;
  for (const Camera& c : cams) bank.hypotheses.push_back({render(grid, decoder, c, rc).image}), bank.cameras.push_back(c);
  DistillConfig cfg;
  cfg.resolution = 6;
  cfg.steps = 5;
  cfg.patch = 4;
  cfg.tiles_per_camera = 2;
  cfg.render = rc;
  cfg.seed = 4;
  VoxelGrid start = grid;
  start.features.array() *= 0.5;
  EXPECT_EQ(distill(start, decoder, bank, cfg).grid.features, distill(start, decoder, bank, cfg).grid.features);
}

TEST_F(BankFixture, SdsNeedsPrior) {
  HypothesisBank bank = two_camera_bank({Tensor({8, 8, 3}, 0.2)}, {Tensor({8, 8, 3}, 0.2)});
  DistillConfig cfg;
  cfg.resolution = 6;
  cfg.steps = 1;
  cfg.loss = DistillLoss::kSds;
  cfg.render = rc;
  EXPECT_THROW(distill(grid, decoder, bank, cfg), std::invalid_argument);
}

TEST(DistillLossNames, RoundTrip) {
  for (DistillLoss l : {DistillLoss::kPatchRemix, DistillLoss::kMse, DistillLoss::kSds}) {
    EXPECT_EQ(parse_distill_loss(to_string(l)), l);
  }
  EXPECT_THROW(parse_distill_loss("l1"), ValidationError);
}

}  // namespace
}  // namespace vf
