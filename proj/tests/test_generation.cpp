#include "voxfuse/generation.hpp"
#include "voxfuse/ops.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

namespace vf {
namespace {

class FixedVolume final : public VolumeDenoiser {
 public:
  explicit FixedVolume(Tensor v) : v_(std::move(v)) {}
  Var denoise(Graph& g, Var, Var, int) const override { return g.constant(v_); }
  ParameterSet& params() override { return p_; }

 private:
  Tensor v_;
  ParameterSet p_;
};

class FixedImage final : public SuperResDenoiser {
 public:
  explicit FixedImage(Tensor v) : v_(std::move(v)) {}
  Var denoise(Graph& g, Var, Var, int) const override { return g.constant(v_); }
  ParameterSet& params() override { return p_; }

 private:
  Tensor v_;
  ParameterSet p_;
};

ModelConfig small_models() {
  ModelConfig mc;
  mc.grid_resolution = 8;
  mc.channels = 4;
  mc.volume_width = 4;
  mc.superres_width = 4;
  mc.encoder_width = 4;
  mc.accumulator_hidden = 8;
  mc.decoder_hidden = 8;
  mc.embedding = 4;
  return mc;
}

TrainingConfig small_training() {
  TrainingConfig tc;
  tc.source_frames = 2;
  tc.target_frames = 2;
  tc.render.samples_per_ray = 8;
  return tc;
}

// Frames rendered from `truth`: low-res targets are direct renders, high-res frames are `hi`.
MultiViewScene scene_from(const VoxelGrid& truth, const FieldDecoder& dec, const RenderConfig& rc,
                          const std::function<Tensor(const Camera&)>& hi) {
  MultiViewScene s;
  s.id = "test";
  for (const Camera& c : camera_ring({6, 4.0, 0.2, 0.0, 0.7}, 16, 16)) {
    s.frames.push_back(make_posed_image(hi(c), c));
    const Camera low = c.with_resolution(8, 8);
    s.low_res.push_back(make_posed_image(render(truth, dec, low, rc).image, low));
  }
  return s;
}

TEST(Embedding, ShapeAndDistinctness) {
  const Tensor a = timestep_embedding(3, 8), b = timestep_embedding(4, 8);
  EXPECT_EQ(a.shape(), (Shape{8}));
  EXPECT_NE(a, b);
  EXPECT_NEAR(a[0], std::sin(3.0), 1e-15);
  EXPECT_NEAR(a[4], std::cos(3.0), 1e-15);
}

TEST(UpsampleBilinear, ConstantAndIdentity) {
  Rng rng(1);
  const Tensor c({2, 3, 3}, 0.4);
  const Tensor up = upsample_bilinear(c, 2);
  EXPECT_EQ(up.shape(), (Shape{2, 6, 6}));
  for (Index i = 0; i < up.size(); ++i) EXPECT_NEAR(up[i], 0.4, 1e-15);
  const Tensor r = uniform({3, 4, 5}, rng, 0, 1);
  test::expect_near(upsample_bilinear(r, 1), r, 1e-15);
}

TEST(Bootstrap, ZeroDenoiserGivesZeroVolume) {
  Rng rng(2);
  ModelConfig mc = small_models();
  mc.zero_init_heads = true;
  GeneratorModels m = make_models(mc, rng);
  const NoiseSchedule s = make_linear_schedule(10, 0.1, 0.6);
  const Tensor cond(m.grid.feature_shape());
  const Tensor v0 = bootstrap_clean_volume(*m.volume, cond, s, rng);
  for (Index i = 0; i < v0.size(); ++i) EXPECT_EQ(v0[i], 0.0);
  // Re-noising a zero volume leaves only the scaled noise.
  const Tensor eps = randn(cond.shape(), rng);
  const Tensor vt = q_sample(v0, 6, eps, s);
  for (Index i = 0; i < vt.size(); ++i) EXPECT_EQ(vt[i], std::sqrt(1.0 - s.alpha_bar(6)) * eps[i]);
}

TEST(Bootstrap, DeterministicForFixedSeed) {
  Rng init(3);
  GeneratorModels m = make_models(small_models(), init);
  const NoiseSchedule s = make_linear_schedule(10, 0.1, 0.6);
  const Tensor cond(m.grid.feature_shape());
  Rng a(7), b(7);
  EXPECT_EQ(bootstrap_clean_volume(*m.volume, cond, s, a), bootstrap_clean_volume(*m.volume, cond, s, b));
}

TEST(VolumeDenoiser, ConditioningIsAnIndependentInput) {
  Rng rng(4);
  GeneratorModels m = make_models(small_models(), rng);
  const Tensor vt = randn(m.grid.feature_shape(), rng);
  const Tensor c1 = randn(m.grid.feature_shape(), rng);
  Tensor c2 = c1;
  c2[17] += 0.5;
  const Tensor a = denoise_value(*m.volume, vt, c1, 5), b = denoise_value(*m.volume, vt, c2, 5);
  EXPECT_EQ(a.shape(), m.grid.feature_shape());
  EXPECT_GT((a.array() - b.array()).abs().maxCoeff(), 1e-9);
}

TEST(VolumeDenoiser, RejectsIndivisibleResolution) {
  Rng rng(5);
  UNetConfig cfg;
  cfg.channels = 4;
  cfg.width = 4;
  cfg.embedding = 4;
  VolumeUNet net(cfg, rng);
  GridSpec spec;
  spec.resolution = 6;
  spec.channels = 4;
  EXPECT_THROW(denoise_value(net, Tensor(spec.feature_shape()), Tensor(spec.feature_shape()), 1), ShapeError);
}

TEST(TrainingStep, DefaultBatchComposition) {
  const TrainingConfig tc;
  EXPECT_EQ(tc.source_frames, 15);
  EXPECT_EQ(tc.target_frames, 4);
  EXPECT_DOUBLE_EQ(tc.adam.learning_rate, 5e-5);
}

TEST(TrainingStep, OracleVolumeAndDecoderGiveZeroVolumeLoss) {
  Rng rng(6);
  GeneratorModels m = make_models(small_models(), rng);
  const TrainingConfig tc = small_training();
  const VoxelGrid truth{m.grid, uniform(m.grid.feature_shape(), rng, -1, 1)};
  const MultiViewScene scene = scene_from(truth, m.decoder, tc.render, [](const Camera&) { return Tensor({16, 16, 3}, 0.5); });
  m.volume = std::make_unique<FixedVolume>(truth.features);
  const NoiseSchedule s = make_linear_schedule(10, 0.1, 0.6);
  const StepResult r = holo_training_step(scene, m, s, tc, rng);
  EXPECT_LE(r.loss_3d, 1e-28);
  EXPECT_GT(r.loss_2d, 0.0);
}

TEST(TrainingStep, OracleSuperResolverGivesZeroImageLoss) {
  Rng rng(7);
  GeneratorModels m = make_models(small_models(), rng);
  const TrainingConfig tc = small_training();
  const VoxelGrid truth{m.grid, uniform(m.grid.feature_shape(), rng, -1, 1)};
  const MultiViewScene scene = scene_from(truth, m.decoder, tc.render, [](const Camera&) { return Tensor({16, 16, 3}, 0.3); });
  m.superres = std::make_unique<FixedImage>(Tensor({3, 16, 16}, 0.3));
  const NoiseSchedule s = make_linear_schedule(10, 0.1, 0.6);
  EXPECT_EQ(holo_training_step(scene, m, s, tc, rng).loss_2d, 0.0);
}

class TrainingFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(8);
    models = std::make_unique<GeneratorModels>(make_models(small_models(), rng));
    const VoxelGrid truth{models->grid, uniform(models->grid.feature_shape(), rng, -1, 1)};
    scene = scene_from(truth, models->decoder, tc.render,
                       [&](const Camera& c) { return render(truth, models->decoder, c, tc.render).image; });
  }
  TrainingConfig tc = small_training();
  NoiseSchedule sched = make_linear_schedule(10, 0.1, 0.6);
  std::unique_ptr<GeneratorModels> models;
  MultiViewScene scene;
};

TEST_F(TrainingFixture, EmptyConditioningProbability) {
  tc.empty_condition_probability = 1.0;
  Rng rng(1);
  EXPECT_EQ(holo_training_step(scene, *models, sched, tc, rng).source_count, 0);
  tc.empty_condition_probability = 0.0;
  EXPECT_EQ(holo_training_step(scene, *models, sched, tc, rng).source_count, 2);
}

TEST_F(TrainingFixture, GradientsReachEveryModel) {
  tc.empty_condition_probability = 0.0;
  Rng rng(2);
  const StepResult r = holo_training_step(scene, *models, sched, tc, rng);
  for (ParameterSet* set : models->parameter_sets())
    for (const auto& [name, value] : *set) {
      ASSERT_TRUE(r.grads.count(name)) << name;
      EXPECT_TRUE(r.grads.at(name).all_finite()) << name;
    }
  EXPECT_GT(r.grads.at("encoder.conv0.w").array().abs().maxCoeff(), 0.0);
  EXPECT_GT(r.grads.at("superres.head.w").array().abs().maxCoeff(), 0.0);
}

TEST_F(TrainingFixture, SeededStepsAreDeterministic) {
  Rng a(3), b(3);
  const StepResult x = holo_training_step(scene, *models, sched, tc, a);
  const StepResult y = holo_training_step(scene, *models, sched, tc, b);
  EXPECT_EQ(x.loss_3d, y.loss_3d);
  EXPECT_EQ(x.loss_2d, y.loss_2d);
  EXPECT_EQ(x.grads, y.grads);
}

TEST_F(TrainingFixture, TooFewFramesRejected) {
  tc.source_frames = 5;
  Rng rng(4);
  EXPECT_THROW(holo_training_step(scene, *models, sched, tc, rng), std::invalid_argument);
}

TEST_F(TrainingFixture, TrainerLowersLoss) {
  tc.adam.learning_rate = 3e-3;
  tc.empty_condition_probability = 0.0;
  Trainer trainer(*models, sched, tc);
  Rng rng(5);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 60; ++i) {
    const double j = trainer.step(scene, rng).joint();
    if (i < 10) first += j;
    if (i >= 50) last += j;
  }
  EXPECT_EQ(trainer.steps(), 60);
  EXPECT_LT(last, first);
}

TEST_F(TrainingFixture, PlateauDecaysLearningRate) {
  // A vanishing learning rate and a replayed seed make every step see the same loss.
  tc.adam.learning_rate = 1e-12;
  tc.plateau_window = 3;
  Trainer trainer(*models, sched, tc);
  auto run_window = [&] {
    for (int i = 0; i < 3; ++i) {
      Rng rng(6);
      trainer.step(scene, rng);
    }
  };
  run_window();
  EXPECT_DOUBLE_EQ(trainer.learning_rate(), 1e-12);
  run_window();
  EXPECT_DOUBLE_EQ(trainer.learning_rate(), 1e-13);
}

TEST(SuperResolve, PassThroughReturnsUpsampledConditioning) {
  Rng rng(9);
  UNetConfig cfg;
  cfg.channels = 3;
  cfg.width = 4;
  cfg.embedding = 4;
  cfg.zero_init_head = true;
  cfg.prefix = "superres";
  const SuperResUNet net(cfg, rng);
  const Tensor low = uniform({6, 6, 3}, rng, 0, 1);
  const NoiseSchedule s = make_linear_schedule(10, 0.1, 0.6);
  test::expect_near(super_resolve(net, low, 2, s, rng), to_hwc(upsample_bilinear(to_chw(low), 2)), 1e-15);
}

TEST(SuperResolve, StochasticAcrossSeeds) {
  Rng init(10);
  UNetConfig cfg;
  cfg.channels = 3;
  cfg.width = 4;
  cfg.embedding = 4;
  cfg.prefix = "superres";
  const SuperResUNet net(cfg, init);
  const Tensor low = uniform({4, 4, 3}, init, 0.2, 0.8);
  const NoiseSchedule s = make_linear_schedule(10, 0.1, 0.6);
  Rng a(1), b(2);
  EXPECT_NE(super_resolve(net, low, 2, s, a), super_resolve(net, low, 2, s, b));
}

TEST(SuperResolve, SingleStepTrace) {
  Rng init(11);
  UNetConfig cfg;
  cfg.channels = 3;
  cfg.width = 4;
  cfg.embedding = 4;
  cfg.prefix = "superres";
  const SuperResUNet net(cfg, init);
  const Tensor low = uniform({4, 4, 3}, init, 0.2, 0.8);
  const NoiseSchedule s(std::vector<double>{0.3});
  Rng a(5), replay(5);
  const Tensor out = super_resolve(net, low, 2, s, a);
  const Tensor cond = upsample_bilinear(to_chw(low), 2);
  Tensor expect = denoise_value(net, randn(cond.shape(), replay), cond, 1);
  expect.array() = expect.array().min(1.0).max(0.0);
  EXPECT_EQ(out, to_hwc(expect));
}

TEST(SampleScene, EmptyConditioningAndConstantDenoiser) {
  Rng rng(12);
  GeneratorModels m = make_models(small_models(), rng);
  const Tensor c(m.grid.feature_shape(), 0.25);
  m.volume = std::make_unique<FixedVolume>(c);
  const NoiseSchedule s = make_linear_schedule(10, 0.1, 0.6);
  const std::vector<Camera> cams = camera_ring({2, 4.0, 0.0, 0.0, 0.7}, 6, 6);
  RenderConfig rc;
  rc.samples_per_ray = 8;
  const SampledScene out = sample_scene(m, s, {}, cams, rc, rng);
  EXPECT_EQ(out.volume.features, c);
  ASSERT_EQ(out.renders.size(), 2u);
  EXPECT_EQ(out.renders[1], render(VoxelGrid{m.grid, c}, m.decoder, cams[1], rc).image);
}

TEST(SampleScene, SingleStepEqualsBootstrap) {
  Rng init(13);
  GeneratorModels m = make_models(small_models(), init);
  const NoiseSchedule s(std::vector<double>{0.4});
  Rng a(21), b(21);
  const SampledScene out = sample_scene(m, s, {}, {}, RenderConfig{}, a);
  EXPECT_EQ(out.volume.features, bootstrap_clean_volume(*m.volume, Tensor(m.grid.feature_shape()), s, b));
}

TEST(SampleScene, ConditionedOnFrames) {
  Rng rng(14);
  GeneratorModels m = make_models(small_models(), rng);
  const NoiseSchedule s = make_linear_schedule(4, 0.2, 0.6);
  std::vector<PosedImage> frames;
  for (const Camera& c : camera_ring({3, 4.0, 0.0, 0.0, 0.7}, 8, 8)) frames.push_back(make_posed_image(uniform({8, 8, 3}, rng, 0, 1), c));
  Rng a(1), b(1);
  const SampledScene x = sample_scene(m, s, frames, {}, RenderConfig{}, a);
  const SampledScene y = sample_scene(m, s, std::span(frames).first(1), {}, RenderConfig{}, b);
  EXPECT_TRUE(x.volume.features.all_finite());
  EXPECT_NE(x.volume.features, y.volume.features);
}

}  // namespace
}  // namespace vf
