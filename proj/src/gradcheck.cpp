#include "voxfuse/gradcheck.hpp"

#include "voxfuse/distill.hpp"
#include "voxfuse/ops.hpp"
#include "voxfuse/scene.hpp"

#include <cmath>
#include <functional>

namespace vf {

namespace {

constexpr double kPrimitiveTolerance = 1e-6;
constexpr double kUnprojectionTolerance = 1e-5;
constexpr double kPipelineTolerance = 1e-4;

/// Uniform in [-2, 2], nudged away from zero so relu kinks stay farther than the FD step.
Tensor away_from_zero(const Shape& shape, Rng& rng) {
  Tensor t = uniform(shape, rng, -2.0, 2.0);
  for (double& v : t.values())
    if (std::abs(v) < 0.05) v = v < 0 ? -0.05 : 0.05;
  return t;
}

/// Scalar reduction with random coefficients so every output entry matters.
Var contract(Var v, Rng& rng) { return sum(v * v.graph->constant(randn(v.shape(), rng))); }

using Builder = std::function<Var(Graph&, Rng&)>;

GradcheckRow check(const std::string& name, double tolerance, const Builder& build, Rng& rng, double step) {
  Graph g;
  Var out = build(g, rng);
  const GradCheckResult r = grad_check(g, out, {}, step);
  return {name, r.max_relative_error, tolerance, r.checked_entries};
}

Var p(Graph& g, const std::string& name, Shape shape, Rng& rng) { return g.parameter(name, away_from_zero(shape, rng)); }

}  // namespace

std::vector<GradcheckRow> run_gradchecks(std::uint64_t seed, double step) {
  Rng rng(seed);
  std::vector<GradcheckRow> rows;
  auto add = [&](const std::string& name, double tol, const Builder& b) { rows.push_back(check(name, tol, b, rng, step)); };
  const double prim = kPrimitiveTolerance;

  add("add", prim, [](Graph& g, Rng& r) { return contract(p(g, "a", {3, 4}, r) + p(g, "b", {3, 4}, r), r); });
  add("subtract", prim, [](Graph& g, Rng& r) { return contract(p(g, "a", {5}, r) - p(g, "b", {5}, r), r); });
  add("multiply", prim, [](Graph& g, Rng& r) { return contract(p(g, "a", {3, 4}, r) * p(g, "b", {3, 4}, r), r); });
  add("scale_shift", prim, [](Graph& g, Rng& r) { return contract(shift(scale(p(g, "a", {6}, r), -1.7), 0.3), r); });
  add("scalar_mul", prim, [](Graph& g, Rng& r) { return contract(scalar_mul(p(g, "s", {}, r), p(g, "a", {2, 3}, r)), r); });
  add("matmul", prim, [](Graph& g, Rng& r) { return contract(matmul(p(g, "a", {3, 4}, r), p(g, "b", {4, 2}, r)), r); });
  add("relu", prim, [](Graph& g, Rng& r) { return contract(relu(p(g, "a", {4, 5}, r)), r); });
  add("sigmoid", prim, [](Graph& g, Rng& r) { return contract(sigmoid(p(g, "a", {4, 5}, r)), r); });
  add("silu", prim, [](Graph& g, Rng& r) { return contract(silu(p(g, "a", {4, 5}, r)), r); });
  add("softplus", prim, [](Graph& g, Rng& r) { return contract(softplus(p(g, "a", {4, 5}, r)), r); });
  add("square", prim, [](Graph& g, Rng& r) { return contract(square(p(g, "a", {7}, r)), r); });
  add("sum", prim, [](Graph& g, Rng&) { return sum(g.parameter("a", Tensor({3}, {1.0, -2.0, 0.5}))); });
  add("mean", prim, [](Graph& g, Rng& r) { return scale(mean(square(p(g, "a", {2, 3}, r))), 3.0); });
  add("mse", prim, [](Graph& g, Rng& r) { return mse(p(g, "a", {2, 3, 3}, r), p(g, "b", {2, 3, 3}, r)); });
  add("transpose", prim, [](Graph& g, Rng& r) { return contract(transpose(p(g, "a", {3, 5}, r)), r); });
  add("reshape", prim, [](Graph& g, Rng& r) { return contract(reshape(p(g, "a", {2, 6}, r), {3, 4}), r); });
  add("concat", prim, [](Graph& g, Rng& r) {
    return contract(concat({p(g, "a", {2, 3}, r), p(g, "b", {2, 1}, r)}, 1), r);
  });
  add("slice", prim, [](Graph& g, Rng& r) { return contract(slice(p(g, "a", {3, 6}, r), 1, 2, 5), r); });
  add("broadcast_rows", prim, [](Graph& g, Rng& r) { return contract(broadcast_rows(p(g, "v", {4}, r), 3), r); });
  add("broadcast_cols", prim, [](Graph& g, Rng& r) { return contract(broadcast_cols(p(g, "v", {4, 1}, r), 3), r); });
  add("add_channel_bias", prim, [](Graph& g, Rng& r) {
    return contract(add_channel_bias(p(g, "x", {3, 2, 2}, r), p(g, "b", {3}, r)), r);
  });
  add("upsample_nearest", prim, [](Graph& g, Rng& r) { return contract(upsample_nearest(p(g, "x", {2, 2, 3}, r), 2), r); });
  add("conv2d", prim, [](Graph& g, Rng& r) {
    return contract(conv2d(p(g, "x", {2, 5, 5}, r), p(g, "w", {3, 2, 3, 3}, r), 2, 1), r);
  });
  add("conv3d", prim, [](Graph& g, Rng& r) {
    return contract(conv3d(p(g, "x", {2, 4, 4, 4}, r), p(g, "w", {2, 2, 3, 3, 3}, r), 1, 1), r);
  });
  add("trilinear_gather", prim, [](Graph& g, Rng& r) {
    Var grid = p(g, "grid", {2, 4, 4, 4}, r);
    Var points = g.parameter("points", uniform({6, 3}, r, -0.95, 0.95));
    return contract(trilinear_gather(grid, points, Extent{}), r);
  });
  add("bilinear_gather", prim, [](Graph& g, Rng& r) {
    Var map = p(g, "map", {2, 5, 6}, r);
    Tensor pts({6, 2});
    for (Index i = 0; i < 6; ++i) {
      pts[2 * i] = std::uniform_real_distribution<double>(0.05, 4.95)(r);
      pts[2 * i + 1] = std::uniform_real_distribution<double>(0.05, 3.95)(r);
    }
    return contract(bilinear_gather(map, g.parameter("points", pts)), r);
  });
  add("composite", prim, [](Graph& g, Rng& r) {
    Var sigma = g.parameter("sigma", uniform({3, 5}, r, 0.0, 2.0));
    Var rgb = g.parameter("rgb", uniform({15, 3}, r, 0.0, 1.0));
    return contract(composite(sigma, rgb, {0.3, 0.1, 0.5}, Eigen::Vector3d(0.2, 0.4, 0.6)), r);
  });
  add("patch_remix_loss", prim, [](Graph& g, Rng& r) {
    std::vector<Tensor> hyps{uniform({6, 6, 3}, r, 0, 1), uniform({6, 6, 3}, r, 0, 1), uniform({6, 6, 3}, r, 0, 1)};
    return patch_remix_loss(g.parameter("render", uniform({6, 6, 3}, r, 0, 1)), hyps, 4);
  });

  add("render_loss", kPipelineTolerance, [](Graph& g, Rng& r) {
    GridSpec spec;
    spec.resolution = 4;
    spec.channels = 4;
    Var grid = g.parameter("grid", randn(spec.feature_shape(), r, 0.7));
    FieldDecoder dec = make_decoder(4, {8}, r);
    RenderConfig rc;
    rc.samples_per_ray = 8;
    const Camera cam = look_at_camera({0.6, 1.1, 3.4}, {0, 0, 0}, 0.7, 8, 8);
    return mse(render_image(g, grid, spec, dec, cam, rc), g.constant(uniform({8, 8, 3}, r, 0, 1)));
  });
  add("unprojection", kUnprojectionTolerance, [](Graph& g, Rng& r) {
    GridSpec spec;
    spec.resolution = 4;
    spec.channels = 4;
    const Encoder2D enc = make_encoder(4, 4, r);
    const Accumulator acc = make_accumulator(4, 8, r);
    std::vector<Var> maps;
    std::vector<Camera> cams;
    for (int i = 0; i < 2; ++i) {
      cams.push_back(look_at_camera({3.0 * std::sin(i * 1.3), 0.6, 3.0 * std::cos(i * 1.3)}, {0, 0, 0}, 0.8, 8, 8));
      maps.push_back(encode(g, enc, g.constant(uniform({3, 8, 8}, r, 0, 1))));
    }
    return mse(unproject(g, maps, cams, spec, acc), g.constant(randn(spec.feature_shape(), r)));
  });

  // The joint objective is built inside its own graph, so it is checked separately.
  {
    SceneSpec ss;
    ss.blobs = random_blobs(2, rng);
    ss.grid_resolution = 8;
    ss.channels = 4;
    ss.decoder_hidden = 8;
    ss.image_size = 16;
    ss.ring.count = 6;
    ss.render.samples_per_ray = 8;
    const SyntheticScene scene = gen_synthetic_scene(ss);
    ModelConfig mc;
    mc.grid_resolution = 4;
    mc.channels = 4;
    mc.volume_width = 4;
    mc.superres_width = 4;
    mc.encoder_width = 4;
    mc.accumulator_hidden = 8;
    mc.decoder_hidden = 8;
    mc.embedding = 4;
    const GeneratorModels models = make_models(mc, rng);
    const NoiseSchedule sched = make_linear_schedule(10, 0.1, 0.6);
    TrainingConfig tc;
    tc.source_frames = 2;
    tc.target_frames = 1;
    tc.empty_condition_probability = 0.0;
    tc.couple_superres = true;
    tc.render.samples_per_ray = 8;
    TrainingGraph tg = build_training_graph(scene.views, models, sched, tc, rng);
    const GradCheckResult r = grad_check(*tg.graph, tg.total, {}, step);
    rows.push_back({"joint_training_objective", r.max_relative_error, kPipelineTolerance, r.checked_entries});
  }
  return rows;
}

}  // namespace vf
