#include "voxfuse/generation.hpp"

#include "voxfuse/error.hpp"
#include "voxfuse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vf {

void MultiViewScene::validate() const {
  if (frames.size() != low_res.size()) throw std::invalid_argument("scene " + id + ": frame and low-res counts differ");
  if (frames.empty()) throw std::invalid_argument("scene " + id + " has no frames");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].image.shape() != frames.front().image.shape() ||
        low_res[i].image.shape() != low_res.front().image.shape()) {
      throw ShapeError("scene " + id + ": frames differ in size");
    }
  }
  const Index hi = frames.front().image.dim(0), lo = low_res.front().image.dim(0);
  if (hi % lo != 0 || frames.front().image.dim(1) != hi / lo * low_res.front().image.dim(1)) {
    throw ShapeError("scene " + id + ": high-res size is not an integer multiple of low-res size");
  }
}

std::vector<ParameterSet*> GeneratorModels::parameter_sets() {
  return {&volume->params(), &superres->params(), &decoder.params, &encoder.params, &accumulator.params};
}

NamedTensors GeneratorModels::all_parameters() const {
  NamedTensors out;
  for (const ParameterSet* set : const_cast<GeneratorModels*>(this)->parameter_sets()) out.insert(set->begin(), set->end());
  return out;
}

void GeneratorModels::load_parameters(const NamedTensors& values) {
  for (ParameterSet* set : parameter_sets()) {
    for (auto& [name, tensor] : *set) {
      auto it = values.find(name);
      if (it == values.end()) throw ValidationError("checkpoint lacks parameter " + name);
      require_shape(it->second.shape(), tensor.shape(), name.c_str());
      tensor = it->second;
    }
  }
}

GeneratorModels make_models(const ModelConfig& cfg, Rng& rng) {
  GeneratorModels m;
  m.grid.resolution = cfg.grid_resolution;
  m.grid.channels = cfg.channels;
  m.grid.validate();
  m.volume = std::make_unique<VolumeUNet>(
      UNetConfig{cfg.channels, cfg.volume_width, cfg.embedding, cfg.zero_init_heads, "volume"}, rng);
  m.superres = std::make_unique<SuperResUNet>(
      UNetConfig{3, cfg.superres_width, cfg.embedding, cfg.zero_init_heads, "superres"}, rng);
  m.decoder = make_decoder(cfg.channels, {cfg.decoder_hidden}, rng, "decoder");
  m.encoder = make_encoder(cfg.encoder_width, cfg.channels, rng, "encoder");
  m.accumulator = make_accumulator(cfg.channels, cfg.accumulator_hidden, rng, "accumulator");
  return m;
}

Var upsample_bilinear(Var image, Index factor) {
  const Shape s = image.shape();
  if (s.size() != 3) throw ShapeError("upsample_bilinear expects [C, h, w], got " + to_string(s));
  if (factor < 1) throw std::invalid_argument("upsample factor must be positive");
  const Index h = s[1], w = s[2], H = h * factor, W = w * factor;
  Tensor points({H * W, 2});
  const double f = static_cast<double>(factor);
  for (Index y = 0; y < H; ++y) {
    const double sy = std::clamp((y + 0.5) / f - 0.5, 0.0, static_cast<double>(h - 1));
    for (Index x = 0; x < W; ++x) {
      points[2 * (y * W + x)] = std::clamp((x + 0.5) / f - 0.5, 0.0, static_cast<double>(w - 1));
      points[2 * (y * W + x) + 1] = sy;
    }
  }
  Var samples = bilinear_gather(image, image.graph->constant(std::move(points)));
  return reshape(transpose(samples), {s[0], H, W});
}

Tensor upsample_bilinear(const Tensor& image, Index factor) {
  Graph g;
  Var out = upsample_bilinear(g.constant(image), factor);
  g.forward();
  return g.value(out);
}

Tensor bootstrap_clean_volume(const VolumeDenoiser& denoiser, const Tensor& cond, const NoiseSchedule& sched, Rng& rng) {
  const Tensor noise = randn(cond.shape(), rng);
  return denoise_value(denoiser, noise, cond, sched.steps());
}

void TrainingConfig::validate() const {
  if (target_frames < 1) throw std::invalid_argument("training needs at least one target frame");
  if (source_frames < 0) throw std::invalid_argument("source frame count must be non-negative");
  if (empty_condition_probability < 0.0 || empty_condition_probability > 1.0) {
    throw std::invalid_argument("empty-condition probability must lie in [0, 1]");
  }
  if (!(adam.learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (plateau_window < 1 || !(lr_decay >= 1.0)) throw std::invalid_argument("invalid plateau schedule");
  render.validate();
}

TrainingGraph build_training_graph(const MultiViewScene& scene, const GeneratorModels& models, const NoiseSchedule& sched,
                                   const TrainingConfig& cfg, Rng& rng) {
  cfg.validate();
  scene.validate();
  const Index needed = cfg.source_frames + cfg.target_frames;
  if (static_cast<Index>(scene.frames.size()) < needed) {
    throw std::invalid_argument("scene " + scene.id + " has " + std::to_string(scene.frames.size()) +
                                " frames, training needs " + std::to_string(needed));
  }
  const Index factor = scene.frames.front().image.dim(0) / scene.low_res.front().image.dim(0);

  std::vector<std::size_t> order(scene.frames.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const bool empty = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.empty_condition_probability;
  const Index sources = empty ? 0 : cfg.source_frames;

  TrainingGraph out;
  out.graph = std::make_unique<Graph>();
  out.source_count = sources;
  Graph& g = *out.graph;

  std::vector<Var> maps;
  std::vector<Tensor> images;
  std::vector<Camera> cameras;
  for (Index i = 0; i < sources; ++i) {
    const PosedImage& frame = scene.low_res[order[static_cast<std::size_t>(i)]];
    images.push_back(frame.image);
    maps.push_back(encode(g, models.encoder, g.constant(to_chw(frame.image))));
    cameras.push_back(frame.camera);
  }
  Var cond = unproject(g, maps, cameras, models.grid, models.accumulator);

  // Double denoising: the one-shot estimate from pure noise is evaluated outside this graph, so
  // it is a constant of the objective, then re-noised to step t.
  const Shape vshape = models.grid.feature_shape();
  const VoxelGrid cond_value = unproject(encode_frames(models.encoder, images), cameras, models.grid, models.accumulator);
  Var v0 = g.constant(bootstrap_clean_volume(*models.volume, cond_value.features, sched, rng));
  out.t_volume = sample_timestep(sched, rng);
  const double ab = sched.alpha_bar(out.t_volume);
  Tensor eps = randn(vshape, rng);
  eps.array() *= std::sqrt(1.0 - ab);
  Var vt = std::sqrt(ab) * v0 + g.constant(std::move(eps));
  Var vhat = models.volume->denoise(g, vt, cond, out.t_volume);

  std::optional<Var> loss3, loss2;
  out.t_image = sample_timestep(sched, rng);
  for (Index k = 0; k < cfg.target_frames; ++k) {
    const std::size_t idx = order[static_cast<std::size_t>(sources + k)];
    const PosedImage& low = scene.low_res[idx];
    Var render = render_image(g, vhat, models.grid, models.decoder, low.camera, cfg.render);
    Var l3 = mse(render, g.constant(low.image));
    loss3 = loss3 ? *loss3 + l3 : l3;

    Var up = upsample_bilinear(hwc_to_chw(render), factor);
    if (!cfg.couple_superres) up = stop_gradient(up);
    const Tensor target = to_chw(scene.frames[idx].image);
    const Tensor noisy = q_sample(target, out.t_image, randn(target.shape(), rng), sched);
    Var pred = models.superres->denoise(g, g.constant(noisy), up, out.t_image);
    Var l2 = mse(pred, g.constant(target));
    loss2 = loss2 ? *loss2 + l2 : l2;
  }
  const double inv = 1.0 / static_cast<double>(cfg.target_frames);
  out.loss_3d = scale(*loss3, inv);
  out.loss_2d = scale(*loss2, inv);
  out.total = training_weight(out.t_volume, sched, cfg.eq_weighting) * out.loss_3d +
              training_weight(out.t_image, sched, cfg.eq_weighting) * out.loss_2d;
  return out;
}

StepResult holo_training_step(const MultiViewScene& scene, GeneratorModels& models, const NoiseSchedule& sched,
                              const TrainingConfig& cfg, Rng& rng) {
  TrainingGraph tg = build_training_graph(scene, models, sched, cfg, rng);
  Graph& g = *tg.graph;
  g.forward();
  StepResult result;
  result.t_volume = tg.t_volume;
  result.t_image = tg.t_image;
  result.source_count = tg.source_count;
  result.loss_3d = g.value(tg.loss_3d).item();
  result.loss_2d = g.value(tg.loss_2d).item();
  if (!std::isfinite(result.loss_3d) || !std::isfinite(result.loss_2d)) {
    throw NumericalError("training loss is not finite (scene " + scene.id + ", t=" + std::to_string(result.t_volume) + ")");
  }
  result.grads = g.backward(tg.total);
  return result;
}

Trainer::Trainer(GeneratorModels& models, NoiseSchedule sched, TrainingConfig cfg)
    : models_(models), sched_(std::move(sched)), cfg_(std::move(cfg)) {
  cfg_.validate();
  adam_.config = cfg_.adam;
}

StepResult Trainer::step(const MultiViewScene& scene, Rng& rng) {
  StepResult r = holo_training_step(scene, models_, sched_, cfg_, rng);
  adam_step(models_.parameter_sets(), r.grads, adam_);
  window_sum_ += r.joint();
  if (++window_count_ == cfg_.plateau_window) {
    const double avg = window_sum_ / window_count_;
    if (previous_window_ > 0.0 && avg > previous_window_ * (1.0 - cfg_.plateau_tolerance)) {
      adam_.config.learning_rate /= cfg_.lr_decay;
    }
    previous_window_ = avg;
    window_sum_ = 0.0;
    window_count_ = 0;
  }
  return r;
}

Tensor super_resolve(const SuperResDenoiser& denoiser, const Tensor& low_res, Index factor, const NoiseSchedule& sched,
                     Rng& rng) {
  if (low_res.rank() != 3 || low_res.dim(2) != 3) throw ShapeError("super_resolve expects a [h, w, 3] image");
  const Tensor cond = upsample_bilinear(to_chw(low_res), factor);
  const Denoiser step = [&](const Tensor& x, int t) { return denoise_value(denoiser, x, cond, t); };
  Tensor out = ancestral_sample(step, cond.shape(), sched, rng);
  out.array() = out.array().min(1.0).max(0.0);
  return to_hwc(out);
}

SampledScene sample_scene(GeneratorModels& models, const NoiseSchedule& sched, std::span<const PosedImage> cond_frames,
                          std::span<const Camera> cameras, const RenderConfig& render_cfg, Rng& rng) {
  std::vector<Tensor> images;
  std::vector<Camera> cond_cameras;
  for (const PosedImage& f : cond_frames) {
    images.push_back(f.image);
    cond_cameras.push_back(f.camera);
  }
  const std::vector<Tensor> maps = encode_frames(models.encoder, images);
  const VoxelGrid cond = unproject(maps, cond_cameras, models.grid, models.accumulator);
  const Denoiser step = [&](const Tensor& x, int t) { return denoise_value(*models.volume, x, cond.features, t); };
  SampledScene out{VoxelGrid{models.grid, ancestral_sample(step, models.grid.feature_shape(), sched, rng)}, {}};
  for (const Camera& cam : cameras) out.renders.push_back(render(out.volume, models.decoder, cam, render_cfg).image);
  return out;
}

}  // namespace vf
