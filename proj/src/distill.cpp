#include "voxfuse/distill.hpp"

#include "voxfuse/error.hpp"
#include "voxfuse/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace vf {

void HypothesisBank::validate() const {
  if (cameras.empty()) throw ValidationError("hypothesis bank has no cameras");
  if (hypotheses.size() != cameras.size()) throw ValidationError("hypothesis bank needs one stack per camera");
  if (!conditioning.empty() && conditioning.size() != cameras.size()) {
    throw ValidationError("hypothesis bank conditioning must cover every camera");
  }
  const Index kk = k();
  if (kk < 1) throw ValidationError("hypothesis bank needs K >= 1");
  const Shape shape = hypotheses.front().front().shape();
  if (shape.size() != 3 || shape[2] != 3) throw ShapeError("hypotheses must be [H, W, 3] images");
  for (std::size_t c = 0; c < cameras.size(); ++c) {
    if (static_cast<Index>(hypotheses[c].size()) != kk) {
      throw ValidationError("camera " + std::to_string(c) + " has " + std::to_string(hypotheses[c].size()) +
                            " hypotheses, expected " + std::to_string(kk));
    }
    for (const Tensor& h : hypotheses[c]) require_shape(h.shape(), shape, "hypothesis");
    if (cameras[c].height != shape[0] || cameras[c].width != shape[1]) {
      throw ShapeError("camera " + std::to_string(c) + " resolution differs from its hypotheses");
    }
  }
}

namespace {

Rng camera_rng(std::uint64_t seed, std::size_t camera) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(camera)};
  return Rng(seq);
}

Tensor crop(const Tensor& img, Index y0, Index x0, Index h, Index w) {
  const Index W = img.dim(1), C = img.dim(2);
  Tensor out({h, w, C});
  for (Index y = 0; y < h; ++y) {
    const double* src = img.data() + ((y0 + y) * W + x0) * C;
    std::copy(src, src + w * C, out.data() + y * w * C);
  }
  return out;
}

/// Stacks square tiles vertically into [n * p, p, C].
Tensor stack_tiles(const Tensor& img, std::span<const Index> tiles, Index patch) {
  const Index cols = img.dim(1) / patch, C = img.dim(2);
  Tensor out({static_cast<Index>(tiles.size()) * patch, patch, C});
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const Tensor t = crop(img, tiles[i] / cols * patch, tiles[i] % cols * patch, patch, patch);
    std::copy(t.data(), t.data() + t.size(), out.data() + static_cast<Index>(i) * t.size());
  }
  return out;
}

void check_pair(const Tensor& render, std::span<const Tensor> hypotheses, Index patch) {
  if (hypotheses.empty()) throw std::invalid_argument("patch remix needs at least one hypothesis");
  if (patch < 1) throw std::invalid_argument("patch size must be positive");
  if (render.rank() != 3) throw ShapeError("patch remix expects [H, W, C] images");
  for (const Tensor& h : hypotheses) require_shape(h.shape(), render.shape(), "hypothesis");
}

class PatchRemixOp final : public Op {
 public:
  PatchRemixOp(std::vector<Tensor> hypotheses, Index patch) : hyps_(std::move(hypotheses)), patch_(patch) {}

  std::string_view name() const override { return "patch_remix_loss"; }

  Shape output_shape(std::span<const Shape> in) const override {
    if (in[0].size() != 3) throw ShapeError("patch_remix_loss: render must be [H, W, C]");
    if (hyps_.empty()) throw std::invalid_argument("patch_remix_loss needs at least one hypothesis");
    for (const Tensor& h : hyps_) require_shape(h.shape(), in[0], "hypothesis");
    return {};
  }

  Tensor forward(std::span<const Tensor* const> in) override {
    RemixResult r = patch_remix(*in[0], hyps_, patch_);
    selection_ = std::move(r.selection);
    return Tensor::scalar(r.loss);
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (!grads[0]) return;
    const Tensor& render = *in[0];
    const Index H = render.dim(0), W = render.dim(1), C = render.dim(2);
    const Index cols = (W + patch_ - 1) / patch_;
    const double factor = 2.0 * g.item() / static_cast<double>(render.size());
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        const Tensor& h = hyps_[static_cast<std::size_t>(selection_[static_cast<std::size_t>(y / patch_ * cols + x / patch_)])];
        for (Index c = 0; c < C; ++c) {
          const Index i = (y * W + x) * C + c;
          (*grads[0])[i] += factor * (render[i] - h[i]);
        }
      }
  }

 private:
  std::vector<Tensor> hyps_;
  Index patch_;
  std::vector<Index> selection_;
};

/// Scalar sink whose gradient is supplied after the forward pass.
class DeferredGradientOp final : public Op {
 public:
  explicit DeferredGradientOp(std::shared_ptr<Tensor> grad) : grad_(std::move(grad)) {}
  std::string_view name() const override { return "deferred_gradient"; }
  Shape output_shape(std::span<const Shape>) const override { return {}; }
  Tensor forward(std::span<const Tensor* const>) override { return Tensor::scalar(0.0); }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (!grads[0]) return;
    require_shape(grad_->shape(), in[0]->shape(), "deferred gradient");
    grads[0]->array() += g.item() / static_cast<double>(grad_->size()) * grad_->array();
  }

 private:
  std::shared_ptr<Tensor> grad_;
};

}  // namespace

HypothesisBank build_hypothesis_bank(const SuperResDenoiser& superres, const VoxelGrid& volume,
                                     const FieldDecoder& decoder, std::span<const Camera> cameras, Index k,
                                     Index factor, const NoiseSchedule& sched, const RenderConfig& render_cfg,
                                     std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("hypothesis bank needs K >= 1");
  HypothesisBank bank;
  for (std::size_t c = 0; c < cameras.size(); ++c) {
    const Camera& cam = cameras[c];
    if (cam.height % factor != 0 || cam.width % factor != 0) throw ShapeError("camera size not divisible by factor");
    Tensor low = render(volume, decoder, cam.with_resolution(cam.height / factor, cam.width / factor), render_cfg).image;
    Rng rng = camera_rng(seed, c);
    std::vector<Tensor> stack;
    for (Index i = 0; i < k; ++i) stack.push_back(super_resolve(superres, low, factor, sched, rng));
    bank.cameras.push_back(cam);
    bank.hypotheses.push_back(std::move(stack));
    bank.conditioning.push_back(std::move(low));
  }
  bank.validate();
  return bank;
}

RemixResult patch_remix(const Tensor& render, std::span<const Tensor> hypotheses, Index patch) {
  check_pair(render, hypotheses, patch);
  const Index H = render.dim(0), W = render.dim(1), C = render.dim(2);
  const Index rows = (H + patch - 1) / patch, cols = (W + patch - 1) / patch;
  RemixResult out;
  out.selection.reserve(static_cast<std::size_t>(rows * cols));
  double total = 0.0;
  for (Index ty = 0; ty < rows; ++ty)
    for (Index tx = 0; tx < cols; ++tx) {
      const Index y1 = std::min(H, (ty + 1) * patch), x1 = std::min(W, (tx + 1) * patch);
      double best = 0.0;
      Index best_k = -1;
      for (std::size_t k = 0; k < hypotheses.size(); ++k) {
        const Tensor& h = hypotheses[k];
        double sse = 0.0;
        for (Index y = ty * patch; y < y1; ++y)
          for (Index i = (y * W + tx * patch) * C; i < (y * W + x1) * C; ++i) {
            const double d = render[i] - h[i];
            sse += d * d;
          }
        if (best_k < 0 || sse < best) {
          best = sse;
          best_k = static_cast<Index>(k);
        }
      }
      out.selection.push_back(best_k);
      total += best;
    }
  out.loss = total / static_cast<double>(render.size());
  return out;
}

double patch_remix_loss(const Tensor& render, std::span<const Tensor> hypotheses, Index patch) {
  return patch_remix(render, hypotheses, patch).loss;
}

Var patch_remix_loss(Var render, std::vector<Tensor> hypotheses, Index patch) {
  if (patch < 1) throw std::invalid_argument("patch size must be positive");
  return render.graph->emplace<PatchRemixOp>({render}, std::move(hypotheses), patch);
}

double mse_distill_loss(const Tensor& render, const Tensor& hypothesis) {
  return mean_squared_error(render, hypothesis);
}

Var mse_distill_loss(Var render, const Tensor& hypothesis) {
  return mse(render, render.graph->constant(hypothesis));
}

Tensor sds_gradient(const Tensor& render, const SuperResDenoiser& superres, const Tensor& low_res_cond, int t,
                    const NoiseSchedule& sched, Rng& rng) {
  if (render.rank() != 3 || low_res_cond.rank() != 3) throw ShapeError("sds_gradient expects [H, W, 3] images");
  if (t < 1 || t > sched.steps()) throw std::out_of_range("sds timestep out of range");
  const Index factor = render.dim(0) / low_res_cond.dim(0);
  if (factor < 1 || low_res_cond.dim(0) * factor != render.dim(0) || low_res_cond.dim(1) * factor != render.dim(1)) {
    throw ShapeError("sds conditioning size is not an integer fraction of the render size");
  }
  const Tensor x = to_chw(render);
  const Tensor noisy = q_sample(x, t, randn(x.shape(), rng), sched);
  const Tensor pred = denoise_value(superres, noisy, upsample_bilinear(to_chw(low_res_cond), factor), t);
  Tensor grad = to_hwc(pred);
  grad.array() = (1.0 - sched.alpha_bar(t)) * (render.array() - grad.array());
  return grad;
}

int sample_sds_timestep(const NoiseSchedule& sched, Rng& rng) {
  const int T = sched.steps();
  const int lo = std::max(1, static_cast<int>(std::ceil(0.02 * T)));
  const int hi = std::max(lo, static_cast<int>(std::floor(0.98 * T)));
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

Tensor variance_heatmap(const HypothesisBank& bank, Index camera) {
  bank.validate();
  if (camera < 0 || camera >= bank.size()) throw std::out_of_range("heatmap camera index out of range");
  const std::vector<Tensor>& stack = bank.hypotheses[static_cast<std::size_t>(camera)];
  const Index H = bank.height(), W = bank.width();
  Tensor out({H, W});
  const Index n = static_cast<Index>(stack.size());
  if (n < 2) return out;
  for (Index p = 0; p < H * W; ++p) {
    double acc = 0.0;
    for (Index c = 0; c < 3; ++c) {
      // Pairwise form: sum_{i<j} (x_i - x_j)^2 / (n (n - 1)) is exactly zero for identical samples.
      double sq = 0.0;
      for (Index i = 0; i < n; ++i)
        for (Index j = i + 1; j < n; ++j) {
          const double d = stack[i][3 * p + c] - stack[j][3 * p + c];
          sq += d * d;
        }
      acc += sq / static_cast<double>(n * (n - 1));
    }
    out[p] = acc / 3.0;
  }
  return out;
}

DistillLoss parse_distill_loss(const std::string& name) {
  if (name == "patch-remix") return DistillLoss::kPatchRemix;
  if (name == "mse") return DistillLoss::kMse;
  if (name == "sds") return DistillLoss::kSds;
  throw ValidationError("unknown distillation loss '" + name + "' (expected patch-remix, mse or sds)");
}

std::string to_string(DistillLoss loss) {
  switch (loss) {
    case DistillLoss::kPatchRemix: return "patch-remix";
    case DistillLoss::kMse: return "mse";
    case DistillLoss::kSds: return "sds";
  }
  return "unknown";
}

void DistillConfig::validate() const {
  if (resolution < 2) throw ValidationError("distillation resolution must be >= 2");
  if (patch < 1) throw ValidationError("patch size must be positive");
  if (steps < 0) throw ValidationError("distillation steps must be non-negative");
  if (!(learning_rate > 0.0)) throw ValidationError("distillation learning rate must be positive");
  if (batch_cameras < 1) throw ValidationError("camera batch must be positive");
  if (tiles_per_camera < 0) throw ValidationError("tiles per camera must be non-negative");
  render.validate();
}

DistillResult distill(const VoxelGrid& v0, const FieldDecoder& decoder_init, const HypothesisBank& bank,
                      const DistillConfig& cfg, const SdsPrior& prior) {
  cfg.validate();
  bank.validate();
  v0.validate();
  if (cfg.resolution < v0.spec.resolution) throw ValidationError("distillation cannot lower the grid resolution");
  if (cfg.loss == DistillLoss::kSds && (!prior.denoiser || !prior.sched || bank.conditioning.empty())) {
    throw ValidationError("sds distillation needs a super-resolution prior and bank conditioning");
  }
  DistillResult out{cfg.resolution == v0.spec.resolution ? v0 : upsample_grid(v0, cfg.resolution), decoder_init, {}};
  if (out.grid.spec.channels != decoder_init.channels) throw ShapeError("decoder channel count differs from grid");

  const Index H = bank.height(), W = bank.width(), p = cfg.patch;
  const Index tile_count = (H / p) * (W / p);
  const bool tiled = cfg.tiles_per_camera > 0 && H % p == 0 && W % p == 0 && cfg.tiles_per_camera < tile_count;
  std::vector<Rays> rays;
  for (const Camera& cam : bank.cameras) rays.push_back(generate_rays(cam));

  ParameterSet grid_params{{"grid", out.grid.features}};
  AdamState adam;
  adam.config.learning_rate = cfg.learning_rate;
  Rng rng(cfg.seed);
  std::vector<Index> camera_order(static_cast<std::size_t>(bank.size()));
  std::vector<Index> tile_order(static_cast<std::size_t>(tile_count));
  const Index batch = std::min(cfg.batch_cameras, bank.size());

  for (int step = 0; step < cfg.steps; ++step) {
    std::iota(camera_order.begin(), camera_order.end(), 0);
    std::shuffle(camera_order.begin(), camera_order.end(), rng);
    Graph g;
    Var grid = g.parameter("grid", grid_params.at("grid"));
    std::optional<Var> total, monitor;
    struct PendingSds {
      Var render;
      std::shared_ptr<Tensor> grad;
      Tensor cond;
    };
    std::vector<PendingSds> pending;

    for (Index b = 0; b < batch; ++b) {
      const std::size_t c = static_cast<std::size_t>(camera_order[static_cast<std::size_t>(b)]);
      RenderConfig rcfg = cfg.render;
      rcfg.seed = cfg.render.seed + static_cast<std::uint64_t>(step) * 1000003u + c;
      const std::vector<Tensor>& stack = bank.hypotheses[c];
      Var image;
      std::vector<Tensor> targets;
      Tensor cond;
      if (tiled) {
        std::iota(tile_order.begin(), tile_order.end(), 0);
        std::shuffle(tile_order.begin(), tile_order.end(), rng);
        const std::span<const Index> tiles(tile_order.data(), static_cast<std::size_t>(cfg.tiles_per_camera));
        std::vector<Index> rows;
        for (Index t : tiles)
          for (Index y = 0; y < p; ++y)
            for (Index x = 0; x < p; ++x) rows.push_back((t / (W / p) * p + y) * W + t % (W / p) * p + x);
        RenderVars rv = render_rays(g, grid, out.grid.spec, out.decoder, rays[c].select(rows), rcfg);
        image = reshape(rv.rgb, {cfg.tiles_per_camera * p, p, 3});
        for (const Tensor& h : stack) targets.push_back(stack_tiles(h, tiles, p));
        if (!bank.conditioning.empty()) {
          const Tensor& low = bank.conditioning[c];
          const Index f = H / low.dim(0);
          if (p % f == 0) {
            std::vector<Index> low_tiles(tiles.begin(), tiles.end());
            // Tile indices on the low-res grid keep the same row/column layout.
            cond = stack_tiles(low, low_tiles, p / f);
          }
        }
      } else {
        image = render_image(g, grid, out.grid.spec, out.decoder, bank.cameras[c], rcfg);
        targets = stack;
        if (!bank.conditioning.empty()) cond = bank.conditioning[c];
      }

      Var loss;
      switch (cfg.loss) {
        case DistillLoss::kPatchRemix: loss = patch_remix_loss(image, targets, p); break;
        case DistillLoss::kMse: loss = mse_distill_loss(image, targets.front()); break;
        case DistillLoss::kSds: {
          if (cond.size() == 0) throw ValidationError("sds conditioning does not align with the patch grid");
          auto grad = std::make_shared<Tensor>();
          loss = g.emplace<DeferredGradientOp>({image}, grad);
          pending.push_back({image, grad, std::move(cond)});
          Var m = mse_distill_loss(image, targets.front());
          monitor = monitor ? *monitor + m : m;
          break;
        }
      }
      total = total ? *total + loss : loss;
    }
    const double inv = 1.0 / static_cast<double>(batch);
    Var objective = scale(*total, inv);
    Var tracked = monitor ? scale(*monitor, inv) : objective;
    g.forward();
    const double value = g.value(tracked).item();
    if (!std::isfinite(value)) {
      throw NumericalError("distillation diverged at step " + std::to_string(step) + " (loss " + std::to_string(value) +
                           ", lr " + std::to_string(cfg.learning_rate) + ")");
    }
    for (PendingSds& s : pending) {
      const Tensor& rendered = g.value(s.render);
      Tensor grad(rendered.shape());
      // Tiles are denoised one at a time so the prior sees square images.
      const Index tiles = rendered.dim(0) / rendered.dim(1);
      const Index side = rendered.dim(1), low_side = s.cond.dim(1);
      for (Index i = 0; i < tiles; ++i) {
        const Tensor r = crop(rendered, i * side, 0, side, side);
        const Tensor lc = crop(s.cond, i * low_side, 0, low_side, low_side);
        const Tensor gt = sds_gradient(r, *prior.denoiser, lc, sample_sds_timestep(*prior.sched, rng), *prior.sched, rng);
        std::copy(gt.data(), gt.data() + gt.size(), grad.data() + i * gt.size());
      }
      *s.grad = std::move(grad);
    }
    out.losses.push_back(value);
    const NamedTensors grads = g.backward(objective);
    std::array<ParameterSet*, 2> sets{&grid_params, &out.decoder.params};
    adam_step(sets, grads, adam);
  }
  out.grid.features = grid_params.at("grid");
  if (!out.grid.features.all_finite()) throw NumericalError("distilled grid holds non-finite features");
  return out;
}

std::vector<double> evaluate_psnr(const VoxelGrid& grid, const FieldDecoder& decoder, std::span<const Camera> cameras,
                                  std::span<const Tensor> references, const RenderConfig& cfg) {
  if (cameras.size() != references.size()) throw std::invalid_argument("evaluate_psnr: camera/reference count mismatch");
  std::vector<double> out;
  for (std::size_t i = 0; i < cameras.size(); ++i) out.push_back(psnr(render(grid, decoder, cameras[i], cfg).image, references[i]));
  return out;
}

}  // namespace vf
