#pragma once

#include "voxfuse/generation.hpp"

namespace vf {

/// K super-resolved image hypotheses for each of a set of cameras.
struct HypothesisBank {
  std::vector<Camera> cameras;
  std::vector<std::vector<Tensor>> hypotheses;  // [camera][k] -> [H, W, 3]
  /// Optional low-res renders the hypotheses were sampled from, one per camera.
  std::vector<Tensor> conditioning;

  Index size() const { return static_cast<Index>(cameras.size()); }
  Index k() const { return hypotheses.empty() ? 0 : static_cast<Index>(hypotheses.front().size()); }
  Index height() const { return hypotheses.front().front().dim(0); }
  Index width() const { return hypotheses.front().front().dim(1); }
  void validate() const;
};

/// Renders V0 at low resolution from each camera and draws K super-resolution samples per view.
/// Camera c samples with its own seed derived from (seed, c).
HypothesisBank build_hypothesis_bank(const SuperResDenoiser& superres, const VoxelGrid& volume,
                                     const FieldDecoder& decoder, std::span<const Camera> cameras, Index k,
                                     Index factor, const NoiseSchedule& sched, const RenderConfig& render_cfg,
                                     std::uint64_t seed);

struct RemixResult {
  double loss = 0.0;
  std::vector<Index> selection;  // chosen hypothesis per tile, row-major over tiles
};

/// Per-tile minimum over hypotheses of the squared error, summed over tiles and divided by the
/// number of image values. Partial edge tiles count only their valid pixels. Ties go to the
/// lowest index.
RemixResult patch_remix(const Tensor& render, std::span<const Tensor> hypotheses, Index patch);
double patch_remix_loss(const Tensor& render, std::span<const Tensor> hypotheses, Index patch);
/// Differentiable in `render` through the selected hypothesis of each tile.
Var patch_remix_loss(Var render, std::vector<Tensor> hypotheses, Index patch);

double mse_distill_loss(const Tensor& render, const Tensor& hypothesis);
Var mse_distill_loss(Var render, const Tensor& hypothesis);

/// Score-distillation gradient (1 - abar_t)(render - D(I_t, cond, t)) for a [H, W, 3] render
/// conditioned on a [H/f, W/f, 3] low-res image.
Tensor sds_gradient(const Tensor& render, const SuperResDenoiser& superres, const Tensor& low_res_cond, int t,
                    const NoiseSchedule& sched, Rng& rng);
/// Uniform timestep in [0.02 T, 0.98 T].
int sample_sds_timestep(const NoiseSchedule& sched, Rng& rng);

/// Unbiased per-pixel variance across a camera's hypotheses, averaged over channels. [H, W]
Tensor variance_heatmap(const HypothesisBank& bank, Index camera);

enum class DistillLoss { kPatchRemix, kMse, kSds };
DistillLoss parse_distill_loss(const std::string& name);
std::string to_string(DistillLoss loss);

struct DistillConfig {
  Index resolution = 32;
  Index patch = 16;
  int steps = 2000;
  double learning_rate = 2e-4;
  Index batch_cameras = 4;
  /// Random patch-aligned tiles rendered per camera and step; 0 renders whole images.
  Index tiles_per_camera = 0;
  DistillLoss loss = DistillLoss::kPatchRemix;
  RenderConfig render;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Prior used by the score-distillation variant.
struct SdsPrior {
  const SuperResDenoiser* denoiser = nullptr;
  const NoiseSchedule* sched = nullptr;
};

struct DistillResult {
  VoxelGrid grid;
  FieldDecoder decoder;
  std::vector<double> losses;
};

/// Fits a high-resolution grid (initialised by upsampling V0) and a copy of the decoder to the bank.
DistillResult distill(const VoxelGrid& v0, const FieldDecoder& decoder_init, const HypothesisBank& bank,
                      const DistillConfig& cfg, const SdsPrior& prior = {});

/// PSNR of renders against references, one value per camera.
std::vector<double> evaluate_psnr(const VoxelGrid& grid, const FieldDecoder& decoder, std::span<const Camera> cameras,
                                  std::span<const Tensor> references, const RenderConfig& cfg);

}  // namespace vf
