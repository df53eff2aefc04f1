#pragma once

#include "voxfuse/camera.hpp"
#include "voxfuse/voxel_grid.hpp"

#include <cstdint>
#include <memory>

namespace vf {

struct RenderConfig {
  int samples_per_ray = 64;
  Eigen::Vector3d background = Eigen::Vector3d::Zero();
  bool stratified = false;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RenderOutput {
  Tensor image;          // [H, W, 3]
  Tensor opacity;        // [H, W]
  Tensor weights;        // [H * W, N] compositing weights
  Tensor transmittance;  // [H, W] residual transmittance after the last sample
};

/// Per-ray compositing state captured during forward.
struct CompositeTrace {
  Tensor weights;        // [R, N]
  Tensor transmittance;  // [R]
};

/// Emission-absorption compositing of N samples per ray with uniform spacing deltas[r].
/// sigma: [R, N], rgb: [R * N, 3] -> [R, 4] holding (r, g, b, opacity).
Var composite(Var sigma, Var rgb, std::vector<double> deltas, const Eigen::Vector3d& background,
              std::shared_ptr<CompositeTrace> trace = nullptr);

/// Sample positions along each ray inside the grid extent. Rays that miss get delta 0.
struct RaySamples {
  Tensor points;               // [R * N, 3]
  std::vector<double> deltas;  // [R]
};

RaySamples sample_rays(const Rays& rays, const Extent& extent, const RenderConfig& cfg);

struct RenderVars {
  Var rgb;      // [R, 3]
  Var opacity;  // [R, 1]
  std::shared_ptr<CompositeTrace> trace;
};

/// Differentiable render of a ray set. Gradients reach grid features and decoder parameters;
/// sample positions are constants.
RenderVars render_rays(Graph& graph, Var grid_features, const GridSpec& spec, const FieldDecoder& decoder,
                       const Rays& rays, const RenderConfig& cfg);

/// Full-image render as a [H, W, 3] Var.
Var render_image(Graph& graph, Var grid_features, const GridSpec& spec, const FieldDecoder& decoder,
                 const Camera& camera, const RenderConfig& cfg);

RenderOutput render(const VoxelGrid& grid, const FieldDecoder& decoder, const Camera& camera,
                    const RenderConfig& cfg);

/// Mean squared error between equally shaped tensors.
double mean_squared_error(const Tensor& a, const Tensor& b);

/// Peak value 1. Identical images give the 99 dB cap.
inline constexpr double kPsnrCap = 99.0;
double psnr(const Tensor& a, const Tensor& b);

}  // namespace vf
