#pragma once

#include "voxfuse/generation.hpp"

namespace vf {

struct Blob {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius = 0.3;
  double density = 20.0;  // peak
  Eigen::Vector3d color = Eigen::Vector3d::Constant(0.8);
};

struct SceneSpec {
  std::vector<Blob> blobs;
  Index grid_resolution = 32;
  Index channels = 16;
  Index decoder_hidden = 16;
  RingSpec ring{40, 4.0, 0.0, 0.0, 0.6};
  Index image_size = 64;
  Index low_res_factor = 2;
  RenderConfig render;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Random blob layout inside the unit ball of the extent.
std::vector<Blob> random_blobs(Index count, Rng& rng);

struct SyntheticScene {
  VoxelGrid grid;
  FieldDecoder decoder;
  MultiViewScene views;
};

/// Analytic density at world points [P, 3] -> [P].
Tensor blob_density(std::span<const Blob> blobs, const Tensor& points);
/// Density-weighted mean blob color, grey where empty. [P, 3].
Tensor blob_color(std::span<const Blob> blobs, const Tensor& points);

/// Grid whose first four channels hold inverse-activated density and color.
VoxelGrid blob_grid(std::span<const Blob> blobs, const GridSpec& spec);

/// One-hidden-layer decoder that reproduces softplus(f0) and sigmoid(f1..f3) exactly.
FieldDecoder analytic_decoder(Index channels, Index hidden);

/// 2x2 (factor x factor) box filter of a [H, W, C] image.
Tensor box_downsample(const Tensor& image, Index factor);

SyntheticScene gen_synthetic_scene(const SceneSpec& spec);

/// Renders the ground truth at `cameras` with the scene's render config.
std::vector<Tensor> render_views(const SyntheticScene& scene, std::span<const Camera> cameras, const RenderConfig& cfg);

}  // namespace vf
