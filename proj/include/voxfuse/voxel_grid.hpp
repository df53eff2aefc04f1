#pragma once

#include "voxfuse/autodiff.hpp"

#include <Eigen/Core>

namespace vf {

/// Axis-aligned box in world units.
struct Extent {
  Eigen::Vector3d min = Eigen::Vector3d::Constant(-1.0);
  Eigen::Vector3d max = Eigen::Vector3d::Constant(1.0);

  Eigen::Vector3d size() const { return max - min; }
  bool contains(const Eigen::Vector3d& p) const;
};

struct GridSpec {
  Index resolution = 16;
  Index channels = 16;
  Extent extent;

  void validate() const;
  Shape feature_shape() const { return {channels, resolution, resolution, resolution}; }
  Index vertex_count() const { return resolution * resolution * resolution; }
  /// Boundary-inclusive registration: vertex i sits at min + i / (S - 1) * size.
  Eigen::Vector3d vertex_position(Index x, Index y, Index z) const;
  /// World positions of all vertices, [S^3, 3], ordered (z, y, x) row-major.
  Tensor vertex_positions() const;
};

/// d-channel feature lattice; features laid out (channel, z, y, x).
struct VoxelGrid {
  GridSpec spec;
  Tensor features;

  static VoxelGrid zeros(const GridSpec& spec);
  void validate() const;
};

/// Trilinear interpolation of a [C, S, S, S] grid at world points [P, 3] -> [P, C].
/// Points outside the extent read zero. Differentiable in both grid and points.
Var trilinear_gather(Var grid, Var points, const Extent& extent);

/// Value-level trilinear sampling.
Tensor trilinear_sample(const VoxelGrid& grid, const Tensor& points);

/// Resamples `grid` on a finer S' lattice over the same extent.
VoxelGrid upsample_grid(const VoxelGrid& grid, Index new_resolution);

/// MLP decoder from a grid feature to (density >= 0, color in [0, 1]^3).
/// Hidden layers use relu; density uses softplus and color sigmoid.
struct FieldDecoder {
  Index channels = 16;
  std::vector<Index> hidden{32};
  ParameterSet params;
  std::string prefix = "decoder";

  std::string weight_name(std::size_t layer) const;
  std::string bias_name(std::size_t layer) const;
  std::size_t layer_count() const { return hidden.size() + 1; }
};

FieldDecoder make_decoder(Index channels, std::vector<Index> hidden, Rng& rng, std::string prefix = "decoder");

struct DecodedField {
  Tensor density;  // [P]
  Tensor color;    // [P, 3]
};

struct DecodedVars {
  Var density;  // [P, 1]
  Var color;    // [P, 3]
};

DecodedVars decode(Graph& graph, const FieldDecoder& decoder, Var features);
DecodedField decode(const FieldDecoder& decoder, const Tensor& features);

}  // namespace vf
