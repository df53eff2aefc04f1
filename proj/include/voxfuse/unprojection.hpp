#pragma once

#include "voxfuse/camera.hpp"
#include "voxfuse/voxel_grid.hpp"

#include <span>

namespace vf {

struct PosedImage {
  Tensor image;  // [H, W, 3] in [0, 1]
  Camera camera;
  /// Unit viewing direction of the camera's principal axis.
  Eigen::Vector3d view_direction = -Eigen::Vector3d::UnitZ();
};

PosedImage make_posed_image(Tensor image, const Camera& camera);
Eigen::Vector3d principal_direction(const Camera& camera);

/// [H, W, C] <-> [C, H, W]
Tensor to_chw(const Tensor& hwc);
Tensor to_hwc(const Tensor& chw);
Var hwc_to_chw(Var hwc);
Var chw_to_hwc(Var chw);

/// Three-layer convolutional feature extractor with output stride 2.
struct Encoder2D {
  Index width = 16;
  Index out_channels = 16;
  ParameterSet params;
  std::string prefix = "encoder";
};

Encoder2D make_encoder(Index width, Index out_channels, Rng& rng, std::string prefix = "encoder");
/// image: [3, H, W] -> [d, H/2, W/2]
Var encode(Graph& graph, const Encoder2D& encoder, Var image);
/// Encodes [H, W, 3] images sharing one size.
std::vector<Tensor> encode_frames(const Encoder2D& encoder, std::span<const Tensor> images);

/// MLP mapping [feature; view direction] to (pre-activation weight, transformed feature).
struct Accumulator {
  Index channels = 16;
  Index hidden = 32;
  ParameterSet params;
  std::string prefix = "accumulator";
};

Accumulator make_accumulator(Index channels, Index hidden, Rng& rng, std::string prefix = "accumulator");

/// Bilinear interpolation of a [C, H, W] map at points [P, 2] given as (column, row) in pixel
/// units with pixel centres on integers. Points outside [0, W-1] x [0, H-1] read zero.
Var bilinear_gather(Var map, Var points);
Tensor bilinear_sample(const Tensor& map, const Tensor& points);

/// Where each grid vertex lands on a feature map of size (map_height, map_width).
struct VertexProjection {
  Tensor pixels;      // [P, 2]
  Tensor visible;     // [P, 1], 1 when in front of the camera and inside the map
  Tensor directions;  // [P, 3], unit vectors from the camera centre to the vertex
};

VertexProjection project_vertices(const GridSpec& spec, const Camera& camera, Index map_height, Index map_width);

/// Pools per-frame feature maps into a [d, S, S, S] volume as a sum over frames of
/// softplus weight times transformed feature. No frames gives the zero volume.
Var unproject(Graph& graph, std::span<const Var> feature_maps, std::span<const Camera> cameras, const GridSpec& spec,
              const Accumulator& accumulator);
VoxelGrid unproject(std::span<const Tensor> feature_maps, std::span<const Camera> cameras, const GridSpec& spec,
                    const Accumulator& accumulator);

}  // namespace vf
