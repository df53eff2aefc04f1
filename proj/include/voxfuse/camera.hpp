#pragma once

#include "voxfuse/tensor.hpp"

#include <Eigen/Core>

#include <optional>
#include <vector>

namespace vf {

/// Pinhole or orthographic camera.
///
/// `projection` maps homogeneous world points to clip space with column vectors,
/// clip = C * [x y z 1]^T, in the OpenGL convention: NDC x, y in [-1, 1], image row 0 at
/// NDC y = +1, near plane at NDC z = -1 and far plane at z = +1. `near`/`far` record the
/// distances used to build C.
struct Camera {
  Eigen::Matrix4d projection = Eigen::Matrix4d::Identity();
  Index height = 1;
  Index width = 1;
  double near = 0.1;
  double far = 10.0;

  void validate() const;
  Camera with_resolution(Index h, Index w) const;
};

Eigen::Matrix4d look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up);
Eigen::Matrix4d perspective(double fov_y_radians, double aspect, double near, double far);
Eigen::Matrix4d orthographic(double left, double right, double bottom, double top, double near, double far);

Camera look_at_camera(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, double fov_y_radians, Index height,
                      Index width, double near = 0.1, double far = 20.0);

struct RingSpec {
  int count = 40;
  double radius = 4.0;
  double elevation = 0.0;       // radians above the equator
  double azimuth_offset = 0.0;  // radians added to every azimuth
  double fov_y = 0.9;           // radians
};

/// Cameras at uniform azimuths on a circle around the origin, all looking at the origin.
std::vector<Camera> camera_ring(const RingSpec& ring, Index height, Index width);

/// One ray per pixel, row-major over (row, col). Rays start on the near plane.
struct Rays {
  RowMatrix origins;     // [R, 3]
  RowMatrix directions;  // [R, 3], unit norm
  Eigen::VectorXd far;   // distance from origin to the far plane along the ray

  Index count() const { return origins.rows(); }
  Rays select(std::span<const Index> rows) const;
};

Rays generate_rays(const Camera& camera);

/// Camera centre for perspective projections; empty for orthographic ones.
std::optional<Eigen::Vector3d> camera_center(const Camera& camera);

/// Clip-space image of a world point; w <= 0 means the point is behind the camera.
Eigen::Vector4d project(const Camera& camera, const Eigen::Vector3d& world);

}  // namespace vf
