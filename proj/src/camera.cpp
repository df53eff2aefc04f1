#include "voxfuse/camera.hpp"

#include "voxfuse/error.hpp"

#include <Eigen/Geometry>
#include <Eigen/LU>

#include <cmath>
#include <stdexcept>

namespace vf {

void Camera::validate() const {
  if (height < 1 || width < 1) throw std::invalid_argument("camera image size must be positive");
  if (!(near < far)) throw std::invalid_argument("camera needs near < far");
  if (!projection.allFinite()) throw NumericalError("camera projection is not finite");
  if (std::abs(projection.determinant()) < 1e-12) throw std::invalid_argument("camera projection is singular");
}

Camera Camera::with_resolution(Index h, Index w) const {
  Camera c = *this;
  c.height = h;
  c.width = w;
  return c;
}

Eigen::Matrix4d look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up) {
  const Eigen::Vector3d f = (target - eye).normalized();
  Eigen::Vector3d s = f.cross(up);
  if (s.norm() < 1e-9) s = f.cross(Eigen::Vector3d::UnitZ());
  s.normalize();
  const Eigen::Vector3d u = s.cross(f);
  Eigen::Matrix4d view = Eigen::Matrix4d::Identity();
  view.block<1, 3>(0, 0) = s.transpose();
  view.block<1, 3>(1, 0) = u.transpose();
  view.block<1, 3>(2, 0) = -f.transpose();
  view(0, 3) = -s.dot(eye);
  view(1, 3) = -u.dot(eye);
  view(2, 3) = f.dot(eye);
  return view;
}

Eigen::Matrix4d perspective(double fov_y, double aspect, double near, double far) {
  const double f = 1.0 / std::tan(fov_y / 2.0);
  Eigen::Matrix4d p = Eigen::Matrix4d::Zero();
  p(0, 0) = f / aspect;
  p(1, 1) = f;
  p(2, 2) = (far + near) / (near - far);
  p(2, 3) = 2.0 * far * near / (near - far);
  p(3, 2) = -1.0;
  return p;
}

Eigen::Matrix4d orthographic(double left, double right, double bottom, double top, double near, double far) {
  Eigen::Matrix4d p = Eigen::Matrix4d::Identity();
  p(0, 0) = 2.0 / (right - left);
  p(1, 1) = 2.0 / (top - bottom);
  p(2, 2) = -2.0 / (far - near);
  p(0, 3) = -(right + left) / (right - left);
  p(1, 3) = -(top + bottom) / (top - bottom);
  p(2, 3) = -(far + near) / (far - near);
  return p;
}

Camera look_at_camera(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, double fov_y, Index height,
                      Index width, double near, double far) {
  Camera c;
  c.height = height;
  c.width = width;
  c.near = near;
  c.far = far;
  c.projection = perspective(fov_y, static_cast<double>(width) / static_cast<double>(height), near, far) *
                 look_at(eye, target, Eigen::Vector3d::UnitY());
  return c;
}

std::vector<Camera> camera_ring(const RingSpec& ring, Index height, Index width) {
  if (ring.count < 1) throw std::invalid_argument("camera ring needs at least one camera");
  std::vector<Camera> cams;
  cams.reserve(static_cast<std::size_t>(ring.count));
  for (int i = 0; i < ring.count; ++i) {
    const double az = ring.azimuth_offset + 2.0 * M_PI * i / ring.count;
    const Eigen::Vector3d eye(ring.radius * std::cos(ring.elevation) * std::sin(az),
                              ring.radius * std::sin(ring.elevation),
                              ring.radius * std::cos(ring.elevation) * std::cos(az));
    cams.push_back(look_at_camera(eye, Eigen::Vector3d::Zero(), ring.fov_y, height, width));
  }
  return cams;
}

Rays Rays::select(std::span<const Index> rows) const {
  Rays out;
  const Index n = static_cast<Index>(rows.size());
  out.origins.resize(n, 3);
  out.directions.resize(n, 3);
  out.far.resize(n);
  for (Index i = 0; i < n; ++i) {
    out.origins.row(i) = origins.row(rows[i]);
    out.directions.row(i) = directions.row(rows[i]);
    out.far[i] = far[rows[i]];
  }
  return out;
}

Rays generate_rays(const Camera& camera) {
  camera.validate();
  const Eigen::Matrix4d inv = camera.projection.inverse();
  const Index n = camera.height * camera.width;
  Rays rays;
  rays.origins.resize(n, 3);
  rays.directions.resize(n, 3);
  rays.far.resize(n);
  auto unproject = [&](double x, double y, double z) {
    const Eigen::Vector4d h = inv * Eigen::Vector4d(x, y, z, 1.0);
    return Eigen::Vector3d(h.head<3>() / h.w());
  };
  for (Index r = 0; r < camera.height; ++r) {
    const double y = 1.0 - 2.0 * (static_cast<double>(r) + 0.5) / static_cast<double>(camera.height);
    for (Index c = 0; c < camera.width; ++c) {
      const double x = 2.0 * (static_cast<double>(c) + 0.5) / static_cast<double>(camera.width) - 1.0;
      const Eigen::Vector3d a = unproject(x, y, -1.0);
      const Eigen::Vector3d b = unproject(x, y, 1.0);
      const Index i = r * camera.width + c;
      const Eigen::Vector3d d = b - a;
      rays.origins.row(i) = a.transpose();
      rays.directions.row(i) = d.normalized().transpose();
      rays.far[i] = d.norm();
    }
  }
  return rays;
}

std::optional<Eigen::Vector3d> camera_center(const Camera& camera) {
  // The centre is the finite point mapped to clip x = y = w = 0.
  Eigen::Matrix3d a;
  Eigen::Vector3d b;
  const int rows[3] = {0, 1, 3};
  for (int i = 0; i < 3; ++i) {
    a.row(i) = camera.projection.block<1, 3>(rows[i], 0);
    b[i] = -camera.projection(rows[i], 3);
  }
  if (std::abs(a.determinant()) < 1e-12) return std::nullopt;
  return Eigen::Vector3d(a.partialPivLu().solve(b));
}

Eigen::Vector4d project(const Camera& camera, const Eigen::Vector3d& world) {
  return camera.projection * world.homogeneous();
}

}  // namespace vf
