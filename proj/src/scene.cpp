#include "voxfuse/scene.hpp"

#include "voxfuse/error.hpp"

#include <cmath>

namespace vf {

void SceneSpec::validate() const {
  const Extent unit;
  for (const Blob& b : blobs) {
    if (!unit.contains(b.center)) throw ValidationError("blob centre lies outside the extent");
    if (!(b.density >= 0.0)) throw ValidationError("blob density must be non-negative");
    if (!(b.radius > 0.0)) throw ValidationError("blob radius must be positive");
    if ((b.color.array() < 0.0).any() || (b.color.array() > 1.0).any()) throw ValidationError("blob color outside [0, 1]");
  }
  if (grid_resolution < 2 || channels < 4) throw ValidationError("scene grid needs S >= 2 and at least 4 channels");
  if (decoder_hidden < 8) throw ValidationError("analytic decoder needs at least 8 hidden units");
  if (image_size < 1 || low_res_factor < 1 || image_size % low_res_factor != 0) {
    throw ValidationError("image size must be a positive multiple of the low-res factor");
  }
  if (ring.count < 1) throw ValidationError("camera ring must hold at least one camera");
  render.validate();
}

std::vector<Blob> random_blobs(Index count, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), r(0.18, 0.35), dens(15.0, 40.0), col(0.15, 0.95);
  std::vector<Blob> out;
  for (Index i = 0; i < count; ++i) {
    Blob b;
    do {
      b.center = Eigen::Vector3d(u(rng), u(rng), u(rng)) * 0.45;
    } while (b.center.norm() > 0.45);
    b.radius = r(rng);
    b.density = dens(rng);
    b.color = Eigen::Vector3d(col(rng), col(rng), col(rng));
    out.push_back(b);
  }
  return out;
}

namespace {

double blob_value(const Blob& b, const Eigen::Vector3d& p) {
  return b.density * std::exp(-(p - b.center).squaredNorm() / (2.0 * b.radius * b.radius));
}

}  // namespace

Tensor blob_density(std::span<const Blob> blobs, const Tensor& points) {
  const Index count = points.dim(0);
  Tensor out({count});
  for (Index p = 0; p < count; ++p) {
    const Eigen::Vector3d x(points[3 * p], points[3 * p + 1], points[3 * p + 2]);
    for (const Blob& b : blobs) out[p] += blob_value(b, x);
  }
  return out;
}

Tensor blob_color(std::span<const Blob> blobs, const Tensor& points) {
  const Index count = points.dim(0);
  Tensor out({count, 3});
  for (Index p = 0; p < count; ++p) {
    const Eigen::Vector3d x(points[3 * p], points[3 * p + 1], points[3 * p + 2]);
    Eigen::Vector3d acc = Eigen::Vector3d::Zero();
    double total = 0.0;
    for (const Blob& b : blobs) {
      const double v = blob_value(b, x);
      acc += v * b.color;
      total += v;
    }
    const Eigen::Vector3d c = total > 1e-12 ? Eigen::Vector3d(acc / total) : Eigen::Vector3d::Constant(0.5);
    for (int k = 0; k < 3; ++k) out[3 * p + k] = c[k];
  }
  return out;
}

VoxelGrid blob_grid(std::span<const Blob> blobs, const GridSpec& spec) {
  spec.validate();
  if (spec.channels < 4) throw ShapeError("blob grid needs at least 4 channels");
  const Tensor positions = spec.vertex_positions();
  const Tensor density = blob_density(blobs, positions);
  const Tensor color = blob_color(blobs, positions);
  VoxelGrid grid = VoxelGrid::zeros(spec);
  const Index n = spec.vertex_count();
  for (Index v = 0; v < n; ++v) {
    // Inverse softplus, floored so empty space stays finite.
    grid.features[v] = std::log(std::expm1(std::max(density[v], 1e-4)));
    for (Index k = 0; k < 3; ++k) {
      const double c = std::clamp(color[3 * v + k], 0.01, 0.99);
      grid.features[(1 + k) * n + v] = std::log(c / (1.0 - c));
    }
  }
  return grid;
}

FieldDecoder analytic_decoder(Index channels, Index hidden) {
  if (channels < 4 || hidden < 8) throw std::invalid_argument("analytic decoder needs >= 4 channels and >= 8 hidden units");
  FieldDecoder dec;
  dec.channels = channels;
  dec.hidden = {hidden};
  Tensor w0({channels, hidden}), w1({hidden, 4});
  // relu(x) - relu(-x) == x
  for (Index c = 0; c < 4; ++c) {
    w0[c * hidden + c] = 1.0;
    w0[c * hidden + 4 + c] = -1.0;
    w1[c * 4 + c] = 1.0;
    w1[(4 + c) * 4 + c] = -1.0;
  }
  dec.params[dec.weight_name(0)] = std::move(w0);
  dec.params[dec.bias_name(0)] = Tensor({hidden});
  dec.params[dec.weight_name(1)] = std::move(w1);
  dec.params[dec.bias_name(1)] = Tensor({4});
  return dec;
}

Tensor box_downsample(const Tensor& image, Index factor) {
  if (image.rank() != 3) throw ShapeError("box_downsample expects [H, W, C]");
  const Index H = image.dim(0), W = image.dim(1), C = image.dim(2);
  if (factor < 1 || H % factor != 0 || W % factor != 0) throw ShapeError("image size is not divisible by the factor");
  const Index h = H / factor, w = W / factor;
  Tensor out({h, w, C});
  const double norm = 1.0 / static_cast<double>(factor * factor);
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      for (Index c = 0; c < C; ++c) out[((y / factor) * w + x / factor) * C + c] += norm * image[(y * W + x) * C + c];
  return out;
}

std::vector<Tensor> render_views(const SyntheticScene& scene, std::span<const Camera> cameras, const RenderConfig& cfg) {
  std::vector<Tensor> out;
  for (const Camera& cam : cameras) out.push_back(render(scene.grid, scene.decoder, cam, cfg).image);
  return out;
}

SyntheticScene gen_synthetic_scene(const SceneSpec& spec) {
  spec.validate();
  SyntheticScene scene;
  GridSpec gs;
  gs.resolution = spec.grid_resolution;
  gs.channels = spec.channels;
  scene.grid = blob_grid(spec.blobs, gs);
  scene.decoder = analytic_decoder(spec.channels, spec.decoder_hidden);
  scene.views.id = "scene-" + std::to_string(spec.seed);
  const std::vector<Camera> cameras = camera_ring(spec.ring, spec.image_size, spec.image_size);
  const Index low = spec.image_size / spec.low_res_factor;
  for (const Camera& cam : cameras) {
    Tensor hi = render(scene.grid, scene.decoder, cam, spec.render).image;
    Tensor lo = box_downsample(hi, spec.low_res_factor);
    scene.views.frames.push_back(make_posed_image(std::move(hi), cam));
    scene.views.low_res.push_back(make_posed_image(std::move(lo), cam.with_resolution(low, low)));
  }
  return scene;
}

}  // namespace vf
