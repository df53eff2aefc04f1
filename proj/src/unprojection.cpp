#include "voxfuse/unprojection.hpp"

#include "voxfuse/error.hpp"
#include "voxfuse/ops.hpp"

#include <Eigen/LU>

#include <cmath>

namespace vf {

Eigen::Vector3d principal_direction(const Camera& camera) {
  const Eigen::Matrix4d inv = camera.projection.inverse();
  const Eigen::Vector4d a = inv * Eigen::Vector4d(0, 0, -1, 1);
  const Eigen::Vector4d b = inv * Eigen::Vector4d(0, 0, 1, 1);
  return (b.head<3>() / b.w() - a.head<3>() / a.w()).normalized();
}

PosedImage make_posed_image(Tensor image, const Camera& camera) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("posed image must be [H, W, 3]");
  if (!image.all_finite()) throw NumericalError("posed image has non-finite pixels");
  Camera cam = camera.with_resolution(image.dim(0), image.dim(1));
  cam.validate();
  return {std::move(image), cam, principal_direction(cam)};
}

Tensor to_chw(const Tensor& hwc) {
  if (hwc.rank() != 3) throw ShapeError("to_chw expects [H, W, C]");
  const Index h = hwc.dim(0), w = hwc.dim(1), c = hwc.dim(2);
  Tensor out({c, h, w});
  MatrixMap(out.data(), c, h * w) = ConstMatrixMap(hwc.data(), h * w, c).transpose();
  return out;
}

Tensor to_hwc(const Tensor& chw) {
  if (chw.rank() != 3) throw ShapeError("to_hwc expects [C, H, W]");
  const Index c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  Tensor out({h, w, c});
  MatrixMap(out.data(), h * w, c) = ConstMatrixMap(chw.data(), c, h * w).transpose();
  return out;
}

Var hwc_to_chw(Var hwc) {
  const Shape s = hwc.shape();
  if (s.size() != 3) throw ShapeError("hwc_to_chw expects [H, W, C]");
  return reshape(transpose(reshape(hwc, {s[0] * s[1], s[2]})), {s[2], s[0], s[1]});
}

Var chw_to_hwc(Var chw) {
  const Shape s = chw.shape();
  if (s.size() != 3) throw ShapeError("chw_to_hwc expects [C, H, W]");
  return reshape(transpose(reshape(chw, {s[0], s[1] * s[2]})), {s[1], s[2], s[0]});
}

Encoder2D make_encoder(Index width, Index out_channels, Rng& rng, std::string prefix) {
  Encoder2D enc;
  enc.width = width;
  enc.out_channels = out_channels;
  enc.prefix = std::move(prefix);
  const Index ins[3] = {3, width, width};
  const Index outs[3] = {width, width, out_channels};
  for (int l = 0; l < 3; ++l) {
    const std::string base = enc.prefix + ".conv" + std::to_string(l);
    enc.params[base + ".w"] = randn({outs[l], ins[l], 3, 3}, rng, std::sqrt(2.0 / (9.0 * static_cast<double>(ins[l]))));
    enc.params[base + ".b"] = Tensor({outs[l]});
  }
  return enc;
}

Var encode(Graph& graph, const Encoder2D& encoder, Var image) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != 3) throw ShapeError("encode: image must be [3, H, W], got " + to_string(s));
  Var h = image;
  for (int l = 0; l < 3; ++l) {
    const std::string base = encoder.prefix + ".conv" + std::to_string(l);
    Var w = graph.parameter(base + ".w", encoder.params.at(base + ".w"));
    Var b = graph.parameter(base + ".b", encoder.params.at(base + ".b"));
    h = add_channel_bias(conv2d(h, w, l == 0 ? 2 : 1, 1), b);
    if (l < 2) h = silu(h);
  }
  return h;
}

std::vector<Tensor> encode_frames(const Encoder2D& encoder, std::span<const Tensor> images) {
  std::vector<Tensor> maps;
  for (const Tensor& img : images) {
    if (img.shape() != images.front().shape()) throw ShapeError("encode_frames: images differ in size");
    Graph g;
    Var out = encode(g, encoder, g.constant(to_chw(img)));
    g.forward();
    maps.push_back(g.value(out));
  }
  return maps;
}

Accumulator make_accumulator(Index channels, Index hidden, Rng& rng, std::string prefix) {
  Accumulator acc;
  acc.channels = channels;
  acc.hidden = hidden;
  acc.prefix = std::move(prefix);
  const Index in = channels + 3;
  acc.params[acc.prefix + ".l0.w"] = randn({in, hidden}, rng, std::sqrt(2.0 / static_cast<double>(in)));
  acc.params[acc.prefix + ".l0.b"] = Tensor({hidden});
  acc.params[acc.prefix + ".l1.w"] = randn({hidden, 1 + channels}, rng, std::sqrt(1.0 / static_cast<double>(hidden)));
  acc.params[acc.prefix + ".l1.b"] = Tensor({1 + channels});
  return acc;
}

namespace {

struct Taps {
  Index base = -1;  // index of the top-left pixel; -1 when outside
  double fx = 0, fy = 0;
};

class BilinearGatherOp final : public Op {
 public:
  std::string_view name() const override { return "bilinear_gather"; }

  Shape output_shape(std::span<const Shape> in) const override {
    if (in[0].size() != 3) throw ShapeError("bilinear_gather: map must be [C, H, W], got " + to_string(in[0]));
    if (in[1].size() != 2 || in[1][1] != 2) throw ShapeError("bilinear_gather: points must be [P, 2]");
    return {in[1][0], in[0][0]};
  }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& map = *in[0];
    const Tensor& pts = *in[1];
    c_ = map.dim(0), h_ = map.dim(1), w_ = map.dim(2);
    planar_ = ConstMatrixMap(map.data(), c_, h_ * w_).transpose();
    const Index count = pts.dim(0);
    taps_.assign(static_cast<std::size_t>(count), Taps{});
    Tensor out({count, c_});
    for (Index p = 0; p < count; ++p) {
      const double x = pts[2 * p], y = pts[2 * p + 1];
      if (!std::isfinite(x) || !std::isfinite(y)) throw NumericalError("bilinear_gather: non-finite point");
      if (x < 0.0 || y < 0.0 || x > static_cast<double>(w_ - 1) || y > static_cast<double>(h_ - 1)) continue;
      Taps& t = taps_[static_cast<std::size_t>(p)];
      const Index ix = std::min<Index>(static_cast<Index>(x), std::max<Index>(w_ - 2, 0));
      const Index iy = std::min<Index>(static_cast<Index>(y), std::max<Index>(h_ - 2, 0));
      t.fx = x - ix, t.fy = y - iy;
      t.base = iy * w_ + ix;
      double* row = out.data() + p * c_;
      for_taps(t, [&](Index idx, double wgt, double, double) {
        const double* f = planar_.data() + idx * c_;
        for (Index ch = 0; ch < c_; ++ch) row[ch] += wgt * f[ch];
      });
    }
    return out;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const Index count = in[1]->dim(0);
    if (grads[0]) {
      RowMatrix acc = RowMatrix::Zero(h_ * w_, c_);
      for (Index p = 0; p < count; ++p) {
        const Taps& t = taps_[static_cast<std::size_t>(p)];
        if (t.base < 0) continue;
        const double* gr = g.data() + p * c_;
        for_taps(t, [&](Index idx, double wgt, double, double) {
          double* dst = acc.data() + idx * c_;
          for (Index ch = 0; ch < c_; ++ch) dst[ch] += wgt * gr[ch];
        });
      }
      MatrixMap(grads[0]->data(), c_, h_ * w_) += acc.transpose();
    }
    if (grads[1]) {
      for (Index p = 0; p < count; ++p) {
        const Taps& t = taps_[static_cast<std::size_t>(p)];
        if (t.base < 0) continue;
        const double* gr = g.data() + p * c_;
        for_taps(t, [&](Index idx, double, double dx, double dy) {
          const double* f = planar_.data() + idx * c_;
          double dot = 0.0;
          for (Index ch = 0; ch < c_; ++ch) dot += gr[ch] * f[ch];
          (*grads[1])[2 * p] += dot * dx;
          (*grads[1])[2 * p + 1] += dot * dy;
        });
      }
    }
  }

 private:
  template <class Fn>
  void for_taps(const Taps& t, Fn&& fn) const {
    // Degenerate one-pixel axes collapse onto a single tap.
    const int nx = w_ > 1 ? 2 : 1, ny = h_ > 1 ? 2 : 1;
    for (int b = 0; b < ny; ++b)
      for (int a = 0; a < nx; ++a) {
        const double wx = nx == 1 ? 1.0 : (a ? t.fx : 1.0 - t.fx);
        const double wy = ny == 1 ? 1.0 : (b ? t.fy : 1.0 - t.fy);
        const double sx = nx == 1 ? 0.0 : (a ? 1.0 : -1.0);
        const double sy = ny == 1 ? 0.0 : (b ? 1.0 : -1.0);
        fn(t.base + b * w_ + a, wx * wy, sx * wy, wx * sy);
      }
  }

  Index c_ = 0, h_ = 0, w_ = 0;
  RowMatrix planar_;
  std::vector<Taps> taps_;
};

}  // namespace

Var bilinear_gather(Var map, Var points) { return map.graph->emplace<BilinearGatherOp>({map, points}); }

Tensor bilinear_sample(const Tensor& map, const Tensor& points) {
  Graph g;
  Var out = bilinear_gather(g.constant(map), g.constant(points));
  g.forward();
  return g.value(out);
}

VertexProjection project_vertices(const GridSpec& spec, const Camera& camera, Index map_height, Index map_width) {
  const Tensor positions = spec.vertex_positions();
  const Index count = spec.vertex_count();
  VertexProjection out{Tensor({count, 2}), Tensor({count, 1}), Tensor({count, 3})};
  const std::optional<Eigen::Vector3d> center = camera_center(camera);
  const Eigen::Vector3d axis = principal_direction(camera);
  for (Index p = 0; p < count; ++p) {
    const Eigen::Vector3d world(positions[3 * p], positions[3 * p + 1], positions[3 * p + 2]);
    const Eigen::Vector3d dir = center ? Eigen::Vector3d((world - *center).normalized()) : axis;
    for (int a = 0; a < 3; ++a) out.directions[3 * p + a] = dir[a];
    const Eigen::Vector4d clip = project(camera, world);
    double px = -1e3, py = -1e3;
    if (clip.w() > 0.0) {
      const double nx = clip.x() / clip.w(), ny = clip.y() / clip.w();
      px = (nx + 1.0) / 2.0 * static_cast<double>(map_width) - 0.5;
      py = (1.0 - ny) / 2.0 * static_cast<double>(map_height) - 0.5;
      const bool inside = px >= 0.0 && py >= 0.0 && px <= static_cast<double>(map_width - 1) &&
                          py <= static_cast<double>(map_height - 1);
      out.visible[p] = inside ? 1.0 : 0.0;
    }
    out.pixels[2 * p] = px;
    out.pixels[2 * p + 1] = py;
  }
  return out;
}

Var unproject(Graph& graph, std::span<const Var> feature_maps, std::span<const Camera> cameras, const GridSpec& spec,
              const Accumulator& accumulator) {
  spec.validate();
  if (feature_maps.size() != cameras.size()) {
    throw std::invalid_argument("unproject: " + std::to_string(feature_maps.size()) + " feature maps for " +
                                std::to_string(cameras.size()) + " cameras");
  }
  const Index d = spec.channels;
  const Index count = spec.vertex_count();
  if (accumulator.channels != d) throw ShapeError("unproject: accumulator channel count differs from grid");
  if (feature_maps.empty()) return graph.constant(Tensor(spec.feature_shape()));

  const std::string& pre = accumulator.prefix;
  Var w0 = graph.parameter(pre + ".l0.w", accumulator.params.at(pre + ".l0.w"));
  Var b0 = graph.parameter(pre + ".l0.b", accumulator.params.at(pre + ".l0.b"));
  Var w1 = graph.parameter(pre + ".l1.w", accumulator.params.at(pre + ".l1.w"));
  Var b1 = graph.parameter(pre + ".l1.b", accumulator.params.at(pre + ".l1.b"));

  std::optional<Var> pooled;
  for (std::size_t j = 0; j < feature_maps.size(); ++j) {
    const Shape& ms = feature_maps[j].shape();
    if (ms.size() != 3 || ms[0] != d) throw ShapeError("unproject: feature map must be [d, h, w], got " + to_string(ms));
    VertexProjection proj = project_vertices(spec, cameras[j], ms[1], ms[2]);
    Var features = bilinear_gather(feature_maps[j], graph.constant(std::move(proj.pixels)));
    Var input = concat({features, graph.constant(std::move(proj.directions))}, 1);
    Var hidden = silu(matmul(input, w0) + broadcast_rows(b0, count));
    Var out = matmul(hidden, w1) + broadcast_rows(b1, count);
    Var weight = softplus(slice(out, 1, 0, 1)) * graph.constant(std::move(proj.visible));
    Var term = broadcast_cols(weight, d) * slice(out, 1, 1, 1 + d);
    pooled = pooled ? *pooled + term : term;
  }
  return reshape(transpose(*pooled), spec.feature_shape());
}

VoxelGrid unproject(std::span<const Tensor> feature_maps, std::span<const Camera> cameras, const GridSpec& spec,
                    const Accumulator& accumulator) {
  Graph g;
  std::vector<Var> maps;
  for (const Tensor& m : feature_maps) maps.push_back(g.constant(m));
  Var out = unproject(g, maps, cameras, spec, accumulator);
  g.forward();
  return VoxelGrid{spec, g.value(out)};
}

}  // namespace vf
