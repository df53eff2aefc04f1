#include "voxfuse/voxel_grid.hpp"

#include "voxfuse/error.hpp"
#include "voxfuse/ops.hpp"

#include <cmath>
#include <stdexcept>

namespace vf {

bool Extent::contains(const Eigen::Vector3d& p) const {
  return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
}

void GridSpec::validate() const {
  if (resolution < 2) throw std::invalid_argument("grid resolution must be >= 2");
  if (channels < 1) throw std::invalid_argument("grid needs at least one channel");
  if (!(extent.size().array() > 0.0).all()) throw std::invalid_argument("grid extent must have positive size");
}

Eigen::Vector3d GridSpec::vertex_position(Index x, Index y, Index z) const {
  const double step = 1.0 / static_cast<double>(resolution - 1);
  return extent.min + (Eigen::Vector3d(x, y, z) * step).cwiseProduct(extent.size());
}

Tensor GridSpec::vertex_positions() const {
  Tensor out({vertex_count(), 3});
  Index i = 0;
  for (Index z = 0; z < resolution; ++z)
    for (Index y = 0; y < resolution; ++y)
      for (Index x = 0; x < resolution; ++x, ++i) {
        const Eigen::Vector3d p = vertex_position(x, y, z);
        out[3 * i] = p.x(), out[3 * i + 1] = p.y(), out[3 * i + 2] = p.z();
      }
  return out;
}

VoxelGrid VoxelGrid::zeros(const GridSpec& spec) {
  spec.validate();
  return VoxelGrid{spec, Tensor(spec.feature_shape())};
}

void VoxelGrid::validate() const {
  spec.validate();
  require_shape(features.shape(), spec.feature_shape(), "voxel grid features");
}

namespace {

// Per-point lattice cell and in-cell fractions; base < 0 marks an outside point.
struct Cell {
  Index base = -1;
  double fx = 0, fy = 0, fz = 0;
};

class TrilinearGatherOp final : public Op {
 public:
  explicit TrilinearGatherOp(Extent extent) : extent_(std::move(extent)) {}
  std::string_view name() const override { return "trilinear_gather"; }

  Shape output_shape(std::span<const Shape> in) const override {
    const Shape& g = in[0];
    if (g.size() != 4 || g[1] != g[2] || g[2] != g[3] || g[1] < 2) {
      throw ShapeError("trilinear_gather: grid must be [C, S, S, S] with S >= 2, got " + to_string(g));
    }
    if (in[1].size() != 2 || in[1][1] != 3) throw ShapeError("trilinear_gather: points must be [P, 3]");
    return {in[1][0], g[0]};
  }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& grid = *in[0];
    const Tensor& pts = *in[1];
    channels_ = grid.dim(0);
    res_ = grid.dim(1);
    const Index n = res_ * res_ * res_;
    // Channel-last copy keeps the 8 corner reads contiguous.
    lattice_ = ConstMatrixMap(grid.data(), channels_, n).transpose();

    const Index count = pts.dim(0);
    cells_.assign(static_cast<std::size_t>(count), Cell{});
    Tensor out({count, channels_});
    const Eigen::Vector3d scale = Eigen::Vector3d::Constant(static_cast<double>(res_ - 1)).cwiseQuotient(extent_.size());
    for (Index p = 0; p < count; ++p) {
      const Eigen::Vector3d world(pts[3 * p], pts[3 * p + 1], pts[3 * p + 2]);
      if (!world.allFinite()) throw NumericalError("trilinear_gather: non-finite point");
      const Eigen::Vector3d u = (world - extent_.min).cwiseProduct(scale);
      const double hi = static_cast<double>(res_ - 1);
      if ((u.array() < 0.0).any() || (u.array() > hi).any()) continue;
      Cell& c = cells_[static_cast<std::size_t>(p)];
      const Index ix = std::min<Index>(static_cast<Index>(u.x()), res_ - 2);
      const Index iy = std::min<Index>(static_cast<Index>(u.y()), res_ - 2);
      const Index iz = std::min<Index>(static_cast<Index>(u.z()), res_ - 2);
      c.fx = u.x() - ix, c.fy = u.y() - iy, c.fz = u.z() - iz;
      c.base = (iz * res_ + iy) * res_ + ix;
      double* row = out.data() + p * channels_;
      for_corners(c, [&](Index idx, double w, double, double, double) {
        const double* f = lattice_.data() + idx * channels_;
        for (Index ch = 0; ch < channels_; ++ch) row[ch] += w * f[ch];
      });
    }
    return out;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const Index count = in[1]->dim(0);
    if (grads[0]) {
      RowMatrix acc = RowMatrix::Zero(res_ * res_ * res_, channels_);
      for (Index p = 0; p < count; ++p) {
        const Cell& c = cells_[static_cast<std::size_t>(p)];
        if (c.base < 0) continue;
        const double* gr = g.data() + p * channels_;
        for_corners(c, [&](Index idx, double w, double, double, double) {
          double* dst = acc.data() + idx * channels_;
          for (Index ch = 0; ch < channels_; ++ch) dst[ch] += w * gr[ch];
        });
      }
      MatrixMap(grads[0]->data(), channels_, res_ * res_ * res_) += acc.transpose();
    }
    if (grads[1]) {
      const Eigen::Vector3d scale =
          Eigen::Vector3d::Constant(static_cast<double>(res_ - 1)).cwiseQuotient(extent_.size());
      for (Index p = 0; p < count; ++p) {
        const Cell& c = cells_[static_cast<std::size_t>(p)];
        if (c.base < 0) continue;
        const double* gr = g.data() + p * channels_;
        Eigen::Vector3d du = Eigen::Vector3d::Zero();
        for_corners(c, [&](Index idx, double, double dx, double dy, double dz) {
          const double* f = lattice_.data() + idx * channels_;
          double dot = 0.0;
          for (Index ch = 0; ch < channels_; ++ch) dot += gr[ch] * f[ch];
          du += dot * Eigen::Vector3d(dx, dy, dz);
        });
        for (int a = 0; a < 3; ++a) (*grads[1])[3 * p + a] += du[a] * scale[a];
      }
    }
  }

 private:
  // Calls fn(vertex index, weight, dweight/dfx, dweight/dfy, dweight/dfz) for the 8 corners.
  template <class Fn>
  void for_corners(const Cell& c, Fn&& fn) const {
    for (int k = 0; k < 8; ++k) {
      const int ax = k & 1, ay = (k >> 1) & 1, az = (k >> 2) & 1;
      const double wx = ax ? c.fx : 1.0 - c.fx;
      const double wy = ay ? c.fy : 1.0 - c.fy;
      const double wz = az ? c.fz : 1.0 - c.fz;
      const double sx = ax ? 1.0 : -1.0, sy = ay ? 1.0 : -1.0, sz = az ? 1.0 : -1.0;
      const Index idx = c.base + (az * res_ + ay) * res_ + ax;
      fn(idx, wx * wy * wz, sx * wy * wz, wx * sy * wz, wx * wy * sz);
    }
  }

  Extent extent_;
  Index channels_ = 0;
  Index res_ = 0;
  RowMatrix lattice_;
  std::vector<Cell> cells_;
};

}  // namespace

Var trilinear_gather(Var grid, Var points, const Extent& extent) {
  return grid.graph->emplace<TrilinearGatherOp>({grid, points}, extent);
}

Tensor trilinear_sample(const VoxelGrid& grid, const Tensor& points) {
  grid.validate();
  Graph g;
  Var out = trilinear_gather(g.constant(grid.features), g.constant(points), grid.spec.extent);
  g.forward();
  return g.value(out);
}

VoxelGrid upsample_grid(const VoxelGrid& grid, Index new_resolution) {
  grid.validate();
  if (new_resolution <= grid.spec.resolution) {
    throw std::invalid_argument("upsample_grid: new resolution must exceed " + std::to_string(grid.spec.resolution));
  }
  GridSpec fine = grid.spec;
  fine.resolution = new_resolution;
  const Tensor sampled = trilinear_sample(grid, fine.vertex_positions());  // [S'^3, C]
  VoxelGrid out = VoxelGrid::zeros(fine);
  MatrixMap(out.features.data(), fine.channels, fine.vertex_count()) = sampled.matrix().transpose();
  return out;
}

std::string FieldDecoder::weight_name(std::size_t layer) const { return prefix + ".l" + std::to_string(layer) + ".w"; }
std::string FieldDecoder::bias_name(std::size_t layer) const { return prefix + ".l" + std::to_string(layer) + ".b"; }

FieldDecoder make_decoder(Index channels, std::vector<Index> hidden, Rng& rng, std::string prefix) {
  FieldDecoder dec;
  dec.channels = channels;
  dec.hidden = std::move(hidden);
  dec.prefix = std::move(prefix);
  Index fan_in = channels;
  for (std::size_t l = 0; l < dec.layer_count(); ++l) {
    const Index fan_out = l < dec.hidden.size() ? dec.hidden[l] : 4;
    dec.params[dec.weight_name(l)] = randn({fan_in, fan_out}, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
    dec.params[dec.bias_name(l)] = Tensor({fan_out});
    fan_in = fan_out;
  }
  return dec;
}

DecodedVars decode(Graph& graph, const FieldDecoder& decoder, Var features) {
  const Shape& fs = features.shape();
  if (fs.size() != 2 || fs[1] != decoder.channels) {
    throw ShapeError("decode: features must be [P, " + std::to_string(decoder.channels) + "], got " + to_string(fs));
  }
  const Index rows = fs[0];
  Var h = features;
  for (std::size_t l = 0; l < decoder.layer_count(); ++l) {
    Var w = graph.parameter(decoder.weight_name(l), decoder.params.at(decoder.weight_name(l)));
    Var b = graph.parameter(decoder.bias_name(l), decoder.params.at(decoder.bias_name(l)));
    h = matmul(h, w) + broadcast_rows(b, rows);
    if (l + 1 < decoder.layer_count()) h = relu(h);
  }
  return {softplus(slice(h, 1, 0, 1)), sigmoid(slice(h, 1, 1, 4))};
}

DecodedField decode(const FieldDecoder& decoder, const Tensor& features) {
  Graph g;
  DecodedVars out = decode(g, decoder, g.constant(features));
  g.forward();
  const Tensor& density = g.value(out.density);
  return {density.reshaped({density.size()}), g.value(out.color)};
}

}  // namespace vf
