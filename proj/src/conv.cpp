#include "voxfuse/error.hpp"
#include "voxfuse/ops.hpp"

namespace vf {
namespace {

// Dense convolution via im2col. 2D inputs are handled as depth-1 volumes with kd = 1.
struct ConvGeometry {
  Index channels, depth, height, width;
  Index out_channels, kd, kh, kw;
  Index stride, pad_d, pad_hw;
  Index od, oh, ow;

  Index patch() const { return channels * kd * kh * kw; }
  Index positions() const { return od * oh * ow; }
};

class ConvOp final : public Op {
 public:
  ConvOp(int spatial_dims, Index stride, Index pad) : dims_(spatial_dims), stride_(stride), pad_(pad) {
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv: stride must be >= 1 and pad >= 0");
  }

  std::string_view name() const override { return dims_ == 2 ? "conv2d" : "conv3d"; }

  ConvGeometry geometry(const Shape& x, const Shape& w) const {
    const std::size_t rank = static_cast<std::size_t>(dims_) + 1;
    if (x.size() != rank || w.size() != rank + 1 || w[1] != x[0]) {
      throw ShapeError(std::string(name()) + ": input " + to_string(x) + " incompatible with kernel " + to_string(w));
    }
    ConvGeometry g{};
    g.channels = x[0];
    g.out_channels = w[0];
    g.stride = stride_;
    g.pad_hw = pad_;
    if (dims_ == 2) {
      g.depth = 1, g.height = x[1], g.width = x[2];
      g.kd = 1, g.kh = w[2], g.kw = w[3];
      g.pad_d = 0;
    } else {
      g.depth = x[1], g.height = x[2], g.width = x[3];
      g.kd = w[2], g.kh = w[3], g.kw = w[4];
      g.pad_d = pad_;
    }
    g.od = dims_ == 2 ? 1 : (g.depth + 2 * g.pad_d - g.kd) / stride_ + 1;
    g.oh = (g.height + 2 * g.pad_hw - g.kh) / stride_ + 1;
    g.ow = (g.width + 2 * g.pad_hw - g.kw) / stride_ + 1;
    if (g.od < 1 || g.oh < 1 || g.ow < 1) throw ShapeError(std::string(name()) + ": kernel larger than input");
    return g;
  }

  Shape output_shape(std::span<const Shape> in) const override {
    const ConvGeometry g = geometry(in[0], in[1]);
    if (dims_ == 2) return {g.out_channels, g.oh, g.ow};
    return {g.out_channels, g.od, g.oh, g.ow};
  }

  Tensor forward(std::span<const Tensor* const> in) override {
    geom_ = geometry(in[0]->shape(), in[1]->shape());
    const ConvGeometry& g = geom_;
    cols_.resize(g.patch(), g.positions());
    im2col(*in[0], g, cols_);
    const Shape out_shape = dims_ == 2 ? Shape{g.out_channels, g.oh, g.ow} : Shape{g.out_channels, g.od, g.oh, g.ow};
    Tensor out(out_shape);
    MatrixMap(out.data(), g.out_channels, g.positions()).noalias() =
        ConstMatrixMap(in[1]->data(), g.out_channels, g.patch()) * cols_;
    return out;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& grad,
                std::span<Tensor* const> grads) const override {
    const ConvGeometry& g = geom_;
    ConstMatrixMap gout(grad.data(), g.out_channels, g.positions());
    if (grads[1]) MatrixMap(grads[1]->data(), g.out_channels, g.patch()).noalias() += gout * cols_.transpose();
    if (grads[0]) {
      const RowMatrix dcols = ConstMatrixMap(in[1]->data(), g.out_channels, g.patch()).transpose() * gout;
      col2im(dcols, g, *grads[0]);
    }
  }

 private:
  template <class Fn>
  static void for_each_tap(const ConvGeometry& g, Fn&& fn) {
    for (Index c = 0; c < g.channels; ++c)
      for (Index a = 0; a < g.kd; ++a)
        for (Index b = 0; b < g.kh; ++b)
          for (Index e = 0; e < g.kw; ++e) {
            const Index row = ((c * g.kd + a) * g.kh + b) * g.kw + e;
            Index col = 0;
            for (Index z = 0; z < g.od; ++z) {
              const Index iz = z * g.stride - g.pad_d + a;
              for (Index y = 0; y < g.oh; ++y) {
                const Index iy = y * g.stride - g.pad_hw + b;
                for (Index x = 0; x < g.ow; ++x, ++col) {
                  const Index ix = x * g.stride - g.pad_hw + e;
                  if (iz < 0 || iz >= g.depth || iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) continue;
                  fn(row, col, ((c * g.depth + iz) * g.height + iy) * g.width + ix);
                }
              }
            }
          }
  }

  static void im2col(const Tensor& x, const ConvGeometry& g, RowMatrix& cols) {
    cols.setZero();
    for_each_tap(g, [&](Index row, Index col, Index src) { cols(row, col) = x[src]; });
  }

  static void col2im(const RowMatrix& dcols, const ConvGeometry& g, Tensor& dx) {
    for_each_tap(g, [&](Index row, Index col, Index dst) { dx[dst] += dcols(row, col); });
  }

  int dims_;
  Index stride_;
  Index pad_;
  ConvGeometry geom_{};
  RowMatrix cols_;
};

}  // namespace

Var conv2d(Var x, Var w, Index stride, Index pad) {
  return x.graph->emplace<ConvOp>({x, w}, 2, stride, pad);
}

Var conv3d(Var x, Var w, Index stride, Index pad) {
  return x.graph->emplace<ConvOp>({x, w}, 3, stride, pad);
}

}  // namespace vf
