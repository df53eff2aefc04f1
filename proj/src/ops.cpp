#include "voxfuse/ops.hpp"

#include "voxfuse/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

namespace vf {
namespace {

Graph& graph_of(Var a) {
  if (a.graph == nullptr) throw std::invalid_argument("Var is not attached to a graph");
  return *a.graph;
}

void require_same(std::span<const Shape> in, const char* op) {
  if (in[0] != in[1]) {
    throw ShapeError(std::string(op) + ": shapes " + to_string(in[0]) + " and " + to_string(in[1]) + " differ");
  }
}

// --- elementwise binary --------------------------------------------------------------------------

class AddOp final : public Op {
 public:
  std::string_view name() const override { return "add"; }
  Shape output_shape(std::span<const Shape> in) const override {
    require_same(in, "add");
    return in[0];
  }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out = *in[0];
    out.array() += in[1]->array();
    return out;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    for (Tensor* gi : grads) {
      if (gi) gi->array() += g.array();
    }
  }
};

class SubOp final : public Op {
 public:
  std::string_view name() const override { return "sub"; }
  Shape output_shape(std::span<const Shape> in) const override {
    require_same(in, "sub");
    return in[0];
  }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out = *in[0];
    out.array() -= in[1]->array();
    return out;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (grads[0]) grads[0]->array() += g.array();
    if (grads[1]) grads[1]->array() -= g.array();
  }
};

class MulOp final : public Op {
 public:
  std::string_view name() const override { return "mul"; }
  Shape output_shape(std::span<const Shape> in) const override {
    require_same(in, "mul");
    return in[0];
  }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out = *in[0];
    out.array() *= in[1]->array();
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (grads[0]) grads[0]->array() += g.array() * in[1]->array();
    if (grads[1]) grads[1]->array() += g.array() * in[0]->array();
  }
};

class AffineOp final : public Op {
 public:
  AffineOp(double factor, double offset) : factor_(factor), offset_(offset) {}
  std::string_view name() const override { return "affine"; }
  Shape output_shape(std::span<const Shape> in) const override { return in[0]; }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out = *in[0];
    out.array() = out.array() * factor_ + offset_;
    return out;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (grads[0]) grads[0]->array() += factor_ * g.array();
  }

 private:
  double factor_;
  double offset_;
};

class ScalarMulOp final : public Op {
 public:
  std::string_view name() const override { return "scalar_mul"; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (num_elements(in[0]) != 1) throw ShapeError("scalar_mul: first operand must hold one element");
    return in[1];
  }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out = *in[1];
    out.array() *= (*in[0])[0];
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (grads[0]) (*grads[0])[0] += (g.array() * in[1]->array()).sum();
    if (grads[1]) grads[1]->array() += (*in[0])[0] * g.array();
  }
};

// --- elementwise unary ---------------------------------------------------------------------------

double stable_softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

enum class Unary { Relu, Sigmoid, Softplus, Silu, Square };

class UnaryOp final : public Op {
 public:
  explicit UnaryOp(Unary kind) : kind_(kind) {}
  std::string_view name() const override {
    switch (kind_) {
      case Unary::Relu: return "relu";
      case Unary::Sigmoid: return "sigmoid";
      case Unary::Softplus: return "softplus";
      case Unary::Silu: return "silu";
      case Unary::Square: return "square";
    }
    return "unary";
  }
  Shape output_shape(std::span<const Shape> in) const override { return in[0]; }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out = *in[0];
    for (double& v : out.values()) {
      switch (kind_) {
        case Unary::Relu: v = v > 0 ? v : 0.0; break;
        case Unary::Sigmoid: v = stable_sigmoid(v); break;
        case Unary::Softplus: v = stable_softplus(v); break;
        case Unary::Silu: v = v * stable_sigmoid(v); break;
        case Unary::Square: v = v * v; break;
      }
    }
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (!grads[0]) return;
    Tensor& gx = *grads[0];
    const Tensor& x = *in[0];
    for (Index i = 0; i < x.size(); ++i) {
      double d = 0.0;
      switch (kind_) {
        case Unary::Relu: d = x[i] > 0 ? 1.0 : 0.0; break;
        case Unary::Sigmoid: d = out[i] * (1.0 - out[i]); break;
        case Unary::Softplus: d = stable_sigmoid(x[i]); break;
        case Unary::Silu: {
          const double sg = stable_sigmoid(x[i]);
          d = sg * (1.0 + x[i] * (1.0 - sg));
          break;
        }
        case Unary::Square: d = 2.0 * x[i]; break;
      }
      gx[i] += d * g[i];
    }
  }

 private:
  Unary kind_;
};

// --- reductions ----------------------------------------------------------------------------------

class SumOp final : public Op {
 public:
  explicit SumOp(bool average) : average_(average) {}
  std::string_view name() const override { return average_ ? "mean" : "sum"; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (average_ && num_elements(in[0]) == 0) throw ShapeError("mean of an empty tensor");
    return Shape{};
  }
  Tensor forward(std::span<const Tensor* const> in) override {
    const double s = in[0]->array().sum();
    return Tensor::scalar(average_ ? s / static_cast<double>(in[0]->size()) : s);
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (!grads[0]) return;
    const double scale = average_ ? g[0] / static_cast<double>(in[0]->size()) : g[0];
    grads[0]->array() += scale;
  }

 private:
  bool average_;
};

// --- linear algebra and layout -------------------------------------------------------------------

class MatMulOp final : public Op {
 public:
  std::string_view name() const override { return "matmul"; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (in[0].size() != 2 || in[1].size() != 2 || in[0][1] != in[1][0]) {
      throw ShapeError("matmul: incompatible shapes " + to_string(in[0]) + " x " + to_string(in[1]));
    }
    return {in[0][0], in[1][1]};
  }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out({in[0]->dim(0), in[1]->dim(1)});
    out.matrix().noalias() = in[0]->matrix() * in[1]->matrix();
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (grads[0]) grads[0]->matrix().noalias() += g.matrix() * in[1]->matrix().transpose();
    if (grads[1]) grads[1]->matrix().noalias() += in[0]->matrix().transpose() * g.matrix();
  }
};

class TransposeOp final : public Op {
 public:
  std::string_view name() const override { return "transpose"; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (in[0].size() != 2) throw ShapeError("transpose needs rank 2, got " + to_string(in[0]));
    return {in[0][1], in[0][0]};
  }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out({in[0]->dim(1), in[0]->dim(0)});
    out.matrix() = in[0]->matrix().transpose();
    return out;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (grads[0]) grads[0]->matrix() += g.matrix().transpose();
  }
};

class ReshapeOp final : public Op {
 public:
  explicit ReshapeOp(Shape shape) : shape_(std::move(shape)) {}
  std::string_view name() const override { return "reshape"; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (num_elements(in[0]) != num_elements(shape_)) {
      throw ShapeError("reshape: cannot view " + to_string(in[0]) + " as " + to_string(shape_));
    }
    return shape_;
  }
  Tensor forward(std::span<const Tensor* const> in) override { return in[0]->reshaped(shape_); }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (grads[0]) grads[0]->array() += g.array();
  }

 private:
  Shape shape_;
};

// Splits a shape around `axis` into (outer, axis extent, inner).
struct AxisSplit {
  Index outer = 1;
  Index extent = 1;
  Index inner = 1;
};

AxisSplit split_at(const Shape& s, Index axis) {
  AxisSplit r;
  for (Index i = 0; i < static_cast<Index>(s.size()); ++i) {
    if (i < axis) r.outer *= s[i];
    else if (i == axis) r.extent = s[i];
    else r.inner *= s[i];
  }
  return r;
}

class ConcatOp final : public Op {
 public:
  explicit ConcatOp(Index axis) : axis_(axis) {}
  std::string_view name() const override { return "concat"; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (in.empty()) throw ShapeError("concat of zero tensors");
    Shape out = in[0];
    if (axis_ < 0 || axis_ >= static_cast<Index>(out.size())) throw ShapeError("concat: axis out of range");
    for (std::size_t k = 1; k < in.size(); ++k) {
      if (in[k].size() != out.size()) throw ShapeError("concat: rank mismatch");
      for (std::size_t a = 0; a < out.size(); ++a) {
        if (static_cast<Index>(a) == axis_) continue;
        if (in[k][a] != out[a]) throw ShapeError("concat: shapes " + to_string(in[0]) + " and " + to_string(in[k]));
      }
      out[axis_] += in[k][axis_];
    }
    return out;
  }
  Tensor forward(std::span<const Tensor* const> in) override {
    std::vector<Shape> shapes;
    for (const Tensor* t : in) shapes.push_back(t->shape());
    Tensor out(output_shape(shapes));
    const AxisSplit total = split_at(out.shape(), axis_);
    Index offset = 0;
    for (const Tensor* t : in) {
      const AxisSplit part = split_at(t->shape(), axis_);
      const Index block = part.extent * part.inner;
      for (Index o = 0; o < part.outer; ++o) {
        std::copy_n(t->data() + o * block, block, out.data() + o * total.extent * total.inner + offset);
      }
      offset += block;
    }
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const AxisSplit total = split_at(out.shape(), axis_);
    Index offset = 0;
    for (std::size_t k = 0; k < in.size(); ++k) {
      const AxisSplit part = split_at(in[k]->shape(), axis_);
      const Index block = part.extent * part.inner;
      if (grads[k]) {
        for (Index o = 0; o < part.outer; ++o) {
          const double* src = g.data() + o * total.extent * total.inner + offset;
          double* dst = grads[k]->data() + o * block;
          for (Index i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
      offset += block;
    }
  }

 private:
  Index axis_;
};

class SliceOp final : public Op {
 public:
  SliceOp(Index axis, Index begin, Index end) : axis_(axis), begin_(begin), end_(end) {}
  std::string_view name() const override { return "slice"; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (axis_ < 0 || axis_ >= static_cast<Index>(in[0].size())) throw ShapeError("slice: axis out of range");
    if (begin_ < 0 || end_ > in[0][axis_] || begin_ >= end_) {
      throw ShapeError("slice: range [" + std::to_string(begin_) + "," + std::to_string(end_) + ") invalid for " +
                       to_string(in[0]));
    }
    Shape out = in[0];
    out[axis_] = end_ - begin_;
    return out;
  }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Shape shape = output_shape(std::vector<Shape>{in[0]->shape()});
    Tensor out(shape);
    const AxisSplit src = split_at(in[0]->shape(), axis_);
    const Index block = (end_ - begin_) * src.inner;
    for (Index o = 0; o < src.outer; ++o) {
      std::copy_n(in[0]->data() + (o * src.extent + begin_) * src.inner, block, out.data() + o * block);
    }
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (!grads[0]) return;
    const AxisSplit src = split_at(in[0]->shape(), axis_);
    const Index block = (end_ - begin_) * src.inner;
    for (Index o = 0; o < src.outer; ++o) {
      double* dst = grads[0]->data() + (o * src.extent + begin_) * src.inner;
      const double* gs = g.data() + o * block;
      for (Index i = 0; i < block; ++i) dst[i] += gs[i];
    }
  }

 private:
  Index axis_, begin_, end_;
};

class BroadcastRowsOp final : public Op {
 public:
  explicit BroadcastRowsOp(Index rows) : rows_(rows) {}
  std::string_view name() const override { return "broadcast_rows"; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (in[0].size() != 1) throw ShapeError("broadcast_rows needs a vector, got " + to_string(in[0]));
    return {rows_, in[0][0]};
  }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Index n = in[0]->size();
    Tensor out({rows_, n});
    out.matrix().rowwise() = Eigen::Map<const Eigen::RowVectorXd>(in[0]->data(), n);
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (!grads[0]) return;
    Eigen::Map<Eigen::RowVectorXd>(grads[0]->data(), in[0]->size()) += g.matrix().colwise().sum();
  }

 private:
  Index rows_;
};

class BroadcastColsOp final : public Op {
 public:
  explicit BroadcastColsOp(Index cols) : cols_(cols) {}
  std::string_view name() const override { return "broadcast_cols"; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (in[0].size() != 2 || in[0][1] != 1) throw ShapeError("broadcast_cols needs [m,1], got " + to_string(in[0]));
    return {in[0][0], cols_};
  }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Index m = in[0]->dim(0);
    Tensor out({m, cols_});
    out.matrix().colwise() = Eigen::Map<const Eigen::VectorXd>(in[0]->data(), m);
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (!grads[0]) return;
    Eigen::Map<Eigen::VectorXd>(grads[0]->data(), in[0]->dim(0)) += g.matrix().rowwise().sum();
  }

 private:
  Index cols_;
};

class ChannelBiasOp final : public Op {
 public:
  std::string_view name() const override { return "add_channel_bias"; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (in[0].empty() || in[1].size() != 1 || in[1][0] != in[0][0]) {
      throw ShapeError("add_channel_bias: " + to_string(in[0]) + " with bias " + to_string(in[1]));
    }
    return in[0];
  }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out = *in[0];
    const Index c = out.dim(0);
    MatrixMap m(out.data(), c, out.size() / c);
    m.colwise() += Eigen::Map<const Eigen::VectorXd>(in[1]->data(), c);
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const Index c = in[0]->dim(0);
    if (grads[0]) grads[0]->array() += g.array();
    if (grads[1]) {
      ConstMatrixMap m(g.data(), c, g.size() / c);
      Eigen::Map<Eigen::VectorXd>(grads[1]->data(), c) += m.rowwise().sum();
    }
  }
};

class UpsampleNearestOp final : public Op {
 public:
  explicit UpsampleNearestOp(int spatial_dims) : spatial_dims_(spatial_dims) {}
  std::string_view name() const override { return "upsample_nearest"; }
  Shape output_shape(std::span<const Shape> in) const override {
    if (static_cast<int>(in[0].size()) != spatial_dims_ + 1) {
      throw ShapeError("upsample_nearest: expected [C, spatial...], got " + to_string(in[0]));
    }
    Shape out = in[0];
    for (std::size_t a = 1; a < out.size(); ++a) out[a] *= 2;
    return out;
  }
  // Views the input as [C, D, H, W] with D = 1 in the 2D case.
  static std::array<Index, 4> dims(const Shape& s) {
    if (s.size() == 3) return {s[0], 1, s[1], s[2]};
    return {s[0], s[1], s[2], s[3]};
  }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out(output_shape(std::vector<Shape>{in[0]->shape()}));
    const auto [c, d, h, w] = dims(in[0]->shape());
    const Index dz = spatial_dims_ == 3 ? 2 : 1;
    const Index od = d * dz, oh = 2 * h, ow = 2 * w;
    for (Index ch = 0; ch < c; ++ch)
      for (Index z = 0; z < od; ++z)
        for (Index y = 0; y < oh; ++y)
          for (Index x = 0; x < ow; ++x)
            out[((ch * od + z) * oh + y) * ow + x] = (*in[0])[((ch * d + z / dz) * h + y / 2) * w + x / 2];
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (!grads[0]) return;
    const auto [c, d, h, w] = dims(in[0]->shape());
    const Index dz = spatial_dims_ == 3 ? 2 : 1;
    const Index od = d * dz, oh = 2 * h, ow = 2 * w;
    Tensor& gx = *grads[0];
    for (Index ch = 0; ch < c; ++ch)
      for (Index z = 0; z < od; ++z)
        for (Index y = 0; y < oh; ++y)
          for (Index x = 0; x < ow; ++x)
            gx[((ch * d + z / dz) * h + y / 2) * w + x / 2] += g[((ch * od + z) * oh + y) * ow + x];
  }

 private:
  int spatial_dims_;
};

class StopGradientOp final : public Op {
 public:
  std::string_view name() const override { return "stop_gradient"; }
  Shape output_shape(std::span<const Shape> in) const override { return in[0]; }
  Tensor forward(std::span<const Tensor* const> in) override { return *in[0]; }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor&,
                std::span<Tensor* const>) const override {}
};

class InjectGradientOp final : public Op {
 public:
  explicit InjectGradientOp(Tensor g) : direction_(std::move(g)) {}
  std::string_view name() const override { return "inject_gradient"; }
  Shape output_shape(std::span<const Shape> in) const override {
    require_shape(direction_.shape(), in[0], "inject_gradient direction");
    return Shape{};
  }
  Tensor forward(std::span<const Tensor* const> in) override {
    return Tensor::scalar((in[0]->array() * direction_.array()).sum() / static_cast<double>(in[0]->size()));
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    if (grads[0]) grads[0]->array() += g[0] / static_cast<double>(in[0]->size()) * direction_.array();
  }

 private:
  Tensor direction_;
};

}  // namespace

Var operator+(Var a, Var b) { return graph_of(a).emplace<AddOp>({a, b}); }
Var operator-(Var a, Var b) { return graph_of(a).emplace<SubOp>({a, b}); }
Var operator*(Var a, Var b) { return graph_of(a).emplace<MulOp>({a, b}); }
Var operator-(Var a) { return scale(a, -1.0); }
Var scale(Var a, double factor) { return graph_of(a).emplace<AffineOp>({a}, factor, 0.0); }
Var shift(Var a, double offset) { return graph_of(a).emplace<AffineOp>({a}, 1.0, offset); }
Var scalar_mul(Var s, Var a) { return graph_of(a).emplace<ScalarMulOp>({s, a}); }

Var relu(Var a) { return graph_of(a).emplace<UnaryOp>({a}, Unary::Relu); }
Var sigmoid(Var a) { return graph_of(a).emplace<UnaryOp>({a}, Unary::Sigmoid); }
Var silu(Var a) { return graph_of(a).emplace<UnaryOp>({a}, Unary::Silu); }
Var softplus(Var a) { return graph_of(a).emplace<UnaryOp>({a}, Unary::Softplus); }
Var square(Var a) { return graph_of(a).emplace<UnaryOp>({a}, Unary::Square); }

Var sum(Var a) { return graph_of(a).emplace<SumOp>({a}, false); }
Var mean(Var a) { return graph_of(a).emplace<SumOp>({a}, true); }
Var mse(Var a, Var b) { return mean(square(a - b)); }

Var matmul(Var a, Var b) { return graph_of(a).emplace<MatMulOp>({a, b}); }
Var transpose(Var a) { return graph_of(a).emplace<TransposeOp>({a}); }
Var reshape(Var a, Shape shape) { return graph_of(a).emplace<ReshapeOp>({a}, std::move(shape)); }
Var concat(const std::vector<Var>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  return graph_of(parts[0]).emplace<ConcatOp>(parts, axis);
}
Var slice(Var a, Index axis, Index begin, Index end) {
  return graph_of(a).emplace<SliceOp>({a}, axis, begin, end);
}
Var broadcast_rows(Var v, Index rows) { return graph_of(v).emplace<BroadcastRowsOp>({v}, rows); }
Var broadcast_cols(Var column, Index cols) { return graph_of(column).emplace<BroadcastColsOp>({column}, cols); }
Var add_channel_bias(Var x, Var bias) { return graph_of(x).emplace<ChannelBiasOp>({x, bias}); }
Var upsample_nearest(Var x, int spatial_dims) {
  if (spatial_dims != 2 && spatial_dims != 3) throw std::invalid_argument("upsample_nearest: 2 or 3 spatial dims");
  return graph_of(x).emplace<UpsampleNearestOp>({x}, spatial_dims);
}
Var stop_gradient(Var a) { return graph_of(a).emplace<StopGradientOp>({a}); }
Var inject_gradient(Var x, Tensor g) { return graph_of(x).emplace<InjectGradientOp>({x}, std::move(g)); }

}  // namespace vf
