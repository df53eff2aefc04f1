#pragma once

// Differentiable primitives over Var. Broadcasting is limited to scalar-tensor forms;
// every other shape change is an explicit op (reshape, broadcast_rows, ...).

#include "voxfuse/autodiff.hpp"

namespace vf {

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
/// Elementwise product.
Var operator*(Var a, Var b);
Var operator-(Var a);
Var scale(Var a, double factor);
Var shift(Var a, double offset);
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator+(Var a, double c) { return shift(a, c); }
/// Product of a single-element tensor `s` with every entry of `a`.
Var scalar_mul(Var s, Var a);

Var relu(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
/// x * sigmoid(x)
Var silu(Var a);
Var square(Var a);

/// Sum/mean of all entries; rank-0 result.
Var sum(Var a);
Var mean(Var a);
Var mse(Var a, Var b);

Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
Var concat(const std::vector<Var>& parts, Index axis);
Var slice(Var a, Index axis, Index begin, Index end);

/// [n] -> [rows, n]
Var broadcast_rows(Var v, Index rows);
/// [m, 1] -> [m, cols]
Var broadcast_cols(Var column, Index cols);
/// x: [C, ...], bias: [C]
Var add_channel_bias(Var x, Var bias);

/// x: [C, H, W], w: [O, C, k, k] -> [O, H', W'] (zero padding).
Var conv2d(Var x, Var w, Index stride, Index pad);
/// x: [C, D, H, W], w: [O, C, k, k, k] -> [O, D', H', W'] (zero padding).
Var conv3d(Var x, Var w, Index stride, Index pad);
/// Nearest-neighbour 2x upsampling of the trailing `spatial_dims` axes of [C, ...].
Var upsample_nearest(Var x, int spatial_dims);

/// Identity forward, zero gradient.
Var stop_gradient(Var a);
/// Scalar sum(x * g) / x.size(): its gradient with respect to x is g / x.size().
Var inject_gradient(Var x, Tensor g);

}  // namespace vf
