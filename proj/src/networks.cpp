#include "voxfuse/networks.hpp"

#include "voxfuse/error.hpp"
#include "voxfuse/ops.hpp"

#include <cmath>

namespace vf {

Tensor timestep_embedding(int t, Index dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("timestep embedding size must be even and >= 2");
  Tensor out({dim});
  const Index half = dim / 2;
  for (Index i = 0; i < half; ++i) {
    const double freq = std::pow(1000.0, -static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(t * freq);
    out[half + i] = std::cos(t * freq);
  }
  return out;
}

Tensor denoise_value(const VolumeDenoiser& net, const Tensor& noisy, const Tensor& cond, int t) {
  Graph g;
  Var out = net.denoise(g, g.constant(noisy), g.constant(cond), t);
  g.forward();
  return g.value(out);
}

Tensor denoise_value(const SuperResDenoiser& net, const Tensor& noisy, const Tensor& cond, int t) {
  Graph g;
  Var out = net.denoise(g, g.constant(noisy), g.constant(cond), t);
  g.forward();
  return g.value(out);
}

namespace {

/// Conv layer parameters [out, in, k...] with He init and a zero bias.
void add_conv(ParameterSet& params, const std::string& name, Index out, Index in, int dims, Rng& rng, bool zero) {
  Shape shape{out, in};
  for (int i = 0; i < dims; ++i) shape.push_back(3);
  const double fan_in = static_cast<double>(in) * std::pow(3.0, dims);
  params[name + ".w"] = zero ? Tensor(shape) : randn(shape, rng, std::sqrt(2.0 / fan_in));
  params[name + ".b"] = Tensor({out});
}

void add_embedding(ParameterSet& params, const std::string& name, Index embedding, Index width, Rng& rng) {
  params[name + ".w"] = randn({embedding, width}, rng, std::sqrt(1.0 / static_cast<double>(embedding)));
  params[name + ".b"] = Tensor({width});
}

struct LayerContext {
  Graph& graph;
  const ParameterSet& params;
  int dims;

  Var param(const std::string& name) const { return graph.parameter(name, params.at(name)); }

  Var conv(Var x, const std::string& name, Index stride = 1) const {
    Var w = param(name + ".w");
    Var y = dims == 3 ? conv3d(x, w, stride, 1) : conv2d(x, w, stride, 1);
    return add_channel_bias(y, param(name + ".b"));
  }

  /// Projected timestep embedding as a per-channel bias vector.
  Var time_bias(const std::string& name, int t, Index embedding) const {
    Var e = graph.constant(timestep_embedding(t, embedding).reshaped({1, embedding}));
    Var w = param(name + ".w");
    const Index width = w.shape()[1];
    return reshape(matmul(e, w) + reshape(param(name + ".b"), {1, width}), {width});
  }
};

void check_volume(const Shape& s, Index channels, const char* what) {
  if (s.size() != 4 || s[0] != channels || s[1] != s[2] || s[2] != s[3]) {
    throw ShapeError(std::string(what) + " must be [" + std::to_string(channels) + ", S, S, S], got " + to_string(s));
  }
  if (s[1] % 4 != 0) throw ShapeError("volume resolution must be divisible by 4, got " + std::to_string(s[1]));
}

}  // namespace

VolumeUNet::VolumeUNet(UNetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  if (cfg_.prefix.empty()) cfg_.prefix = "volume";
  const Index d = cfg_.channels, c = cfg_.width;
  const std::string& p = cfg_.prefix;
  add_conv(params_, p + ".enc0", c, 2 * d, 3, rng, false);
  add_embedding(params_, p + ".time", cfg_.embedding, c, rng);
  add_conv(params_, p + ".enc1", 2 * c, c, 3, rng, false);
  add_conv(params_, p + ".enc2", 2 * c, 2 * c, 3, rng, false);
  add_conv(params_, p + ".dec1", 2 * c, 4 * c, 3, rng, false);
  add_conv(params_, p + ".dec0", c, 3 * c, 3, rng, false);
  add_conv(params_, p + ".head", d, c, 3, rng, cfg_.zero_init_head);
}

Var VolumeUNet::denoise(Graph& graph, Var noisy, Var cond, int t) const {
  check_volume(noisy.shape(), cfg_.channels, "noisy volume");
  require_shape(cond.shape(), noisy.shape(), "conditioning volume");
  const LayerContext L{graph, params_, 3};
  const std::string& p = cfg_.prefix;
  Var e0 = silu(add_channel_bias(L.conv(concat({noisy, cond}, 0), p + ".enc0"), L.time_bias(p + ".time", t, cfg_.embedding)));
  Var e1 = silu(L.conv(e0, p + ".enc1", 2));
  Var e2 = silu(L.conv(e1, p + ".enc2", 2));
  Var d1 = silu(L.conv(concat({upsample_nearest(e2, 3), e1}, 0), p + ".dec1"));
  Var d0 = silu(L.conv(concat({upsample_nearest(d1, 3), e0}, 0), p + ".dec0"));
  return L.conv(d0, p + ".head");
}

SuperResUNet::SuperResUNet(UNetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  if (cfg_.prefix.empty()) cfg_.prefix = "superres";
  const Index k = cfg_.channels, c = cfg_.width;
  const std::string& p = cfg_.prefix;
  add_conv(params_, p + ".enc0", c, 2 * k, 2, rng, false);
  add_embedding(params_, p + ".time", cfg_.embedding, c, rng);
  add_conv(params_, p + ".enc1", 2 * c, c, 2, rng, false);
  add_conv(params_, p + ".mid", 2 * c, 2 * c, 2, rng, false);
  add_conv(params_, p + ".dec0", c, 3 * c, 2, rng, false);
  add_conv(params_, p + ".head", k, c, 2, rng, cfg_.zero_init_head);
}

Var SuperResUNet::denoise(Graph& graph, Var noisy, Var cond, int t) const {
  const Shape& s = noisy.shape();
  if (s.size() != 3 || s[0] != cfg_.channels) throw ShapeError("noisy image must be [C, H, W], got " + to_string(s));
  if (s[1] % 2 != 0 || s[2] % 2 != 0) throw ShapeError("super-resolution input needs even height and width");
  require_shape(cond.shape(), s, "conditioning image");
  const LayerContext L{graph, params_, 2};
  const std::string& p = cfg_.prefix;
  Var e0 = silu(add_channel_bias(L.conv(concat({noisy, cond}, 0), p + ".enc0"), L.time_bias(p + ".time", t, cfg_.embedding)));
  Var e1 = silu(L.conv(e0, p + ".enc1", 2));
  Var m = silu(L.conv(e1, p + ".mid"));
  Var d0 = silu(L.conv(concat({upsample_nearest(m, 2), e0}, 0), p + ".dec0"));
  return cond + L.conv(d0, p + ".head");
}

}  // namespace vf
