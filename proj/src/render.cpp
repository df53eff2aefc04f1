#include "voxfuse/render.hpp"

#include "voxfuse/error.hpp"
#include "voxfuse/ops.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace vf {

void RenderConfig::validate() const {
  if (samples_per_ray < 1) throw std::invalid_argument("render: samples_per_ray must be >= 1");
}

namespace {

class CompositeOp final : public Op {
 public:
  CompositeOp(std::vector<double> deltas, Eigen::Vector3d background, std::shared_ptr<CompositeTrace> trace)
      : deltas_(std::move(deltas)), background_(background), trace_(std::move(trace)) {}

  std::string_view name() const override { return "composite"; }

  Shape output_shape(std::span<const Shape> in) const override {
    const Shape& s = in[0];
    if (s.size() != 2) throw ShapeError("composite: sigma must be [R, N]");
    if (in[1] != Shape{s[0] * s[1], 3}) throw ShapeError("composite: rgb must be [R * N, 3], got " + to_string(in[1]));
    if (static_cast<Index>(deltas_.size()) != s[0]) throw ShapeError("composite: one delta per ray required");
    return {s[0], 4};
  }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& sigma = *in[0];
    const Tensor& rgb = *in[1];
    if (!sigma.all_finite()) throw NumericalError("composite: non-finite density");
    const Index rays = sigma.dim(0), n = sigma.dim(1);
    weights_ = Tensor({rays, n});
    transmittance_ = Tensor({rays, n + 1});
    Tensor out({rays, 4});
    for (Index r = 0; r < rays; ++r) {
      const double delta = deltas_[static_cast<std::size_t>(r)];
      double trans = 1.0;
      double acc = 0.0;  // running optical depth
      double* o = out.data() + 4 * r;
      for (Index i = 0; i < n; ++i) {
        transmittance_[r * (n + 1) + i] = trans;
        acc += sigma[r * n + i] * delta;
        const double next = std::exp(-acc);
        const double w = trans - next;
        weights_[r * n + i] = w;
        const double* c = rgb.data() + 3 * (r * n + i);
        o[0] += w * c[0], o[1] += w * c[1], o[2] += w * c[2];
        trans = next;
      }
      transmittance_[r * (n + 1) + n] = trans;
      for (int k = 0; k < 3; ++k) o[k] += trans * background_[k];
      o[3] = 1.0 - trans;
    }
    if (trace_) {
      trace_->weights = weights_;
      trace_->transmittance = Tensor({rays});
      for (Index r = 0; r < rays; ++r) trace_->transmittance[r] = transmittance_[r * (n + 1) + n];
    }
    return out;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> grads) const override {
    const Tensor& rgb = *in[1];
    const Index rays = in[0]->dim(0), n = in[0]->dim(1);
    for (Index r = 0; r < rays; ++r) {
      const double* go = g.data() + 4 * r;
      if (grads[1]) {
        for (Index i = 0; i < n; ++i) {
          const double w = weights_[r * n + i];
          double* gc = grads[1]->data() + 3 * (r * n + i);
          gc[0] += w * go[0], gc[1] += w * go[1], gc[2] += w * go[2];
        }
      }
      if (!grads[0]) continue;
      const double delta = deltas_[static_cast<std::size_t>(r)];
      const double t_final = transmittance_[r * (n + 1) + n];
      const double bg_dot = go[0] * background_[0] + go[1] * background_[1] + go[2] * background_[2];
      // dL/dsigma_k = delta * (T_{k+1} <g, c_k> - sum_{i>k} w_i <g, c_i> - T_final <g, bg> + g_opacity T_final)
      double suffix = 0.0;
      for (Index k = n; k-- > 0;) {
        const double* c = rgb.data() + 3 * (r * n + k);
        const double gc = go[0] * c[0] + go[1] * c[1] + go[2] * c[2];
        const double t_next = transmittance_[r * (n + 1) + k + 1];
        (*grads[0])[r * n + k] += delta * (t_next * gc - suffix - t_final * bg_dot + go[3] * t_final);
        suffix += weights_[r * n + k] * gc;
      }
    }
  }

 private:
  std::vector<double> deltas_;
  Eigen::Vector3d background_;
  std::shared_ptr<CompositeTrace> trace_;
  Tensor weights_;
  Tensor transmittance_;
};

// Entry/exit distances of a ray through an axis-aligned box; empty when it misses.
bool clip_to_box(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const Extent& box, double& t0, double& t1) {
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < box.min[a] || o[a] > box.max[a]) return false;
      continue;
    }
    double lo = (box.min[a] - o[a]) / d[a];
    double hi = (box.max[a] - o[a]) / d[a];
    if (lo > hi) std::swap(lo, hi);
    t0 = std::max(t0, lo);
    t1 = std::min(t1, hi);
  }
  return t1 > t0;
}

}  // namespace

Var composite(Var sigma, Var rgb, std::vector<double> deltas, const Eigen::Vector3d& background,
              std::shared_ptr<CompositeTrace> trace) {
  return sigma.graph->emplace<CompositeOp>({sigma, rgb}, std::move(deltas), background, std::move(trace));
}

RaySamples sample_rays(const Rays& rays, const Extent& extent, const RenderConfig& cfg) {
  cfg.validate();
  const Index count = rays.count();
  const Index n = cfg.samples_per_ray;
  RaySamples out;
  out.points = Tensor({count * n, 3});
  out.deltas.assign(static_cast<std::size_t>(count), 0.0);
  Rng rng(cfg.seed);
  std::uniform_real_distribution<double> jitter(0.0, 1.0);
  const Eigen::Vector3d outside = extent.max + extent.size();
  for (Index r = 0; r < count; ++r) {
    const Eigen::Vector3d o = rays.origins.row(r).transpose();
    const Eigen::Vector3d d = rays.directions.row(r).transpose();
    double t0 = 0.0, t1 = rays.far[r];
    const bool hit = clip_to_box(o, d, extent, t0, t1);
    const double delta = hit ? (t1 - t0) / static_cast<double>(n) : 0.0;
    out.deltas[static_cast<std::size_t>(r)] = delta;
    for (Index i = 0; i < n; ++i) {
      const double u = cfg.stratified ? jitter(rng) : 0.5;
      const Eigen::Vector3d p = hit ? Eigen::Vector3d(o + (t0 + (static_cast<double>(i) + u) * delta) * d) : outside;
      double* dst = out.points.data() + 3 * (r * n + i);
      dst[0] = p.x(), dst[1] = p.y(), dst[2] = p.z();
    }
  }
  return out;
}

RenderVars render_rays(Graph& graph, Var grid_features, const GridSpec& spec, const FieldDecoder& decoder,
                       const Rays& rays, const RenderConfig& cfg) {
  RaySamples samples = sample_rays(rays, spec.extent, cfg);
  const Index count = rays.count();
  Var features = trilinear_gather(grid_features, graph.constant(std::move(samples.points)), spec.extent);
  DecodedVars field = decode(graph, decoder, features);
  auto trace = std::make_shared<CompositeTrace>();
  Var rgba = composite(reshape(field.density, {count, cfg.samples_per_ray}), field.color, std::move(samples.deltas),
                       cfg.background, trace);
  return {slice(rgba, 1, 0, 3), slice(rgba, 1, 3, 4), trace};
}

Var render_image(Graph& graph, Var grid_features, const GridSpec& spec, const FieldDecoder& decoder,
                 const Camera& camera, const RenderConfig& cfg) {
  RenderVars out = render_rays(graph, grid_features, spec, decoder, generate_rays(camera), cfg);
  return reshape(out.rgb, {camera.height, camera.width, 3});
}

RenderOutput render(const VoxelGrid& grid, const FieldDecoder& decoder, const Camera& camera,
                    const RenderConfig& cfg) {
  grid.validate();
  Graph g;
  RenderVars out = render_rays(g, g.constant(grid.features), grid.spec, decoder, generate_rays(camera), cfg);
  g.forward();
  RenderOutput result;
  result.image = g.value(out.rgb).reshaped({camera.height, camera.width, 3});
  result.opacity = g.value(out.opacity).reshaped({camera.height, camera.width});
  result.weights = out.trace->weights;
  result.transmittance = out.trace->transmittance.reshaped({camera.height, camera.width});
  return result;
}

double mean_squared_error(const Tensor& a, const Tensor& b) {
  require_shape(b.shape(), a.shape(), "mean_squared_error");
  if (a.size() == 0) throw ShapeError("mean_squared_error of empty tensors");
  return (a.array() - b.array()).square().mean();
}

double psnr(const Tensor& a, const Tensor& b) {
  const double err = mean_squared_error(a, b);
  if (err <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / err));
}

}  // namespace vf
