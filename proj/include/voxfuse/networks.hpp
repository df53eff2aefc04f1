#pragma once

#include "voxfuse/autodiff.hpp"

#include <memory>

namespace vf {

/// Sinusoidal embedding of a timestep, [dim].
Tensor timestep_embedding(int t, Index dim);

/// Clean-volume estimator D(V_t, V_bar, t). Volumes are [d, S, S, S].
class VolumeDenoiser {
 public:
  virtual ~VolumeDenoiser() = default;
  virtual Var denoise(Graph& graph, Var noisy, Var cond, int t) const = 0;
  virtual ParameterSet& params() = 0;
  const ParameterSet& params() const { return const_cast<VolumeDenoiser*>(this)->params(); }
};

/// Clean high-res image estimator D(I_t, cond, t). Images are [3, H, W]; cond is the
/// low-res render already upsampled to [3, H, W].
class SuperResDenoiser {
 public:
  virtual ~SuperResDenoiser() = default;
  virtual Var denoise(Graph& graph, Var noisy, Var cond, int t) const = 0;
  virtual ParameterSet& params() = 0;
  const ParameterSet& params() const { return const_cast<SuperResDenoiser*>(this)->params(); }
};

Tensor denoise_value(const VolumeDenoiser& net, const Tensor& noisy, const Tensor& cond, int t);
Tensor denoise_value(const SuperResDenoiser& net, const Tensor& noisy, const Tensor& cond, int t);

struct UNetConfig {
  Index channels = 16;   // data channels (d for volumes, 3 for images)
  Index width = 16;      // base feature width c
  Index embedding = 16;  // timestep embedding size
  bool zero_init_head = false;
  std::string prefix;
};

/// Three-level 3D encoder-decoder with skip connections. Resolution must be divisible by 4.
class VolumeUNet final : public VolumeDenoiser {
 public:
  VolumeUNet(UNetConfig cfg, Rng& rng);
  Var denoise(Graph& graph, Var noisy, Var cond, int t) const override;
  ParameterSet& params() override { return params_; }
  const UNetConfig& config() const { return cfg_; }

 private:
  UNetConfig cfg_;
  ParameterSet params_;
};

/// Two-level 2D encoder-decoder predicting a residual over the conditioning image, so a
/// zero head passes the conditioning through. Height and width must be even.
class SuperResUNet final : public SuperResDenoiser {
 public:
  SuperResUNet(UNetConfig cfg, Rng& rng);
  Var denoise(Graph& graph, Var noisy, Var cond, int t) const override;
  ParameterSet& params() override { return params_; }
  const UNetConfig& config() const { return cfg_; }

 private:
  UNetConfig cfg_;
  ParameterSet params_;
};

}  // namespace vf
