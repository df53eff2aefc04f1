#pragma once

#include "voxfuse/tensor.hpp"

#include <functional>
#include <vector>

namespace vf {

/// DDPM noising schedule. Steps are 1-based; alpha_bar(0) == 1 by convention.
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> alphas);

  int steps() const { return static_cast<int>(alpha_.size()); }
  double alpha(int t) const;
  double alpha_bar(int t) const;
  /// True when alpha_bar(T) <= 0.01, i.e. x_T is close to pure noise.
  bool sufficiently_noisy() const { return alpha_bar(steps()) <= 0.01; }

 private:
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;  // alpha_bar_[t], t = 0..T
};

/// Linear beta schedule: alpha_t = 1 - beta_t with beta_t evenly spaced in [beta_min, beta_max].
/// Prints a warning (does not throw) when the result is not sufficiently noisy.
NoiseSchedule make_linear_schedule(int steps, double beta_min, double beta_max);

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

/// Mean-plus-noise draw of x_{t-1}: sqrt(abar_{t-1}) x0_hat + sqrt(1 - abar_{t-1}) noise.
Tensor p_sample_step(const Tensor& x_t, int t, const Tensor& x0_hat, const NoiseSchedule& sched,
                     const Tensor& noise);

/// abar_{t-1} / (2 (1 - abar_{t-1})^2), defined for t >= 2.
double loss_weight(int t, const NoiseSchedule& sched);

/// Training weight: 1 when uniform, else loss_weight with t = 1 mapped to 1.
double training_weight(int t, const NoiseSchedule& sched, bool eq_weighting);

using Denoiser = std::function<Tensor(const Tensor& x_t, int t)>;

/// Full reverse chain from x_T ~ N(0, I) down to x_0.
Tensor ancestral_sample(const Denoiser& denoiser, const Shape& shape, const NoiseSchedule& sched, Rng& rng);

/// Uniform draw from [1, T].
int sample_timestep(const NoiseSchedule& sched, Rng& rng);

}  // namespace vf
