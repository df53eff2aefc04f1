#include "voxfuse/schedule.hpp"

#include "voxfuse/error.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>
#include <string>

namespace vf {

NoiseSchedule::NoiseSchedule(std::vector<double> alphas) : alpha_(std::move(alphas)) {
  if (alpha_.empty()) throw std::invalid_argument("noise schedule needs at least one step");
  alpha_bar_.assign(alpha_.size() + 1, 1.0);
  for (std::size_t t = 1; t <= alpha_.size(); ++t) {
    const double a = alpha_[t - 1];
    if (!(a > 0.0 && a < 1.0)) throw std::invalid_argument("alpha_t must lie in (0, 1)");
    alpha_bar_[t] = alpha_bar_[t - 1] * a;
  }
}

double NoiseSchedule::alpha(int t) const {
  if (t < 1 || t > steps()) throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, T]");
  return alpha_[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > steps()) throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, T]");
  return alpha_bar_[static_cast<std::size_t>(t)];
}

NoiseSchedule make_linear_schedule(int steps, double beta_min, double beta_max) {
  if (steps < 1) throw std::invalid_argument("schedule: T must be >= 1");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw std::invalid_argument("schedule: need 0 < beta_min <= beta_max < 1");
  }
  std::vector<double> alphas(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1);
    alphas[static_cast<std::size_t>(t)] = 1.0 - (beta_min + frac * (beta_max - beta_min));
  }
  NoiseSchedule sched(std::move(alphas));
  if (!sched.sufficiently_noisy()) {
    std::cerr << "warning: noise schedule ends at alpha_bar_T = " << sched.alpha_bar(steps) << " (> 0.01)\n";
  }
  return sched;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.steps()) throw std::out_of_range("q_sample: timestep outside [1, T]");
  require_shape(eps.shape(), x0.shape(), "q_sample noise");
  const double ab = sched.alpha_bar(t);
  Tensor out(x0.shape());
  out.array() = std::sqrt(ab) * x0.array() + std::sqrt(1.0 - ab) * eps.array();
  return out;
}

Tensor p_sample_step(const Tensor& x_t, int t, const Tensor& x0_hat, const NoiseSchedule& sched,
                     const Tensor& noise) {
  if (t < 1 || t > sched.steps()) throw std::out_of_range("p_sample_step: timestep outside [1, T]");
  require_shape(x0_hat.shape(), x_t.shape(), "p_sample_step clean estimate");
  require_shape(noise.shape(), x_t.shape(), "p_sample_step noise");
  const double ab_prev = sched.alpha_bar(t - 1);
  if (t == 1) return x0_hat;
  Tensor out(x0_hat.shape());
  out.array() = std::sqrt(ab_prev) * x0_hat.array() + std::sqrt(1.0 - ab_prev) * noise.array();
  return out;
}

double loss_weight(int t, const NoiseSchedule& sched) {
  if (t < 2 || t > sched.steps()) {
    throw std::out_of_range("loss_weight: defined for 2 <= t <= T (abar_0 = 1 is a pole)");
  }
  const double ab = sched.alpha_bar(t - 1);
  return ab / (2.0 * (1.0 - ab) * (1.0 - ab));
}

double training_weight(int t, const NoiseSchedule& sched, bool eq_weighting) {
  if (!eq_weighting || t == 1) return 1.0;
  return loss_weight(t, sched);
}

Tensor ancestral_sample(const Denoiser& denoiser, const Shape& shape, const NoiseSchedule& sched, Rng& rng) {
  Tensor x = randn(shape, rng);
  for (int t = sched.steps(); t >= 1; --t) {
    Tensor x0_hat = denoiser(x, t);
    require_shape(x0_hat.shape(), shape, "denoiser output");
    Tensor noise = t > 1 ? randn(shape, rng) : Tensor(shape);
    x = p_sample_step(x, t, x0_hat, sched, noise);
  }
  return x;
}

int sample_timestep(const NoiseSchedule& sched, Rng& rng) {
  return std::uniform_int_distribution<int>(1, sched.steps())(rng);
}

}  // namespace vf
