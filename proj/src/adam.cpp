#include "voxfuse/adam.hpp"

#include "voxfuse/error.hpp"

#include <cmath>
#include <stdexcept>

namespace vf {

void adam_step(std::span<ParameterSet* const> params, const NamedTensors& grads, AdamState& state) {
  const AdamConfig& cfg = state.config;
  if (cfg.learning_rate < 0.0) throw std::invalid_argument("adam: negative learning rate");
  ++state.step;
  const double correction1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  for (ParameterSet* set : params) {
    for (auto& [name, value] : *set) {
      Tensor& m = state.first_moment[name];
      Tensor& v = state.second_moment[name];
      if (m.size() == 0 && value.size() != 0) {
        m = Tensor(value.shape());
        v = Tensor(value.shape());
      }
      require_shape(m.shape(), value.shape(), ("adam moment for " + name).c_str());
      auto it = grads.find(name);
      if (it != grads.end()) {
        require_shape(it->second.shape(), value.shape(), ("adam gradient for " + name).c_str());
        m.array() = cfg.beta1 * m.array() + (1.0 - cfg.beta1) * it->second.array();
        v.array() = cfg.beta2 * v.array() + (1.0 - cfg.beta2) * it->second.array().square();
      } else {
        m.array() *= cfg.beta1;
        v.array() *= cfg.beta2;
      }
      value.array() -= cfg.learning_rate * (m.array() / correction1) /
                       ((v.array() / correction2).sqrt() + cfg.epsilon);
    }
  }
}

}  // namespace vf
