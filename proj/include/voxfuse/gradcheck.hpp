#pragma once

#include "voxfuse/autodiff.hpp"

#include <cstdint>

namespace vf {

struct GradcheckRow {
  std::string name;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  Index entries = 0;

  bool passed() const { return max_relative_error <= tolerance; }
};

/// Finite-difference checks of every differentiable primitive plus the composite render,
/// unprojection and joint training objectives on toy sizes.
std::vector<GradcheckRow> run_gradchecks(std::uint64_t seed, double step = 1e-5);

}  // namespace vf
