#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "can/autograd.hpp"

namespace can {

// Named finite-difference certifications shared by the CLI and the acceptance suite.
// Each module builds its own seeded parameters and inputs, so a (module, seed) pair
// always checks the same coordinates.

inline constexpr real kGradcheckTolerance = real(1e-4);

struct GradcheckResult {
  std::string module;
  std::uint64_t seed = 0;
  real max_rel_error = 0;
  std::string worst;        // "case/bundle" holding the largest error
  std::size_t checked = 0;  // coordinates compared
  double seconds = 0;
  bool passed() const { return max_rel_error <= kGradcheckTolerance; }
};

// conv3d, temporal_diff, pools, sigmoid, softmax, pmm, lmm, gmm, gscm, mtcm, block, tinycan
const std::vector<std::string>& gradcheck_modules();

// Throws ConfigError for an unknown module.
GradcheckResult gradcheck(const std::string& module, std::uint64_t seed);

}  // namespace can
