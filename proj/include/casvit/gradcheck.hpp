#pragma once

// Ready-made finite-difference checks of whole modules in f64 with eval-mode norms.
// The loss is sum(out ⊙ R) for a fixed random R, and the input itself is checked too.

#include <cstdint>
#include <string>
#include <vector>

#include "casvit/backbone.hpp"

namespace casvit {

struct ModuleCheckOptions {
  double tol = 1e-5;
  std::uint64_t seed = 0;
  // Elements checked per tensor (evenly spread); 0 checks all.
  std::size_t max_elements = 0;
  // Finite-difference step; 0 picks 1e-5, or 1e-4 for block and backbone checks.
  double eps = 0.0;
  PaddingMode padding = PaddingMode::zeros;
};

/// conv2d, batchnorm, catm, catm_dense, spatial, channel, msa, separable, swift, pool,
/// block, mini_backbone, backbone.
const std::vector<std::string>& gradcheck_modules();

/// Throws ConfigError for an unknown module name.
GradCheckReport gradcheck_module(const std::string& module, const ModuleCheckOptions& opts);

/// Smallest |x| over all relu inputs on the tape (infinity when there are none).
template <typename T>
double relu_margin(const Tape<T>& tape);

}  // namespace casvit
