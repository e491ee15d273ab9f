#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "utixvec/tensor.hpp"

namespace utixvec {

struct GradCheckOptions {
  // Coarse step; a second estimate uses eps / 10.
  double eps = 1e-4;
  // Coordinates probed per parameter tensor; smaller tensors are probed fully.
  std::size_t samples_per_tensor = 64;
  std::uint64_t seed = 0;
  // A coordinate is skipped as non-smooth (a maxpool switch inside the probe
  // interval) when the fine-step one-sided slopes disagree by more than
  // kink_tolerance, or the coarse and fine central estimates disagree by more
  // than step_tolerance (both relative).
  double kink_tolerance = 1e-2;
  double step_tolerance = 1e-5;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
};

/// Compares reverse-mode gradients of `loss` with respect to `params` against
/// central differences (f(x+eps) - f(x-eps)) / (2 eps). The relative error of
/// a coordinate is |a - n| / max(1e-8, |a| + |n|).
GradCheckReport grad_check(const std::function<Tensor<double>()>& loss,
                           std::vector<Tensor<double>> params, const GradCheckOptions& options = {});

}  // namespace utixvec
