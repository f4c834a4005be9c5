// Finite-difference verification of reverse-mode gradients.

#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "usm/tensor.hpp"

namespace usm {

struct GradReport {
  double max_relative_error = 0.0;
  std::vector<std::pair<std::string, double>> per_parameter_errors;
  // Probe evaluations whose loss was not finite; their parameter is
  // reported with an infinite error.
  std::size_t non_finite_probes = 0;
};

// Compares autodiff gradients of loss_fn against central differences
// (L(x+h) - L(x-h)) / 2h for every element of every listed parameter.
// Error per parameter is ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||),
// taken as zero when both gradients vanish.
GradReport grad_check(const std::function<Tensor()>& loss_fn,
                      const std::vector<std::pair<std::string, Tensor>>& params,
                      double step = 1e-5);

}  // namespace usm
