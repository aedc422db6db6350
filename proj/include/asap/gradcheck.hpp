#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "asap/tensor.hpp"

namespace asap {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  // Coordinates skipped because a perturbation moved a piecewise op across a
  // breakpoint, or the base point sat exactly on one.
  std::size_t kinks = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Lower bound of the relative-error denominator. Below it, analytic and
  // numeric values are effectively compared with absolute tolerance
  // tolerance * floor.
  double floor = 1e-8;
  // Restrict the check to these flat indices of `x` (all when empty).
  std::vector<std::size_t> indices;
};

/// Central-difference check of d f / d x against reverse-mode gradients.
/// `f` must build a single-element tensor from `x`. `x` is perturbed in
/// place and restored; it must be a leaf with requires_grad set.
/// Relative error uses max(|analytic|, |numeric|, floor) as denominator.
GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                  const GradCheckOptions& opts = {});

/// Same, but perturbs one of several leaves that `f` closes over.
GradCheckReport finite_diff_check_leaf(const std::function<Tensor()>& f, Tensor leaf,
                                       const GradCheckOptions& opts = {});

}  // namespace asap
