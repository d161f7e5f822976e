#pragma once

#include "caf/autodiff.hpp"

#include <functional>
#include <span>
#include <string>

namespace caf {

struct GradCheckOptions {
  double eps = 1e-4;
  std::size_t samples_per_tensor = 200;  // every coordinate when the tensor is smaller
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  std::string worst;  // "param[k] coord i: analytic a numeric b"
};

/// |a - n| / max(1e-8, |a| + |n|)
double relative_error(double analytic, double numeric);

/// Builds a scalar loss on a fresh tape. Tensors under test must be bound with
/// `tape.param(...)` so that their gradients can be looked up.
using LossBuilder = std::function<Var<double>(Tape<double>&)>;

/// Compares reverse-mode gradients against central differences for each tensor in
/// `params`. Coordinates whose perturbation flips a ReLU/L1 branch are skipped.
/// Throws std::domain_error if the loss is not finite.
GradCheckReport grad_check(const LossBuilder& loss, std::span<Tensor4<double>* const> params,
                           const GradCheckOptions& opts = {});

}  // namespace caf
