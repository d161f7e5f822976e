#pragma once

// Finite-difference checks of every differentiable op, the CAF block components and
// the detector loss, each on a batch of random small instances.

#include "caf/grad_check.hpp"

#include <functional>
#include <string>
#include <vector>

namespace caf {

struct SuiteOptions {
  std::size_t instances = 20;
  std::uint64_t seed = 1;
  std::size_t samples_per_tensor = 200;
  std::string filter;  // substring of op names to run; empty runs all
};

struct OpCheck {
  std::string op;
  double tolerance = 1e-4;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  std::string worst;

  bool passed() const { return checked > 0 && max_rel_error < tolerance; }
};

std::vector<std::string> gradient_suite_ops();

std::vector<OpCheck> run_gradient_suite(const SuiteOptions& opts,
                                        const std::function<void(const OpCheck&)>& on_done = {});

}  // namespace caf
