#pragma once

#include <functional>

#include "g3dk/tensor.hpp"

namespace g3dk {

/// A differentiable scalar function under test: builds a size-1 output from
/// `x` on the given tape. It must be evaluatable with a non-recording tape.
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::int64_t argmax = -1;
};

/// Compares the tape gradient of f at x against central finite differences,
/// componentwise. rel = |a - n| / max(|a|, |n|, 1e-6).
GradCheckResult finite_diff_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

}  // namespace g3dk
