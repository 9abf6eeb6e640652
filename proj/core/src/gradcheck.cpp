#include "g3dk/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace g3dk {

GradCheckResult finite_diff_check(const ScalarFn& f, const Tensor& x, double h) {
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor xx = x;
    xx.node = -1;
    tape.watch(xx);
    Tensor y = f(tape, xx);
    if (y.size() != 1) throw std::invalid_argument("finite_diff_check requires a scalar-valued function");
    tape.backward(y);
    analytic = tape.grad(xx);
  }

  GradCheckResult res;
  Tensor probe = x;
  probe.node = -1;
  probe.requires_grad = false;
  for (std::size_t i = 0; i < probe.data.size(); ++i) {
    const double orig = probe.data[i];
    Tape eval(false);
    probe.data[i] = orig + h;
    const double fp = f(eval, probe).item();
    probe.data[i] = orig - h;
    const double fm = f(eval, probe).item();
    probe.data[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double abs_err = std::fabs(a - numeric);
    const double rel = abs_err / std::max({std::fabs(a), std::fabs(numeric), 1e-6});
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.argmax = static_cast<std::int64_t>(i);
    }
    res.max_abs_err = std::max(res.max_abs_err, abs_err);
  }
  return res;
}

}  // namespace g3dk
