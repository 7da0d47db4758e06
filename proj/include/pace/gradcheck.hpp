#pragma once

#include <cmath>
#include <functional>

#include "pace/tensor.hpp"

namespace pace {

/// Compare an analytic gradient against central finite differences:
///   fd_i = (f(x + h e_i) - f(x - h e_i)) / (2h)
/// Returns max_i |analytic_i - fd_i| / max(1, |analytic_i|).
inline double fd_check(const std::function<double(const Tensor&)>& f, const Tensor& x,
                       const Tensor& analytic, double h = 1e-5) {
  if (!x.same_shape(analytic)) throw ShapeError("fd_check: gradient shape mismatch");
  Tensor probe = x;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + h;
    const double fp = f(probe);
    probe.data[i] = orig - h;
    const double fm = f(probe);
    probe.data[i] = orig;
    const double fd = (fp - fm) / (2.0 * h);
    const double a = analytic.data[i];
    const double rel = std::fabs(a - fd) / std::max(1.0, std::fabs(a));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace pace
