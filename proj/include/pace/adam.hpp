#pragma once

#include <cmath>
#include <cstdint>

#include "pace/errors.hpp"
#include "pace/tensor.hpp"

namespace pace {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled: applied to the parameter directly
};

/// Per-parameter-tensor optimizer state. `m`/`v` are lazily sized on the
/// first step so a default-constructed state works for any parameter shape.
struct AdamState {
  Tensor m;
  Tensor v;
  std::uint64_t step = 0;
};

/// One AdamW update:
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
///   p <- p - lr * mhat / (sqrt(vhat) + eps) - lr * wd * p
/// Weight decay is decoupled from the gradient moments.
inline void adam_step(Tensor& param, const Tensor& grad, AdamState& st, const AdamConfig& cfg) {
  if (!param.same_shape(grad)) throw ShapeError("adam_step: grad shape " + grad.shape_str() + " vs param " + param.shape_str());
  if (st.step == 0) {
    st.m = Tensor(param.shape);
    st.v = Tensor(param.shape);
  } else if (!st.m.same_shape(param)) {
    throw ShapeError("adam_step: state shape mismatch");
  }
  st.step += 1;
  const double t = static_cast<double>(st.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < param.data.size(); ++i) {
    const double g = grad.data[i];
    st.m.data[i] = cfg.beta1 * st.m.data[i] + (1.0 - cfg.beta1) * g;
    st.v.data[i] = cfg.beta2 * st.v.data[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = st.m.data[i] / bc1;
    const double vhat = st.v.data[i] / bc2;
    param.data[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps) +
                     cfg.learning_rate * cfg.weight_decay * param.data[i];
  }
  ensure_finite(param, "adam_step");
}

}  // namespace pace
