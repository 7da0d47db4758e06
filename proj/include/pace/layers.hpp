#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "pace/errors.hpp"
#include "pace/rng.hpp"
#include "pace/tensor.hpp"

namespace pace {

enum class LayerKind : std::uint32_t {
  kConv2D = 0,
  kPointwiseConv = 1,           // 1x1 conv, no bias
  kPointwiseTransposeConv = 2,  // 1x1 transpose conv, no bias
  kDense = 3,
  kReLU = 4,
  kMaxPool2D = 5,
  kGlobalAvgPool = 6,
  kSoftmax = 7,
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kConv2D: return "conv2d";
    case LayerKind::kPointwiseConv: return "pointwise_conv";
    case LayerKind::kPointwiseTransposeConv: return "pointwise_transpose_conv";
    case LayerKind::kDense: return "dense";
    case LayerKind::kReLU: return "relu";
    case LayerKind::kMaxPool2D: return "max_pool2d";
    case LayerKind::kGlobalAvgPool: return "global_avg_pool";
    case LayerKind::kSoftmax: return "softmax";
  }
  return "unknown";
}

struct LayerHyper {
  std::uint32_t kernel = 0;
  std::uint32_t stride = 0;
  std::uint32_t in_ch = 0;
  std::uint32_t out_ch = 0;
};

/// One layer: kind tag plus whatever parameters that kind carries.
/// Weight layouts:
///   conv2d: (k, k, in_ch, out_ch), bias (out_ch); stride 1, zero padding (k-1)/2
///   pointwise_conv / pointwise_transpose_conv: (out_ch, in_ch), no bias
///   dense: (out_ch, in_ch), bias (out_ch)
struct LayerParams {
  LayerKind kind = LayerKind::kReLU;
  LayerHyper hyper;
  Tensor weights;
  Tensor bias;
};

inline LayerParams make_conv2d(std::size_t kernel, std::size_t in_ch, std::size_t out_ch, Rng& rng) {
  if (kernel % 2 == 0 || kernel == 0) throw ShapeError("conv2d: kernel must be odd");
  LayerParams l;
  l.kind = LayerKind::kConv2D;
  l.hyper = {static_cast<std::uint32_t>(kernel), 1, static_cast<std::uint32_t>(in_ch),
             static_cast<std::uint32_t>(out_ch)};
  l.weights = Tensor({kernel, kernel, in_ch, out_ch});
  const double stddev = std::sqrt(2.0 / static_cast<double>(kernel * kernel * in_ch));
  for (double& w : l.weights.data) w = rng.normal(0.0, stddev);
  l.bias = Tensor({out_ch});
  return l;
}

inline LayerParams make_pointwise(LayerKind kind, std::size_t in_ch, std::size_t out_ch, Rng& rng) {
  if (kind != LayerKind::kPointwiseConv && kind != LayerKind::kPointwiseTransposeConv)
    throw ShapeError("make_pointwise: wrong kind");
  LayerParams l;
  l.kind = kind;
  l.hyper = {1, 1, static_cast<std::uint32_t>(in_ch), static_cast<std::uint32_t>(out_ch)};
  l.weights = Tensor({out_ch, in_ch});
  const double stddev = 1.0 / std::sqrt(static_cast<double>(in_ch));
  for (double& w : l.weights.data) w = rng.normal(0.0, stddev);
  return l;
}

inline LayerParams make_dense(std::size_t in_ch, std::size_t out_ch, Rng& rng) {
  LayerParams l;
  l.kind = LayerKind::kDense;
  l.hyper = {0, 0, static_cast<std::uint32_t>(in_ch), static_cast<std::uint32_t>(out_ch)};
  l.weights = Tensor({out_ch, in_ch});
  const double stddev = 1.0 / std::sqrt(static_cast<double>(in_ch));
  for (double& w : l.weights.data) w = rng.normal(0.0, stddev);
  l.bias = Tensor({out_ch});
  return l;
}

inline LayerParams make_relu() {
  LayerParams l;
  l.kind = LayerKind::kReLU;
  return l;
}

inline LayerParams make_max_pool2d() {
  LayerParams l;
  l.kind = LayerKind::kMaxPool2D;
  l.hyper = {2, 2, 0, 0};
  return l;
}

inline LayerParams make_global_avg_pool() {
  LayerParams l;
  l.kind = LayerKind::kGlobalAvgPool;
  return l;
}

inline LayerParams make_softmax() {
  LayerParams l;
  l.kind = LayerKind::kSoftmax;
  return l;
}

/// One cached forward step. `input` is always kept; `aux` holds the softmax
/// output; `arg` holds max-pool argmax flat indices (one per output cell).
struct TapeRecord {
  LayerKind kind;
  Tensor input;
  Tensor aux;
  std::vector<std::size_t> arg;
};

/// Stack of forward records, popped in reverse by backward().
struct GradientTape {
  std::vector<TapeRecord> records;

  void clear() { records.clear(); }
  std::size_t size() const { return records.size(); }
};

struct LayerGrads {
  Tensor input_grad;
  Tensor weight_grad;  // empty for parameterless kinds
  Tensor bias_grad;    // empty unless the layer has a bias
};

namespace detail {

inline void check_rank3(const Tensor& t, const char* who) {
  if (t.rank() != 3) throw ShapeError(std::string(who) + ": expected rank-3 input, got " + t.shape_str());
}

inline Tensor conv2d_forward(const LayerParams& l, const Tensor& in) {
  check_rank3(in, "conv2d");
  const std::size_t H = in.shape[0], W = in.shape[1], Ci = in.shape[2];
  if (Ci != l.hyper.in_ch) throw ShapeError("conv2d: channel mismatch");
  const std::size_t K = l.hyper.kernel, Co = l.hyper.out_ch;
  const std::size_t pad = (K - 1) / 2;
  Tensor out({H, W, Co});
  const double* wd = l.weights.data.data();
  const double* id = in.data.data();
  const double* bd = l.bias.data.data();
  double* od = out.data.data();
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      double* orow = od + (y * W + x) * Co;
      for (std::size_t oc = 0; oc < Co; ++oc) orow[oc] = bd[oc];
      for (std::size_t ky = 0; ky < K; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t kx = 0; kx < K; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(pad);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
          const double* ipx = id + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * Ci;
          const double* wbase = wd + ((ky * K + kx) * Ci) * Co;
          for (std::size_t ic = 0; ic < Ci; ++ic) {
            const double a = ipx[ic];
            const double* wrow = wbase + ic * Co;
            for (std::size_t oc = 0; oc < Co; ++oc) orow[oc] += a * wrow[oc];
          }
        }
      }
    }
  }
  return out;
}

inline LayerGrads conv2d_backward(const LayerParams& l, const Tensor& up, const Tensor& in) {
  const std::size_t H = in.shape[0], W = in.shape[1], Ci = in.shape[2];
  const std::size_t K = l.hyper.kernel, Co = l.hyper.out_ch;
  if (up.rank() != 3 || up.shape[0] != H || up.shape[1] != W || up.shape[2] != Co)
    throw ShapeError("conv2d backward: upstream shape " + up.shape_str());
  const std::size_t pad = (K - 1) / 2;
  LayerGrads g;
  g.input_grad = Tensor({H, W, Ci});
  g.weight_grad = Tensor(l.weights.shape);
  g.bias_grad = Tensor({Co});
  const double* wd = l.weights.data.data();
  const double* id = in.data.data();
  const double* ud = up.data.data();
  double* igd = g.input_grad.data.data();
  double* wgd = g.weight_grad.data.data();
  double* bgd = g.bias_grad.data.data();
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double* upx = ud + (y * W + x) * Co;
      for (std::size_t oc = 0; oc < Co; ++oc) bgd[oc] += upx[oc];
      for (std::size_t ky = 0; ky < K; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t kx = 0; kx < K; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(pad);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
          const std::size_t ioff = (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * Ci;
          const double* ipx = id + ioff;
          double* igpx = igd + ioff;
          const std::size_t wboff = ((ky * K + kx) * Ci) * Co;
          for (std::size_t ic = 0; ic < Ci; ++ic) {
            const double a = ipx[ic];
            const double* wrow = wd + wboff + ic * Co;
            double* wgrow = wgd + wboff + ic * Co;
            double s = 0.0;
            for (std::size_t oc = 0; oc < Co; ++oc) {
              const double u = upx[oc];
              s += u * wrow[oc];
              wgrow[oc] += a * u;
            }
            igpx[ic] += s;
          }
        }
      }
    }
  }
  return g;
}

// Both 1x1 kinds share the same dense per-location map out = W * in.
inline Tensor pointwise_forward(const LayerParams& l, const Tensor& in) {
  check_rank3(in, "pointwise");
  const std::size_t H = in.shape[0], W = in.shape[1], Ci = in.shape[2];
  if (Ci != l.hyper.in_ch) throw ShapeError("pointwise: channel mismatch");
  const std::size_t Co = l.hyper.out_ch;
  Tensor out({H, W, Co});
  const double* wd = l.weights.data.data();
  const double* id = in.data.data();
  double* od = out.data.data();
  for (std::size_t p = 0; p < H * W; ++p) {
    const double* ipx = id + p * Ci;
    double* opx = od + p * Co;
    for (std::size_t oc = 0; oc < Co; ++oc) {
      const double* wrow = wd + oc * Ci;
      double s = 0.0;
      for (std::size_t ic = 0; ic < Ci; ++ic) s += wrow[ic] * ipx[ic];
      opx[oc] = s;
    }
  }
  return out;
}

inline LayerGrads pointwise_backward(const LayerParams& l, const Tensor& up, const Tensor& in) {
  const std::size_t H = in.shape[0], W = in.shape[1], Ci = in.shape[2];
  const std::size_t Co = l.hyper.out_ch;
  if (up.rank() != 3 || up.shape[0] != H || up.shape[1] != W || up.shape[2] != Co)
    throw ShapeError("pointwise backward: upstream shape " + up.shape_str());
  LayerGrads g;
  g.input_grad = Tensor({H, W, Ci});
  g.weight_grad = Tensor(l.weights.shape);
  const double* wd = l.weights.data.data();
  const double* id = in.data.data();
  const double* ud = up.data.data();
  double* igd = g.input_grad.data.data();
  double* wgd = g.weight_grad.data.data();
  for (std::size_t p = 0; p < H * W; ++p) {
    const double* ipx = id + p * Ci;
    const double* upx = ud + p * Co;
    double* igpx = igd + p * Ci;
    for (std::size_t oc = 0; oc < Co; ++oc) {
      const double u = upx[oc];
      const double* wrow = wd + oc * Ci;
      double* wgrow = wgd + oc * Ci;
      for (std::size_t ic = 0; ic < Ci; ++ic) {
        igpx[ic] += u * wrow[ic];
        wgrow[ic] += u * ipx[ic];
      }
    }
  }
  return g;
}

inline Tensor dense_forward(const LayerParams& l, const Tensor& in) {
  if (in.rank() != 1) throw ShapeError("dense: expected rank-1 input, got " + in.shape_str());
  const std::size_t Ci = in.shape[0];
  if (Ci != l.hyper.in_ch) throw ShapeError("dense: width mismatch");
  const std::size_t Co = l.hyper.out_ch;
  Tensor out({Co});
  for (std::size_t oc = 0; oc < Co; ++oc) {
    const double* wrow = l.weights.data.data() + oc * Ci;
    double s = l.bias.data[oc];
    for (std::size_t ic = 0; ic < Ci; ++ic) s += wrow[ic] * in.data[ic];
    out.data[oc] = s;
  }
  return out;
}

inline LayerGrads dense_backward(const LayerParams& l, const Tensor& up, const Tensor& in) {
  const std::size_t Ci = in.shape[0], Co = l.hyper.out_ch;
  if (up.rank() != 1 || up.shape[0] != Co) throw ShapeError("dense backward: upstream shape " + up.shape_str());
  LayerGrads g;
  g.input_grad = Tensor({Ci});
  g.weight_grad = Tensor(l.weights.shape);
  g.bias_grad = Tensor({Co});
  for (std::size_t oc = 0; oc < Co; ++oc) {
    const double u = up.data[oc];
    g.bias_grad.data[oc] = u;
    const double* wrow = l.weights.data.data() + oc * Ci;
    double* wgrow = g.weight_grad.data.data() + oc * Ci;
    for (std::size_t ic = 0; ic < Ci; ++ic) {
      g.input_grad.data[ic] += u * wrow[ic];
      wgrow[ic] = u * in.data[ic];
    }
  }
  return g;
}

inline Tensor relu_forward(const Tensor& in) {
  Tensor out(in.shape);
  for (std::size_t i = 0; i < in.data.size(); ++i) out.data[i] = in.data[i] > 0.0 ? in.data[i] : 0.0;
  return out;
}

inline Tensor relu_input_grad(const Tensor& up, const Tensor& in) {
  if (!up.same_shape(in)) throw ShapeError("relu backward: upstream shape " + up.shape_str());
  Tensor g(in.shape);
  // subgradient 0 at exactly 0
  for (std::size_t i = 0; i < in.data.size(); ++i) g.data[i] = in.data[i] > 0.0 ? up.data[i] : 0.0;
  return g;
}

inline Tensor max_pool_forward(const Tensor& in, std::vector<std::size_t>* arg) {
  check_rank3(in, "max_pool2d");
  const std::size_t H = in.shape[0], W = in.shape[1], C = in.shape[2];
  if (H < 2 || W < 2) throw ShapeError("max_pool2d: input smaller than window");
  const std::size_t OH = H / 2, OW = W / 2;
  Tensor out({OH, OW, C});
  if (arg) arg->assign(out.numel(), 0);
  const double* id = in.data.data();
  double* od = out.data.data();
  for (std::size_t oy = 0; oy < OH; ++oy) {
    for (std::size_t ox = 0; ox < OW; ++ox) {
      for (std::size_t c = 0; c < C; ++c) {
        // scan the 2x2 window in row-major order; ties keep the first hit
        std::size_t best = ((2 * oy) * W + (2 * ox)) * C + c;
        double bv = id[best];
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = ((2 * oy + dy) * W + (2 * ox + dx)) * C + c;
            if (id[idx] > bv) {
              bv = id[idx];
              best = idx;
            }
          }
        }
        const std::size_t o = (oy * OW + ox) * C + c;
        od[o] = bv;
        if (arg) (*arg)[o] = best;
      }
    }
  }
  return out;
}

inline Tensor max_pool_input_grad(const Tensor& up, const Tensor& in, const std::vector<std::size_t>& arg) {
  const std::size_t OH = in.shape[0] / 2, OW = in.shape[1] / 2, C = in.shape[2];
  if (up.rank() != 3 || up.shape[0] != OH || up.shape[1] != OW || up.shape[2] != C)
    throw ShapeError("max_pool2d backward: upstream shape " + up.shape_str());
  Tensor g(in.shape);
  for (std::size_t o = 0; o < up.data.size(); ++o) g.data[arg[o]] += up.data[o];
  return g;
}

inline Tensor gap_forward(const Tensor& in) {
  check_rank3(in, "global_avg_pool");
  const std::size_t H = in.shape[0], W = in.shape[1], C = in.shape[2];
  Tensor out({C});
  const double* id = in.data.data();
  for (std::size_t p = 0; p < H * W; ++p)
    for (std::size_t c = 0; c < C; ++c) out.data[c] += id[p * C + c];
  const double inv = 1.0 / static_cast<double>(H * W);
  for (std::size_t c = 0; c < C; ++c) out.data[c] *= inv;
  return out;
}

inline Tensor gap_input_grad(const Tensor& up, const Tensor& in) {
  const std::size_t H = in.shape[0], W = in.shape[1], C = in.shape[2];
  if (up.rank() != 1 || up.shape[0] != C) throw ShapeError("global_avg_pool backward: upstream shape " + up.shape_str());
  Tensor g(in.shape);
  const double inv = 1.0 / static_cast<double>(H * W);
  for (std::size_t p = 0; p < H * W; ++p)
    for (std::size_t c = 0; c < C; ++c) g.data[p * C + c] = up.data[c] * inv;
  return g;
}

inline Tensor softmax_forward(const Tensor& in) {
  if (in.rank() != 1) throw ShapeError("softmax: expected rank-1 input, got " + in.shape_str());
  Tensor out(in.shape);
  double mx = in.data[0];
  for (double v : in.data) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t i = 0; i < in.data.size(); ++i) {
    out.data[i] = std::exp(in.data[i] - mx);
    sum += out.data[i];
  }
  const double inv = 1.0 / sum;
  for (double& v : out.data) v *= inv;
  return out;
}

inline Tensor softmax_input_grad(const Tensor& up, const Tensor& probs) {
  if (!up.same_shape(probs)) throw ShapeError("softmax backward: upstream shape " + up.shape_str());
  double updot = 0.0;
  for (std::size_t i = 0; i < probs.data.size(); ++i) updot += up.data[i] * probs.data[i];
  Tensor g(probs.shape);
  for (std::size_t i = 0; i < probs.data.size(); ++i) g.data[i] = probs.data[i] * (up.data[i] - updot);
  return g;
}

inline Tensor forward_impl(const LayerParams& l, const Tensor& in, GradientTape* tape) {
  Tensor out;
  TapeRecord rec;
  rec.kind = l.kind;
  switch (l.kind) {
    case LayerKind::kConv2D:
      out = conv2d_forward(l, in);
      break;
    case LayerKind::kPointwiseConv:
    case LayerKind::kPointwiseTransposeConv:
      out = pointwise_forward(l, in);
      break;
    case LayerKind::kDense:
      out = dense_forward(l, in);
      break;
    case LayerKind::kReLU:
      out = relu_forward(in);
      break;
    case LayerKind::kMaxPool2D:
      out = max_pool_forward(in, tape ? &rec.arg : nullptr);
      break;
    case LayerKind::kGlobalAvgPool:
      out = gap_forward(in);
      break;
    case LayerKind::kSoftmax:
      out = softmax_forward(in);
      if (tape) rec.aux = out;
      break;
  }
  ensure_finite(out, layer_kind_name(l.kind));
  if (tape) {
    rec.input = in;
    tape->records.push_back(std::move(rec));
  }
  return out;
}

}  // namespace detail

/// Run one layer. The tape overload records what backward() needs.
inline Tensor forward(const LayerParams& l, const Tensor& in, GradientTape& tape) {
  return detail::forward_impl(l, in, &tape);
}

inline Tensor forward(const LayerParams& l, const Tensor& in) { return detail::forward_impl(l, in, nullptr); }

/// Pop the most recent record off the tape and propagate `upstream` through
/// it. Throws TapeError when the tape is empty or tagged with another kind.
inline LayerGrads backward(const LayerParams& l, const Tensor& upstream, GradientTape& tape) {
  if (tape.records.empty()) throw TapeError("backward: tape is empty");
  TapeRecord rec = std::move(tape.records.back());
  tape.records.pop_back();
  if (rec.kind != l.kind)
    throw TapeError(std::string("backward: tape record is ") + layer_kind_name(rec.kind) + ", layer is " +
                    layer_kind_name(l.kind));
  LayerGrads g;
  switch (l.kind) {
    case LayerKind::kConv2D:
      g = detail::conv2d_backward(l, upstream, rec.input);
      break;
    case LayerKind::kPointwiseConv:
    case LayerKind::kPointwiseTransposeConv:
      g = detail::pointwise_backward(l, upstream, rec.input);
      break;
    case LayerKind::kDense:
      g = detail::dense_backward(l, upstream, rec.input);
      break;
    case LayerKind::kReLU:
      g.input_grad = detail::relu_input_grad(upstream, rec.input);
      break;
    case LayerKind::kMaxPool2D:
      g.input_grad = detail::max_pool_input_grad(upstream, rec.input, rec.arg);
      break;
    case LayerKind::kGlobalAvgPool:
      g.input_grad = detail::gap_input_grad(upstream, rec.input);
      break;
    case LayerKind::kSoftmax:
      g.input_grad = detail::softmax_input_grad(upstream, rec.aux);
      break;
  }
  ensure_finite(g.input_grad, "layer gradient");
  return g;
}

/// Output shape without running the layer (used by shape validation).
inline std::vector<std::size_t> output_shape(const LayerParams& l, const std::vector<std::size_t>& in) {
  switch (l.kind) {
    case LayerKind::kConv2D:
      return {in.at(0), in.at(1), l.hyper.out_ch};
    case LayerKind::kPointwiseConv:
    case LayerKind::kPointwiseTransposeConv:
      return {in.at(0), in.at(1), l.hyper.out_ch};
    case LayerKind::kDense:
      return {l.hyper.out_ch};
    case LayerKind::kReLU:
      return in;
    case LayerKind::kMaxPool2D:
      return {in.at(0) / 2, in.at(1) / 2, in.at(2)};
    case LayerKind::kGlobalAvgPool:
      return {in.at(2)};
    case LayerKind::kSoftmax:
      return in;
  }
  return in;
}

}  // namespace pace
