#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "pace/adam.hpp"
#include "pace/layers.hpp"
#include "pace/rng.hpp"
#include "pace/tensor.hpp"

namespace pace {

/// A frozen-architecture CNN classifier with a designated split point.
/// layers[0 .. split_index] produce the feature map handed to explainers;
/// layers[split_index+1 ..] map the feature map to class probabilities.
struct BlackBox {
  std::vector<LayerParams> layers;
  std::size_t split_index = 0;
  std::size_t num_classes = 0;
};

inline void validate_split(const BlackBox& bb) {
  if (bb.layers.empty()) throw ShapeError("blackbox: no layers");
  if (bb.split_index + 1 >= bb.layers.size())
    throw ShapeError("blackbox: split_index must leave at least one resume layer");
}

/// 32x32x3 -> conv3x3(16)/relu/pool -> conv3x3(32)/relu/pool -> conv3x3(64)/relu
/// -> [split: 8x8x64 feature map] -> gap -> dense(num_classes) -> softmax.
inline BlackBox make_desk_blackbox(std::size_t num_classes, std::uint64_t init_seed) {
  Rng rng(init_seed);
  BlackBox bb;
  bb.num_classes = num_classes;
  bb.layers.push_back(make_conv2d(3, 3, 16, rng));
  bb.layers.push_back(make_relu());
  bb.layers.push_back(make_max_pool2d());
  bb.layers.push_back(make_conv2d(3, 16, 32, rng));
  bb.layers.push_back(make_relu());
  bb.layers.push_back(make_max_pool2d());
  bb.layers.push_back(make_conv2d(3, 32, 64, rng));
  bb.layers.push_back(make_relu());  // <- split point: 8x8x64
  bb.layers.push_back(make_global_avg_pool());
  bb.layers.push_back(make_dense(64, num_classes, rng));
  bb.layers.push_back(make_softmax());
  bb.split_index = 7;
  validate_split(bb);
  return bb;
}

namespace detail {

inline Tensor run_layers(const BlackBox& bb, const Tensor& in, std::size_t first, std::size_t last_inclusive,
                         GradientTape* tape) {
  Tensor x = in;
  for (std::size_t i = first; i <= last_inclusive; ++i)
    x = tape ? forward(bb.layers[i], x, *tape) : forward(bb.layers[i], x);
  return x;
}

}  // namespace detail

/// Class probabilities for an image (full network).
inline Tensor forward_probs(const BlackBox& bb, const Tensor& image) {
  validate_split(bb);
  return detail::run_layers(bb, image, 0, bb.layers.size() - 1, nullptr);
}

/// Feature map at the split point.
inline Tensor feature_map(const BlackBox& bb, const Tensor& image) {
  validate_split(bb);
  return detail::run_layers(bb, image, 0, bb.split_index, nullptr);
}

/// Probabilities from a (possibly synthetic) feature map: runs only the
/// layers after the split.
inline Tensor resume_forward(const BlackBox& bb, const Tensor& fmap) {
  validate_split(bb);
  return detail::run_layers(bb, fmap, bb.split_index + 1, bb.layers.size() - 1, nullptr);
}

/// Tape-recorded version of resume_forward for callers that need gradients.
inline Tensor resume_forward(const BlackBox& bb, const Tensor& fmap, GradientTape& tape) {
  validate_split(bb);
  return detail::run_layers(bb, fmap, bb.split_index + 1, bb.layers.size() - 1, &tape);
}

/// d(probs . output_grad)/d(fmap): runs the resume layers forward with a
/// tape, then propagates `output_grad` back to the feature map. The black
/// box parameters stay untouched.
inline Tensor resume_backward(const BlackBox& bb, const Tensor& fmap, const Tensor& output_grad) {
  validate_split(bb);
  GradientTape tape;
  (void)detail::run_layers(bb, fmap, bb.split_index + 1, bb.layers.size() - 1, &tape);
  Tensor g = output_grad;
  for (std::size_t i = bb.layers.size(); i-- > bb.split_index + 1;) g = backward(bb.layers[i], g, tape).input_grad;
  return g;
}

/// Cross-entropy of a probability vector against a target distribution.
inline double cross_entropy(const Tensor& probs, const Tensor& target) {
  if (!probs.same_shape(target)) throw ShapeError("cross_entropy: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < probs.data.size(); ++i)
    s -= target.data[i] * std::log(std::max(probs.data[i], 1e-300));
  return s;
}

struct TrainConfig {
  std::size_t epochs = 8;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double weight_decay = 5e-5;
  std::uint64_t seed = 0;
  bool verbose = false;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;  // fraction in [0,1]
};

struct TrainResult {
  BlackBox model;
  std::vector<EpochLog> log;
};

/// AdamW training with per-epoch seeded shuffling. epochs == 0 returns the
/// initial model unchanged. Non-finite batch loss aborts with NumericError.
inline TrainResult train_blackbox(BlackBox bb, const std::vector<Tensor>& images,
                                  const std::vector<std::size_t>& labels, const TrainConfig& cfg) {
  validate_split(bb);
  if (images.size() != labels.size()) throw ShapeError("train_blackbox: images/labels size mismatch");
  if (images.empty()) throw ShapeError("train_blackbox: empty training set");
  const std::size_t n = images.size();
  const std::size_t L = bb.layers.size();

  AdamConfig acfg;
  acfg.learning_rate = cfg.learning_rate;
  acfg.weight_decay = cfg.weight_decay;
  std::vector<AdamState> wstate(L), bstate(L);

  Rng order_rng(derive_seed(cfg.seed, "bb-batch-order"));
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;

  TrainResult res;
  res.log.reserve(cfg.epochs);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(perm);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const double invb = 1.0 / static_cast<double>(end - start);
      std::vector<Tensor> wgrad(L), bgrad(L);
      for (std::size_t i = 0; i < L; ++i) {
        if (bb.layers[i].weights.numel()) wgrad[i] = Tensor(bb.layers[i].weights.shape);
        if (bb.layers[i].bias.numel()) bgrad[i] = Tensor(bb.layers[i].bias.shape);
      }
      double batch_loss = 0.0;
      for (std::size_t bi = start; bi < end; ++bi) {
        const std::size_t idx = perm[bi];
        GradientTape tape;
        Tensor probs = detail::run_layers(bb, images[idx], 0, L - 1, &tape);
        Tensor target({bb.num_classes});
        target.data[labels[idx]] = 1.0;
        batch_loss += cross_entropy(probs, target);
        if (argmax(probs) == labels[idx]) ++correct;
        // d(ce)/d(probs) = -target/probs; composing with the softmax layer
        // backward yields the usual probs - target at the logits.
        Tensor up(probs.shape);
        for (std::size_t k = 0; k < probs.numel(); ++k)
          up.data[k] = -target.data[k] / std::max(probs.data[k], 1e-300);
        for (std::size_t li = L; li-- > 0;) {
          LayerGrads g = backward(bb.layers[li], up, tape);
          if (g.weight_grad.numel()) axpy(invb, g.weight_grad, wgrad[li]);
          if (g.bias_grad.numel()) axpy(invb, g.bias_grad, bgrad[li]);
          up = std::move(g.input_grad);
        }
      }
      batch_loss *= invb;
      if (!std::isfinite(batch_loss))
        throw NumericError("train_blackbox: non-finite loss at epoch " + std::to_string(epoch));
      loss_sum += batch_loss * static_cast<double>(end - start);
      for (std::size_t i = 0; i < L; ++i) {
        if (bb.layers[i].weights.numel()) adam_step(bb.layers[i].weights, wgrad[i], wstate[i], acfg);
        if (bb.layers[i].bias.numel()) adam_step(bb.layers[i].bias, bgrad[i], bstate[i], acfg);
      }
    }
    EpochLog el;
    el.epoch = epoch;
    el.mean_loss = loss_sum / static_cast<double>(n);
    el.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    res.log.push_back(el);
    if (cfg.verbose)
      std::fprintf(stdout, "  bb epoch %2zu  loss %.4f  train acc %.2f%%\n", epoch, el.mean_loss,
                   100.0 * el.train_accuracy);
  }
  res.model = std::move(bb);
  return res;
}

/// Fraction of images whose argmax matches the label.
inline double classification_accuracy(const BlackBox& bb, const std::vector<Tensor>& images,
                                      const std::vector<std::size_t>& labels) {
  if (images.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < images.size(); ++i)
    if (argmax(forward_probs(bb, images[i])) == labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

}  // namespace pace
