#pragma once

// Shared helpers for the test binaries: random tensor builders, a miniature
// split-access classifier whose post-split path is smooth (safe for finite
// differences), and a finite-difference wrapper for the explainer objective
// that rejects probe points where a discrete selector (presence bit, argmax,
// negative choice, hinge activity) flips between evaluations.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pace/blackbox.hpp"
#include "pace/gradcheck.hpp"
#include "pace/pace.hpp"
#include "pace/pace_train.hpp"
#include "pace/rng.hpp"
#include "pace/tensor.hpp"

namespace testutil {

inline pace::Tensor random_tensor(pace::Rng& rng, std::vector<std::size_t> shape, double lo = -1.0,
                                  double hi = 1.0) {
  pace::Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline pace::Tensor random_probs(pace::Rng& rng, std::size_t k) {
  pace::Tensor p({k});
  double sum = 0.0;
  for (double& v : p.data) {
    v = rng.uniform(0.05, 1.0);
    sum += v;
  }
  for (double& v : p.data) v /= sum;
  return p;
}

/// Classifier with a (H, W, D) split feature map and a smooth resume path:
/// the pre-split layers are placeholders (never run by tests that feed
/// feature maps directly), the post-split path is pooling + dense + softmax.
inline pace::BlackBox tiny_split_blackbox(std::size_t d, std::size_t num_classes, pace::Rng& rng) {
  pace::BlackBox bb;
  bb.num_classes = num_classes;
  bb.split_index = 0;
  bb.layers.push_back(pace::make_relu());  // pre-split placeholder
  bb.layers.push_back(pace::make_global_avg_pool());
  bb.layers.push_back(pace::make_dense(d, num_classes, rng));
  bb.layers.push_back(pace::make_softmax());
  return bb;
}

struct ObjectiveFixture {
  pace::BlackBox bb;
  pace::ExplainerBank bank;
  std::vector<pace::Tensor> fmaps;
  std::vector<pace::Tensor> probs;
  std::optional<std::size_t> pure_class;

  std::vector<const pace::Tensor*> fmap_ptrs() const {
    std::vector<const pace::Tensor*> v;
    for (const auto& t : fmaps) v.push_back(&t);
    return v;
  }
  std::vector<const pace::Tensor*> prob_ptrs() const {
    std::vector<const pace::Tensor*> v;
    for (const auto& t : probs) v.push_back(&t);
    return v;
  }
};

/// Random miniature objective instance: B feature maps of shape (h, w, d),
/// a K-class split classifier, and a C-concept/Q-dim explainer bank.
inline ObjectiveFixture make_objective_fixture(std::uint64_t seed, std::size_t batch = 2, std::size_t k = 3,
                                               std::size_t c = 3, std::size_t q = 3, std::size_t h = 3,
                                               std::size_t w = 3, std::size_t d = 5) {
  pace::Rng rng(seed);
  ObjectiveFixture fx;
  fx.bb = tiny_split_blackbox(d, k, rng);
  pace::PaceHyper hy;
  hy.num_classes = k;
  hy.num_concepts = c;
  hy.embed_dim = q;
  hy.feature_dim = d;
  hy.beta = 1.0;
  hy.gamma = 1.0;
  hy.delta = 1.0;
  hy.omega = 1.0;
  fx.bank = pace::make_explainer_bank(hy, seed + 17);
  // concepts drawn near the embedding scale so presence/triplet selectors vary
  for (auto& m : fx.bank.modules)
    for (double& v : m.concepts.data) v = rng.uniform(-0.8, 0.8);
  for (std::size_t b = 0; b < batch; ++b) {
    fx.fmaps.push_back(random_tensor(rng, {h, w, d}, -1.0, 1.0));
    fx.probs.push_back(random_probs(rng, k));
  }
  return fx;
}

enum class ParamBlock { kEncoder, kDecoder, kConcepts };

inline pace::Tensor& param_of(pace::ClassExplainer& m, ParamBlock which) {
  switch (which) {
    case ParamBlock::kEncoder: return m.encoder.weights;
    case ParamBlock::kDecoder: return m.decoder.weights;
    default: return m.concepts;
  }
}

inline const pace::Tensor& param_of(const pace::ClassExplainer& m, ParamBlock which) {
  return param_of(const_cast<pace::ClassExplainer&>(m), which);
}

/// Finite-difference check of the objective's gradient for one parameter
/// block of one module. Returns nullopt when any probe point changes a
/// discrete selector (detected via the selector fingerprint), in which case
/// the caller should try another seed; otherwise the max relative error.
inline std::optional<double> objective_fd_error(const ObjectiveFixture& fx, std::size_t module_index,
                                                ParamBlock which, double step = 1e-5) {
  ObjectiveFixture work = fx;
  pace::PaceGradients grads;
  grads.init(work.bank);
  std::uint64_t base_hash = 0;
  pace::objective(work.bb, work.bank, work.fmap_ptrs(), work.prob_ptrs(), work.pure_class, &grads, &base_hash);
  const pace::Tensor analytic = param_of(work.bank.modules[module_index], which);
  const pace::Tensor* analytic_grad = nullptr;
  switch (which) {
    case ParamBlock::kEncoder: analytic_grad = &grads.modules[module_index].encoder_w; break;
    case ParamBlock::kDecoder: analytic_grad = &grads.modules[module_index].decoder_w; break;
    default: analytic_grad = &grads.modules[module_index].concepts; break;
  }

  bool stable = true;
  auto f = [&](const pace::Tensor& x) {
    param_of(work.bank.modules[module_index], which) = x;
    std::uint64_t h = 0;
    const double val =
        pace::objective(work.bb, work.bank, work.fmap_ptrs(), work.prob_ptrs(), work.pure_class, nullptr, &h).total;
    if (h != base_hash) stable = false;
    return val;
  };
  const pace::Tensor x0 = param_of(fx.bank.modules[module_index], which);
  const double err = pace::fd_check(f, x0, *analytic_grad, step);
  if (!stable) return std::nullopt;
  return err;
}

/// Run the fd check over fresh seeds until `instances` selector-stable
/// instances have been scored; returns the worst relative error seen.
inline double worst_stable_fd_error(std::uint64_t seed0, std::size_t instances, ParamBlock which,
                                    const std::function<void(pace::PaceHyper&)>& tweak_hyper = nullptr,
                                    bool pure_mode = false) {
  double worst = 0.0;
  std::size_t done = 0;
  for (std::uint64_t s = seed0; done < instances; ++s) {
    ObjectiveFixture fx = make_objective_fixture(s);
    if (tweak_hyper) {
      pace::PaceHyper hy = fx.bank.hyper;
      tweak_hyper(hy);
      fx.bank.hyper = hy;
    }
    if (pure_mode) fx.pure_class = s % fx.bank.hyper.num_classes;
    const std::size_t module_index = s % fx.bank.modules.size();
    const std::optional<double> err = objective_fd_error(fx, module_index, which);
    if (!err) continue;  // a probe crossed a selector boundary; not a gradient defect
    worst = std::max(worst, *err);
    ++done;
  }
  return worst;
}

inline std::string fresh_dir(const std::string& tag) {
  const std::string dir = (std::filesystem::temp_directory_path() / ("pace_test_" + tag)).string();
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
