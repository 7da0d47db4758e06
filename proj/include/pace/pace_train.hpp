#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "pace/adam.hpp"
#include "pace/dataset.hpp"
#include "pace/pace.hpp"

namespace pace {

struct ModuleGrads {
  Tensor encoder_w;  // (Q, D)
  Tensor decoder_w;  // (D, Q)
  Tensor concepts;   // (C, Q)
};

struct PaceGradients {
  std::vector<ModuleGrads> modules;

  void init(const ExplainerBank& bank) {
    modules.assign(bank.modules.size(), {});
    for (std::size_t k = 0; k < bank.modules.size(); ++k) {
      modules[k].encoder_w = Tensor(bank.modules[k].encoder.weights.shape);
      modules[k].decoder_w = Tensor(bank.modules[k].decoder.weights.shape);
      modules[k].concepts = Tensor(bank.modules[k].concepts.shape);
    }
  }
};

namespace detail {

struct ModuleForward {
  Tensor E;
  SimilarityStack stack;
  std::vector<int> replaced;
  std::vector<std::size_t> anchors;
  Tensor cmap;
  Tensor fhat;
  double p = 0.0;
  std::vector<double> p_masked;  // per concept; empty if not evaluated
};

inline ModuleForward module_forward(const BlackBox& bb, const ClassExplainer& exp, const PaceHyper& hyper,
                                    const Tensor& fmap, std::size_t k, bool want_masked) {
  ModuleForward mf;
  mf.E = encode(exp, fmap);
  mf.stack = similarity(exp, hyper, mf.E);
  mf.anchors = anchor_locations(mf.stack);
  mf.cmap = concept_map(exp, mf.E, mf.stack, &mf.replaced);
  Scored sc = reconstruct_and_score(bb, exp, mf.cmap, k);
  mf.fhat = std::move(sc.reconstructed);
  mf.p = sc.probability;
  if (want_masked) {
    mf.p_masked.resize(hyper.num_concepts);
    for (std::size_t j = 0; j < hyper.num_concepts; ++j) {
      if (!any_present(mf.stack, j)) {
        mf.p_masked[j] = mf.p;  // masking nothing leaves the score untouched
        continue;
      }
      const Tensor m = masked_concept_map(mf.cmap, mf.stack, j);
      mf.p_masked[j] = reconstruct_and_score(bb, exp, m, k).probability;
    }
  }
  return mf;
}

struct Fnv1a {
  std::uint64_t h = 1469598103934665603ull;
  void feed(std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 1099511628211ull;
    }
  }
  void feed_byte(std::uint8_t v) {
    h ^= v;
    h *= 1099511628211ull;
  }
};

}  // namespace detail

/// Combined objective over a batch of cached black-box products, with
/// optional gradients for every explainer parameter and an optional
/// fingerprint of all discrete selector decisions (presence bits,
/// replacement choices, triplet anchor/negative picks, hinge activity).
/// Finite-difference checks compare the fingerprint at probe points to
/// reject instances whose piecewise-constant selectors flip.
///
/// `pure_class`, when set, restricts the relevance, diversity and triplet
/// terms to that class's module (the schedule for pure batches); the
/// cross-entropy term always covers all modules.
inline LossBreakdown objective(const BlackBox& bb, const ExplainerBank& bank,
                               const std::vector<const Tensor*>& fmaps,
                               const std::vector<const Tensor*>& bb_probs,
                               std::optional<std::size_t> pure_class, PaceGradients* grads,
                               std::uint64_t* selector_hash) {
  const std::size_t B = fmaps.size();
  const std::size_t K = bank.modules.size();
  const PaceHyper& h = bank.hyper;
  const std::size_t C = h.num_concepts;
  if (B == 0) throw ShapeError("objective: empty batch");
  if (bb_probs.size() != B) throw ShapeError("objective: fmaps/bb_probs size mismatch");
  if (bb.num_classes != K) throw ShapeError("objective: bank/black-box class count mismatch");
  const double invB = 1.0 / static_cast<double>(B);

  // ---- forward everything once
  std::vector<std::vector<detail::ModuleForward>> mf(B);
  std::vector<std::size_t> predicted(B);
  for (std::size_t i = 0; i < B; ++i) {
    predicted[i] = argmax(*bb_probs[i]);
    mf[i].reserve(K);
    for (std::size_t k = 0; k < K; ++k) {
      const bool rel_here = !pure_class || *pure_class == k;
      mf[i].push_back(detail::module_forward(bb, bank.modules[k], h, *fmaps[i], k, rel_here));
    }
  }

  detail::Fnv1a fp;
  if (selector_hash) {
    for (std::size_t i = 0; i < B; ++i) {
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t j = 0; j < C; ++j)
          for (double v : mf[i][k].stack.presence[j].data) fp.feed_byte(v > 0.0 ? 1 : 0);
        for (int c : mf[i][k].replaced) fp.feed(static_cast<std::uint64_t>(c + 1));
        for (std::size_t a : mf[i][k].anchors) fp.feed(a);
      }
    }
  }

  // ---- loss values, in the same accumulation order as the public ops
  LossBreakdown out;
  double ce_acc = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    Tensor P({K});
    for (std::size_t k = 0; k < K; ++k) P.data[k] = mf[i][k].p;
    ce_acc += loss_ce(P, detail::ce_target(*bb_probs[i], h.onehot_targets));
  }
  out.ce = ce_acc * invB;

  double rel_acc = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      if (pure_class && *pure_class != k) continue;
      const detail::ModuleForward& m = mf[i][k];
      for (std::size_t j = 0; j < C; ++j) {
        const double r = m.p - m.p_masked[j];
        const double d = r - m.p;
        rel_acc += d * d;
      }
    }
  }
  out.relevance = rel_acc * invB;

  double div = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    if (pure_class && *pure_class != k) continue;
    div += class_diversity(bank.modules[k].concepts);
  }
  out.diversity = div;

  // triplet: per class over the members predicted as that class
  std::vector<std::vector<std::size_t>> members(K);
  for (std::size_t i = 0; i < B; ++i)
    if (predicted[i] < K) members[predicted[i]].push_back(i);
  double trip = 0.0;
  std::vector<std::vector<detail::TripletTerm>> terms(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (pure_class && *pure_class != k) continue;
    std::vector<const Tensor*> embs;
    std::vector<std::vector<std::size_t>> anchors;
    for (std::size_t i : members[k]) {
      embs.push_back(&mf[i][k].E);
      anchors.push_back(mf[i][k].anchors);
    }
    trip += detail::triplet_core(embs, anchors, C, h.alpha, &terms[k]);
    if (selector_hash) {
      fp.feed(members[k].size());
      for (const detail::TripletTerm& t : terms[k]) {
        fp.feed(t.anchor_member);
        fp.feed(t.concept_j);
        fp.feed(t.positive_member);
        fp.feed(t.negative_member);
        fp.feed(t.negative_concept);
        fp.feed_byte(t.semi_hard ? 1 : 0);
        fp.feed_byte(t.active ? 1 : 0);
      }
    }
  }
  out.triplet = trip;

  out.total = h.beta * out.ce + h.gamma * out.relevance - h.delta * out.diversity + h.omega * out.triplet;
  if (!std::isfinite(out.total)) {
    const double terms_abs[4] = {std::fabs(h.beta * out.ce), std::fabs(h.gamma * out.relevance),
                                 std::fabs(h.delta * out.diversity), std::fabs(h.omega * out.triplet)};
    const char* names[4] = {"cross-entropy", "relevance", "diversity", "triplet"};
    std::size_t worst = 0;
    for (std::size_t t = 1; t < 4; ++t)
      if (!(terms_abs[t] <= terms_abs[worst])) worst = t;
    throw NumericError(std::string("objective: non-finite total loss (dominated by the ") + names[worst] +
                       " term)");
  }
  if (selector_hash) *selector_hash = fp.h;
  if (!grads) return out;

  // ---- backward
  grads->init(bank);
  const std::size_t Q = h.embed_dim;
  for (std::size_t i = 0; i < B; ++i) {
    const Tensor target = detail::ce_target(*bb_probs[i], h.onehot_targets);
    for (std::size_t k = 0; k < K; ++k) {
      const detail::ModuleForward& m = mf[i][k];
      const ClassExplainer& exp = bank.modules[k];
      ModuleGrads& g = grads->modules[k];
      const bool rel_here = (!pure_class || *pure_class == k) && h.gamma > 0.0;

      Tensor dcmap(m.cmap.shape);
      bool dcmap_used = false;

      // cross-entropy path: d/dp = -target_k / p, through the unmasked map
      const double s_p = h.beta * invB * (-target.data[k] / std::max(m.p, 1e-300));
      if (s_p != 0.0) {
        Tensor og({K});
        og.data[k] = s_p;
        Tensor G = resume_backward(bb, m.fhat, og);
        LayerGrads dg = detail::pointwise_backward(exp.decoder, G, m.cmap);
        axpy(1.0, dg.weight_grad, g.decoder_w);
        axpy(1.0, dg.input_grad, dcmap);
        dcmap_used = true;
      }

      // relevance path: each concept's masked map carries d/dp_j = -2(r-p)
      if (rel_here) {
        for (std::size_t j = 0; j < C; ++j) {
          const double r = m.p - m.p_masked[j];
          const double s_pm = h.gamma * invB * (-2.0) * (r - m.p);
          if (s_pm == 0.0 || !detail::any_present(m.stack, j)) continue;
          const Tensor mj = detail::masked_concept_map(m.cmap, m.stack, j);
          const Tensor fhat_j = forward(exp.decoder, mj);
          Tensor og({K});
          og.data[k] = s_pm;
          Tensor G = resume_backward(bb, fhat_j, og);
          LayerGrads dg = detail::pointwise_backward(exp.decoder, G, mj);
          axpy(1.0, dg.weight_grad, g.decoder_w);
          const Tensor& pres = m.stack.presence[j];
          for (std::size_t l = 0; l < pres.numel(); ++l) {
            if (pres.data[l] > 0.0) continue;  // zeroed cells absorb no gradient
            for (std::size_t q = 0; q < Q; ++q) dcmap.data[l * Q + q] += dg.input_grad.data[l * Q + q];
          }
          dcmap_used = true;
        }
      }

      // scatter concept-map gradient to the embedding or the chosen concept
      if (dcmap_used) {
        Tensor dE(m.E.shape);
        for (std::size_t l = 0; l < m.replaced.size(); ++l) {
          const int c = m.replaced[l];
          if (c >= 0) {
            double* gc = g.concepts.data.data() + static_cast<std::size_t>(c) * Q;
            for (std::size_t q = 0; q < Q; ++q) gc[q] += dcmap.data[l * Q + q];
          } else {
            for (std::size_t q = 0; q < Q; ++q) dE.data[l * Q + q] += dcmap.data[l * Q + q];
          }
        }
        // park dE on the module forward cache for the encoder pass below
        mf[i][k].cmap = std::move(dE);  // reuse storage: cmap no longer needed
        mf[i][k].fhat = Tensor();       // free
      } else {
        mf[i][k].cmap = Tensor(m.E.shape);
        mf[i][k].fhat = Tensor();
      }
    }
  }

  // triplet gradients accumulate straight into the embedding gradients
  if (h.omega > 0.0) {
    for (std::size_t k = 0; k < K; ++k) {
      for (const detail::TripletTerm& t : terms[k]) {
        if (!t.active) continue;
        const std::size_t ia = members[k][t.anchor_member];
        const std::size_t ip = members[k][t.positive_member];
        const std::size_t in = members[k][t.negative_member];
        const std::size_t la = mf[ia][k].anchors[t.concept_j];
        const std::size_t lp = mf[ip][k].anchors[t.concept_j];
        const std::size_t ln = mf[in][k].anchors[t.negative_concept];
        const double* a = mf[ia][k].E.data.data() + la * Q;
        const double* pv = mf[ip][k].E.data.data() + lp * Q;
        const double* nv = mf[in][k].E.data.data() + ln * Q;
        double* da = mf[ia][k].cmap.data.data() + la * Q;
        double* dp = mf[ip][k].cmap.data.data() + lp * Q;
        double* dn = mf[in][k].cmap.data.data() + ln * Q;
        for (std::size_t q = 0; q < Q; ++q) {
          da[q] += h.omega * 2.0 * (nv[q] - pv[q]);
          dp[q] += h.omega * (-2.0) * (a[q] - pv[q]);
          dn[q] += h.omega * 2.0 * (a[q] - nv[q]);
        }
      }
    }
  }

  // encoder weights: one pointwise backward per (image, module)
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      LayerGrads eg = detail::pointwise_backward(bank.modules[k].encoder, mf[i][k].cmap, *fmaps[i]);
      axpy(1.0, eg.weight_grad, grads->modules[k].encoder_w);
    }
  }

  // diversity: d/dc_j of sum over ordered pairs = 4 (C c_j - sum_b c_b)
  if (h.delta > 0.0) {
    for (std::size_t k = 0; k < K; ++k) {
      if (pure_class && *pure_class != k) continue;
      const Tensor& con = bank.modules[k].concepts;
      std::vector<double> colsum(Q, 0.0);
      for (std::size_t j = 0; j < C; ++j)
        for (std::size_t q = 0; q < Q; ++q) colsum[q] += con.data[j * Q + q];
      for (std::size_t j = 0; j < C; ++j)
        for (std::size_t q = 0; q < Q; ++q)
          grads->modules[k].concepts.data[j * Q + q] +=
              -h.delta * 4.0 * (static_cast<double>(C) * con.data[j * Q + q] - colsum[q]);
    }
  }
  return out;
}

/// Convenience overload for whole-batch containers.
inline LossBreakdown objective(const BlackBox& bb, const ExplainerBank& bank, const PaceBatch& batch,
                               std::optional<std::size_t> pure_class, PaceGradients* grads,
                               std::uint64_t* selector_hash) {
  std::vector<const Tensor*> f, p;
  for (const Tensor& t : batch.fmaps) f.push_back(&t);
  for (const Tensor& t : batch.bb_probs) p.push_back(&t);
  return objective(bb, bank, f, p, pure_class, grads, selector_hash);
}

/// Iteration t (0-based) runs a pure batch unless it closes a cycle of
/// rho pure + 1 mixed.
inline bool is_pure_iteration(std::size_t t, std::size_t rho) { return t % (rho + 1) < rho; }

struct PaceTrainConfig {
  PaceHyper hyper;
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  double weight_decay = 0.1;
  std::uint64_t seed = 0;
  bool verbose = false;
};

struct PaceEpochLog {
  std::size_t epoch = 0;
  double total = 0.0, ce = 0.0, relevance = 0.0, diversity = 0.0, triplet = 0.0;
  std::size_t pure_batches = 0, mixed_batches = 0;
};

struct PaceTrainResult {
  ExplainerBank bank;
  std::vector<PaceEpochLog> log;
};

/// Train the explainer bank against a frozen black box on the train split.
/// Batches follow the schedule of rho pure batches (single predicted class,
/// chosen round-robin) followed by one mixed batch. Pure batches update the
/// focal module with all four loss terms while the other modules receive
/// only the cross-entropy term. Deterministic given cfg.seed.
inline PaceTrainResult train_explainer(const BlackBox& bb, const LabeledDataset& ds, const PaceTrainConfig& cfg) {
  validate_hyper(cfg.hyper);
  const std::vector<std::size_t> train_idx = indices_of(ds, Split::kTrain);
  if (train_idx.empty()) throw ShapeError("train_explainer: empty train split");

  PaceHyper hyper = cfg.hyper;
  hyper.num_classes = ds.num_classes;

  // cache black-box products once; the black box is frozen throughout
  std::vector<Tensor> fmaps, probs;
  fmaps.reserve(train_idx.size());
  probs.reserve(train_idx.size());
  for (std::size_t idx : train_idx) {
    fmaps.push_back(feature_map(bb, ds.images[idx]));
    probs.push_back(resume_forward(bb, fmaps.back()));
  }
  hyper.feature_dim = fmaps[0].shape[2];

  std::vector<std::vector<std::size_t>> pools(hyper.num_classes);
  for (std::size_t i = 0; i < fmaps.size(); ++i) pools[argmax(probs[i])].push_back(i);

  PaceTrainResult res;
  res.bank = make_explainer_bank(hyper, derive_seed(cfg.seed, "pace-init"));
  if (cfg.epochs == 0) return res;

  AdamConfig acfg;
  acfg.learning_rate = cfg.learning_rate;
  acfg.weight_decay = cfg.weight_decay;
  struct ModuleStates {
    AdamState enc, dec, con;
  };
  std::vector<ModuleStates> states(hyper.num_classes);

  Rng order_rng(derive_seed(cfg.seed, "pace-batch-order"));
  const std::size_t n = fmaps.size();
  const std::size_t iters_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t t = 0;           // global iteration counter drives the schedule
  std::size_t rr_class = 0;    // round-robin cursor over classes with data
  PaceGradients grads;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    PaceEpochLog el;
    el.epoch = epoch;
    for (std::size_t it = 0; it < iters_per_epoch; ++it, ++t) {
      std::optional<std::size_t> pure;
      std::vector<std::size_t> picks(cfg.batch_size);
      if (is_pure_iteration(t, hyper.rho)) {
        std::size_t guard = 0;
        while (pools[rr_class % hyper.num_classes].empty() && guard++ < hyper.num_classes) ++rr_class;
        const std::size_t k = rr_class % hyper.num_classes;
        ++rr_class;
        const std::vector<std::size_t>& pool = pools[k];
        if (pool.empty()) throw ShapeError("train_explainer: no class has any predicted samples");
        if (pool.size() >= cfg.batch_size) {
          std::vector<std::size_t> shuffled = pool;
          order_rng.shuffle(shuffled);
          picks.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(cfg.batch_size));
        } else {
          for (std::size_t b = 0; b < cfg.batch_size; ++b)
            picks[b] = pool[static_cast<std::size_t>(order_rng.index(pool.size()))];
        }
        pure = k;
        ++el.pure_batches;
      } else {
        for (std::size_t b = 0; b < cfg.batch_size; ++b)
          picks[b] = static_cast<std::size_t>(order_rng.index(n));
        ++el.mixed_batches;
      }

      std::vector<const Tensor*> bf, bp;
      bf.reserve(picks.size());
      bp.reserve(picks.size());
      for (std::size_t idx : picks) {
        bf.push_back(&fmaps[idx]);
        bp.push_back(&probs[idx]);
      }
      LossBreakdown lb;
      try {
        lb = objective(bb, res.bank, bf, bp, pure, &grads, nullptr);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", iteration " +
                           std::to_string(it));
      }
      for (std::size_t k = 0; k < res.bank.modules.size(); ++k) {
        adam_step(res.bank.modules[k].encoder.weights, grads.modules[k].encoder_w, states[k].enc, acfg);
        adam_step(res.bank.modules[k].decoder.weights, grads.modules[k].decoder_w, states[k].dec, acfg);
        adam_step(res.bank.modules[k].concepts, grads.modules[k].concepts, states[k].con, acfg);
      }
      el.total += lb.total;
      el.ce += lb.ce;
      el.relevance += lb.relevance;
      el.diversity += lb.diversity;
      el.triplet += lb.triplet;
    }
    const double inv_it = 1.0 / static_cast<double>(iters_per_epoch);
    el.total *= inv_it;
    el.ce *= inv_it;
    el.relevance *= inv_it;
    el.diversity *= inv_it;
    el.triplet *= inv_it;
    res.log.push_back(el);
    if (cfg.verbose)
      std::fprintf(stdout, "  pace epoch %2zu  total %.4f  ce %.4f  rel %.5f  div %.2f  trip %.3f\n", epoch,
                   el.total, el.ce, el.relevance, el.diversity, el.triplet);
  }
  return res;
}

}  // namespace pace
