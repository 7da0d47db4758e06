#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pace/blackbox.hpp"
#include "pace/layers.hpp"
#include "pace/rng.hpp"
#include "pace/tensor.hpp"

namespace pace {

/// Explainer hyperparameters. Desk-scale defaults; the larger published-style
/// settings (C=10, Q=32, 100 epochs) remain reachable through the config.
struct PaceHyper {
  std::size_t num_classes = 4;   // K
  std::size_t num_concepts = 4;  // C
  std::size_t embed_dim = 8;     // Q
  std::size_t feature_dim = 64;  // D, channel count at the black-box split
  double tau = 95.0;             // presence threshold, percent of per-concept max
  double epsilon = 1e-6;         // similarity stabilizer
  double alpha = 1.0;            // triplet margin
  double beta = 100.0;           // cross-entropy weight
  double gamma = 10.0;           // relevance weight
  double delta = 1.0;            // diversity weight (subtracted)
  double omega = 0.01;           // triplet weight
  std::size_t rho = 5;           // pure batches per mixed batch
  bool onehot_targets = true;    // cross-entropy target: argmax one-hot instead of soft probs
};

inline void validate_hyper(const PaceHyper& h) {
  if (h.num_classes < 2) throw ConfigError("hyper: num_classes must be >= 2");
  if (h.num_concepts < 1) throw ConfigError("hyper: num_concepts must be >= 1");
  if (h.embed_dim < 1) throw ConfigError("hyper: embed_dim must be >= 1");
  if (h.feature_dim < 1) throw ConfigError("hyper: feature_dim must be >= 1");
  if (!(h.tau > 0.0 && h.tau <= 100.0)) throw ConfigError("hyper: tau must be in (0, 100]");
  if (!(h.epsilon > 0.0)) throw ConfigError("hyper: epsilon must be > 0");
  if (h.alpha < 0.0) throw ConfigError("hyper: alpha must be >= 0");
  if (h.beta < 0.0 || h.gamma < 0.0 || h.delta < 0.0 || h.omega < 0.0)
    throw ConfigError("hyper: loss weights must be >= 0");
  if (h.rho < 1) throw ConfigError("hyper: rho must be >= 1");
}

/// One per-class module: linear encoder D->Q, linear decoder Q->D (both
/// bias-free 1x1 convolutions) and a bank of C learnable concept vectors.
struct ClassExplainer {
  LayerParams encoder;
  LayerParams decoder;
  Tensor concepts;  // (C, Q)
};

struct ExplainerBank {
  PaceHyper hyper;
  std::vector<ClassExplainer> modules;  // one per class
};

/// Seeded random initialization: fan-in-scaled normal encoder/decoder,
/// concepts i.i.d. N(0, 0.1).
inline ExplainerBank make_explainer_bank(const PaceHyper& hyper, std::uint64_t seed) {
  validate_hyper(hyper);
  ExplainerBank bank;
  bank.hyper = hyper;
  bank.modules.reserve(hyper.num_classes);
  for (std::size_t k = 0; k < hyper.num_classes; ++k) {
    Rng rng(derive_seed(seed, "pace-module", k));
    ClassExplainer m;
    m.encoder = make_pointwise(LayerKind::kPointwiseConv, hyper.feature_dim, hyper.embed_dim, rng);
    m.decoder = make_pointwise(LayerKind::kPointwiseTransposeConv, hyper.embed_dim, hyper.feature_dim, rng);
    m.concepts = Tensor({hyper.num_concepts, hyper.embed_dim});
    for (double& v : m.concepts.data) v = rng.normal(0.0, 0.1);
    bank.modules.push_back(std::move(m));
  }
  return bank;
}

/// Per-concept similarity maps plus binary presence masks.
/// presence[j] is 1 where similarity[j] >= (tau/100) * max(similarity[j]).
struct SimilarityStack {
  std::vector<Tensor> similarity;  // C maps of shape (H, W), all values > 0
  std::vector<Tensor> presence;    // C maps of shape (H, W), values 0/1
};

/// Embedding map E = encoder(F), shape (H, W, Q). Linear and bias-free.
inline Tensor encode(const ClassExplainer& exp, const Tensor& fmap) {
  return forward(exp.encoder, fmap);
}

/// Inverse-distance similarity between each location's embedding and each
/// concept vector: S_j[l] = 1 / (eps + ||E[l] - c_j||).
inline SimilarityStack similarity(const ClassExplainer& exp, const PaceHyper& hyper, const Tensor& embedding) {
  if (embedding.rank() != 3) throw ShapeError("similarity: embedding must be rank 3");
  const std::size_t H = embedding.shape[0], W = embedding.shape[1], Q = embedding.shape[2];
  if (Q != exp.concepts.shape[1]) throw ShapeError("similarity: embedding dim mismatch");
  const std::size_t C = exp.concepts.shape[0];
  SimilarityStack st;
  st.similarity.reserve(C);
  st.presence.reserve(C);
  for (std::size_t j = 0; j < C; ++j) {
    Tensor S({H, W});
    const double* cj = exp.concepts.data.data() + j * Q;
    double mx = 0.0;
    for (std::size_t l = 0; l < H * W; ++l) {
      const double* e = embedding.data.data() + l * Q;
      double d2 = 0.0;
      for (std::size_t q = 0; q < Q; ++q) {
        const double diff = e[q] - cj[q];
        d2 += diff * diff;
      }
      const double s = 1.0 / (hyper.epsilon + std::sqrt(d2));
      S.data[l] = s;
      mx = std::max(mx, s);
    }
    Tensor present({H, W});
    const double cut = (hyper.tau / 100.0) * mx;
    for (std::size_t l = 0; l < H * W; ++l) present.data[l] = S.data[l] >= cut ? 1.0 : 0.0;
    st.similarity.push_back(std::move(S));
    st.presence.push_back(std::move(present));
  }
  return st;
}

namespace detail {

/// Per location: index of the replacing concept, or -1 when no concept is
/// present there. Highest similarity wins; ties go to the lowest index.
inline std::vector<int> replacement_choices(const SimilarityStack& st) {
  const std::size_t C = st.similarity.size();
  const std::size_t n = C ? st.similarity[0].numel() : 0;
  std::vector<int> choice(n, -1);
  for (std::size_t l = 0; l < n; ++l) {
    bool any = false;
    std::size_t best = 0;
    double best_s = -1.0;
    for (std::size_t j = 0; j < C; ++j) {
      if (st.presence[j].data[l] > 0.0) any = true;
      if (st.similarity[j].data[l] > best_s) {
        best_s = st.similarity[j].data[l];
        best = j;
      }
    }
    if (any) choice[l] = static_cast<int>(best);
  }
  return choice;
}

/// Most-similar location for each concept (anchor of the triplet loss).
inline std::vector<std::size_t> anchor_locations(const SimilarityStack& st) {
  std::vector<std::size_t> anchors(st.similarity.size(), 0);
  for (std::size_t j = 0; j < st.similarity.size(); ++j) anchors[j] = argmax(st.similarity[j]);
  return anchors;
}

}  // namespace detail

/// Substitute embeddings by concept vectors at presence locations: wherever
/// at least one concept is present, the location takes the concept vector
/// with the highest similarity there; everywhere else E passes through.
inline Tensor concept_map(const ClassExplainer& exp, const Tensor& embedding, const SimilarityStack& st,
                          std::vector<int>* replaced_by = nullptr) {
  const std::size_t Q = embedding.shape[2];
  std::vector<int> choice = detail::replacement_choices(st);
  if (choice.size() != embedding.numel() / Q) throw ShapeError("concept_map: stack/embedding size mismatch");
  Tensor out = embedding;
  for (std::size_t l = 0; l < choice.size(); ++l) {
    if (choice[l] < 0) continue;
    const double* cj = exp.concepts.data.data() + static_cast<std::size_t>(choice[l]) * Q;
    for (std::size_t q = 0; q < Q; ++q) out.data[l * Q + q] = cj[q];
  }
  if (replaced_by) *replaced_by = std::move(choice);
  return out;
}

struct Scored {
  Tensor reconstructed;  // (H, W, D)
  double probability;    // class-k output on the reconstruction
};

/// Decode a concept map and score it through the tail of the black box.
inline Scored reconstruct_and_score(const BlackBox& bb, const ClassExplainer& exp, const Tensor& cmap,
                                    std::size_t class_index) {
  Scored out;
  out.reconstructed = forward(exp.decoder, cmap);
  Tensor probs = resume_forward(bb, out.reconstructed);
  if (class_index >= probs.numel()) throw ShapeError("reconstruct_and_score: class index out of range");
  out.probability = probs.data[class_index];
  return out;
}

namespace detail {

/// cmap with the locations where concept j is present zeroed out.
inline Tensor masked_concept_map(const Tensor& cmap, const SimilarityStack& st, std::size_t j) {
  const std::size_t Q = cmap.shape[2];
  Tensor m = cmap;
  for (std::size_t l = 0; l < st.presence[j].numel(); ++l)
    if (st.presence[j].data[l] > 0.0)
      for (std::size_t q = 0; q < Q; ++q) m.data[l * Q + q] = 0.0;
  return m;
}

inline bool any_present(const SimilarityStack& st, std::size_t j) {
  for (double v : st.presence[j].data)
    if (v > 0.0) return true;
  return false;
}

}  // namespace detail

/// Relevance of each concept for class k: zero the concept's presence
/// locations in the concept map, rescore, and report the probability drop
/// r_j = p - p_j. A concept with an empty presence mask changes nothing,
/// so its relevance is exactly 0.
inline std::vector<double> relevance(const BlackBox& bb, const ClassExplainer& exp, const Tensor& cmap,
                                     const SimilarityStack& st, std::size_t class_index) {
  const double p = reconstruct_and_score(bb, exp, cmap, class_index).probability;
  std::vector<double> r(st.presence.size(), 0.0);
  for (std::size_t j = 0; j < st.presence.size(); ++j) {
    if (!detail::any_present(st, j)) continue;  // masking nothing: r stays exactly 0
    const Tensor m = detail::masked_concept_map(cmap, st, j);
    const double pj = reconstruct_and_score(bb, exp, m, class_index).probability;
    r[j] = p - pj;
  }
  return r;
}

/// Cross-entropy of the assembled explainer probabilities P against a target
/// distribution. P is used as-is (its entries come from K independent
/// modules and need not sum to 1).
inline double loss_ce(const Tensor& P, const Tensor& target) {
  if (!P.same_shape(target)) throw ShapeError("loss_ce: shape mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < P.numel(); ++k) s -= target.data[k] * std::log(std::max(P.data[k], 1e-300));
  return s;
}

/// Sum over ordered pairs (j, j') of squared concept distances for one class.
inline double class_diversity(const Tensor& concepts) {
  const std::size_t C = concepts.shape[0], Q = concepts.shape[1];
  double s = 0.0;
  for (std::size_t j = 0; j < C; ++j) {
    for (std::size_t j2 = 0; j2 < C; ++j2) {
      const double* a = concepts.data.data() + j * Q;
      const double* b = concepts.data.data() + j2 * Q;
      double d2 = 0.0;
      for (std::size_t q = 0; q < Q; ++q) {
        const double diff = a[q] - b[q];
        d2 += diff * diff;
      }
      s += d2;
    }
  }
  return s;
}

/// Pairwise concept separation across all classes (maximized during
/// training: it enters the total objective with a negative sign).
inline double loss_diversity(const ExplainerBank& bank) {
  double s = 0.0;
  for (const ClassExplainer& m : bank.modules) s += class_diversity(m.concepts);
  return s;
}

namespace detail {

/// One selected triplet; indices refer to the class-k member list.
struct TripletTerm {
  std::size_t anchor_member, concept_j;
  std::size_t positive_member;
  std::size_t negative_member, negative_concept;
  bool semi_hard;  // negative chosen inside the semi-hard window
  bool active;     // hinge engaged (term > 0)
};

/// Triplet loss over the embeddings of the images predicted as one class.
/// Anchors are per-(image, concept) most-similar embedding vectors;
/// positives come from the other member images (same concept); negatives
/// from all member images, other concepts. For every anchor-positive pair
/// the negative is the closest one inside the semi-hard window
/// (d_ap < d_an < d_ap + alpha), falling back to the hardest negative.
inline double triplet_core(const std::vector<const Tensor*>& embs,
                           const std::vector<std::vector<std::size_t>>& anchors, std::size_t C, double alpha,
                           std::vector<TripletTerm>* terms) {
  const std::size_t n = embs.size();
  if (n < 2 || C < 2) return 0.0;
  const std::size_t Q = embs[0]->shape[2];
  auto vec = [&](std::size_t member, std::size_t j) {
    return embs[member]->data.data() + anchors[member][j] * Q;
  };
  auto dist2 = [&](const double* a, const double* b) {
    double s = 0.0;
    for (std::size_t q = 0; q < Q; ++q) {
      const double d = a[q] - b[q];
      s += d * d;
    }
    return s;
  };
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      const double* a = vec(i, j);
      for (std::size_t ip = 0; ip < n; ++ip) {
        if (ip == i) continue;
        const double d_ap = dist2(a, vec(ip, j));
        // scan negatives in a fixed order; strict < keeps the first minimum
        double best_semi = 0.0, best_hard = 0.0;
        bool have_semi = false, have_hard = false;
        std::size_t semi_in = 0, semi_jn = 0, hard_in = 0, hard_jn = 0;
        for (std::size_t in = 0; in < n; ++in) {
          for (std::size_t jn = 0; jn < C; ++jn) {
            if (jn == j) continue;
            const double d_an = dist2(a, vec(in, jn));
            if (!have_hard || d_an < best_hard) {
              have_hard = true;
              best_hard = d_an;
              hard_in = in;
              hard_jn = jn;
            }
            if (d_an > d_ap && d_an < d_ap + alpha && (!have_semi || d_an < best_semi)) {
              have_semi = true;
              best_semi = d_an;
              semi_in = in;
              semi_jn = jn;
            }
          }
        }
        if (!have_hard) continue;
        const double d_an = have_semi ? best_semi : best_hard;
        const double term = d_ap - d_an + alpha;
        const bool active = term > 0.0;
        if (active) loss += term;
        if (terms) {
          TripletTerm t;
          t.anchor_member = i;
          t.concept_j = j;
          t.positive_member = ip;
          t.negative_member = have_semi ? semi_in : hard_in;
          t.negative_concept = have_semi ? semi_jn : hard_jn;
          t.semi_hard = have_semi;
          t.active = active;
          terms->push_back(t);
        }
      }
    }
  }
  return loss;
}

}  // namespace detail

/// Triplet loss for class k over the embedding maps (module k's encodings)
/// of the batch images the black box predicts as class k.
inline double loss_triplet(const ExplainerBank& bank, const std::vector<Tensor>& class_embeddings,
                           std::size_t class_index) {
  if (class_index >= bank.modules.size()) throw ShapeError("loss_triplet: class index out of range");
  const ClassExplainer& exp = bank.modules[class_index];
  std::vector<const Tensor*> embs;
  std::vector<std::vector<std::size_t>> anchors;
  for (const Tensor& e : class_embeddings) {
    embs.push_back(&e);
    anchors.push_back(detail::anchor_locations(similarity(exp, bank.hyper, e)));
  }
  return detail::triplet_core(embs, anchors, bank.hyper.num_concepts, bank.hyper.alpha, nullptr);
}

/// Precomputed black-box products for a batch of images.
struct PaceBatch {
  std::vector<Tensor> fmaps;     // feature maps at the split
  std::vector<Tensor> bb_probs;  // black-box probability vectors
};

inline PaceBatch make_pace_batch(const BlackBox& bb, const std::vector<Tensor>& images) {
  PaceBatch b;
  b.fmaps.reserve(images.size());
  b.bb_probs.reserve(images.size());
  for (const Tensor& img : images) {
    b.fmaps.push_back(feature_map(bb, img));
    b.bb_probs.push_back(resume_forward(bb, b.fmaps.back()));
  }
  return b;
}

namespace detail {

inline Tensor ce_target(const Tensor& bb_probs, bool onehot) {
  if (!onehot) return bb_probs;
  Tensor t(bb_probs.shape);
  t.data[argmax(bb_probs)] = 1.0;
  return t;
}

}  // namespace detail

/// Mean (over the batch) of the squared removal relevancies:
/// (1/B) sum_i sum_k sum_j (r_k^j - p_k)^2. Since r_k^j = p_k - p_k^j this
/// equals (1/B) sum (p_k^j)^2; the definitional form is what is computed.
inline double loss_relevance(const BlackBox& bb, const ExplainerBank& bank, const PaceBatch& batch) {
  double acc = 0.0;
  for (std::size_t i = 0; i < batch.fmaps.size(); ++i) {
    for (std::size_t k = 0; k < bank.modules.size(); ++k) {
      const ClassExplainer& exp = bank.modules[k];
      const Tensor E = encode(exp, batch.fmaps[i]);
      const SimilarityStack st = similarity(exp, bank.hyper, E);
      const Tensor cmap = concept_map(exp, E, st);
      const double p = reconstruct_and_score(bb, exp, cmap, k).probability;
      const std::vector<double> r = relevance(bb, exp, cmap, st, k);
      for (std::size_t j = 0; j < r.size(); ++j) {
        const double d = r[j] - p;
        acc += d * d;
      }
    }
  }
  return acc / static_cast<double>(batch.fmaps.size());
}

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;         // batch mean
  double relevance = 0.0;  // batch mean
  double diversity = 0.0;  // bank-wide sum
  double triplet = 0.0;    // sum over classes
};

/// The combined training objective on a batch, assembled from the public
/// loss operations:
///   total = beta * L_C + gamma * L_R - delta * L_D + omega * sum_k L_T(k).
inline LossBreakdown total_loss(const BlackBox& bb, const ExplainerBank& bank, const PaceBatch& batch) {
  const std::size_t B = batch.fmaps.size();
  const std::size_t K = bank.modules.size();
  LossBreakdown out;

  double ce_acc = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    Tensor P({K});
    for (std::size_t k = 0; k < K; ++k) {
      const ClassExplainer& exp = bank.modules[k];
      const Tensor E = encode(exp, batch.fmaps[i]);
      const SimilarityStack st = similarity(exp, bank.hyper, E);
      const Tensor cmap = concept_map(exp, E, st);
      P.data[k] = reconstruct_and_score(bb, exp, cmap, k).probability;
    }
    ce_acc += loss_ce(P, detail::ce_target(batch.bb_probs[i], bank.hyper.onehot_targets));
  }
  out.ce = ce_acc / static_cast<double>(B);

  out.relevance = loss_relevance(bb, bank, batch);
  out.diversity = loss_diversity(bank);

  double trip = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<Tensor> embs;
    for (std::size_t i = 0; i < B; ++i)
      if (argmax(batch.bb_probs[i]) == k) embs.push_back(encode(bank.modules[k], batch.fmaps[i]));
    trip += loss_triplet(bank, embs, k);
  }
  out.triplet = trip;

  const PaceHyper& h = bank.hyper;
  out.total = h.beta * out.ce + h.gamma * out.relevance - h.delta * out.diversity + h.omega * out.triplet;
  ensure_finite(out.total, "total_loss");
  return out;
}

}  // namespace pace
