#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "pace/baseline.hpp"
#include "pace/blackbox.hpp"
#include "pace/dataset.hpp"
#include "pace/explain.hpp"
#include "pace/pace.hpp"
#include "pace/rng.hpp"
#include "pace/tensor.hpp"

namespace pace {

struct ClassAgreement {
  std::size_t n = 0;
  std::size_t agree = 0;
};

struct AgreementReport {
  std::size_t n_test = 0;
  std::size_t n_agree = 0;
  double accuracy = 0.0;                  // percent, 100 * n_agree / n_test
  std::vector<ClassAgreement> per_class;  // keyed by the black-box label
};

/// Fraction of split images where `predict` returns the same label the
/// black box does. The per-class rows bucket by the black-box label.
inline AgreementReport agreement_accuracy(const BlackBox& bb, const LabeledDataset& ds, Split split,
                                          const std::function<std::size_t(const Tensor&)>& predict) {
  const std::vector<std::size_t> idx = indices_of(ds, split);
  if (idx.empty()) throw Error("agreement_accuracy: empty evaluation split");
  AgreementReport rep;
  rep.per_class.resize(bb.num_classes);
  for (std::size_t i : idx) {
    const std::size_t bb_label = argmax(forward_probs(bb, ds.images[i]));
    const std::size_t ex_label = predict(ds.images[i]);
    ++rep.n_test;
    ++rep.per_class[bb_label].n;
    if (ex_label == bb_label) {
      ++rep.n_agree;
      ++rep.per_class[bb_label].agree;
    }
  }
  rep.accuracy = 100.0 * static_cast<double>(rep.n_agree) / static_cast<double>(rep.n_test);
  return rep;
}

inline AgreementReport agreement_accuracy(const BlackBox& bb, const ExplainerBank& bank, const LabeledDataset& ds,
                                          Split split) {
  return agreement_accuracy(bb, ds, split, [&](const Tensor& img) {
    return argmax(explainer_probs(bb, bank, feature_map(bb, img)));
  });
}

inline AgreementReport agreement_accuracy(const BlackBox& bb, const BaselineBank& bank, const LabeledDataset& ds,
                                          Split split) {
  return agreement_accuracy(bb, ds, split, [&](const Tensor& img) {
    return baseline_predict(bb, bank, img).label;
  });
}

/// Intersection-over-union of two equal-shape binary masks (cells > 0.5
/// count as set). Two empty masks give 0.
inline double mask_iou(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("mask_iou: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] > 0.5, y = b.data[i] > 0.5;
    inter += static_cast<std::size_t>(x && y);
    uni += static_cast<std::size_t>(x || y);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Shift a mask by (dy, dx) with wraparound; preserves the set-pixel count.
inline Tensor cyclic_translate(const Tensor& m, std::size_t dy, std::size_t dx) {
  if (m.rank() != 2) throw ShapeError("cyclic_translate: need a 2-D mask");
  const std::size_t H = m.shape[0], W = m.shape[1];
  Tensor out({H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) out.data[((y + dy) % H) * W + (x + dx) % W] = m.data[y * W + x];
  return out;
}

struct ConceptLocalization {
  std::size_t class_index = 0;
  std::size_t concept_index = 0;
  std::size_t images = 0;          // images scored (black-box predicted this class)
  int best_part = -1;              // ground-truth part with the best mean IoU
  double mean_iou = 0.0;           // observed mean IoU against best_part
  double null_mean = 0.0;          // mean of the permutation-null means for best_part
  double null_p95 = 0.0;           // 95th percentile of the null means
  bool beats_null = false;         // mean_iou > null_p95
  double mean_relevance = 0.0;
  std::size_t relevance_rank = 0;  // 1 = highest mean relevance within the class
};

struct LocalizationReport {
  std::vector<ConceptLocalization> concepts;  // K*C entries, class-major
  std::size_t scored = 0;                     // concepts with at least one image
  std::size_t beaten = 0;                     // concepts whose observed IoU beats the null p95
  std::size_t permutations = 0;
  std::uint64_t seed = 0;
};

/// Concept-localization proxy: per concept, the binary presence mask is
/// upsampled to image resolution and compared against every ground-truth
/// part mask; the best mean-IoU part is reported together with a null
/// distribution built from the same masks under random cyclic translations
/// (one translation per permutation/image/part, shared across concepts).
inline LocalizationReport localization_iou(const BlackBox& bb, const ExplainerBank& bank, const LabeledDataset& ds,
                                           Split split, std::size_t permutations, std::uint64_t seed) {
  const PaceHyper& h = bank.hyper;
  const std::size_t K = h.num_classes, C = h.num_concepts;
  LocalizationReport rep;
  rep.permutations = permutations;
  rep.seed = seed;

  std::vector<std::vector<std::size_t>> by_pred(K);
  for (std::size_t i : indices_of(ds, split)) by_pred[argmax(forward_probs(bb, ds.images[i]))].push_back(i);

  for (std::size_t k = 0; k < K; ++k) {
    const std::vector<std::size_t>& imgs = by_pred[k];
    std::vector<std::vector<Tensor>> presence_up(imgs.size());
    std::vector<std::vector<double>> rel(imgs.size());
    for (std::size_t ii = 0; ii < imgs.size(); ++ii) {
      const Tensor fmap = feature_map(bb, ds.images[imgs[ii]]);
      const Tensor E = encode(bank.modules[k], fmap);
      const SimilarityStack st = similarity(bank.modules[k], h, E);
      const std::size_t img_h = ds.images[imgs[ii]].shape[0];
      if (st.presence[0].shape[0] == 0 || img_h % st.presence[0].shape[0] != 0)
        throw ShapeError("localization_iou: image size not a multiple of the presence-map size");
      const std::size_t factor = img_h / st.presence[0].shape[0];
      presence_up[ii].reserve(C);
      for (std::size_t j = 0; j < C; ++j) presence_up[ii].push_back(block_upsample(st.presence[j], factor));
      const Tensor cmap = concept_map(bank.modules[k], E, st);
      rel[ii] = relevance(bb, bank.modules[k], cmap, st, k);
    }

    std::map<int, std::size_t> part_count;
    std::map<int, std::vector<double>> obs_sum;                    // per part: C sums
    std::map<int, std::vector<std::vector<double>>> null_sum;     // per part: P x C sums
    for (std::size_t ii = 0; ii < imgs.size(); ++ii)
      for (const auto& [pid, mask] : ds.masks[imgs[ii]]) {
        (void)mask;
        if (!part_count.count(pid)) {
          part_count[pid] = 0;
          obs_sum[pid].assign(C, 0.0);
          null_sum[pid].assign(permutations, std::vector<double>(C, 0.0));
        }
      }

    for (std::size_t ii = 0; ii < imgs.size(); ++ii)
      for (const auto& [pid, mask] : ds.masks[imgs[ii]]) {
        ++part_count[pid];
        for (std::size_t j = 0; j < C; ++j) obs_sum[pid][j] += mask_iou(presence_up[ii][j], mask);
      }
    for (std::size_t p = 0; p < permutations; ++p) {
      Rng rng(derive_seed(seed, "eval-null", (static_cast<std::uint64_t>(k) << 32) | p));
      for (std::size_t ii = 0; ii < imgs.size(); ++ii)
        for (const auto& [pid, mask] : ds.masks[imgs[ii]]) {
          const Tensor shifted = cyclic_translate(mask, rng.index(mask.shape[0]), rng.index(mask.shape[1]));
          for (std::size_t j = 0; j < C; ++j) null_sum[pid][p][j] += mask_iou(presence_up[ii][j], shifted);
        }
    }

    std::vector<double> mean_rel(C, 0.0);
    for (std::size_t ii = 0; ii < imgs.size(); ++ii)
      for (std::size_t j = 0; j < C; ++j) mean_rel[j] += rel[ii][j];
    if (!imgs.empty())
      for (double& v : mean_rel) v /= static_cast<double>(imgs.size());
    std::vector<std::size_t> order(C);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return mean_rel[a] > mean_rel[b]; });
    std::vector<std::size_t> rank(C, 0);
    for (std::size_t r = 0; r < C; ++r) rank[order[r]] = r + 1;

    for (std::size_t j = 0; j < C; ++j) {
      ConceptLocalization cl;
      cl.class_index = k;
      cl.concept_index = j;
      cl.images = imgs.size();
      cl.mean_relevance = mean_rel[j];
      cl.relevance_rank = rank[j];
      if (!imgs.empty() && !part_count.empty()) {
        for (const auto& [pid, cnt] : part_count) {
          if (cnt == 0) continue;
          const double mean = obs_sum[pid][j] / static_cast<double>(cnt);
          if (cl.best_part < 0 || mean > cl.mean_iou) {
            cl.best_part = pid;
            cl.mean_iou = mean;
          }
        }
        if (cl.best_part >= 0 && permutations > 0) {
          const std::size_t cnt = part_count[cl.best_part];
          std::vector<double> null_means(permutations);
          for (std::size_t p = 0; p < permutations; ++p)
            null_means[p] = null_sum[cl.best_part][p][j] / static_cast<double>(cnt);
          cl.null_mean = std::accumulate(null_means.begin(), null_means.end(), 0.0) /
                         static_cast<double>(permutations);
          std::sort(null_means.begin(), null_means.end());
          const std::size_t q = std::min(permutations - 1,
                                         static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(permutations))) - 1);
          cl.null_p95 = null_means[q];
          cl.beats_null = cl.mean_iou > cl.null_p95;
        }
        ++rep.scored;
        if (cl.beats_null) ++rep.beaten;
      }
      rep.concepts.push_back(cl);
    }
  }
  return rep;
}

struct MisclassEntry {
  std::size_t image_index = 0;
  std::size_t true_label = 0;
  std::size_t predicted_label = 0;
  std::vector<std::size_t> concept_order;  // concepts of the predicted class, most relevant first
  std::vector<double> relevances;          // aligned with concept_order
};

/// Every split image the black box gets wrong, with the predicted class's
/// concepts ordered by relevance. Explains what the model "saw" instead.
inline std::vector<MisclassEntry> misclassification_digest(const BlackBox& bb, const ExplainerBank& bank,
                                                           const LabeledDataset& ds, Split split) {
  std::vector<MisclassEntry> out;
  for (std::size_t i : indices_of(ds, split)) {
    const std::size_t pred = argmax(forward_probs(bb, ds.images[i]));
    if (pred == ds.labels[i]) continue;
    const Tensor fmap = feature_map(bb, ds.images[i]);
    const ClassExplainer& mod = bank.modules[pred];
    const Tensor E = encode(mod, fmap);
    const SimilarityStack st = similarity(mod, bank.hyper, E);
    const Tensor cmap = concept_map(mod, E, st);
    const std::vector<double> r = relevance(bb, mod, cmap, st, pred);
    MisclassEntry e;
    e.image_index = i;
    e.true_label = ds.labels[i];
    e.predicted_label = pred;
    e.concept_order.resize(r.size());
    std::iota(e.concept_order.begin(), e.concept_order.end(), 0);
    std::stable_sort(e.concept_order.begin(), e.concept_order.end(),
                     [&](std::size_t a, std::size_t b) { return r[a] > r[b]; });
    for (std::size_t j : e.concept_order) e.relevances.push_back(r[j]);
    out.push_back(std::move(e));
  }
  return out;
}

inline nlohmann::json agreement_to_json(const AgreementReport& rep) {
  nlohmann::json j;
  j["n_test"] = rep.n_test;
  j["n_agree"] = rep.n_agree;
  j["accuracy_percent"] = rep.accuracy;
  j["per_class"] = nlohmann::json::array();
  for (std::size_t k = 0; k < rep.per_class.size(); ++k)
    j["per_class"].push_back({{"class", k}, {"n", rep.per_class[k].n}, {"agree", rep.per_class[k].agree}});
  return j;
}

inline nlohmann::json localization_to_json(const LocalizationReport& rep) {
  nlohmann::json j;
  j["note"] = "localization IoU against synthetic part masks is a programmatic proxy, not a human interpretability score";
  j["permutations"] = rep.permutations;
  j["seed"] = rep.seed;
  j["scored"] = rep.scored;
  j["beaten"] = rep.beaten;
  j["concepts"] = nlohmann::json::array();
  for (const ConceptLocalization& c : rep.concepts)
    j["concepts"].push_back({{"class", c.class_index},
                             {"concept", c.concept_index},
                             {"images", c.images},
                             {"best_part", c.best_part},
                             {"mean_iou", c.mean_iou},
                             {"null_mean", c.null_mean},
                             {"null_p95", c.null_p95},
                             {"beats_null", c.beats_null},
                             {"mean_relevance", c.mean_relevance},
                             {"relevance_rank", c.relevance_rank}});
  return j;
}

inline nlohmann::json digest_to_json(const std::vector<MisclassEntry>& digest) {
  nlohmann::json j = nlohmann::json::array();
  for (const MisclassEntry& e : digest)
    j.push_back({{"image_index", e.image_index},
                 {"true_label", e.true_label},
                 {"predicted_label", e.predicted_label},
                 {"concept_order", e.concept_order},
                 {"relevances", e.relevances}});
  return j;
}

/// Plain-text table for terminals and logs.
inline std::string evaluation_summary(const AgreementReport& pace_rep, const AgreementReport* baseline_rep,
                                      const LocalizationReport& loc) {
  char line[256];
  std::string out;
  std::snprintf(line, sizeof(line), "agreement  pace %6.2f%% (%zu/%zu)\n", pace_rep.accuracy, pace_rep.n_agree,
                pace_rep.n_test);
  out += line;
  if (baseline_rep) {
    std::snprintf(line, sizeof(line), "agreement  base %6.2f%% (%zu/%zu)\n", baseline_rep->accuracy,
                  baseline_rep->n_agree, baseline_rep->n_test);
    out += line;
  }
  std::snprintf(line, sizeof(line), "localization (IoU proxy vs %zu-permutation null): %zu/%zu concepts beat p95\n",
                loc.permutations, loc.beaten, loc.scored);
  out += line;
  out += "class concept images part mean_iou null_p95 beats rel_rank\n";
  for (const ConceptLocalization& c : loc.concepts) {
    std::snprintf(line, sizeof(line), "%5zu %7zu %6zu %4d %8.4f %8.4f %5s %8zu\n", c.class_index, c.concept_index,
                  c.images, c.best_part, c.mean_iou, c.null_p95, c.beats_null ? "yes" : "no", c.relevance_rank);
    out += line;
  }
  return out;
}

}  // namespace pace
