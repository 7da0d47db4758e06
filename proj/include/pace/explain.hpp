#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pace/blackbox.hpp"
#include "pace/netpbm.hpp"
#include "pace/pace.hpp"

namespace pace {

/// Nearest-neighbor upsampling by an integer factor (used for binary masks,
/// which must stay binary).
inline Tensor block_upsample(const Tensor& m, std::size_t factor) {
  if (m.rank() != 2) throw ShapeError("block_upsample: expected rank-2, got " + m.shape_str());
  const std::size_t H = m.shape[0], W = m.shape[1];
  Tensor out({H * factor, W * factor});
  for (std::size_t y = 0; y < H * factor; ++y)
    for (std::size_t x = 0; x < W * factor; ++x) out.data[y * W * factor + x] = m.data[(y / factor) * W + x / factor];
  return out;
}

/// Bilinear upsampling with half-pixel-center sampling (used for continuous
/// heatmaps).
inline Tensor bilinear_upsample(const Tensor& m, std::size_t H2, std::size_t W2) {
  if (m.rank() != 2) throw ShapeError("bilinear_upsample: expected rank-2, got " + m.shape_str());
  const std::size_t H = m.shape[0], W = m.shape[1];
  Tensor out({H2, W2});
  const double sy = static_cast<double>(H) / static_cast<double>(H2);
  const double sx = static_cast<double>(W) / static_cast<double>(W2);
  for (std::size_t y = 0; y < H2; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    const double cy = std::clamp(fy, 0.0, static_cast<double>(H - 1));
    const std::size_t y0 = static_cast<std::size_t>(cy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double wy = cy - static_cast<double>(y0);
    for (std::size_t x = 0; x < W2; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      const double cx = std::clamp(fx, 0.0, static_cast<double>(W - 1));
      const std::size_t x0 = static_cast<std::size_t>(cx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double wx = cx - static_cast<double>(x0);
      const double v00 = m.data[y0 * W + x0], v01 = m.data[y0 * W + x1];
      const double v10 = m.data[y1 * W + x0], v11 = m.data[y1 * W + x1];
      out.data[y * W2 + x] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11);
    }
  }
  return out;
}

struct ConceptReport {
  std::size_t index = 0;
  double relevance = 0.0;
  bool has_percent = false;
  double percent = 0.0;
  Tensor heatmap;   // similarity map at feature resolution (H, W)
  Tensor presence;  // binary mask at feature resolution (H, W)
};

struct Explanation {
  std::size_t predicted_label = 0;
  std::vector<double> explainer_probs;   // P, one entry per class module
  std::vector<double> black_box_probs;   // b(x)
  bool degenerate_percentages = false;   // relevance sum too small to normalize
  std::vector<ConceptReport> concepts;   // for the predicted class
  std::size_t map_h = 0, map_w = 0;      // feature-map resolution
  std::size_t image_h = 0, image_w = 0;  // input resolution
};

/// Assembled explainer probabilities P for one image (one entry per module).
inline Tensor explainer_probs(const BlackBox& bb, const ExplainerBank& bank, const Tensor& fmap) {
  Tensor P({bank.modules.size()});
  for (std::size_t k = 0; k < bank.modules.size(); ++k) {
    const ClassExplainer& exp = bank.modules[k];
    const Tensor E = encode(exp, fmap);
    const SimilarityStack st = similarity(exp, bank.hyper, E);
    const Tensor cmap = concept_map(exp, E, st);
    P.data[k] = reconstruct_and_score(bb, exp, cmap, k).probability;
  }
  return P;
}

/// Full per-image explanation: the explainer's predicted label (argmax of P,
/// ties to the lowest index), per-concept relevance for that class, optional
/// percentage contributions (omitted when the signed relevance sum is within
/// 1e-6 of zero), and the concept heatmaps/presence masks.
inline Explanation explain(const BlackBox& bb, const ExplainerBank& bank, const Tensor& image) {
  Explanation ex;
  const Tensor fmap = feature_map(bb, image);
  const Tensor bp = resume_forward(bb, fmap);
  const Tensor P = explainer_probs(bb, bank, fmap);
  ex.explainer_probs.assign(P.data.begin(), P.data.end());
  ex.black_box_probs.assign(bp.data.begin(), bp.data.end());
  ex.predicted_label = argmax(P);
  ex.image_h = image.shape[0];
  ex.image_w = image.shape[1];

  const std::size_t k = ex.predicted_label;
  const ClassExplainer& exp = bank.modules[k];
  const Tensor E = encode(exp, fmap);
  const SimilarityStack st = similarity(exp, bank.hyper, E);
  const Tensor cmap = concept_map(exp, E, st);
  const std::vector<double> r = relevance(bb, exp, cmap, st, k);
  ex.map_h = E.shape[0];
  ex.map_w = E.shape[1];

  double rsum = 0.0;
  for (double v : r) rsum += v;
  const bool emit_percent = rsum > 1e-6;
  ex.degenerate_percentages = !emit_percent;
  for (std::size_t j = 0; j < r.size(); ++j) {
    ConceptReport c;
    c.index = j;
    c.relevance = r[j];
    if (emit_percent) {
      c.has_percent = true;
      c.percent = 100.0 * r[j] / rsum;
    }
    c.heatmap = st.similarity[j];
    c.presence = st.presence[j];
    ex.concepts.push_back(std::move(c));
  }
  return ex;
}

/// Serialize an explanation to <dir>/<stem>.json plus one heatmap PGM
/// (min-max scaled similarity, upsampled bilinearly to image resolution)
/// and one binary presence PGM per concept.
inline void write_explanation(const std::string& dir, const std::string& stem, const Explanation& ex) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json doc;
  doc["predicted_label"] = ex.predicted_label;
  doc["explainer_probs"] = ex.explainer_probs;
  doc["black_box_probs"] = ex.black_box_probs;
  doc["degenerate_percentages"] = ex.degenerate_percentages;
  doc["concepts"] = nlohmann::json::array();
  for (const ConceptReport& c : ex.concepts) {
    const std::string heat_rel = stem + "_concept" + std::to_string(c.index) + "_heat.pgm";
    const std::string pres_rel = stem + "_concept" + std::to_string(c.index) + "_presence.pgm";

    double lo = c.heatmap.data[0], hi = c.heatmap.data[0];
    for (double v : c.heatmap.data) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    Tensor scaled(c.heatmap.shape);
    if (hi > lo)
      for (std::size_t i = 0; i < scaled.numel(); ++i) scaled.data[i] = (c.heatmap.data[i] - lo) / (hi - lo);
    write_pgm((fs::path(dir) / heat_rel).string(), bilinear_upsample(scaled, ex.image_h, ex.image_w));
    write_pgm((fs::path(dir) / pres_rel).string(),
              block_upsample(c.presence, std::max<std::size_t>(1, ex.image_h / ex.map_h)));

    nlohmann::json jc;
    jc["index"] = c.index;
    jc["relevance"] = c.relevance;
    if (c.has_percent) jc["percent"] = c.percent;
    jc["mask_file"] = heat_rel;
    jc["presence_file"] = pres_rel;
    doc["concepts"].push_back(std::move(jc));
  }
  std::ofstream os(fs::path(dir) / (stem + ".json"));
  if (!os) throw FormatError("write_explanation: cannot write in " + dir);
  os << doc.dump(1) << "\n";
}

}  // namespace pace
