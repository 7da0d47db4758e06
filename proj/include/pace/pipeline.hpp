#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pace/baseline.hpp"
#include "pace/blackbox.hpp"
#include "pace/checkpoint.hpp"
#include "pace/config.hpp"
#include "pace/dataset.hpp"
#include "pace/evalkit.hpp"
#include "pace/explain.hpp"
#include "pace/pace_train.hpp"
#include "pace/synthparts.hpp"

namespace pace {

struct RunPaths {
  std::string workdir;
  std::string dataset_dir;
  std::string blackbox_file;
  std::string explainer_file;
  std::string baseline_file;
  std::string reports_dir;
};

inline RunPaths paths_of(const RunConfig& cfg) {
  RunPaths p;
  p.workdir = cfg.workdir;
  p.dataset_dir = cfg.workdir + "/dataset";
  p.blackbox_file = cfg.workdir + "/blackbox.bin";
  p.explainer_file = cfg.workdir + "/explainer.bin";
  p.baseline_file = cfg.workdir + "/baseline.bin";
  p.reports_dir = cfg.workdir + "/reports";
  return p;
}

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path);
  f << text;
  if (!f) throw Error("write failed for " + path);
}

inline void write_json(const std::string& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline void require_artifact(const std::string& path, const std::string& producer) {
  if (!std::filesystem::exists(path))
    throw MissingArtifactError(path + " not found (run `pace " + producer + "` first)");
}

inline LabeledDataset load_run_dataset(const RunPaths& p) {
  require_artifact(p.dataset_dir + "/meta.json", "gen");
  return load_dataset(p.dataset_dir);
}

struct StageTimer {
  const char* name;
  bool verbose;
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  ~StageTimer() {
    if (!verbose) return;
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "[pace] %s finished in %.1fs\n", name, s);
  }
};

}  // namespace detail

inline void run_gen(const RunConfig& cfg) {
  detail::StageTimer timer{"gen", cfg.verbose};
  const RunPaths p = paths_of(cfg);
  std::filesystem::create_directories(p.dataset_dir);
  save_dataset(p.dataset_dir, generate_parts_dataset(cfg.dataset));
}

inline void run_train_bb(const RunConfig& cfg) {
  detail::StageTimer timer{"train-bb", cfg.verbose};
  const RunPaths p = paths_of(cfg);
  const LabeledDataset ds = detail::load_run_dataset(p);
  std::filesystem::create_directories(p.reports_dir);

  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  for (std::size_t i : indices_of(ds, Split::kTrain)) {
    images.push_back(ds.images[i]);
    labels.push_back(ds.labels[i]);
  }
  TrainResult res = train_blackbox(make_desk_blackbox(ds.num_classes, derive_seed(cfg.seed, "bb-init")),
                                   images, labels, cfg.bb);
  save_blackbox(p.blackbox_file, res.model);

  nlohmann::json j;
  j["epochs"] = nlohmann::json::array();
  for (const EpochLog& e : res.log)
    j["epochs"].push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"train_accuracy", e.train_accuracy}});
  auto acc_of = [&](Split s) {
    std::vector<Tensor> im;
    std::vector<std::size_t> lb;
    for (std::size_t i : indices_of(ds, s)) {
      im.push_back(ds.images[i]);
      lb.push_back(ds.labels[i]);
    }
    return classification_accuracy(res.model, im, lb);
  };
  j["val_accuracy"] = acc_of(Split::kVal);
  j["test_accuracy"] = acc_of(Split::kTest);
  detail::write_json(p.reports_dir + "/bb_train.json", j);
}

inline void run_train_pace(const RunConfig& cfg) {
  detail::StageTimer timer{"train-pace", cfg.verbose};
  const RunPaths p = paths_of(cfg);
  const LabeledDataset ds = detail::load_run_dataset(p);
  detail::require_artifact(p.blackbox_file, "train-bb");
  const BlackBox bb = load_blackbox(p.blackbox_file);
  std::filesystem::create_directories(p.reports_dir);

  PaceTrainResult res = train_explainer(bb, ds, pace_train_config(cfg));
  save_explainer(p.explainer_file, res.bank);

  nlohmann::json j;
  j["epochs"] = nlohmann::json::array();
  for (const PaceEpochLog& e : res.log)
    j["epochs"].push_back({{"epoch", e.epoch},
                           {"total", e.total},
                           {"cross_entropy", e.ce},
                           {"relevance", e.relevance},
                           {"diversity", e.diversity},
                           {"triplet", e.triplet},
                           {"pure_batches", e.pure_batches},
                           {"mixed_batches", e.mixed_batches}});
  detail::write_json(p.reports_dir + "/pace_train.json", j);
}

inline void run_baseline(const RunConfig& cfg) {
  detail::StageTimer timer{"baseline", cfg.verbose};
  const RunPaths p = paths_of(cfg);
  const LabeledDataset ds = detail::load_run_dataset(p);
  detail::require_artifact(p.blackbox_file, "train-bb");
  const BlackBox bb = load_blackbox(p.blackbox_file);
  std::filesystem::create_directories(p.reports_dir);

  const BaselineBank bank = fit_baseline(bb, ds, cfg.pace.num_concepts, cfg.pace.embed_dim, cfg.seed);
  save_baseline(p.baseline_file, bank);

  nlohmann::json j;
  j["classes"] = nlohmann::json::array();
  for (std::size_t k = 0; k < bank.modules.size(); ++k) {
    const BaselineModule& m = bank.modules[k];
    nlohmann::json e{{"class", k}, {"fitted", m.fitted}};
    if (m.fitted) {
      e["effective_rank"] = m.pca.effective_rank;
      e["inertia_history"] = m.inertia_history;
    }
    j["classes"].push_back(e);
  }
  detail::write_json(p.reports_dir + "/baseline_fit.json", j);
}

struct EvalOutputs {
  AgreementReport pace_agreement;
  AgreementReport baseline_agreement;
  LocalizationReport localization;
  std::vector<MisclassEntry> digest;
};

inline EvalOutputs run_eval(const RunConfig& cfg) {
  detail::StageTimer timer{"eval", cfg.verbose};
  const RunPaths p = paths_of(cfg);
  const LabeledDataset ds = detail::load_run_dataset(p);
  detail::require_artifact(p.blackbox_file, "train-bb");
  detail::require_artifact(p.explainer_file, "train-pace");
  detail::require_artifact(p.baseline_file, "baseline");
  const BlackBox bb = load_blackbox(p.blackbox_file);
  const ExplainerBank bank = load_explainer(p.explainer_file);
  const BaselineBank base = load_baseline(p.baseline_file);
  std::filesystem::create_directories(p.reports_dir);

  EvalOutputs out;
  out.pace_agreement = agreement_accuracy(bb, bank, ds, Split::kTest);
  out.baseline_agreement = agreement_accuracy(bb, base, ds, Split::kTest);
  out.localization = localization_iou(bb, bank, ds, Split::kTest, cfg.eval_permutations, cfg.seed);
  out.digest = misclassification_digest(bb, bank, ds, Split::kTest);

  detail::write_json(p.reports_dir + "/agreement_pace.json", agreement_to_json(out.pace_agreement));
  detail::write_json(p.reports_dir + "/agreement_baseline.json", agreement_to_json(out.baseline_agreement));
  detail::write_json(p.reports_dir + "/localization.json", localization_to_json(out.localization));
  detail::write_json(p.reports_dir + "/misclassifications.json", digest_to_json(out.digest));
  detail::write_text(p.reports_dir + "/summary.txt",
                     evaluation_summary(out.pace_agreement, &out.baseline_agreement, out.localization));
  return out;
}

inline Explanation run_explain(const RunConfig& cfg, const std::string& image_path, const std::string& out_dir) {
  detail::StageTimer timer{"explain", cfg.verbose};
  const RunPaths p = paths_of(cfg);
  detail::require_artifact(p.blackbox_file, "train-bb");
  detail::require_artifact(p.explainer_file, "train-pace");
  if (!std::filesystem::exists(image_path)) throw MissingArtifactError("image not found: " + image_path);
  const BlackBox bb = load_blackbox(p.blackbox_file);
  const ExplainerBank bank = load_explainer(p.explainer_file);

  const Tensor image = read_ppm(image_path);
  const Explanation ex = explain(bb, bank, image);
  const std::string dir = out_dir.empty() ? p.reports_dir : out_dir;
  std::filesystem::create_directories(dir);
  write_explanation(dir, std::filesystem::path(image_path).stem().string(), ex);
  return ex;
}

}  // namespace pace
