#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pace/errors.hpp"
#include "pace/netpbm.hpp"
#include "pace/tensor.hpp"

namespace pace {

enum class Split { kTrain = 0, kVal = 1, kTest = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw FormatError("dataset: unknown split '" + s + "'");
}

/// One visual part in the generator catalogue. owner_class == -1 marks a
/// shared part that may appear in any class.
struct PartSpec {
  int part_id = 0;
  std::string primitive;  // disk | bar | ring | triangle
  int owner_class = -1;
  std::array<double, 3> color{0, 0, 0};
};

/// Images with labels, splits and per-part ground-truth masks.
struct LabeledDataset {
  std::size_t num_classes = 0;
  std::uint64_t seed = 0;
  std::vector<PartSpec> parts;
  std::vector<Tensor> images;                // each (H, W, 3) in [0,1]
  std::vector<std::size_t> labels;
  std::vector<Split> splits;
  std::vector<std::map<int, Tensor>> masks;  // per image: part_id -> (H, W) 0/1

  std::size_t size() const { return images.size(); }
};

inline std::vector<std::size_t> indices_of(const LabeledDataset& ds, Split s) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.splits[i] == s) out.push_back(i);
  return out;
}

/// Ground-truth mask for (image, part); all-zeros when the part is absent.
inline Tensor part_mask(const LabeledDataset& ds, std::size_t image_index, int part_id) {
  if (image_index >= ds.size()) throw ShapeError("part_mask: image index out of range");
  const auto& m = ds.masks[image_index];
  auto it = m.find(part_id);
  if (it != m.end()) return it->second;
  return Tensor({ds.images[image_index].shape[0], ds.images[image_index].shape[1]});
}

namespace detail {

inline std::string image_file_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%05zu.ppm", i);
  return buf;
}

inline std::string mask_file_name(std::size_t i, int part_id) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "img_%05zu_part%02d.pgm", i, part_id);
  return buf;
}

}  // namespace detail

/// Write the dataset as meta.json + images/*.ppm + masks/*.pgm.
inline void save_dataset(const std::string& dir, const LabeledDataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  nlohmann::json meta;
  meta["num_classes"] = ds.num_classes;
  meta["seed"] = ds.seed;
  meta["parts"] = nlohmann::json::array();
  for (const PartSpec& p : ds.parts) {
    meta["parts"].push_back({{"part_id", p.part_id},
                             {"primitive", p.primitive},
                             {"owner_class", p.owner_class},
                             {"color", p.color}});
  }
  meta["images"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::string img_rel = "images/" + detail::image_file_name(i);
    write_ppm((fs::path(dir) / img_rel).string(), ds.images[i]);
    nlohmann::json entry;
    entry["file"] = img_rel;
    entry["label"] = ds.labels[i];
    entry["split"] = split_name(ds.splits[i]);
    entry["masks"] = nlohmann::json::object();
    for (const auto& [pid, mask] : ds.masks[i]) {
      const std::string mask_rel = "masks/" + detail::mask_file_name(i, pid);
      write_pgm((fs::path(dir) / mask_rel).string(), mask);
      entry["masks"][std::to_string(pid)] = mask_rel;
    }
    meta["images"].push_back(std::move(entry));
  }
  std::ofstream os(fs::path(dir) / "meta.json");
  if (!os) throw FormatError("save_dataset: cannot write meta.json in " + dir);
  os << meta.dump(1) << "\n";
}

/// Exact inverse of save_dataset (images are stored quantized to 1/255).
inline LabeledDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path meta_path = fs::path(dir) / "meta.json";
  std::ifstream is(meta_path);
  if (!is) throw MissingArtifactError("load_dataset: missing " + meta_path.string());
  nlohmann::json meta;
  try {
    is >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("load_dataset: bad meta.json: " + std::string(e.what()));
  }
  LabeledDataset ds;
  try {
    ds.num_classes = meta.at("num_classes").get<std::size_t>();
    ds.seed = meta.at("seed").get<std::uint64_t>();
    for (const auto& jp : meta.at("parts")) {
      PartSpec p;
      p.part_id = jp.at("part_id").get<int>();
      p.primitive = jp.at("primitive").get<std::string>();
      p.owner_class = jp.at("owner_class").get<int>();
      p.color = jp.at("color").get<std::array<double, 3>>();
      ds.parts.push_back(std::move(p));
    }
    for (const auto& ji : meta.at("images")) {
      ds.images.push_back(read_ppm((fs::path(dir) / ji.at("file").get<std::string>()).string()));
      ds.labels.push_back(ji.at("label").get<std::size_t>());
      ds.splits.push_back(split_from_name(ji.at("split").get<std::string>()));
      std::map<int, Tensor> m;
      for (const auto& [key, rel] : ji.at("masks").items())
        m[std::stoi(key)] = read_pgm((fs::path(dir) / rel.get<std::string>()).string());
      ds.masks.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("load_dataset: bad meta.json: " + std::string(e.what()));
  }
  if (ds.labels.size() != ds.images.size() || ds.splits.size() != ds.images.size())
    throw FormatError("load_dataset: inconsistent meta.json");
  return ds;
}

}  // namespace pace
