#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pace/dataset.hpp"
#include "pace/rng.hpp"
#include "pace/tensor.hpp"

namespace pace {

/// One concrete primitive instance in canvas coordinates. The pixel grid
/// covers [0,W)x[0,H); a pixel is painted when its center lies inside the
/// shape. Parameter meaning by primitive:
///   disk:     p1 = radius
///   bar:      p1 = half width, p2 = half height (axis aligned)
///   ring:     p1 = outer radius, p2 = inner radius
///   triangle: p1 = side length (equilateral, apex up)
struct ShapeInstance {
  std::string primitive;
  double cx = 0, cy = 0, p1 = 0, p2 = 0;
};

inline double shape_area(const ShapeInstance& s) {
  const double pi = 3.14159265358979323846;
  if (s.primitive == "disk") return pi * s.p1 * s.p1;
  if (s.primitive == "bar") return 4.0 * s.p1 * s.p2;
  if (s.primitive == "ring") return pi * (s.p1 * s.p1 - s.p2 * s.p2);
  if (s.primitive == "triangle") return std::sqrt(3.0) / 4.0 * s.p1 * s.p1;
  throw ShapeError("shape_area: unknown primitive " + s.primitive);
}

inline double shape_perimeter(const ShapeInstance& s) {
  const double pi = 3.14159265358979323846;
  if (s.primitive == "disk") return 2.0 * pi * s.p1;
  if (s.primitive == "bar") return 4.0 * (s.p1 + s.p2);
  if (s.primitive == "ring") return 2.0 * pi * (s.p1 + s.p2);
  if (s.primitive == "triangle") return 3.0 * s.p1;
  throw ShapeError("shape_perimeter: unknown primitive " + s.primitive);
}

namespace detail {

inline bool point_in_shape(const ShapeInstance& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy;
  if (s.primitive == "disk") return dx * dx + dy * dy <= s.p1 * s.p1;
  if (s.primitive == "bar") return std::fabs(dx) <= s.p1 && std::fabs(dy) <= s.p2;
  if (s.primitive == "ring") {
    const double d2 = dx * dx + dy * dy;
    return d2 <= s.p1 * s.p1 && d2 >= s.p2 * s.p2;
  }
  if (s.primitive == "triangle") {
    // equilateral, apex up (y axis points down); circumradius R = side/sqrt(3)
    const double R = s.p1 / std::sqrt(3.0);
    const double ax = s.cx, ay = s.cy - R;
    const double bx = s.cx - s.p1 / 2.0, by = s.cy + R / 2.0;
    const double cx2 = s.cx + s.p1 / 2.0, cy2 = s.cy + R / 2.0;
    auto side = [&](double x1, double y1, double x2, double y2) {
      return (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
    };
    const double s1 = side(ax, ay, bx, by);
    const double s2 = side(bx, by, cx2, cy2);
    const double s3 = side(cx2, cy2, ax, ay);
    return (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
  }
  throw ShapeError("point_in_shape: unknown primitive " + s.primitive);
}

// vertical/horizontal half-extents (up, down, left/right) of a shape
inline void shape_extents(const ShapeInstance& s, double& up, double& down, double& horiz) {
  if (s.primitive == "disk") {
    up = down = horiz = s.p1;
  } else if (s.primitive == "bar") {
    up = down = s.p2;
    horiz = s.p1;
  } else if (s.primitive == "ring") {
    up = down = horiz = s.p1;
  } else if (s.primitive == "triangle") {
    const double R = s.p1 / std::sqrt(3.0);
    up = R;
    down = R / 2.0;
    horiz = s.p1 / 2.0;
  } else {
    throw ShapeError("shape_extents: unknown primitive " + s.primitive);
  }
}

inline std::array<double, 3> hsv_to_rgb(double h, double sat, double val) {
  h = h - std::floor(h);
  const double c = val * sat;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = val - c;
  return {r + m, g + m, b + m};
}

}  // namespace detail

/// Pixel-center rasterization of one shape as an (H, W) 0/1 mask.
inline Tensor rasterize_shape(const ShapeInstance& s, std::size_t H, std::size_t W) {
  Tensor mask({H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      if (detail::point_in_shape(s, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5))
        mask.data[y * W + x] = 1.0;
  return mask;
}

struct GenConfig {
  std::size_t num_classes = 4;
  std::size_t images_per_class = 500;
  std::size_t image_size = 32;
  std::uint64_t seed = 42;
  double train_frac = 0.8;
  double val_frac = 0.1;
};

namespace detail {

inline const char* primitive_for(int part_id) {
  static const char* table[4] = {"disk", "bar", "ring", "triangle"};
  return table[part_id % 4];
}

// Fixed saturated palette for the first 8 class parts, then a golden-ratio
// hue wheel; shared parts get near-white / near-black so no class color is
// reused.
inline std::array<double, 3> part_color(int part_id, int num_class_parts) {
  static const std::array<double, 3> palette[8] = {
      {0.90, 0.15, 0.15}, {0.15, 0.80, 0.20}, {0.15, 0.25, 0.90}, {0.95, 0.85, 0.10},
      {0.85, 0.15, 0.80}, {0.10, 0.80, 0.85}, {0.95, 0.55, 0.10}, {0.50, 0.20, 0.85}};
  if (part_id >= num_class_parts) {  // shared pool
    const int k = part_id - num_class_parts;
    return k % 2 == 0 ? std::array<double, 3>{0.93, 0.93, 0.93} : std::array<double, 3>{0.07, 0.07, 0.10};
  }
  if (part_id < 8) return palette[part_id];
  return hsv_to_rgb(0.61803398875 * part_id, 0.85, 0.90);
}

// Sample size parameters for one primitive; ranges keep class-part coverage
// inside roughly 2-8% of a 32x32 canvas (scaled for other sizes). Compact
// parts concentrate class evidence in a handful of feature-map cells.
inline ShapeInstance sample_shape(const char* primitive, Rng& rng, double scale, bool small_variant) {
  ShapeInstance s;
  s.primitive = primitive;
  const double f = small_variant ? 0.78 : 1.0;
  if (s.primitive == "disk") {
    s.p1 = f * scale * rng.uniform(2.9, 3.7);
  } else if (s.primitive == "bar") {
    s.p1 = f * scale * rng.uniform(4.2, 5.6);
    s.p2 = f * scale * rng.uniform(1.5, 2.1);
  } else if (s.primitive == "ring") {
    s.p1 = f * scale * rng.uniform(3.4, 4.2);
    s.p2 = s.p1 - f * scale * 1.7;
  } else {  // triangle
    s.p1 = f * scale * rng.uniform(8.0, 10.0);
  }
  return s;
}

struct PaintBuffers {
  Tensor* img;
  std::vector<char>* occupancy;
};

// Returns false if no non-overlapping placement was found.
inline bool place_and_paint(ShapeInstance s, double row_lo, double row_hi, Rng& rng,
                            const std::array<double, 3>& base_color, Tensor& img,
                            std::vector<char>& occupancy, Tensor& mask_out) {
  const std::size_t H = img.shape[0], W = img.shape[1];
  double up, down, horiz;
  shape_extents(s, up, down, horiz);
  const double cy_lo = row_lo + up, cy_hi = row_hi - down;
  const double cx_lo = horiz + 0.5, cx_hi = static_cast<double>(W) - 0.5 - horiz;
  if (cy_lo >= cy_hi || cx_lo >= cx_hi) return false;
  for (int attempt = 0; attempt < 40; ++attempt) {
    s.cy = rng.uniform(cy_lo, cy_hi);
    s.cx = rng.uniform(cx_lo, cx_hi);
    Tensor mask = rasterize_shape(s, H, W);
    bool clash = false;
    for (std::size_t i = 0; i < mask.numel() && !clash; ++i)
      if (mask.data[i] > 0 && occupancy[i]) clash = true;
    if (clash) continue;
    for (std::size_t i = 0; i < mask.numel(); ++i) {
      if (mask.data[i] <= 0) continue;
      occupancy[i] = 1;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = base_color[ch] + rng.uniform(-0.03, 0.03);
        img.data[i * 3 + ch] = std::clamp(v, 0.0, 1.0);
      }
    }
    mask_out = std::move(mask);
    return true;
  }
  return false;
}

}  // namespace detail

/// Deterministic synthetic dataset: each class is defined by two exclusive
/// parts (distinct primitive/color/region combos) on a textured background,
/// plus one or two parts from a shared pool that carries no class signal.
/// Every image value is quantized to 1/255 so PPM round-trips are exact.
inline LabeledDataset generate_parts_dataset(const GenConfig& cfg) {
  if (cfg.num_classes < 2) throw ConfigError("generate_parts_dataset: need at least 2 classes");
  if (cfg.images_per_class < 10) throw ConfigError("generate_parts_dataset: need at least 10 images per class");
  const std::size_t S = cfg.image_size;
  if (S < 16) throw ConfigError("generate_parts_dataset: image_size must be >= 16");
  const double scale = static_cast<double>(S) / 32.0;
  const int num_class_parts = static_cast<int>(2 * cfg.num_classes);
  const int num_shared = 2;

  LabeledDataset ds;
  ds.num_classes = cfg.num_classes;
  ds.seed = cfg.seed;
  for (int p = 0; p < num_class_parts + num_shared; ++p) {
    PartSpec spec;
    spec.part_id = p;
    spec.primitive = detail::primitive_for(p);
    spec.owner_class = p < num_class_parts ? p / 2 : -1;
    spec.color = detail::part_color(p, num_class_parts);
    ds.parts.push_back(std::move(spec));
  }

  const std::size_t n_total = cfg.num_classes * cfg.images_per_class;
  ds.images.reserve(n_total);
  const double mid = static_cast<double>(S) / 2.0;
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    for (std::size_t i = 0; i < cfg.images_per_class; ++i) {
      const std::size_t global = c * cfg.images_per_class + i;
      Rng rng(derive_seed(cfg.seed, "image", global));

      // background: per-channel base gray + directional sinusoid + pixel noise
      Tensor img({S, S, 3});
      std::array<double, 3> bg;
      const double base = rng.uniform(0.28, 0.72);
      for (auto& b : bg) b = base + rng.uniform(-0.10, 0.10);
      const double amp = rng.uniform(0.05, 0.14);
      const double fx = rng.uniform(0.5, 4.0) / static_cast<double>(S);
      const double fy = rng.uniform(0.5, 4.0) / static_cast<double>(S);
      const double phase = rng.uniform(0.0, 6.283185307179586);
      for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
          const double tex =
              amp * std::sin(6.283185307179586 * (fx * static_cast<double>(x) + fy * static_cast<double>(y)) + phase);
          for (std::size_t ch = 0; ch < 3; ++ch) {
            const double v = bg[ch] + tex + rng.uniform(-0.06, 0.06);
            img.data[(y * S + x) * 3 + ch] = std::clamp(v, 0.0, 1.0);
          }
        }
      }

      std::vector<char> occupancy(S * S, 0);
      std::map<int, Tensor> masks;

      // the class's own two parts: top band then bottom band (always placed)
      for (int which = 0; which < 2; ++which) {
        const int pid = static_cast<int>(2 * c) + which;
        const PartSpec& spec = ds.parts[pid];
        ShapeInstance shape = detail::sample_shape(spec.primitive.c_str(), rng, scale, false);
        std::array<double, 3> color = spec.color;
        for (auto& ch : color) ch = std::clamp(ch + rng.uniform(-0.06, 0.06), 0.0, 1.0);
        const double row_lo = which == 0 ? 0.5 : mid;
        const double row_hi = which == 0 ? mid : static_cast<double>(S) - 0.5;
        Tensor mask;
        if (!detail::place_and_paint(shape, row_lo, row_hi, rng, color, img, occupancy, mask))
          throw NumericError("generate_parts_dataset: failed to place a class part");
        masks[pid] = std::move(mask);
      }

      // one or two shared parts, skipped quietly if they cannot fit
      const int n_draw = 1 + static_cast<int>(rng.index(2));
      int first_shared = static_cast<int>(rng.index(num_shared));
      for (int k = 0; k < n_draw; ++k) {
        const int pid = num_class_parts + (first_shared + k) % num_shared;
        const PartSpec& spec = ds.parts[pid];
        ShapeInstance shape = detail::sample_shape(spec.primitive.c_str(), rng, scale, true);
        std::array<double, 3> color = spec.color;
        for (auto& ch : color) ch = std::clamp(ch + rng.uniform(-0.06, 0.06), 0.0, 1.0);
        Tensor mask;
        if (detail::place_and_paint(shape, 0.5, static_cast<double>(S) - 0.5, rng, color, img, occupancy, mask))
          masks[pid] = std::move(mask);
      }

      // quantize so the PPM container is lossless
      for (double& v : img.data) v = std::round(v * 255.0) / 255.0;

      const double tf = cfg.train_frac, vf = cfg.val_frac;
      const auto n_train = static_cast<std::size_t>(tf * static_cast<double>(cfg.images_per_class));
      const auto n_val = static_cast<std::size_t>(vf * static_cast<double>(cfg.images_per_class));
      Split split = i < n_train ? Split::kTrain : (i < n_train + n_val ? Split::kVal : Split::kTest);

      ds.images.push_back(std::move(img));
      ds.labels.push_back(c);
      ds.splits.push_back(split);
      ds.masks.push_back(std::move(masks));
    }
  }
  return ds;
}

}  // namespace pace
