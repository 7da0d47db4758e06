#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "pace/errors.hpp"
#include "pace/tensor.hpp"

namespace pace {

namespace detail {

inline int pnm_next_int(std::istream& is) {
  // skip whitespace and '#' comments
  int c = is.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = is.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = is.get();
  }
  if (c == EOF || !std::isdigit(c)) throw FormatError("netpbm: malformed header");
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = is.get();
  }
  return v;  // consumed exactly one whitespace terminator
}

inline std::uint8_t to_byte(double v) {
  double s = std::lround(std::min(1.0, std::max(0.0, v)) * 255.0);
  return static_cast<std::uint8_t>(s);
}

}  // namespace detail

/// Write an (H, W, 3) tensor with values in [0, 1] as a binary P6 PPM.
inline void write_ppm(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.shape[2] != 3) throw ShapeError("write_ppm: expected (H,W,3), got " + img.shape_str());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("write_ppm: cannot open " + path);
  os << "P6\n" << img.shape[1] << " " << img.shape[0] << "\n255\n";
  std::vector<std::uint8_t> bytes(img.numel());
  for (std::size_t i = 0; i < img.numel(); ++i) bytes[i] = detail::to_byte(img.data[i]);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError("write_ppm: short write to " + path);
}

/// Read a binary P6 PPM into an (H, W, 3) tensor with values k/255.
inline Tensor read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("read_ppm: cannot open " + path);
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (m0 != 'P' || m1 != '6') throw FormatError("read_ppm: not a P6 file: " + path);
  const int w = detail::pnm_next_int(is);
  const int h = detail::pnm_next_int(is);
  const int maxval = detail::pnm_next_int(is);
  if (w <= 0 || h <= 0 || maxval != 255) throw FormatError("read_ppm: unsupported header in " + path);
  Tensor img({static_cast<std::size_t>(h), static_cast<std::size_t>(w), 3});
  std::vector<std::uint8_t> bytes(img.numel());
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (is.gcount() != static_cast<std::streamsize>(bytes.size())) throw FormatError("read_ppm: truncated " + path);
  for (std::size_t i = 0; i < img.numel(); ++i) img.data[i] = static_cast<double>(bytes[i]) / 255.0;
  return img;
}

/// Write an (H, W) tensor with values in [0, 1] as a binary P5 PGM.
inline void write_pgm(const std::string& path, const Tensor& img) {
  if (img.rank() != 2) throw ShapeError("write_pgm: expected (H,W), got " + img.shape_str());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("write_pgm: cannot open " + path);
  os << "P5\n" << img.shape[1] << " " << img.shape[0] << "\n255\n";
  std::vector<std::uint8_t> bytes(img.numel());
  for (std::size_t i = 0; i < img.numel(); ++i) bytes[i] = detail::to_byte(img.data[i]);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError("write_pgm: short write to " + path);
}

/// Read a binary P5 PGM into an (H, W) tensor with values k/255.
inline Tensor read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("read_pgm: cannot open " + path);
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (m0 != 'P' || m1 != '5') throw FormatError("read_pgm: not a P5 file: " + path);
  const int w = detail::pnm_next_int(is);
  const int h = detail::pnm_next_int(is);
  const int maxval = detail::pnm_next_int(is);
  if (w <= 0 || h <= 0 || maxval != 255) throw FormatError("read_pgm: unsupported header in " + path);
  Tensor img({static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  std::vector<std::uint8_t> bytes(img.numel());
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (is.gcount() != static_cast<std::streamsize>(bytes.size())) throw FormatError("read_pgm: truncated " + path);
  for (std::size_t i = 0; i < img.numel(); ++i) img.data[i] = static_cast<double>(bytes[i]) / 255.0;
  return img;
}

}  // namespace pace
