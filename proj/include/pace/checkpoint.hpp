#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pace/baseline.hpp"
#include "pace/blackbox.hpp"
#include "pace/errors.hpp"
#include "pace/layers.hpp"
#include "pace/pace.hpp"
#include "pace/tensor.hpp"

namespace pace {

// On-disk layout is raw little-endian; big-endian hosts would need swaps.
static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kMagicBlackBox[9] = "PACEBBX1";
inline constexpr char kMagicExplainer[9] = "PACEEXP1";
inline constexpr char kMagicBaseline[9] = "PACEPCA1";

namespace detail {

struct BinaryWriter {
  std::string buf;
  void bytes(const void* p, std::size_t n) { buf.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void magic(const char m[9]) { bytes(m, 8); }
};

struct BinaryReader {
  const std::string& buf;
  std::size_t pos = 0;
  explicit BinaryReader(const std::string& b) : buf(b) {}
  void bytes(void* p, std::size_t n) {
    if (pos + n > buf.size()) throw FormatError("checkpoint truncated");
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, 8);
    return v;
  }
  void expect_magic(const char m[9]) {
    char got[8];
    bytes(got, 8);
    if (std::memcmp(got, m, 8) != 0) throw FormatError("checkpoint has wrong magic");
  }
  void expect_version() {
    const std::uint32_t v = u32();
    if (v != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(v));
  }
  void expect_end() const {
    if (pos != buf.size()) throw FormatError("checkpoint has trailing bytes");
  }
};

// Tensor block: rank u32 (0 = empty tensor), extents u32 each, values f64.
inline void put_tensor(BinaryWriter& w, const Tensor& t) {
  if (t.rank() == 0) {
    w.u32(0);
    return;
  }
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape) w.u32(static_cast<std::uint32_t>(e));
  w.bytes(t.data.data(), t.data.size() * sizeof(double));
}

inline Tensor get_tensor(BinaryReader& r) {
  const std::uint32_t rank = r.u32();
  if (rank == 0) return Tensor{};
  if (rank > 8) throw FormatError("checkpoint tensor rank implausible");
  std::vector<std::size_t> shape(rank);
  for (auto& e : shape) {
    e = r.u32();
    if (e == 0) throw FormatError("checkpoint tensor has a zero extent");
  }
  Tensor t(shape);
  if (t.data.size() > (1u << 28)) throw FormatError("checkpoint tensor implausibly large");
  r.bytes(t.data.data(), t.data.size() * sizeof(double));
  return t;
}

inline void put_layer(BinaryWriter& w, const LayerParams& l) {
  w.u32(static_cast<std::uint32_t>(l.kind));
  w.u32(l.hyper.kernel);
  w.u32(l.hyper.stride);
  w.u32(l.hyper.in_ch);
  w.u32(l.hyper.out_ch);
  put_tensor(w, l.weights);
  put_tensor(w, l.bias);
}

inline LayerParams get_layer(BinaryReader& r) {
  LayerParams l;
  const std::uint32_t kind = r.u32();
  if (kind > static_cast<std::uint32_t>(LayerKind::kSoftmax)) throw FormatError("checkpoint layer kind unknown");
  l.kind = static_cast<LayerKind>(kind);
  l.hyper.kernel = r.u32();
  l.hyper.stride = r.u32();
  l.hyper.in_ch = r.u32();
  l.hyper.out_ch = r.u32();
  l.weights = get_tensor(r);
  l.bias = get_tensor(r);
  return l;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifactError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (f.bad()) throw FormatError("read failed for " + path);
  return buf;
}

inline void write_file(const std::string& path, const std::string& buf) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw Error("write failed for " + path);
}

}  // namespace detail

inline std::string serialize_blackbox(const BlackBox& bb) {
  detail::BinaryWriter w;
  w.magic(kMagicBlackBox);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(bb.num_classes));
  w.u32(static_cast<std::uint32_t>(bb.split_index));
  w.u32(static_cast<std::uint32_t>(bb.layers.size()));
  for (const LayerParams& l : bb.layers) detail::put_layer(w, l);
  return w.buf;
}

inline BlackBox deserialize_blackbox(const std::string& buf) {
  detail::BinaryReader r(buf);
  r.expect_magic(kMagicBlackBox);
  r.expect_version();
  BlackBox bb;
  bb.num_classes = r.u32();
  bb.split_index = r.u32();
  const std::uint32_t n = r.u32();
  bb.layers.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) bb.layers.push_back(detail::get_layer(r));
  r.expect_end();
  validate_split(bb);
  return bb;
}

inline std::string serialize_explainer(const ExplainerBank& bank) {
  detail::BinaryWriter w;
  w.magic(kMagicExplainer);
  w.u32(kCheckpointVersion);
  const PaceHyper& h = bank.hyper;
  w.u32(static_cast<std::uint32_t>(h.num_classes));
  w.u32(static_cast<std::uint32_t>(h.num_concepts));
  w.u32(static_cast<std::uint32_t>(h.embed_dim));
  w.u32(static_cast<std::uint32_t>(h.feature_dim));
  w.f64(h.tau);
  w.f64(h.epsilon);
  w.f64(h.alpha);
  w.f64(h.beta);
  w.f64(h.gamma);
  w.f64(h.delta);
  w.f64(h.omega);
  w.u32(static_cast<std::uint32_t>(h.rho));
  w.u32(h.onehot_targets ? 1 : 0);
  for (const ClassExplainer& m : bank.modules) {
    detail::put_layer(w, m.encoder);
    detail::put_layer(w, m.decoder);
    detail::put_tensor(w, m.concepts);
  }
  return w.buf;
}

inline ExplainerBank deserialize_explainer(const std::string& buf) {
  detail::BinaryReader r(buf);
  r.expect_magic(kMagicExplainer);
  r.expect_version();
  ExplainerBank bank;
  PaceHyper& h = bank.hyper;
  h.num_classes = r.u32();
  h.num_concepts = r.u32();
  h.embed_dim = r.u32();
  h.feature_dim = r.u32();
  h.tau = r.f64();
  h.epsilon = r.f64();
  h.alpha = r.f64();
  h.beta = r.f64();
  h.gamma = r.f64();
  h.delta = r.f64();
  h.omega = r.f64();
  h.rho = r.u32();
  h.onehot_targets = r.u32() != 0;
  validate_hyper(h);
  bank.modules.resize(h.num_classes);
  for (ClassExplainer& m : bank.modules) {
    m.encoder = detail::get_layer(r);
    m.decoder = detail::get_layer(r);
    m.concepts = detail::get_tensor(r);
    if (m.concepts.rank() != 2 || m.concepts.shape[0] != h.num_concepts || m.concepts.shape[1] != h.embed_dim)
      throw FormatError("checkpoint concept bank shape mismatch");
  }
  r.expect_end();
  return bank;
}

inline std::string serialize_baseline(const BaselineBank& bank) {
  detail::BinaryWriter w;
  w.magic(kMagicBaseline);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(bank.num_classes));
  w.u32(static_cast<std::uint32_t>(bank.num_concepts));
  w.u32(static_cast<std::uint32_t>(bank.embed_dim));
  for (const BaselineModule& m : bank.modules) {
    w.u32(m.fitted ? 1 : 0);
    if (!m.fitted) continue;
    detail::put_tensor(w, m.pca.mean);
    detail::put_tensor(w, m.pca.components);
    detail::put_tensor(w, m.pca.explained_variance);
    w.u32(static_cast<std::uint32_t>(m.pca.effective_rank));
    detail::put_tensor(w, m.centroids);
    w.u32(static_cast<std::uint32_t>(m.inertia_history.size()));
    for (double v : m.inertia_history) w.f64(v);
  }
  return w.buf;
}

inline BaselineBank deserialize_baseline(const std::string& buf) {
  detail::BinaryReader r(buf);
  r.expect_magic(kMagicBaseline);
  r.expect_version();
  BaselineBank bank;
  bank.num_classes = r.u32();
  bank.num_concepts = r.u32();
  bank.embed_dim = r.u32();
  bank.modules.resize(bank.num_classes);
  for (BaselineModule& m : bank.modules) {
    m.fitted = r.u32() != 0;
    if (!m.fitted) continue;
    m.pca.mean = detail::get_tensor(r);
    m.pca.components = detail::get_tensor(r);
    m.pca.explained_variance = detail::get_tensor(r);
    m.pca.effective_rank = r.u32();
    m.centroids = detail::get_tensor(r);
    const std::uint32_t n = r.u32();
    m.inertia_history.resize(n);
    for (auto& v : m.inertia_history) v = r.f64();
  }
  r.expect_end();
  return bank;
}

inline void save_blackbox(const std::string& path, const BlackBox& bb) { detail::write_file(path, serialize_blackbox(bb)); }
inline BlackBox load_blackbox(const std::string& path) { return deserialize_blackbox(detail::read_file(path)); }
inline void save_explainer(const std::string& path, const ExplainerBank& b) { detail::write_file(path, serialize_explainer(b)); }
inline ExplainerBank load_explainer(const std::string& path) { return deserialize_explainer(detail::read_file(path)); }
inline void save_baseline(const std::string& path, const BaselineBank& b) { detail::write_file(path, serialize_baseline(b)); }
inline BaselineBank load_baseline(const std::string& path) { return deserialize_baseline(detail::read_file(path)); }

}  // namespace pace
