#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "pace/blackbox.hpp"
#include "pace/dataset.hpp"
#include "pace/rng.hpp"
#include "pace/tensor.hpp"

namespace pace {

struct SymEigen {
  std::vector<double> values;  // descending
  Tensor vectors;              // (n, n), row i is the eigenvector of values[i]
};

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Deterministic:
/// fixed sweep order, convergence by off-diagonal norm, eigenvalues sorted
/// descending and each eigenvector's largest-magnitude entry made positive.
inline SymEigen symmetric_eigen(const Tensor& A) {
  if (A.rank() != 2 || A.shape[0] != A.shape[1]) throw ShapeError("symmetric_eigen: need a square matrix");
  const std::size_t n = A.shape[0];
  std::vector<double> a = A.data;
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::fabs(a[i * n + i]));
  for (std::size_t i = 0; i < n * n; ++i) scale = std::max(scale, std::fabs(a[i]));
  const double tol = std::max(scale, 1.0) * 1e-15;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    if (std::sqrt(off) <= tol * static_cast<double>(n)) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::fabs(apq) <= tol * 1e-2) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t i = 0; i < n; ++i) {  // rotate rows/cols p and q
          const double aip = a[i * n + p], aiq = a[i * n + q];
          a[i * n + p] = c * aip - s * aiq;
          a[i * n + q] = s * aip + c * aiq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double api = a[p * n + i], aqi = a[q * n + i];
          a[p * n + i] = c * api - s * aqi;
          a[q * n + i] = s * api + c * aqi;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vip = v[i * n + p], viq = v[i * n + q];
          v[i * n + p] = c * vip - s * viq;
          v[i * n + q] = s * vip + c * viq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a[x * n + x] > a[y * n + y]; });
  SymEigen out;
  out.values.resize(n);
  out.vectors = Tensor({n, n});
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t col = order[r];
    out.values[r] = a[col * n + col];
    std::size_t big = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (std::fabs(v[i * n + col]) > std::fabs(v[big * n + col])) big = i;
    const double sign = v[big * n + col] < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) out.vectors.data[r * n + i] = sign * v[i * n + col];
  }
  return out;
}

struct PcaModel {
  Tensor mean;                // (D)
  Tensor components;          // (Q, D); rows orthonormal, zero rows past effective_rank
  Tensor explained_variance;  // (Q) covariance eigenvalues (population, 1/N)
  std::size_t effective_rank = 0;
};

/// Top-Q principal directions of (N, D) row data by explained variance.
/// Degenerate covariance keeps the available rank and zero-pads the rest.
inline PcaModel fit_pca(const Tensor& data, std::size_t q) {
  if (data.rank() != 2) throw ShapeError("fit_pca: need (N, D) data");
  const std::size_t N = data.shape[0], D = data.shape[1];
  if (N <= q) throw ShapeError("fit_pca: need more rows than components");
  PcaModel m;
  m.mean = Tensor({D});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t d = 0; d < D; ++d) m.mean.data[d] += data.data[i * D + d];
  for (double& v : m.mean.data) v /= static_cast<double>(N);

  Tensor cov({D, D});
  std::vector<double> x(D);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t d = 0; d < D; ++d) x[d] = data.data[i * D + d] - m.mean.data[d];
    for (std::size_t r = 0; r < D; ++r) {
      const double xr = x[r];
      double* row = cov.data.data() + r * D;
      for (std::size_t c = 0; c < D; ++c) row[c] += xr * x[c];
    }
  }
  scale(cov, 1.0 / static_cast<double>(N));

  const SymEigen eig = symmetric_eigen(cov);
  const double lmax = eig.values.empty() ? 0.0 : std::max(eig.values[0], 0.0);
  const double rank_tol = std::max(lmax, 1.0) * 1e-12;

  m.components = Tensor({q, D});
  m.explained_variance = Tensor({q});
  m.effective_rank = 0;
  for (std::size_t r = 0; r < q && r < D; ++r) {
    if (eig.values[r] <= rank_tol) break;
    for (std::size_t d = 0; d < D; ++d) m.components.data[r * D + d] = eig.vectors.data[r * D + d];
    m.explained_variance.data[r] = eig.values[r];
    ++m.effective_rank;
  }
  return m;
}

/// e = components (x - mean); rows beyond the effective rank contribute 0.
inline void pca_project(const PcaModel& m, const double* x, double* e) {
  const std::size_t Q = m.components.shape[0], D = m.components.shape[1];
  for (std::size_t r = 0; r < Q; ++r) {
    const double* row = m.components.data.data() + r * D;
    double s = 0.0;
    for (std::size_t d = 0; d < D; ++d) s += row[d] * (x[d] - m.mean.data[d]);
    e[r] = s;
  }
}

/// x = components^T e + mean.
inline void pca_reconstruct(const PcaModel& m, const double* e, double* x) {
  const std::size_t Q = m.components.shape[0], D = m.components.shape[1];
  for (std::size_t d = 0; d < D; ++d) x[d] = m.mean.data[d];
  for (std::size_t r = 0; r < Q; ++r) {
    const double* row = m.components.data.data() + r * D;
    const double er = e[r];
    for (std::size_t d = 0; d < D; ++d) x[d] += er * row[d];
  }
}

struct KMeansResult {
  Tensor centroids;  // (C, Q)
  std::vector<std::size_t> assignment;
  std::vector<double> inertia_history;  // one entry per assignment step, non-increasing
  std::size_t iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding; runs to an assignment fixpoint
/// or 100 iterations. Empty clusters are reseeded to the point farthest
/// from its assigned centroid.
inline KMeansResult fit_kmeans(const Tensor& points, std::size_t c, std::uint64_t seed) {
  if (points.rank() != 2) throw ShapeError("fit_kmeans: need (N, Q) points");
  const std::size_t N = points.shape[0], Q = points.shape[1];
  if (N < c || c == 0) throw ShapeError("fit_kmeans: need at least as many points as clusters");
  Rng rng(seed);

  auto dist2 = [&](const double* a, const double* b) {
    double s = 0.0;
    for (std::size_t q = 0; q < Q; ++q) {
      const double d = a[q] - b[q];
      s += d * d;
    }
    return s;
  };

  KMeansResult res;
  res.centroids = Tensor({c, Q});
  // k-means++ seeding
  std::vector<double> mind(N, 0.0);
  {
    const std::size_t first = static_cast<std::size_t>(rng.index(N));
    for (std::size_t q = 0; q < Q; ++q) res.centroids.data[q] = points.data[first * Q + q];
    for (std::size_t i = 0; i < N; ++i) mind[i] = dist2(points.data.data() + i * Q, res.centroids.data.data());
    for (std::size_t j = 1; j < c; ++j) {
      double total = 0.0;
      for (double d : mind) total += d;
      std::size_t pick = 0;
      if (total > 0.0) {
        const double target = rng.uniform() * total;
        double acc = 0.0;
        pick = N - 1;
        for (std::size_t i = 0; i < N; ++i) {
          acc += mind[i];
          if (acc >= target) {
            pick = i;
            break;
          }
        }
      } else {
        pick = static_cast<std::size_t>(rng.index(N));
      }
      double* cj = res.centroids.data.data() + j * Q;
      for (std::size_t q = 0; q < Q; ++q) cj[q] = points.data[pick * Q + q];
      for (std::size_t i = 0; i < N; ++i)
        mind[i] = std::min(mind[i], dist2(points.data.data() + i * Q, cj));
    }
  }

  res.assignment.assign(N, 0);
  std::vector<std::size_t> prev(N, N + 1);
  for (std::size_t iter = 0; iter < 100; ++iter) {
    // assignment step (ties to the lowest centroid index) + inertia log
    double inertia = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double* x = points.data.data() + i * Q;
      std::size_t best = 0;
      double bd = dist2(x, res.centroids.data.data());
      for (std::size_t j = 1; j < c; ++j) {
        const double d = dist2(x, res.centroids.data.data() + j * Q);
        if (d < bd) {
          bd = d;
          best = j;
        }
      }
      res.assignment[i] = best;
      inertia += bd;
    }
    res.inertia_history.push_back(inertia);
    res.iterations = iter + 1;
    if (res.assignment == prev) break;
    prev = res.assignment;

    // update step
    Tensor sums({c, Q});
    std::vector<std::size_t> counts(c, 0);
    for (std::size_t i = 0; i < N; ++i) {
      const std::size_t j = res.assignment[i];
      ++counts[j];
      for (std::size_t q = 0; q < Q; ++q) sums.data[j * Q + q] += points.data[i * Q + q];
    }
    for (std::size_t j = 0; j < c; ++j) {
      if (counts[j] == 0) continue;
      for (std::size_t q = 0; q < Q; ++q) res.centroids.data[j * Q + q] = sums.data[j * Q + q] / static_cast<double>(counts[j]);
    }
    // reseed empty clusters to the farthest point from its centroid
    for (std::size_t j = 0; j < c; ++j) {
      if (counts[j] != 0) continue;
      std::size_t far = 0;
      double fd = -1.0;
      for (std::size_t i = 0; i < N; ++i) {
        const double d = dist2(points.data.data() + i * Q,
                               res.centroids.data.data() + res.assignment[i] * Q);
        if (d > fd) {
          fd = d;
          far = i;
        }
      }
      for (std::size_t q = 0; q < Q; ++q) res.centroids.data[j * Q + q] = points.data[far * Q + q];
    }
  }
  return res;
}

struct BaselineModule {
  bool fitted = false;
  PcaModel pca;
  Tensor centroids;  // (C, Q)
  std::vector<double> inertia_history;
};

struct BaselineBank {
  std::size_t num_classes = 0;
  std::size_t num_concepts = 0;  // C
  std::size_t embed_dim = 0;     // Q
  std::vector<BaselineModule> modules;
};

/// Per class: PCA over every feature-map location vector of the train
/// images the black box predicts as that class, then k-means centroids in
/// the projected space. Classes with no predicted images stay unfitted.
inline BaselineBank fit_baseline(const BlackBox& bb, const LabeledDataset& ds, std::size_t num_concepts,
                                 std::size_t embed_dim, std::uint64_t seed) {
  BaselineBank bank;
  bank.num_classes = bb.num_classes;
  bank.num_concepts = num_concepts;
  bank.embed_dim = embed_dim;
  bank.modules.resize(bb.num_classes);

  const std::vector<std::size_t> train_idx = indices_of(ds, Split::kTrain);
  std::vector<std::vector<std::size_t>> pools(bb.num_classes);
  std::vector<Tensor> fmaps;
  fmaps.reserve(train_idx.size());
  for (std::size_t idx : train_idx) {
    fmaps.push_back(feature_map(bb, ds.images[idx]));
    pools[argmax(resume_forward(bb, fmaps.back()))].push_back(fmaps.size() - 1);
  }

  for (std::size_t k = 0; k < bb.num_classes; ++k) {
    if (pools[k].empty()) continue;  // flagged by fitted=false
    const std::size_t HW = fmaps[pools[k][0]].shape[0] * fmaps[pools[k][0]].shape[1];
    const std::size_t D = fmaps[pools[k][0]].shape[2];
    Tensor vectors({pools[k].size() * HW, D});
    std::size_t row = 0;
    for (std::size_t fi : pools[k]) {
      std::copy(fmaps[fi].data.begin(), fmaps[fi].data.end(), vectors.data.begin() + static_cast<std::ptrdiff_t>(row * D));
      row += HW;
    }
    BaselineModule& m = bank.modules[k];
    m.pca = fit_pca(vectors, embed_dim);
    Tensor emb({vectors.shape[0], embed_dim});
    for (std::size_t i = 0; i < vectors.shape[0]; ++i)
      pca_project(m.pca, vectors.data.data() + i * D, emb.data.data() + i * embed_dim);
    KMeansResult km = fit_kmeans(emb, num_concepts, derive_seed(seed, "kmeans", k));
    m.centroids = std::move(km.centroids);
    m.inertia_history = std::move(km.inertia_history);
    m.fitted = true;
  }
  return bank;
}

struct BaselinePrediction {
  std::size_t label = 0;
  std::vector<double> probs;  // per-class scores from centroid-substituted reconstructions
};

/// Score an image under every class module: project each location to the
/// class's PCA space, snap to the nearest centroid (ties to the lowest
/// index), reconstruct, and read that class's probability off the resumed
/// black box. Unfitted modules score 0.
inline BaselinePrediction baseline_predict(const BlackBox& bb, const BaselineBank& bank, const Tensor& image) {
  const Tensor fmap = feature_map(bb, image);
  const std::size_t HW = fmap.shape[0] * fmap.shape[1];
  const std::size_t D = fmap.shape[2];
  BaselinePrediction out;
  out.probs.assign(bank.num_classes, 0.0);
  std::vector<double> e(bank.embed_dim);
  for (std::size_t k = 0; k < bank.num_classes; ++k) {
    const BaselineModule& m = bank.modules[k];
    if (!m.fitted) continue;
    Tensor recon(fmap.shape);
    for (std::size_t l = 0; l < HW; ++l) {
      pca_project(m.pca, fmap.data.data() + l * D, e.data());
      std::size_t best = 0;
      double bd = 0.0;
      for (std::size_t j = 0; j < bank.num_concepts; ++j) {
        const double* cj = m.centroids.data.data() + j * bank.embed_dim;
        double d = 0.0;
        for (std::size_t q = 0; q < bank.embed_dim; ++q) {
          const double diff = e[q] - cj[q];
          d += diff * diff;
        }
        if (j == 0 || d < bd) {
          bd = d;
          best = j;
        }
      }
      pca_reconstruct(m.pca, m.centroids.data.data() + best * bank.embed_dim, recon.data.data() + l * D);
    }
    out.probs[k] = resume_forward(bb, recon).data[k];
  }
  out.label = argmax(out.probs);
  return out;
}

}  // namespace pace
