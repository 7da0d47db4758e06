#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "common.hpp"
#include "pace/checkpoint.hpp"
#include "pace/explain.hpp"
#include "pace/netpbm.hpp"
#include "pace/pace.hpp"
#include "pace/pace_train.hpp"
#include "pace/synthparts.hpp"

using namespace pace;
using testutil::make_objective_fixture;
using testutil::ObjectiveFixture;
using testutil::ParamBlock;
using testutil::random_tensor;

namespace {

void expect_rel_near(double got, double want, double tol, const std::string& what) {
  const double err = std::fabs(got - want) / std::max(1.0, std::fabs(want));
  EXPECT_LE(err, tol) << what << ": got " << got << " want " << want;
}

// Test-side similarity recomputation, independent loop order.
std::vector<std::vector<double>> similarity_ref(const ClassExplainer& exp, const PaceHyper& hy, const Tensor& E) {
  const std::size_t HW = E.shape[0] * E.shape[1], Q = E.shape[2], C = exp.concepts.shape[0];
  std::vector<std::vector<double>> S(C, std::vector<double>(HW, 0.0));
  for (std::size_t l = 0; l < HW; ++l)
    for (std::size_t j = 0; j < C; ++j) {
      double d2 = 0.0;
      for (std::size_t q = 0; q < Q; ++q) {
        const double d = E.data[l * Q + q] - exp.concepts.data[j * Q + q];
        d2 += d * d;
      }
      S[j][l] = 1.0 / (hy.epsilon + std::sqrt(d2));
    }
  return S;
}

}  // namespace

// ------------------------------------------------------------- bank setup

TEST(Bank, InitDeterministicPerSeed) {
  PaceHyper hy;
  const ExplainerBank a = make_explainer_bank(hy, 5), b = make_explainer_bank(hy, 5), c = make_explainer_bank(hy, 6);
  EXPECT_EQ(serialize_explainer(a), serialize_explainer(b));
  EXPECT_NE(serialize_explainer(a), serialize_explainer(c));
  EXPECT_EQ(a.modules.size(), hy.num_classes);
  EXPECT_EQ(a.modules[0].concepts.shape, (std::vector<std::size_t>{hy.num_concepts, hy.embed_dim}));
}

TEST(Bank, HyperValidationRejectsOutOfRange) {
  PaceHyper hy;
  hy.tau = 0.0;
  EXPECT_THROW(validate_hyper(hy), ConfigError);
  hy = PaceHyper{};
  hy.tau = 100.5;
  EXPECT_THROW(validate_hyper(hy), ConfigError);
  hy = PaceHyper{};
  hy.rho = 0;
  EXPECT_THROW(validate_hyper(hy), ConfigError);
  hy = PaceHyper{};
  hy.num_classes = 1;
  EXPECT_THROW(validate_hyper(hy), ConfigError);
  hy = PaceHyper{};
  hy.epsilon = 0.0;
  EXPECT_THROW(validate_hyper(hy), ConfigError);
}

// ----------------------------------------------- similarity and presence

TEST(Similarity, MatchesBruteForceRecomputation) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const ObjectiveFixture fx = make_objective_fixture(s);
    const ClassExplainer& exp = fx.bank.modules[0];
    const Tensor E = encode(exp, fx.fmaps[0]);
    const SimilarityStack st = similarity(exp, fx.bank.hyper, E);
    const auto ref = similarity_ref(exp, fx.bank.hyper, E);
    const std::size_t C = ref.size(), HW = ref[0].size();
    for (std::size_t j = 0; j < C; ++j) {
      double mx = 0.0;
      for (double v : ref[j]) mx = std::max(mx, v);
      const double cut = (fx.bank.hyper.tau / 100.0) * mx;
      for (std::size_t l = 0; l < HW; ++l) {
        EXPECT_NEAR(st.similarity[j].data[l], ref[j][l], 1e-12);
        EXPECT_DOUBLE_EQ(st.presence[j].data[l], ref[j][l] >= cut ? 1.0 : 0.0);
      }
    }
  }
}

TEST(Similarity, EveryConceptPresentAtItsArgmax) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const ObjectiveFixture fx = make_objective_fixture(1000 + s);
    for (std::size_t k = 0; k < fx.bank.modules.size(); ++k) {
      const Tensor E = encode(fx.bank.modules[k], fx.fmaps[0]);
      const SimilarityStack st = similarity(fx.bank.modules[k], fx.bank.hyper, E);
      for (std::size_t j = 0; j < st.similarity.size(); ++j)
        EXPECT_DOUBLE_EQ(st.presence[j].data[argmax(st.similarity[j])], 1.0);
    }
  }
}

TEST(Similarity, AllValuesPositive) {
  const ObjectiveFixture fx = make_objective_fixture(3);
  const Tensor E = encode(fx.bank.modules[0], fx.fmaps[0]);
  const SimilarityStack st = similarity(fx.bank.modules[0], fx.bank.hyper, E);
  for (const Tensor& S : st.similarity)
    for (double v : S.data) EXPECT_GT(v, 0.0);
}

// -------------------------------------------------------------- concept map

TEST(ConceptMap, MatchesBruteForceSubstitution) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const ObjectiveFixture fx = make_objective_fixture(100 + s);
    const ClassExplainer& exp = fx.bank.modules[s % fx.bank.modules.size()];
    const Tensor E = encode(exp, fx.fmaps[0]);
    const SimilarityStack st = similarity(exp, fx.bank.hyper, E);
    std::vector<int> replaced;
    const Tensor cmap = concept_map(exp, E, st, &replaced);
    const std::size_t HW = E.shape[0] * E.shape[1], Q = E.shape[2], C = st.similarity.size();
    ASSERT_EQ(replaced.size(), HW);
    for (std::size_t l = 0; l < HW; ++l) {
      bool any = false;
      std::size_t best = 0;
      for (std::size_t j = 0; j < C; ++j) {
        any = any || st.presence[j].data[l] > 0.0;
        if (st.similarity[j].data[l] > st.similarity[best].data[l]) best = j;
      }
      if (any) {
        ASSERT_EQ(replaced[l], static_cast<int>(best)) << "location " << l;
        for (std::size_t q = 0; q < Q; ++q)
          ASSERT_EQ(cmap.data[l * Q + q], exp.concepts.data[best * Q + q]);
      } else {
        ASSERT_EQ(replaced[l], -1);
        for (std::size_t q = 0; q < Q; ++q) ASSERT_EQ(cmap.data[l * Q + q], E.data[l * Q + q]);
      }
    }
  }
}

// --------------------------------------------------------------- relevance

TEST(Relevance, MatchesMaskedRescoring) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const ObjectiveFixture fx = make_objective_fixture(200 + s);
    const std::size_t k = s % fx.bank.modules.size();
    const ClassExplainer& exp = fx.bank.modules[k];
    const Tensor E = encode(exp, fx.fmaps[0]);
    const SimilarityStack st = similarity(exp, fx.bank.hyper, E);
    const Tensor cmap = concept_map(exp, E, st);
    const std::vector<double> r = relevance(fx.bb, exp, cmap, st, k);
    const double p = reconstruct_and_score(fx.bb, exp, cmap, k).probability;
    const std::size_t HW = cmap.shape[0] * cmap.shape[1], Q = cmap.shape[2];
    for (std::size_t j = 0; j < r.size(); ++j) {
      Tensor masked = cmap;
      for (std::size_t l = 0; l < HW; ++l)
        if (st.presence[j].data[l] > 0.0)
          for (std::size_t q = 0; q < Q; ++q) masked.data[l * Q + q] = 0.0;
      const double pj = reconstruct_and_score(fx.bb, exp, masked, k).probability;
      EXPECT_DOUBLE_EQ(r[j], p - pj);
      EXPECT_GE(r[j], -1.0);
      EXPECT_LE(r[j], 1.0);
    }
  }
}

TEST(Relevance, AbsentConceptIsExactlyZero) {
  const ObjectiveFixture fx = make_objective_fixture(7);
  const ClassExplainer& exp = fx.bank.modules[0];
  const Tensor E = encode(exp, fx.fmaps[0]);
  SimilarityStack st = similarity(exp, fx.bank.hyper, E);
  st.presence[1].fill(0.0);  // caller-constructed stack: concept 1 nowhere present
  const Tensor cmap = concept_map(exp, E, st);
  const std::vector<double> r = relevance(fx.bb, exp, cmap, st, 0);
  EXPECT_EQ(r[1], 0.0);  // exact, not approximate
}

TEST(Relevance, BoundedOnRandomDraws) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const ObjectiveFixture fx = make_objective_fixture(5000 + s);
    for (std::size_t i = 0; i < fx.fmaps.size(); ++i)
      for (std::size_t k = 0; k < fx.bank.modules.size(); ++k) {
        const ClassExplainer& exp = fx.bank.modules[k];
        const Tensor E = encode(exp, fx.fmaps[i]);
        const SimilarityStack st = similarity(exp, fx.bank.hyper, E);
        const Tensor cmap = concept_map(exp, E, st);
        for (double v : relevance(fx.bb, exp, cmap, st, k)) {
          ASSERT_GE(v, -1.0);
          ASSERT_LE(v, 1.0);
        }
      }
  }
}

// ------------------------------------------------------------------ losses

TEST(Losses, CrossEntropyMatchesClosedForm) {
  const Tensor P({3}, {0.2, 0.9, 0.4});
  const Tensor t({3}, {0.1, 0.6, 0.3});
  double want = 0.0;
  for (std::size_t i = 0; i < 3; ++i) want -= t.data[i] * std::log(P.data[i]);
  EXPECT_NEAR(loss_ce(P, t), want, 1e-15);
  EXPECT_TRUE(std::isfinite(loss_ce(Tensor({2}, {0.0, 1.0}), Tensor({2}, {0.5, 0.5}))));
}

TEST(Losses, CrossEntropyTargetSwitch) {
  const Tensor bbp({3}, {0.2, 0.5, 0.3});
  EXPECT_TRUE(bitwise_equal(detail::ce_target(bbp, false), bbp));
  const Tensor hard = detail::ce_target(bbp, true);
  EXPECT_DOUBLE_EQ(hard.data[0], 0.0);
  EXPECT_DOUBLE_EQ(hard.data[1], 1.0);
  EXPECT_DOUBLE_EQ(hard.data[2], 0.0);
}

TEST(Losses, DiversityMatchesBruteForceDoubleLoop) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(300 + s);
    const std::size_t C = 2 + rng.index(4), Q = 2 + rng.index(4);
    const Tensor concepts = random_tensor(rng, {C, Q});
    double want = 0.0;
    for (std::size_t a = 0; a < C; ++a)
      for (std::size_t b = 0; b < C; ++b) {
        if (a == b) continue;
        double d2 = 0.0;
        for (std::size_t q = 0; q < Q; ++q) {
          const double d = concepts.data[a * Q + q] - concepts.data[b * Q + q];
          d2 += d * d;
        }
        want += d2;
      }
    expect_rel_near(class_diversity(concepts), want, 1e-12, "diversity");
  }
  // bank-wide sum
  const ObjectiveFixture fx = make_objective_fixture(9);
  double want = 0.0;
  for (const ClassExplainer& m : fx.bank.modules) want += class_diversity(m.concepts);
  EXPECT_DOUBLE_EQ(loss_diversity(fx.bank), want);
}

namespace {

// Exhaustive triplet recomputation from first principles.
double triplet_ref(const ExplainerBank& bank, const std::vector<Tensor>& embs, std::size_t k) {
  const PaceHyper& hy = bank.hyper;
  const std::size_t n = embs.size(), C = hy.num_concepts;
  if (n < 2 || C < 2) return 0.0;
  const std::size_t Q = hy.embed_dim;
  // anchor vectors: per member x concept, the embedding at the most similar location
  std::vector<std::vector<std::vector<double>>> anchor(n, std::vector<std::vector<double>>(C));
  for (std::size_t i = 0; i < n; ++i) {
    const auto S = similarity_ref(bank.modules[k], hy, embs[i]);
    for (std::size_t j = 0; j < C; ++j) {
      std::size_t best = 0;
      for (std::size_t l = 1; l < S[j].size(); ++l)
        if (S[j][l] > S[j][best]) best = l;
      anchor[i][j].assign(embs[i].data.begin() + static_cast<std::ptrdiff_t>(best * Q),
                          embs[i].data.begin() + static_cast<std::ptrdiff_t>((best + 1) * Q));
    }
  }
  auto d2 = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t q = 0; q < Q; ++q) s += (a[q] - b[q]) * (a[q] - b[q]);
    return s;
  };
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < C; ++j)
      for (std::size_t ip = 0; ip < n; ++ip) {
        if (ip == i) continue;
        const double dap = d2(anchor[i][j], anchor[ip][j]);
        // candidate negatives: every member, every other concept
        double chosen = -1.0;
        double closest_semi = -1.0, closest_any = -1.0;
        for (std::size_t in = 0; in < n; ++in)
          for (std::size_t jn = 0; jn < C; ++jn) {
            if (jn == j) continue;
            const double dan = d2(anchor[i][j], anchor[in][jn]);
            if (closest_any < 0.0 || dan < closest_any) closest_any = dan;
            if (dan > dap && dan < dap + hy.alpha && (closest_semi < 0.0 || dan < closest_semi))
              closest_semi = dan;
          }
        chosen = closest_semi >= 0.0 ? closest_semi : closest_any;
        loss += std::max(0.0, dap - chosen + hy.alpha);
      }
  return loss;
}

}  // namespace

TEST(Losses, TripletMatchesExhaustiveEnumeration) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(400 + s);
    const std::size_t members = 2 + rng.index(4);
    const ObjectiveFixture fx = make_objective_fixture(777 + s, members);
    const std::size_t k = s % fx.bank.modules.size();
    std::vector<Tensor> embs;
    for (const Tensor& f : fx.fmaps) embs.push_back(encode(fx.bank.modules[k], f));
    expect_rel_near(loss_triplet(fx.bank, embs, k), triplet_ref(fx.bank, embs, k), 1e-12, "triplet");
  }
}

TEST(Losses, TripletDegenerateCasesAreZero) {
  const ObjectiveFixture fx = make_objective_fixture(11, 1);  // single member
  std::vector<Tensor> embs = {encode(fx.bank.modules[0], fx.fmaps[0])};
  EXPECT_EQ(loss_triplet(fx.bank, embs, 0), 0.0);
  EXPECT_EQ(loss_triplet(fx.bank, {}, 0), 0.0);

  PaceHyper hy;  // single concept: no negatives exist
  hy.num_classes = 2;
  hy.num_concepts = 1;
  hy.embed_dim = 3;
  hy.feature_dim = 5;
  const ExplainerBank bank1 = make_explainer_bank(hy, 3);
  Rng rng(5);
  std::vector<Tensor> embs1 = {random_tensor(rng, {3, 3, 3}), random_tensor(rng, {3, 3, 3})};
  EXPECT_EQ(loss_triplet(bank1, embs1, 0), 0.0);
}

TEST(Losses, RemovalEffectIdentityHolds) {
  // sum over squared (relevance - probability) equals sum over squared
  // masked probabilities, because each relevance is p minus the masked p
  for (std::uint64_t s = 0; s < 10; ++s) {
    const ObjectiveFixture fx = make_objective_fixture(600 + s);
    PaceBatch batch;
    batch.fmaps = fx.fmaps;
    for (const Tensor& p : fx.probs) batch.bb_probs.push_back(p);
    const double got = loss_relevance(fx.bb, fx.bank, batch);
    double definitional = 0.0, masked_form = 0.0;
    for (std::size_t i = 0; i < batch.fmaps.size(); ++i)
      for (std::size_t k = 0; k < fx.bank.modules.size(); ++k) {
        const ClassExplainer& exp = fx.bank.modules[k];
        const Tensor E = encode(exp, batch.fmaps[i]);
        const SimilarityStack st = similarity(exp, fx.bank.hyper, E);
        const Tensor cmap = concept_map(exp, E, st);
        const double p = reconstruct_and_score(fx.bb, exp, cmap, k).probability;
        const std::vector<double> r = relevance(fx.bb, exp, cmap, st, k);
        const std::size_t HW = cmap.shape[0] * cmap.shape[1], Q = cmap.shape[2];
        for (std::size_t j = 0; j < r.size(); ++j) {
          definitional += (r[j] - p) * (r[j] - p);
          Tensor masked = cmap;
          bool any = false;
          for (std::size_t l = 0; l < HW; ++l)
            if (st.presence[j].data[l] > 0.0) {
              any = true;
              for (std::size_t q = 0; q < Q; ++q) masked.data[l * Q + q] = 0.0;
            }
          const double pj = any ? reconstruct_and_score(fx.bb, exp, masked, k).probability : p;
          masked_form += pj * pj;
        }
      }
    const double B = static_cast<double>(batch.fmaps.size());
    expect_rel_near(definitional, masked_form, 1e-12, "identity");
    expect_rel_near(got, definitional / B, 1e-12, "definitional route");
  }
}

TEST(Losses, TotalComposesWeightedTerms) {
  const ObjectiveFixture fx = make_objective_fixture(21);
  PaceBatch batch;
  batch.fmaps = fx.fmaps;
  for (const Tensor& p : fx.probs) batch.bb_probs.push_back(p);
  const LossBreakdown b = total_loss(fx.bb, fx.bank, batch);
  const PaceHyper& h = fx.bank.hyper;
  EXPECT_DOUBLE_EQ(b.total, h.beta * b.ce + h.gamma * b.relevance - h.delta * b.diversity + h.omega * b.triplet);
  EXPECT_DOUBLE_EQ(b.diversity, loss_diversity(fx.bank));
}

// ----------------------------------------------------- objective (fused)

TEST(Objective, MatchesReferenceCompositionOnMixedBatches) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const ObjectiveFixture fx = make_objective_fixture(800 + s, 3);
    PaceBatch batch;
    batch.fmaps = fx.fmaps;
    for (const Tensor& p : fx.probs) batch.bb_probs.push_back(p);
    const LossBreakdown ref = total_loss(fx.bb, fx.bank, batch);
    const LossBreakdown got = objective(fx.bb, fx.bank, batch, std::nullopt, nullptr, nullptr);
    expect_rel_near(got.ce, ref.ce, 1e-12, "ce");
    expect_rel_near(got.relevance, ref.relevance, 1e-12, "relevance");
    expect_rel_near(got.diversity, ref.diversity, 1e-12, "diversity");
    expect_rel_near(got.triplet, ref.triplet, 1e-12, "triplet");
    expect_rel_near(got.total, ref.total, 1e-12, "total");
  }
}

TEST(Objective, PureModeRestrictsTermsToFocalClass) {
  std::size_t nonzero_triplets = 0;
  for (std::uint64_t s = 0; s < 6; ++s) {
    const ObjectiveFixture fx = make_objective_fixture(900 + s, 8);
    const std::size_t k = s % fx.bank.modules.size();
    PaceBatch batch;
    batch.fmaps = fx.fmaps;
    for (const Tensor& p : fx.probs) batch.bb_probs.push_back(p);
    const LossBreakdown full = total_loss(fx.bb, fx.bank, batch);
    const LossBreakdown got = objective(fx.bb, fx.bank, batch, k, nullptr, nullptr);
    // cross-entropy unrestricted
    expect_rel_near(got.ce, full.ce, 1e-12, "pure ce");
    // relevance restricted to module k
    double rel_k = 0.0;
    for (std::size_t i = 0; i < batch.fmaps.size(); ++i) {
      const ClassExplainer& exp = fx.bank.modules[k];
      const Tensor E = encode(exp, batch.fmaps[i]);
      const SimilarityStack st = similarity(exp, fx.bank.hyper, E);
      const Tensor cmap = concept_map(exp, E, st);
      const double p = reconstruct_and_score(fx.bb, exp, cmap, k).probability;
      for (double r : relevance(fx.bb, exp, cmap, st, k)) rel_k += (r - p) * (r - p);
    }
    rel_k /= static_cast<double>(batch.fmaps.size());
    expect_rel_near(got.relevance, rel_k, 1e-12, "pure relevance");
    // diversity restricted to module k
    expect_rel_near(got.diversity, class_diversity(fx.bank.modules[k].concepts), 1e-12, "pure diversity");
    // triplet restricted to module k over the members scored as class k
    std::vector<Tensor> embs;
    for (std::size_t i = 0; i < batch.fmaps.size(); ++i)
      if (argmax(batch.bb_probs[i]) == k) embs.push_back(encode(fx.bank.modules[k], batch.fmaps[i]));
    const double want_trip = loss_triplet(fx.bank, embs, k);
    expect_rel_near(got.triplet, want_trip, 1e-12, "pure triplet");
    if (want_trip > 0.0) ++nonzero_triplets;
  }
  EXPECT_GE(nonzero_triplets, 1u);  // the restriction must be exercised, not vacuous
}

TEST(Objective, SelectorFingerprintStableUnderRepetition) {
  const ObjectiveFixture fx = make_objective_fixture(31, 3);
  std::uint64_t h1 = 0, h2 = 0;
  objective(fx.bb, fx.bank, fx.fmap_ptrs(), fx.prob_ptrs(), std::nullopt, nullptr, &h1);
  objective(fx.bb, fx.bank, fx.fmap_ptrs(), fx.prob_ptrs(), std::nullopt, nullptr, &h2);
  EXPECT_EQ(h1, h2);
  // a large parameter change should disturb the selectors
  ObjectiveFixture fx2 = fx;
  fx2.bank.modules[0].concepts.data[0] += 10.0;
  std::uint64_t h3 = 0;
  objective(fx2.bb, fx2.bank, fx2.fmap_ptrs(), fx2.prob_ptrs(), std::nullopt, nullptr, &h3);
  EXPECT_NE(h1, h3);
}

TEST(Objective, GradientsPassFiniteDifferencesCombined) {
  EXPECT_LT(testutil::worst_stable_fd_error(10000, 20, ParamBlock::kEncoder), 1e-4);
  EXPECT_LT(testutil::worst_stable_fd_error(11000, 20, ParamBlock::kDecoder), 1e-4);
  EXPECT_LT(testutil::worst_stable_fd_error(12000, 20, ParamBlock::kConcepts), 1e-4);
}

TEST(Objective, GradientsPassFiniteDifferencesPerTerm) {
  struct Case {
    const char* name;
    std::function<void(PaceHyper&)> tweak;
  };
  const Case cases[] = {
      {"classification only", [](PaceHyper& h) { h.gamma = h.delta = h.omega = 0.0; }},
      {"removal only", [](PaceHyper& h) { h.beta = h.delta = h.omega = 0.0; }},
      {"separation only", [](PaceHyper& h) { h.beta = h.gamma = h.omega = 0.0; }},
      {"embedding-contrast only", [](PaceHyper& h) { h.beta = h.gamma = h.delta = 0.0; }},
  };
  std::uint64_t seed = 20000;
  for (const Case& c : cases) {
    for (ParamBlock block : {ParamBlock::kEncoder, ParamBlock::kDecoder, ParamBlock::kConcepts}) {
      const double err = testutil::worst_stable_fd_error(seed += 1000, 20, block, c.tweak);
      EXPECT_LT(err, 1e-4) << c.name;
    }
  }
}

TEST(Objective, GradientsPassFiniteDifferencesPureMode) {
  EXPECT_LT(testutil::worst_stable_fd_error(30000, 20, ParamBlock::kEncoder, nullptr, true), 1e-4);
  EXPECT_LT(testutil::worst_stable_fd_error(31000, 20, ParamBlock::kDecoder, nullptr, true), 1e-4);
  EXPECT_LT(testutil::worst_stable_fd_error(32000, 20, ParamBlock::kConcepts, nullptr, true), 1e-4);
}

// ---------------------------------------------------------------- training

TEST(Training, ScheduleAlternatesPureAndMixed) {
  for (std::size_t t = 0; t < 5; ++t) EXPECT_TRUE(is_pure_iteration(t, 5)) << t;
  EXPECT_FALSE(is_pure_iteration(5, 5));
  for (std::size_t t = 6; t < 11; ++t) EXPECT_TRUE(is_pure_iteration(t, 5)) << t;
  EXPECT_FALSE(is_pure_iteration(11, 5));
  EXPECT_TRUE(is_pure_iteration(0, 1));
  EXPECT_FALSE(is_pure_iteration(1, 1));
}

namespace {

struct TrainFixture {
  BlackBox bb;
  LabeledDataset ds;
};

TrainFixture tiny_train_fixture(std::uint64_t seed) {
  TrainFixture fx;
  GenConfig gc;
  gc.num_classes = 2;
  gc.images_per_class = 10;
  gc.seed = seed;
  fx.ds = generate_parts_dataset(gc);
  fx.bb = make_desk_blackbox(2, derive_seed(seed, "bb-init"));
  return fx;
}

PaceTrainConfig tiny_pace_cfg(std::uint64_t seed) {
  PaceTrainConfig cfg;
  cfg.hyper.num_classes = 2;
  cfg.hyper.num_concepts = 2;
  cfg.hyper.embed_dim = 4;
  cfg.hyper.rho = 2;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST(Training, ZeroEpochsReturnsSeededInit) {
  const TrainFixture fx = tiny_train_fixture(3);
  PaceTrainConfig cfg = tiny_pace_cfg(3);
  cfg.epochs = 0;
  const PaceTrainResult res = train_explainer(fx.bb, fx.ds, cfg);
  PaceHyper hy = cfg.hyper;
  hy.feature_dim = 64;  // channels at the desk split
  const ExplainerBank want = make_explainer_bank(hy, derive_seed(cfg.seed, "pace-init"));
  EXPECT_EQ(serialize_explainer(res.bank), serialize_explainer(want));
  EXPECT_TRUE(res.log.empty());
}

TEST(Training, DeterministicAndLogsSchedule) {
  const TrainFixture fx = tiny_train_fixture(4);
  const PaceTrainConfig cfg = tiny_pace_cfg(4);
  const PaceTrainResult a = train_explainer(fx.bb, fx.ds, cfg);
  const PaceTrainResult b = train_explainer(fx.bb, fx.ds, cfg);
  EXPECT_EQ(serialize_explainer(a.bank), serialize_explainer(b.bank));
  ASSERT_EQ(a.log.size(), cfg.epochs);
  const std::size_t n_train = indices_of(fx.ds, Split::kTrain).size();
  const std::size_t iters = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t pure = 0, mixed = 0;
  for (std::size_t t = 0; t < iters * cfg.epochs; ++t) (is_pure_iteration(t, cfg.hyper.rho) ? pure : mixed) += 1;
  std::size_t got_pure = 0, got_mixed = 0;
  for (const PaceEpochLog& e : a.log) {
    got_pure += e.pure_batches;
    got_mixed += e.mixed_batches;
    EXPECT_TRUE(std::isfinite(e.total));
  }
  EXPECT_EQ(got_pure, pure);
  EXPECT_EQ(got_mixed, mixed);

  PaceTrainConfig cfg2 = cfg;
  cfg2.seed = 5;
  const PaceTrainResult c = train_explainer(fx.bb, fx.ds, cfg2);
  EXPECT_NE(serialize_explainer(a.bank), serialize_explainer(c.bank));
}

// ------------------------------------------------------------- explanation

TEST(Upsample, BlockIsExactAndBinaryPreserving) {
  Rng rng(2);
  Tensor m({3, 4});
  for (double& v : m.data) v = rng.index(2) ? 1.0 : 0.0;
  const Tensor u = block_upsample(m, 4);
  ASSERT_EQ(u.shape, (std::vector<std::size_t>{12, 16}));
  for (std::size_t y = 0; y < 12; ++y)
    for (std::size_t x = 0; x < 16; ++x) EXPECT_EQ(u.data[y * 16 + x], m.data[(y / 4) * 4 + x / 4]);
}

TEST(Upsample, BilinearStaysWithinSourceRange) {
  Rng rng(3);
  const Tensor m = random_tensor(rng, {4, 4}, 0.0, 1.0);
  const Tensor u = bilinear_upsample(m, 16, 16);
  const double lo = *std::min_element(m.data.begin(), m.data.end());
  const double hi = *std::max_element(m.data.begin(), m.data.end());
  for (double v : u.data) {
    EXPECT_GE(v, lo - 1e-12);
    EXPECT_LE(v, hi + 1e-12);
  }
  Tensor c({2, 2});
  c.fill(0.7);
  for (double v : bilinear_upsample(c, 8, 8).data) EXPECT_DOUBLE_EQ(v, 0.7);
}

TEST(Explanation, PercentagesSumToHundredWhenEmitted) {
  bool found = false;
  for (std::uint64_t s = 0; s < 60 && !found; ++s) {
    Rng rng(7000 + s);
    const BlackBox bb = make_desk_blackbox(2, 7000 + s);
    PaceHyper hy;
    hy.num_classes = 2;
    hy.num_concepts = 3;
    hy.embed_dim = 4;
    hy.feature_dim = 64;
    ExplainerBank bank = make_explainer_bank(hy, 100 + s);
    const Tensor img = random_tensor(rng, {16, 16, 3}, 0.0, 1.0);
    const Explanation ex = explain(bb, bank, img);
    if (ex.degenerate_percentages) continue;
    found = true;
    double sum = 0.0;
    for (const ConceptReport& c : ex.concepts) {
      ASSERT_TRUE(c.has_percent);
      sum += c.percent;
      if (c.relevance > 0.0) {
        EXPECT_GT(c.percent, 0.0);
      }
      if (c.relevance < 0.0) {
        EXPECT_LT(c.percent, 0.0);
      }
    }
    EXPECT_NEAR(sum, 100.0, 1e-6);
  }
  EXPECT_TRUE(found) << "no non-degenerate explanation among the sampled draws";
}

TEST(Explanation, ZeroDecoderYieldsDegeneratePercentages) {
  const BlackBox bb = make_desk_blackbox(2, 5);
  PaceHyper hy;
  hy.num_classes = 2;
  hy.num_concepts = 2;
  hy.embed_dim = 4;
  hy.feature_dim = 64;
  ExplainerBank bank = make_explainer_bank(hy, 6);
  for (ClassExplainer& m : bank.modules) m.decoder.weights.fill(0.0);  // masking changes nothing
  Rng rng(8);
  const Explanation ex = explain(bb, bank, random_tensor(rng, {16, 16, 3}, 0.0, 1.0));
  EXPECT_TRUE(ex.degenerate_percentages);
  for (const ConceptReport& c : ex.concepts) {
    EXPECT_FALSE(c.has_percent);
    EXPECT_EQ(c.relevance, 0.0);
  }
}

TEST(Explanation, WriterEmitsParsableJsonAndMasks) {
  const TrainFixture fx = tiny_train_fixture(12);
  PaceTrainConfig cfg = tiny_pace_cfg(12);
  cfg.epochs = 1;
  const PaceTrainResult res = train_explainer(fx.bb, fx.ds, cfg);
  const Explanation ex = explain(fx.bb, res.bank, fx.ds.images[0]);
  const std::string dir = testutil::fresh_dir("explain_out");
  write_explanation(dir, "sample", ex);

  std::ifstream jf(dir + "/sample.json");
  ASSERT_TRUE(jf.good());
  nlohmann::json j;
  jf >> j;
  EXPECT_EQ(j["predicted_label"].get<std::size_t>(), ex.predicted_label);
  EXPECT_EQ(j["concepts"].size(), ex.concepts.size());
  EXPECT_EQ(j["explainer_probs"].size(), 2u);
  for (const auto& cj : j["concepts"]) {
    const std::string heat = cj["mask_file"].get<std::string>();
    const std::string pres = cj["presence_file"].get<std::string>();
    const Tensor hm = read_pgm(dir + "/" + heat);
    EXPECT_EQ(hm.shape[0], ex.image_h);
    for (double v : read_pgm(dir + "/" + pres).data) EXPECT_TRUE(v == 0.0 || v == 1.0);
  }
}
