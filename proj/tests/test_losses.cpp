#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "cona/error.hpp"
#include "cona/losses.hpp"
#include "cona/numerics.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace cona;

namespace {

EmbeddingBatch unit(std::size_t n, std::size_t d, std::mt19937_64& rng, bool detached = false) {
  return EmbeddingBatch(oracle::unit_rows(n, d, rng), detached);
}

EmbeddingBatch permuted(const EmbeddingBatch& b, const std::vector<std::size_t>& perm) {
  return EmbeddingBatch(gather_rows(b.matrix(), perm), b.detached());
}

template <typename F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no cona::Error thrown";
  return ErrorKind::IoError;
}

}  // namespace

TEST(EmbeddingBatch, RejectsUnnormalizedRows) {
  EXPECT_EQ(kind_of([] { EmbeddingBatch(Matrix{{1, 1}}); }), ErrorKind::NotNormalized);
  EXPECT_NO_THROW(EmbeddingBatch(Matrix{{0.6, 0.8}}));
  const auto b = EmbeddingBatch::normalized(Matrix{{3, 4}}, true);
  EXPECT_TRUE(b.detached());
  EXPECT_FALSE(b.as_attached().detached());
}

TEST(InfoNCE, IdentityRowsTauOne) {
  const EmbeddingBatch a(Matrix::identity(2));
  EXPECT_NEAR(infonce(a, a, 1.0).value, std::log(1 + std::exp(-1.0)), 1e-15);
}

TEST(InfoNCE, SingleRowIsZero) {
  std::mt19937_64 rng(1);
  EXPECT_EQ(infonce(unit(1, 5, rng), unit(1, 5, rng), 0.07).value, 0.0);
}

TEST(InfoNCE, ScalarOracleSeed3) {
  std::mt19937_64 rng(3);
  const auto a = unit(4, 8, rng), b = unit(4, 8, rng);
  const double want = oracle::infonce(oracle::rows_of(a.matrix()), oracle::rows_of(b.matrix()), 0.07);
  EXPECT_LE(oracle::rel_err(infonce(a, b, 0.07).value, want), 1e-9);
}

TEST(InfoNCE, Errors) {
  std::mt19937_64 rng(2);
  const auto a = unit(3, 4, rng), b = unit(2, 4, rng), c = unit(3, 5, rng);
  EXPECT_EQ(kind_of([&] { infonce(a, b); }), ErrorKind::ShapeMismatch);
  EXPECT_EQ(kind_of([&] { infonce(a, c); }), ErrorKind::ShapeMismatch);
  EXPECT_EQ(kind_of([&] { infonce(a, a, 0.0); }), ErrorKind::BadTemperature);
}

TEST(FeatureDistance, Examples) {
  std::mt19937_64 rng(4);
  const auto a = unit(3, 6, rng);
  EXPECT_EQ(feature_distance(a, a).value, 0.0);
  EXPECT_DOUBLE_EQ(
      feature_distance(EmbeddingBatch(Matrix{{1, 0}}), EmbeddingBatch(Matrix{{0, 1}})).value, 0.5);
  const auto x = unit(4, 8, rng), y = unit(4, 8, rng);
  EXPECT_LE(oracle::rel_err(feature_distance(x, y).value,
                            oracle::fd(oracle::rows_of(x.matrix()), oracle::rows_of(y.matrix()))),
            1e-12);
  EXPECT_EQ(kind_of([&] { feature_distance(a, x); }), ErrorKind::ShapeMismatch);
}

TEST(SimilarityDistance, Examples) {
  std::mt19937_64 rng(5);
  const auto a = unit(4, 8, rng), b = unit(4, 8, rng);
  EXPECT_EQ(similarity_distance(a, b, a, b).value, 0.0);

  const EmbeddingBatch u(Matrix{{1, 0}}), neg(Matrix{{-1, 0}});
  EXPECT_DOUBLE_EQ(similarity_distance(u, u, u, neg).value, 2.0);

  const auto ta = unit(4, 16, rng), tb = unit(4, 16, rng);
  const double want = oracle::sd(oracle::rows_of(a.matrix()), oracle::rows_of(b.matrix()),
                                 oracle::rows_of(ta.matrix()), oracle::rows_of(tb.matrix()));
  EXPECT_LE(oracle::rel_err(similarity_distance(a, b, ta, tb).value, want), 1e-12);

  const auto short_batch = unit(3, 8, rng);
  EXPECT_EQ(kind_of([&] { similarity_distance(a, short_batch, ta, tb); }), ErrorKind::ShapeMismatch);
  EXPECT_EQ(kind_of([&] { similarity_distance(a, ta, a, b); }), ErrorKind::ShapeMismatch);
}

TEST(KlDiv, Examples) {
  std::mt19937_64 rng(6);
  const auto a = unit(4, 8, rng), b = unit(4, 8, rng);
  EXPECT_NEAR(kl_div(a, b, a, b, 0.07).value, 0.0, 1e-15);
  const auto p = unit(1, 3, rng), q = unit(1, 3, rng);
  EXPECT_EQ(kl_div(p, p, q, q, 0.07).value, 0.0);

  const auto ta = unit(4, 8, rng), tb = unit(4, 8, rng);
  const double want = oracle::kl(oracle::rows_of(a.matrix()), oracle::rows_of(b.matrix()),
                                 oracle::rows_of(ta.matrix()), oracle::rows_of(tb.matrix()), 0.07);
  EXPECT_LE(oracle::rel_err(kl_div(a, b, ta, tb, 0.07).value, want), 1e-9);
  EXPECT_EQ(kind_of([&] { kl_div(a, b, ta, tb, -0.1); }), ErrorKind::BadTemperature);
}

TEST(KlDiv, ReverseIsForwardWithSlotsSwapped) {
  std::mt19937_64 rng(7);
  const auto a = unit(5, 6, rng), b = unit(5, 6, rng), c = unit(5, 6, rng), d = unit(5, 6, rng);
  EXPECT_DOUBLE_EQ(kl_div(a, b, c, d, 0.2, KlDirection::Reverse).value,
                   kl_div(c, d, a, b, 0.2, KlDirection::Forward).value);
}

TEST(SimilarityDistribution, RowsSumToOneEntriesPositive) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 20; ++t) {
    const auto sdist = similarity_distribution(unit(6, 4, rng), unit(6, 4, rng), 0.07);
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0.0;
      for (double v : sdist.probs.row(i)) {
        EXPECT_GT(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(LossProperties, NonNegativeAndPermutationInvariant) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = 1 + t % 9, d = 2 + t % 5;
    const auto a = unit(n, d, rng), b = unit(n, d, rng), c = unit(n, d, rng), e = unit(n, d, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto pa = permuted(a, perm), pb = permuted(b, perm), pc = permuted(c, perm),
               pe = permuted(e, perm);

    const double vi = infonce(a, b, 0.1).value, vf = feature_distance(a, b).value,
                 vs = similarity_distance(a, b, c, e).value, vk = kl_div(a, b, c, e, 0.1).value;
    EXPECT_GE(vi, 0.0);
    EXPECT_GE(vf, 0.0);
    EXPECT_GE(vs, 0.0);
    EXPECT_GE(vk, -1e-15);
    EXPECT_NEAR(infonce(pa, pb, 0.1).value, vi, 1e-12);
    EXPECT_NEAR(feature_distance(pa, pb).value, vf, 1e-12);
    EXPECT_NEAR(similarity_distance(pa, pb, pc, pe).value, vs, 1e-12);
    EXPECT_NEAR(kl_div(pa, pb, pc, pe, 0.1).value, vk, 1e-12);
  }
}

TEST(LossProperties, SimilarityDistanceSymmetricUnderPredTargetSwap) {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + t % 8;
    const auto a = unit(n, 5, rng), b = unit(n, 5, rng), c = unit(n, 7, rng), d = unit(n, 7, rng);
    EXPECT_NEAR(similarity_distance(a, b, c, d).value, similarity_distance(c, d, a, b).value,
                1e-14);
  }
}

TEST(LossProperties, KlAsymmetryWitnessed) {
  std::mt19937_64 rng(11);
  double largest_gap = 0.0;
  for (int t = 0; t < 20; ++t) {
    const auto a = unit(6, 4, rng), b = unit(6, 4, rng), c = unit(6, 4, rng), d = unit(6, 4, rng);
    largest_gap = std::max(largest_gap, std::abs(kl_div(a, b, c, d, 0.1).value -
                                                 kl_div(c, d, a, b, 0.1).value));
  }
  EXPECT_GT(largest_gap, 1e-6);
}

TEST(LossProperties, DetachmentOnlyRemovesGradients) {
  std::mt19937_64 rng(12);
  const auto a = unit(4, 5, rng), b = unit(4, 5, rng), c = unit(4, 5, rng), d = unit(4, 5, rng);
  const auto bd = b.as_detached(), cd = c.as_detached(), dd = d.as_detached();

  const LossValue i1 = infonce(a, b), i2 = infonce(a, bd);
  EXPECT_EQ(i1.value, i2.value);
  EXPECT_TRUE(i1.grads[1].has_value());
  EXPECT_FALSE(i2.grads[1].has_value());
  EXPECT_EQ(*i1.grads[0], *i2.grads[0]);

  const LossValue f = feature_distance(a.as_detached(), bd);
  EXPECT_FALSE(f.grads[0] || f.grads[1]);

  const LossValue s1 = similarity_distance(a, b, c, d), s2 = similarity_distance(a, b, cd, dd);
  EXPECT_EQ(s1.value, s2.value);
  EXPECT_TRUE(s1.grads[2] && s1.grads[3]);
  EXPECT_FALSE(s2.grads[2] || s2.grads[3]);

  const LossValue k1 = kl_div(a, b, c, d), k2 = kl_div(a, b, cd, dd);
  EXPECT_EQ(k1.value, k2.value);
  EXPECT_FALSE(k2.grads[2] || k2.grads[3]);
  EXPECT_EQ(*k1.grads[0], *k2.grads[0]);
}

TEST(LossProperties, GradientShapesMatchArguments) {
  std::mt19937_64 rng(13);
  const auto a = unit(3, 4, rng), b = unit(3, 4, rng), c = unit(3, 9, rng), d = unit(3, 9, rng);
  const LossValue s = similarity_distance(a, b, c, d);
  EXPECT_TRUE(s.grads[0]->same_shape(a.matrix()));
  EXPECT_TRUE(s.grads[3]->same_shape(d.matrix()));
}

// Seed-2 batch: the analytic InfoNCE gradient agrees with central differences
// taken through the upstream normalization.
TEST(InfoNCE, FiniteDifferenceSeed2) {
  std::mt19937_64 rng(2);
  const Matrix raw_a = oracle::gaussian(4, 6, rng), raw_b = oracle::gaussian(4, 6, rng);
  const EmbeddingBatch b = EmbeddingBatch::normalized(raw_b, true);
  const Matrix na = l2_normalize_rows(raw_a);
  const LossValue lv = infonce(EmbeddingBatch(na), b, 0.07);
  const Matrix analytic = l2_normalize_rows_backward(raw_a, na, *lv.grads[0]);
  const Matrix numeric = finite_diff_grad(
      [&](const Matrix& m) { return infonce(EmbeddingBatch::normalized(m), b, 0.07).value; },
      raw_a);
  EXPECT_LE(compare_gradients(analytic, numeric).max_rel_err, 1e-4);
}

class LossGradient : public ::testing::TestWithParam<gradcheck::LossUnderTest> {};

TEST_P(LossGradient, ThroughEncodersTwentyInstances) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = gradcheck::check_instance(GetParam(), 1000 + seed);
    EXPECT_LE(r.max_rel_err, 1e-4) << "seed " << seed << " worst at " << r.worst;
  }
}

TEST(KlDivGradient, ReverseDirectionThroughEncoders) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = gradcheck::check_instance(gradcheck::LossUnderTest::KL, 2000 + seed,
                                             KlDirection::Reverse);
    EXPECT_LE(r.max_rel_err, 1e-4) << "seed " << seed << " worst at " << r.worst;
  }
}

INSTANTIATE_TEST_SUITE_P(AllLosses, LossGradient,
                         ::testing::Values(gradcheck::LossUnderTest::InfoNCE,
                                           gradcheck::LossUnderTest::FD,
                                           gradcheck::LossUnderTest::SD,
                                           gradcheck::LossUnderTest::KL),
                         [](const auto& info) {
                           std::string n = gradcheck::name(info.param);
                           n.erase(std::remove(n.begin(), n.end(), '-'), n.end());
                           return n;
                         });
