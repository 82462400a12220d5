#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "test_util.hpp"
#include "sfot/error.hpp"
#include "sfot/numerics.hpp"

using namespace sfot;
using testutil::code_of;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

}  // namespace

TEST(MassDistribution, RejectsBadInput) {
  EXPECT_EQ(code_of([] { MassDistribution(std::vector<double>{}); }), ErrorCode::kDegenerateMarginal);
  EXPECT_EQ(code_of([] { MassDistribution({0.0, 0.0}); }), ErrorCode::kDegenerateMarginal);
  EXPECT_EQ(code_of([] { MassDistribution({0.5, 0.6}); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([] { MassDistribution({1.5, -0.5}); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([] { MassDistribution({NAN, 1.0}); }), ErrorCode::kInvalidArgument);
}

TEST(MassDistribution, UniformAndNormalized) {
  const auto u = MassDistribution::uniform(4);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(u[i], 0.25);
  const std::vector<double> w{1.0, 3.0};
  const auto n = MassDistribution::normalized(w);
  EXPECT_DOUBLE_EQ(n[0], 0.25);
  EXPECT_DOUBLE_EQ(n[1], 0.75);
}

TEST(CosineDistance, Examples) {
  EXPECT_NEAR(cosine_distance(vec({1, 0}), vec({1, 0})), 0.0, 1e-15);
  EXPECT_NEAR(cosine_distance(vec({1, 0}), vec({0, 1})), 1.0, 1e-15);
  EXPECT_NEAR(cosine_distance(vec({1, 0}), vec({-1, 0})), 2.0, 1e-15);
  EXPECT_EQ(code_of([] { cosine_distance(vec({0, 0}), vec({1, 0})); }), ErrorCode::kZeroNormVector);
  EXPECT_EQ(code_of([] { cosine_distance(vec({1, 0}), vec({1, 0, 0})); }), ErrorCode::kDimensionMismatch);
}

TEST(CosineDistance, PropertiesOnRandomVectors) {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    const Vector a = gaussian_sample(rng, 6);
    const Vector b = gaussian_sample(rng, 6);
    const double d = cosine_distance(a, b);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 2.0);
    EXPECT_NEAR(d, cosine_distance(b, a), 1e-14);
    EXPECT_NEAR(d, cosine_distance(3.7 * a, 0.2 * b), 1e-13);
    EXPECT_NEAR(d, oracle::cosine_distance(a, b), 1e-13);
    EXPECT_NEAR(cosine_distance(a, a), 0.0, 1e-14);
  }
}

TEST(CostMatrix, MatchesPairwiseCosine) {
  Rng rng(2);
  Matrix x(5, 4), e(3, 4);
  for (Eigen::Index i = 0; i < 5; ++i) x.row(i) = gaussian_sample(rng, 4).transpose();
  for (Eigen::Index i = 0; i < 3; ++i) e.row(i) = gaussian_sample(rng, 4).transpose();
  const Matrix c = cost_matrix(x, e);
  for (Eigen::Index i = 0; i < 5; ++i) {
    for (Eigen::Index j = 0; j < 3; ++j) {
      EXPECT_NEAR(c(i, j), oracle::cosine_distance(x.row(i).transpose(), e.row(j).transpose()), 1e-13);
    }
  }
  Matrix bad = x;
  bad.row(2).setZero();
  try {
    cost_matrix(bad, e);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::kZeroNormVector);
    EXPECT_EQ(err.index(), 2u);
  }
}

TEST(Softmax, Examples) {
  const auto half = softmax(vec({0, 0}));
  EXPECT_DOUBLE_EQ(half[0], 0.5);
  const auto big = softmax(vec({1000, 0}));
  EXPECT_NEAR(big[0], 1.0, 1e-12);
  EXPECT_TRUE(std::isfinite(big[1]));
  const auto p = softmax(vec({1, 2, 3}));
  // exp(k) / (e + e^2 + e^3) evaluated independently.
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(p[0], 0.09003, 1e-5);
  EXPECT_NEAR(p[1], 0.24473, 1e-5);
  EXPECT_NEAR(p[2], 0.66524, 1e-5);
  EXPECT_NEAR(p[2], std::exp(3.0) / z, 1e-15);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    const Vector l = 5.0 * gaussian_sample(rng, 5);
    const auto a = softmax(l);
    const auto b = softmax((l.array() + 17.0).matrix());
    double s = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      s += a[i];
      EXPECT_NEAR(a[i], b[i], 1e-14);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy(MassDistribution::uniform(4), 2), std::log(4.0), 1e-11);
  EXPECT_NEAR(cross_entropy(MassDistribution({1.0, 0.0, 0.0}), 0), 0.0, 1e-11);
  EXPECT_NEAR(cross_entropy(MassDistribution({0.7, 0.3}), 1), 1.20397, 1e-5);
  EXPECT_EQ(code_of([] { cross_entropy(MassDistribution({0.7, 0.3}), 2); }), ErrorCode::kLabelOutOfRange);
  EXPECT_GE(cross_entropy(MassDistribution({1.0, 0.0}), 0), 0.0);
}

TEST(GaussianSample, DeterministicAndMoments) {
  Rng a(9), b(9);
  EXPECT_EQ(gaussian_sample(a, 8), gaussian_sample(b, 8));
  Rng r(123);
  const Vector s = gaussian_sample(r, 100000);
  const double mean = s.mean();
  const double var = (s.array() - mean).square().sum() / (s.size() - 1);
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(var, 1.0, 0.05);
  EXPECT_EQ(code_of([&] { gaussian_sample(r, 0); }), ErrorCode::kInvalidArgument);
}

TEST(RequireFinite, Throws) {
  EXPECT_NO_THROW(require_finite(vec({1, 2}), "v"));
  EXPECT_THROW(require_finite(vec({1, INFINITY}), "v"), Error);
}
