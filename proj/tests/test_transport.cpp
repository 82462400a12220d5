#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "test_util.hpp"
#include "sfot/transport.hpp"

using namespace sfot;
using testutil::code_of;

namespace {

Matrix mat(Eigen::Index rows, Eigen::Index cols, std::initializer_list<double> v) {
  Matrix m(rows, cols);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

SinkhornConfig eps(double e, int iters = 20000) {
  SinkhornConfig cfg;
  cfg.epsilon = e;
  cfg.max_iterations = iters;
  return cfg;
}

Matrix uniform_cost(Rng& rng, Eigen::Index n, Eigen::Index k) {
  Matrix c(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) c(i, j) = 2.0 * rng.uniform();
  }
  return c;
}

void expect_marginals(const TransportPlan& p, double tol) {
  for (Eigen::Index i = 0; i < p.entries.rows(); ++i) {
    EXPECT_NEAR(p.entries.row(i).sum(), p.row_marginal[static_cast<std::size_t>(i)], tol);
  }
  for (Eigen::Index j = 0; j < p.entries.cols(); ++j) {
    EXPECT_NEAR(p.entries.col(j).sum(), p.col_marginal[static_cast<std::size_t>(j)], tol);
  }
  EXPECT_GE(p.entries.minCoeff(), 0.0);
}

}  // namespace

TEST(SinkhornConfig, Validation) {
  EXPECT_EQ(code_of([] { eps(0.0).validate(); }), ErrorCode::kInvalidArgument);
  SinkhornConfig c;
  c.max_iterations = 0;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::kInvalidArgument);
  c = {};
  c.marginal_tol = 0;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::kInvalidArgument);
}

TEST(Sinkhorn, ForcedOneByOne) {
  const auto p = sinkhorn(mat(1, 1, {0.3}), MassDistribution::uniform(1), MassDistribution::uniform(1), eps(0.7));
  EXPECT_TRUE(p.converged);
  EXPECT_NEAR(p.entries(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(ot_loss(p, mat(1, 1, {0.3})), 0.3, 1e-12);
}

TEST(Sinkhorn, ZeroCostGivesOuterProduct) {
  for (bool log_domain : {true, false}) {
    SinkhornConfig cfg = eps(0.05);
    cfg.log_domain = log_domain;
    const auto p = sinkhorn(Matrix::Zero(2, 2), MassDistribution({0.5, 0.5}), MassDistribution({0.25, 0.75}), cfg);
    EXPECT_NEAR(p.entries(0, 0), 0.125, 1e-9);
    EXPECT_NEAR(p.entries(0, 1), 0.375, 1e-9);
    EXPECT_NEAR(p.entries(1, 0), 0.125, 1e-9);
    EXPECT_NEAR(p.entries(1, 1), 0.375, 1e-9);
    EXPECT_NEAR(ot_loss(p, Matrix::Zero(2, 2)), 0.0, 1e-15);
  }
}

TEST(Sinkhorn, SmallEpsilonApproachesDiagonal) {
  const auto p = sinkhorn(mat(2, 2, {0, 1, 1, 0}), MassDistribution::uniform(2), MassDistribution::uniform(2), eps(0.01));
  EXPECT_TRUE(p.converged);
  EXPECT_NEAR(p.entries(0, 0), 0.5, 1e-3);
  EXPECT_LT(p.entries(0, 1) + p.entries(1, 0), 1e-3);
}

TEST(Sinkhorn, Errors) {
  const auto r = MassDistribution::uniform(2);
  EXPECT_EQ(code_of([&] { sinkhorn(mat(2, 2, {0, NAN, 1, 0}), r, r, eps(0.1)); }), ErrorCode::kNonFiniteCost);
  EXPECT_EQ(code_of([&] { sinkhorn(Matrix::Zero(2, 3), r, r, eps(0.1)); }), ErrorCode::kShapeMismatch);
  EXPECT_EQ(code_of([&] { sinkhorn(mat(2, 2, {0, -1, 1, 0}), r, r, eps(0.1)); }), ErrorCode::kInvalidArgument);
}

TEST(Sinkhorn, ZeroMassColumnRestoredAsZero) {
  Rng rng(3);
  const Matrix c = uniform_cost(rng, 3, 3);
  const auto p = sinkhorn(c, MassDistribution::uniform(3), MassDistribution({0.5, 0.0, 0.5}), eps(0.05));
  EXPECT_TRUE(p.converged);
  EXPECT_EQ(p.entries.col(1).cwiseAbs().maxCoeff(), 0.0);
  expect_marginals(p, 1e-6);
}

TEST(Sinkhorn, AgreesWithPlainReferenceAtModerateEpsilon) {
  Rng rng(21);
  for (int t = 0; t < 20; ++t) {
    const Matrix c = uniform_cost(rng, 4, 3);
    const auto r = testutil::rational_marginal(rng, 4);
    const auto col = testutil::rational_marginal(rng, 3);
    for (bool log_domain : {true, false}) {
      SinkhornConfig cfg = eps(0.2);
      cfg.log_domain = log_domain;
      cfg.marginal_tol = 1e-12;
      const auto p = sinkhorn(c, MassDistribution(r), MassDistribution(col), cfg);
      const Matrix ref = oracle::plain_sinkhorn(c, r, col, 0.2, 5000);
      EXPECT_LT((p.entries - ref).cwiseAbs().maxCoeff(), 1e-9);
    }
  }
}

TEST(Sinkhorn, MarginalsHoldWhenConverged) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const Matrix c = uniform_cost(rng, 6, 5);
    const auto p = sinkhorn(c, MassDistribution(testutil::rational_marginal(rng, 6)),
                            MassDistribution(testutil::rational_marginal(rng, 5)), eps(0.05, 200000));
    ASSERT_TRUE(p.converged);
    expect_marginals(p, 1e-6);
    EXPECT_LE(std::max(p.row_residual, p.col_residual), 1e-6);
  }
}

TEST(Sinkhorn, UnconvergedReturnsCurrentPlan) {
  Rng rng(8);
  const Matrix c = uniform_cost(rng, 5, 4);
  const auto p = sinkhorn(c, MassDistribution::uniform(5), MassDistribution(testutil::rational_marginal(rng, 4)),
                          eps(0.001, 1));
  EXPECT_FALSE(p.converged);
  EXPECT_EQ(p.iterations_used, 1);
  EXPECT_TRUE(p.entries.allFinite());
}

TEST(Sinkhorn, ConstantShiftLeavesPlanUnchanged) {
  Rng rng(12);
  for (int t = 0; t < 20; ++t) {
    const Matrix c = uniform_cost(rng, 5, 4);
    const auto r = MassDistribution(testutil::rational_marginal(rng, 5));
    const auto col = MassDistribution(testutil::rational_marginal(rng, 4));
    SinkhornConfig cfg = eps(0.05);
    cfg.marginal_tol = 1e-12;
    const auto a = sinkhorn(c, r, col, cfg);
    const auto b = sinkhorn((c.array() + 0.37).matrix(), r, col, cfg);
    EXPECT_LT((a.entries - b.entries).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_NEAR(ot_loss(b, (c.array() + 0.37).matrix()), ot_loss(a, c) + 0.37, 1e-8);
  }
}

TEST(Sinkhorn, RowPermutationEquivariance) {
  Rng rng(13);
  const Matrix c = uniform_cost(rng, 5, 4);
  const auto rv = testutil::rational_marginal(rng, 5);
  const auto col = MassDistribution(testutil::rational_marginal(rng, 4));
  const std::vector<int> perm{3, 0, 4, 1, 2};
  Matrix pc(5, 4);
  std::vector<double> pr(5);
  for (int i = 0; i < 5; ++i) {
    pc.row(i) = c.row(perm[i]);
    pr[i] = rv[perm[i]];
  }
  SinkhornConfig cfg = eps(0.05);
  cfg.marginal_tol = 1e-12;
  const auto a = sinkhorn(c, MassDistribution(rv), col, cfg);
  const auto b = sinkhorn(pc, MassDistribution(pr), col, cfg);
  for (int i = 0; i < 5; ++i) EXPECT_LT((b.entries.row(i) - a.entries.row(perm[i])).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Sinkhorn, EpsilonLadderConvergesToExact) {
  Rng rng(99);
  for (int t = 0; t < 10; ++t) {
    const Matrix c = uniform_cost(rng, 5, 4);
    const auto r = testutil::rational_marginal(rng, 5);
    const auto col = testutil::rational_marginal(rng, 4);
    const double exact = oracle::exact_ot_vertex_enum(c, r, col);
    double gap = 0.0;
    for (double e : {0.5, 0.1, 0.02, 0.004}) {
      const auto p = sinkhorn(c, MassDistribution(r), MassDistribution(col), eps(e, 200000));
      const double v = ot_loss(p, c);
      EXPECT_GE(v, exact - 1e-5);
      gap = v - exact;
    }
    EXPECT_LE(gap, 0.02 * (c.maxCoeff() - c.minCoeff()));
  }
}

TEST(OtLoss, MatchesDoubleLoop) {
  Rng rng(1);
  const Matrix c = uniform_cost(rng, 3, 3);
  auto p = sinkhorn(c, MassDistribution::uniform(3), MassDistribution::uniform(3), eps(0.3));
  double ref = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) ref += p.entries(i, j) * c(i, j);
  }
  EXPECT_NEAR(ot_loss(p, c), ref, 1e-15);
  EXPECT_EQ(ot_loss(p, Matrix::Zero(3, 3)), 0.0);
  EXPECT_EQ(code_of([&] { ot_loss(p, Matrix::Zero(2, 3)); }), ErrorCode::kShapeMismatch);
}

TEST(OtGrad, HandExample) {
  TransportPlan p;
  p.entries = mat(1, 1, {1.0});
  p.row_marginal = MassDistribution::uniform(1);
  p.col_marginal = MassDistribution::uniform(1);
  p.converged = true;
  const Matrix g = ot_loss_grad_centroids(mat(1, 2, {1, 0}), mat(1, 2, {0, 1}), p);
  EXPECT_NEAR(g(0, 0), -1.0, 1e-15);
  EXPECT_NEAR(g(0, 1), 0.0, 1e-15);
  // Parallel pair sits at the minimum of the cosine distance.
  const Matrix g0 = ot_loss_grad_centroids(mat(1, 2, {1, 2}), mat(1, 2, {2, 4}), p);
  EXPECT_LT(g0.cwiseAbs().maxCoeff(), 1e-15);
  Matrix zero = mat(1, 2, {0, 0});
  EXPECT_EQ(code_of([&] { ot_loss_grad_centroids(mat(1, 2, {1, 0}), zero, p); }), ErrorCode::kZeroNormVector);
}

TEST(OtGrad, MatchesFiniteDifferences) {
  Rng rng(77);
  for (int t = 0; t < 20; ++t) {
    const Matrix x = testutil::gaussian_matrix(rng, 4, 5);
    Matrix e = testutil::gaussian_matrix(rng, 3, 5);
    const auto p = sinkhorn(cost_matrix(x, e), MassDistribution::uniform(4), MassDistribution::uniform(3), eps(0.1));
    const Matrix g = ot_loss_grad_centroids(x, e, p);
    const auto fd = oracle::central_diff([&] {
      double v = 0.0;
      for (Eigen::Index i = 0; i < 4; ++i) {
        for (Eigen::Index k = 0; k < 3; ++k) v += p.entries(i, k) * oracle::cosine_distance(x.row(i).transpose(), e.row(k).transpose());
      }
      return v;
    }, e.data(), static_cast<std::size_t>(e.size()));
    EXPECT_LT(oracle::relative_error(oracle::flatten(g), fd), 1e-4);
  }
}

TEST(ExactOt, Examples) {
  const auto d = exact_ot_small(mat(2, 2, {0, 1, 1, 0}), MassDistribution::uniform(2), MassDistribution::uniform(2));
  EXPECT_NEAR(d.value, 0.0, 1e-15);
  EXPECT_NEAR(d.plan(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(d.plan(1, 1), 0.5, 1e-15);

  const Matrix c = mat(1, 3, {0.2, 0.9, 0.4});
  const auto one = exact_ot_small(c, MassDistribution::uniform(1), MassDistribution({0.2, 0.3, 0.5}));
  EXPECT_NEAR(one.value, 0.2 * 0.2 + 0.3 * 0.9 + 0.5 * 0.4, 1e-15);
  EXPECT_NEAR(one.plan(0, 1), 0.3, 1e-15);

  EXPECT_EQ(code_of([] { exact_ot_small(Matrix::Zero(9, 8), MassDistribution::uniform(9), MassDistribution::uniform(8)); }),
            ErrorCode::kInstanceTooLarge);
}

TEST(ExactOt, MatchesVertexEnumeration) {
  Rng rng(2718);
  for (int t = 0; t < 30; ++t) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.uniform_index(3));
    const Eigen::Index k = 2 + static_cast<Eigen::Index>(rng.uniform_index(3));
    const Matrix c = uniform_cost(rng, n, k);
    const auto r = testutil::rational_marginal(rng, static_cast<std::size_t>(n));
    const auto col = testutil::rational_marginal(rng, static_cast<std::size_t>(k));
    const auto got = exact_ot_small(c, MassDistribution(r), MassDistribution(col));
    EXPECT_NEAR(got.value, oracle::exact_ot_vertex_enum(c, r, col), 1e-12);
    for (Eigen::Index i = 0; i < n; ++i) EXPECT_NEAR(got.plan.row(i).sum(), r[i], 1e-12);
    for (Eigen::Index j = 0; j < k; ++j) EXPECT_NEAR(got.plan.col(j).sum(), col[j], 1e-12);
    EXPECT_GE(got.plan.minCoeff(), 0.0);
  }
}

TEST(ExactOt, BoundsEntropicCost) {
  Rng rng(31);
  for (int t = 0; t < 30; ++t) {
    const Matrix c = uniform_cost(rng, 4, 4);
    const auto r = MassDistribution(testutil::rational_marginal(rng, 4));
    const auto col = MassDistribution(testutil::rational_marginal(rng, 4));
    const auto exact = exact_ot_small(c, r, col);
    // Slack covers the 1e-6 marginal tolerance of the entropic plan.
    for (double e : {0.5, 0.05}) EXPECT_LE(exact.value, ot_loss(sinkhorn(c, r, col, eps(e)), c) + 1e-5);
  }
}

TEST(ExactOt, DegenerateMarginals) {
  // Equal partial sums force degenerate pivots.
  const Matrix c = mat(3, 3, {1, 2, 3, 2, 1, 2, 3, 2, 1});
  const std::vector<double> r{0.25, 0.5, 0.25}, col{0.25, 0.5, 0.25};
  const auto got = exact_ot_small(c, MassDistribution(r), MassDistribution(col));
  EXPECT_NEAR(got.value, oracle::exact_ot_vertex_enum(c, r, col), 1e-12);
  EXPECT_NEAR(got.value, 1.0, 1e-12);
}
