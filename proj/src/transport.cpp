#include "sfot/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <vector>

#include "sfot/error.hpp"

namespace sfot {

void SinkhornConfig::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw Error(ErrorCode::kInvalidArgument, "sinkhorn: epsilon must be > 0");
  }
  if (max_iterations < 1) {
    throw Error(ErrorCode::kInvalidArgument, "sinkhorn: max_iterations must be >= 1");
  }
  if (!(marginal_tol > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "sinkhorn: marginal_tol must be > 0");
  }
}

namespace {

std::vector<Eigen::Index> support_of(const MassDistribution& m) {
  std::vector<Eigen::Index> idx;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] > 0.0) idx.push_back(static_cast<Eigen::Index>(i));
  }
  return idx;
}

struct ScaledSolve {
  Matrix plan;
  int iterations = 0;
};

// Log-domain updates on dual potentials f (rows) and g (columns). The row
// log-sum-exp computed for the f update doubles as the row-marginal check, so
// each iteration is two passes over the cost.
ScaledSolve solve_log_domain(const Matrix& cost, const Vector& r, const Vector& c,
                             const SinkhornConfig& cfg) {
  const Eigen::Index n = cost.rows();
  const Eigen::Index k = cost.cols();
  const double eps = cfg.epsilon;
  Vector f = Vector::Zero(n);
  Vector g = Vector::Zero(k);
  const Vector log_r = r.array().log();
  const Vector log_c = c.array().log();
  Vector row_lse(n);
  Vector col_max(k);
  Vector col_acc(k);

  int iter = 0;
  for (; iter < cfg.max_iterations; ++iter) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto row = cost.row(i);
      double m = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < k; ++j) m = std::max(m, (g[j] - row[j]) / eps);
      double s = 0.0;
      for (Eigen::Index j = 0; j < k; ++j) s += std::exp((g[j] - row[j]) / eps - m);
      row_lse[i] = m + std::log(s);
    }
    if (iter > 0) {
      double residual = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        residual = std::max(residual, std::abs(std::exp(f[i] / eps + row_lse[i]) - r[i]));
      }
      if (residual <= cfg.marginal_tol) break;
    }
    f = eps * (log_r - row_lse);

    col_max.setConstant(-std::numeric_limits<double>::infinity());
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto row = cost.row(i);
      for (Eigen::Index j = 0; j < k; ++j) col_max[j] = std::max(col_max[j], (f[i] - row[j]) / eps);
    }
    col_acc.setZero();
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto row = cost.row(i);
      for (Eigen::Index j = 0; j < k; ++j) col_acc[j] += std::exp((f[i] - row[j]) / eps - col_max[j]);
    }
    for (Eigen::Index j = 0; j < k; ++j) {
      g[j] = eps * (log_c[j] - col_max[j] - std::log(col_acc[j]));
    }
  }

  Matrix plan(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) plan(i, j) = std::exp((f[i] + g[j] - cost(i, j)) / eps);
  }
  return {std::move(plan), iter};
}

// Classic u/v scaling; returns nullopt-like empty plan on underflow so the
// caller can retry in the log domain.
bool solve_scaling(const Matrix& cost, const Vector& r, const Vector& c,
                   const SinkhornConfig& cfg, ScaledSolve& out) {
  const Matrix kernel = (-cost.array() / cfg.epsilon).exp().matrix();
  Vector u = Vector::Ones(cost.rows());
  Vector v = Vector::Ones(cost.cols());
  int iter = 0;
  for (; iter < cfg.max_iterations; ++iter) {
    const Vector kv = kernel * v;
    if (iter > 0) {
      const double residual = (u.cwiseProduct(kv) - r).cwiseAbs().maxCoeff();
      if (residual <= cfg.marginal_tol) break;
    }
    u = r.cwiseQuotient(kv);
    const Vector ktu = kernel.transpose() * u;
    v = c.cwiseQuotient(ktu);
    if (!u.allFinite() || !v.allFinite()) return false;
  }
  out.plan = u.asDiagonal() * kernel * v.asDiagonal();
  out.iterations = iter;
  return out.plan.allFinite();
}

}  // namespace

TransportPlan sinkhorn(const Matrix& cost, const MassDistribution& r,
                       const MassDistribution& c, const SinkhornConfig& cfg) {
  cfg.validate();
  if (static_cast<std::size_t>(cost.rows()) != r.size() ||
      static_cast<std::size_t>(cost.cols()) != c.size()) {
    throw Error(ErrorCode::kShapeMismatch, "sinkhorn: cost shape does not match marginals");
  }
  for (Eigen::Index i = 0; i < cost.rows(); ++i) {
    for (Eigen::Index j = 0; j < cost.cols(); ++j) {
      if (!std::isfinite(cost(i, j))) {
        throw Error(ErrorCode::kNonFiniteCost, "sinkhorn: non-finite cost entry",
                    static_cast<std::uint64_t>(i * cost.cols() + j));
      }
      if (cost(i, j) < 0.0) {
        throw Error(ErrorCode::kInvalidArgument, "sinkhorn: negative cost entry",
                    static_cast<std::uint64_t>(i * cost.cols() + j));
      }
    }
  }

  const auto rows = support_of(r);
  const auto cols = support_of(c);
  Matrix sub_cost(rows.size(), cols.size());
  Vector sub_r(rows.size());
  Vector sub_c(cols.size());
  for (std::size_t a = 0; a < rows.size(); ++a) {
    sub_r[a] = r[rows[a]];
    for (std::size_t b = 0; b < cols.size(); ++b) sub_cost(a, b) = cost(rows[a], cols[b]);
  }
  for (std::size_t b = 0; b < cols.size(); ++b) sub_c[b] = c[cols[b]];

  ScaledSolve solved;
  if (cfg.log_domain || !solve_scaling(sub_cost, sub_r, sub_c, cfg, solved)) {
    solved = solve_log_domain(sub_cost, sub_r, sub_c, cfg);
  }

  TransportPlan plan;
  plan.entries = Matrix::Zero(cost.rows(), cost.cols());
  for (std::size_t a = 0; a < rows.size(); ++a) {
    for (std::size_t b = 0; b < cols.size(); ++b) plan.entries(rows[a], cols[b]) = solved.plan(a, b);
  }
  plan.row_marginal = r;
  plan.col_marginal = c;
  plan.iterations_used = solved.iterations;

  const Vector row_sums = plan.entries.rowwise().sum();
  const Vector col_sums = plan.entries.colwise().sum().transpose();
  double row_res = 0.0;
  double col_res = 0.0;
  for (Eigen::Index i = 0; i < row_sums.size(); ++i) row_res = std::max(row_res, std::abs(row_sums[i] - r[i]));
  for (Eigen::Index j = 0; j < col_sums.size(); ++j) col_res = std::max(col_res, std::abs(col_sums[j] - c[j]));
  plan.row_residual = row_res;
  plan.col_residual = col_res;
  plan.converged = plan.entries.allFinite() && row_res <= cfg.marginal_tol && col_res <= cfg.marginal_tol;
  return plan;
}

double ot_loss(const TransportPlan& plan, const Matrix& cost) {
  if (plan.entries.rows() != cost.rows() || plan.entries.cols() != cost.cols()) {
    throw Error(ErrorCode::kShapeMismatch, "ot_loss: plan and cost shapes differ");
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < cost.rows(); ++i) {
    for (Eigen::Index j = 0; j < cost.cols(); ++j) total += plan.entries(i, j) * cost(i, j);
  }
  return total;
}

Matrix ot_loss_grad_centroids(const Matrix& real_feats, const Matrix& centroids,
                              const TransportPlan& plan) {
  if (real_feats.cols() != centroids.cols()) {
    throw Error(ErrorCode::kDimensionMismatch, "ot_loss_grad_centroids: dimension mismatch");
  }
  if (plan.entries.rows() != real_feats.rows() || plan.entries.cols() != centroids.rows()) {
    throw Error(ErrorCode::kShapeMismatch, "ot_loss_grad_centroids: plan shape mismatch");
  }
  const Vector real_norms = real_feats.rowwise().norm();
  const Vector centroid_norms = centroids.rowwise().norm();
  for (Eigen::Index n = 0; n < real_norms.size(); ++n) {
    if (real_norms[n] == 0.0) {
      throw Error(ErrorCode::kZeroNormVector, "ot_loss_grad_centroids: zero-norm real feature",
                  static_cast<std::uint64_t>(n));
    }
  }
  for (Eigen::Index k = 0; k < centroid_norms.size(); ++k) {
    if (centroid_norms[k] == 0.0) {
      throw Error(ErrorCode::kZeroNormVector, "ot_loss_grad_centroids: zero-norm centroid",
                  static_cast<std::uint64_t>(k));
    }
  }
  // weighted[k] = sum_n P_nk * x_n / |x_n|
  const Matrix unit_real = real_feats.array().colwise() / real_norms.array();
  const Matrix weighted = plan.entries.transpose() * unit_real;
  Matrix grad(centroids.rows(), centroids.cols());
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    const double ne = centroid_norms[k];
    const double proj = weighted.row(k).dot(centroids.row(k));
    grad.row(k) = -weighted.row(k) / ne + centroids.row(k) * (proj / (ne * ne * ne));
  }
  return grad;
}

namespace {

// Nodes 0..n-1 are rows, n..n+k-1 are columns; basic cells are tree edges.
class TransportTree {
 public:
  TransportTree(Eigen::Index n, Eigen::Index k) : n_(n), k_(k), basic_(n * k, false) {}

  bool is_basic(Eigen::Index i, Eigen::Index j) const { return basic_[i * k_ + j]; }
  void set_basic(Eigen::Index i, Eigen::Index j, bool on) { basic_[i * k_ + j] = on; }

  // Node path from row i to column j through basic cells, as node ids.
  std::vector<Eigen::Index> path(Eigen::Index i, Eigen::Index j) const {
    const Eigen::Index total = n_ + k_;
    std::vector<Eigen::Index> parent(total, -1);
    std::vector<bool> seen(total, false);
    std::queue<Eigen::Index> frontier;
    frontier.push(i);
    seen[i] = true;
    while (!frontier.empty()) {
      const Eigen::Index node = frontier.front();
      frontier.pop();
      if (node == n_ + j) break;
      for (Eigen::Index other : neighbours(node)) {
        if (!seen[other]) {
          seen[other] = true;
          parent[other] = node;
          frontier.push(other);
        }
      }
    }
    std::vector<Eigen::Index> nodes;
    for (Eigen::Index node = n_ + j; node != -1; node = parent[node]) nodes.push_back(node);
    std::reverse(nodes.begin(), nodes.end());
    return nodes;
  }

  // Dual potentials with u_0 = 0 and u_i + v_j = cost_ij on basic cells.
  void potentials(const Matrix& cost, Vector& u, Vector& v) const {
    const Eigen::Index total = n_ + k_;
    std::vector<double> pot(total, 0.0);
    std::vector<bool> seen(total, false);
    std::queue<Eigen::Index> frontier;
    frontier.push(0);
    seen[0] = true;
    while (!frontier.empty()) {
      const Eigen::Index node = frontier.front();
      frontier.pop();
      for (Eigen::Index other : neighbours(node)) {
        if (seen[other]) continue;
        seen[other] = true;
        const auto [i, j] = node < n_ ? std::pair{node, other - n_} : std::pair{other, node - n_};
        pot[other] = cost(i, j) - pot[node];
        frontier.push(other);
      }
    }
    u = Eigen::Map<const Vector>(pot.data(), n_);
    v = Eigen::Map<const Vector>(pot.data() + n_, k_);
  }

 private:
  std::vector<Eigen::Index> neighbours(Eigen::Index node) const {
    std::vector<Eigen::Index> out;
    if (node < n_) {
      for (Eigen::Index j = 0; j < k_; ++j) {
        if (is_basic(node, j)) out.push_back(n_ + j);
      }
    } else {
      const Eigen::Index j = node - n_;
      for (Eigen::Index i = 0; i < n_; ++i) {
        if (is_basic(i, j)) out.push_back(i);
      }
    }
    return out;
  }

  Eigen::Index n_;
  Eigen::Index k_;
  std::vector<bool> basic_;
};

}  // namespace

ExactTransport exact_ot_small(const Matrix& cost, const MassDistribution& r,
                              const MassDistribution& c) {
  const Eigen::Index n = cost.rows();
  const Eigen::Index k = cost.cols();
  if (static_cast<std::size_t>(n) != r.size() || static_cast<std::size_t>(k) != c.size()) {
    throw Error(ErrorCode::kShapeMismatch, "exact_ot_small: cost shape does not match marginals");
  }
  if (n * k > 64) {
    throw Error(ErrorCode::kInstanceTooLarge, "exact_ot_small: N*K must be <= 64");
  }
  if (n == 0 || k == 0) {
    throw Error(ErrorCode::kDegenerateMarginal, "exact_ot_small: empty marginal");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      if (!std::isfinite(cost(i, j))) {
        throw Error(ErrorCode::kNonFiniteCost, "exact_ot_small: non-finite cost");
      }
    }
  }

  std::vector<double> supply(r.weights().begin(), r.weights().end());
  std::vector<double> demand(c.weights().begin(), c.weights().end());
  Matrix flow = Matrix::Zero(n, k);
  TransportTree tree(n, k);

  // Northwest corner: a staircase of exactly n + k - 1 basic cells.
  for (Eigen::Index i = 0, j = 0;;) {
    const double q = std::min(supply[i], demand[j]);
    flow(i, j) = q;
    tree.set_basic(i, j, true);
    supply[i] -= q;
    demand[j] -= q;
    if (i == n - 1 && j == k - 1) break;
    if (j == k - 1 || (i < n - 1 && supply[i] <= demand[j])) {
      ++i;
    } else {
      ++j;
    }
  }

  constexpr double kReducedCostTol = 1e-12;
  constexpr int kMaxPivots = 10000;
  int pivots = 0;
  Vector u, v;
  for (;; ++pivots) {
    if (pivots >= kMaxPivots) {
      throw Error(ErrorCode::kNumericFailure, "exact_ot_small: pivot limit reached");
    }
    tree.potentials(cost, u, v);
    // Bland's rule: first improving cell in index order.
    Eigen::Index enter_i = -1, enter_j = -1;
    for (Eigen::Index i = 0; i < n && enter_i < 0; ++i) {
      for (Eigen::Index j = 0; j < k; ++j) {
        if (!tree.is_basic(i, j) && cost(i, j) - u[i] - v[j] < -kReducedCostTol) {
          enter_i = i;
          enter_j = j;
          break;
        }
      }
    }
    if (enter_i < 0) break;

    const auto nodes = tree.path(enter_i, enter_j);
    const std::size_t edges = nodes.size() - 1;
    double theta = std::numeric_limits<double>::infinity();
    Eigen::Index leave_i = -1, leave_j = -1;
    for (std::size_t t = 0; t < edges; ++t) {
      if ((edges - 1 - t) % 2 != 0) continue;  // only donor cells
      const Eigen::Index a = nodes[t], b = nodes[t + 1];
      const Eigen::Index i = a < n ? a : b;
      const Eigen::Index j = (a < n ? b : a) - n;
      const double x = flow(i, j);
      if (x < theta || (x == theta && i * k + j < leave_i * k + leave_j)) {
        theta = x;
        leave_i = i;
        leave_j = j;
      }
    }
    for (std::size_t t = 0; t < edges; ++t) {
      const Eigen::Index a = nodes[t], b = nodes[t + 1];
      const Eigen::Index i = a < n ? a : b;
      const Eigen::Index j = (a < n ? b : a) - n;
      if ((edges - 1 - t) % 2 == 0) {
        flow(i, j) -= theta;
      } else {
        flow(i, j) += theta;
      }
    }
    flow(enter_i, enter_j) += theta;
    tree.set_basic(leave_i, leave_j, false);
    flow(leave_i, leave_j) = 0.0;
    tree.set_basic(enter_i, enter_j, true);
  }

  flow = flow.cwiseMax(0.0);
  ExactTransport out;
  out.value = (flow.array() * cost.array()).sum();
  out.plan = std::move(flow);
  out.pivots = pivots;
  return out;
}

}  // namespace sfot
