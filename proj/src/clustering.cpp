#include "sfot/clustering.hpp"

#include <limits>

#include "sfot/error.hpp"

namespace sfot {
namespace {

inline double squared_distance(const Matrix& a, Eigen::Index i, const Matrix& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

// Nearest centroid for every point. Distances come from one GEMM
// (|c|^2 - 2 x.c, the |x|^2 term is constant per row); ties go to the lowest
// index.
std::vector<std::size_t> nearest_all(const Matrix& points, const Matrix& centroids) {
  const Vector c_norms = centroids.rowwise().squaredNorm();
  Matrix scores = points * centroids.transpose() * -2.0;
  scores.rowwise() += c_norms.transpose();
  std::vector<std::size_t> best(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index p = 0; p < points.rows(); ++p) {
    Eigen::Index arg = 0;
    scores.row(p).minCoeff(&arg);
    best[static_cast<std::size_t>(p)] = static_cast<std::size_t>(arg);
  }
  return best;
}

void recompute_means(const Matrix& points, const std::vector<std::size_t>& assignment,
                     std::vector<std::size_t>& counts, Matrix& centroids) {
  Matrix sums = Matrix::Zero(centroids.rows(), centroids.cols());
  std::fill(counts.begin(), counts.end(), 0);
  for (Eigen::Index p = 0; p < points.rows(); ++p) {
    sums.row(assignment[p]) += points.row(p);
    ++counts[assignment[p]];
  }
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    if (counts[k] > 0) centroids.row(k) = sums.row(k) / static_cast<double>(counts[k]);
  }
}

double total_inertia(const Matrix& points, const std::vector<std::size_t>& assignment,
                     const Matrix& centroids) {
  double total = 0.0;
  for (Eigen::Index p = 0; p < points.rows(); ++p) {
    total += squared_distance(points, p, centroids, static_cast<Eigen::Index>(assignment[p]));
  }
  return total;
}

// Moves the point farthest from its own centroid into each empty cluster.
// Donor clusters must keep at least one member.
void reseed_empty(const Matrix& points, std::vector<std::size_t>& assignment,
                  std::vector<std::size_t>& counts, Matrix& centroids) {
  bool moved = false;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] != 0) continue;
    Eigen::Index far = -1;
    double far_d = -1.0;
    for (Eigen::Index p = 0; p < points.rows(); ++p) {
      if (counts[assignment[p]] < 2) continue;
      const double d = squared_distance(points, p, centroids, static_cast<Eigen::Index>(assignment[p]));
      if (d > far_d) {
        far_d = d;
        far = p;
      }
    }
    if (far < 0) break;  // fewer points than clusters
    --counts[assignment[far]];
    assignment[far] = k;
    counts[k] = 1;
    centroids.row(static_cast<Eigen::Index>(k)) = points.row(far);
    moved = true;
  }
  if (moved) recompute_means(points, assignment, counts, centroids);
}

}  // namespace

Matrix kmeans_pp_init(const Matrix& points, std::size_t k, Rng& rng) {
  if (points.rows() == 0) throw Error(ErrorCode::kEmptyInput, "kmeans_pp_init: no points");
  if (k == 0) throw Error(ErrorCode::kInvalidArgument, "kmeans_pp_init: k must be >= 1");
  const Eigen::Index m = points.rows();
  Matrix centroids(static_cast<Eigen::Index>(k), points.cols());

  Eigen::Index chosen = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(m)));
  centroids.row(0) = points.row(chosen);
  Vector d2(m);
  d2 = (points.rowwise() - centroids.row(0)).rowwise().squaredNorm();

  for (Eigen::Index c = 1; c < static_cast<Eigen::Index>(k); ++c) {
    const double total = d2.sum();
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double cumulative = 0.0;
      chosen = -1;
      Eigen::Index last_positive = -1;
      for (Eigen::Index p = 0; p < m; ++p) {
        if (d2[p] <= 0.0) continue;
        last_positive = p;
        cumulative += d2[p];
        if (cumulative > target) {
          chosen = p;
          break;
        }
      }
      if (chosen < 0) chosen = last_positive;
    } else {
      // Every point already coincides with a centroid.
      chosen = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(m)));
    }
    centroids.row(c) = points.row(chosen);
    d2 = d2.cwiseMin((points.rowwise() - centroids.row(c)).rowwise().squaredNorm());
  }
  return centroids;
}

ClusterResult kmeans(const Matrix& points, std::size_t k, int max_iters, Rng& rng) {
  if (points.rows() == 0) throw Error(ErrorCode::kEmptyInput, "kmeans: no points");
  if (k == 0) throw Error(ErrorCode::kInvalidArgument, "kmeans: k must be >= 1");
  if (max_iters < 0) throw Error(ErrorCode::kInvalidArgument, "kmeans: max_iters must be >= 0");

  ClusterResult out;
  out.centroids = kmeans_pp_init(points, k, rng);
  const Eigen::Index m = points.rows();
  out.counts.assign(k, 0);
  out.assignment = nearest_all(points, out.centroids);
  out.inertia_history.push_back(total_inertia(points, out.assignment, out.centroids));

  bool stable = false;
  for (int iter = 0; iter < max_iters; ++iter) {
    recompute_means(points, out.assignment, out.counts, out.centroids);
    reseed_empty(points, out.assignment, out.counts, out.centroids);

    bool changed = false;
    const std::vector<std::size_t> candidates = nearest_all(points, out.centroids);
    for (Eigen::Index p = 0; p < m; ++p) {
      const std::size_t current = out.assignment[p];
      const std::size_t best = candidates[static_cast<std::size_t>(p)];
      if (best == current) continue;
      // Re-checked with exact distances; strict improvement only, so ties
      // never oscillate and inertia cannot rise.
      const double current_d = squared_distance(points, p, out.centroids, static_cast<Eigen::Index>(current));
      const double best_d = squared_distance(points, p, out.centroids, static_cast<Eigen::Index>(best));
      if (best_d < current_d) {
        out.assignment[p] = best;
        changed = true;
      }
    }
    out.inertia_history.push_back(total_inertia(points, out.assignment, out.centroids));
    out.iterations = iter + 1;
    if (!changed) {
      stable = true;
      break;
    }
  }
  if (!stable) recompute_means(points, out.assignment, out.counts, out.centroids);

  out.inertia = total_inertia(points, out.assignment, out.centroids);
  out.mass = cluster_mass(out.counts);
  return out;
}

MassDistribution cluster_mass(std::span<const std::size_t> counts) {
  std::size_t total = 0;
  for (std::size_t c : counts) total += c;
  if (total == 0) throw Error(ErrorCode::kAllEmpty, "cluster_mass: every cluster is empty");
  std::vector<double> mass(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k) {
    mass[k] = static_cast<double>(counts[k]) / static_cast<double>(total);
  }
  return MassDistribution(std::move(mass));
}

}  // namespace sfot
