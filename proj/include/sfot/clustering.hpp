#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sfot/numerics.hpp"
#include "sfot/rng.hpp"

namespace sfot {

struct ClusterResult {
  Matrix centroids;                     // K x d
  std::vector<std::size_t> assignment;  // length M, each < K
  std::vector<std::size_t> counts;      // gamma_k
  MassDistribution mass;                // counts / M
  double inertia = 0.0;                 // sum of squared distances to assigned centroid
  /// Inertia after every assignment pass, starting with the seeding pass.
  std::vector<double> inertia_history;
  int iterations = 0;
};

/// K-means++ (D^2) seeding. Points are rows.
Matrix kmeans_pp_init(const Matrix& points, std::size_t k, Rng& rng);

/// K-means++ seeding followed by Lloyd iterations under squared Euclidean
/// distance. Empty clusters are reseeded with the point farthest from its own
/// centroid, so K stays fixed whenever M >= K.
ClusterResult kmeans(const Matrix& points, std::size_t k, int max_iters, Rng& rng);

/// c_k = gamma_k / sum_i gamma_i.
MassDistribution cluster_mass(std::span<const std::size_t> counts);

}  // namespace sfot
