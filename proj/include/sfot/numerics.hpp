#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "sfot/rng.hpp"

namespace sfot {

/// A single feature vector. Length is the dataset dimension d.
using Vector = Eigen::VectorXd;
/// Row-major dense matrix; point sets store one feature per row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorCRef = Eigen::Ref<const Vector>;

inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr double kMassTolerance = 1e-9;

/// Nonnegative weights summing to one.
class MassDistribution {
 public:
  MassDistribution() = default;
  /// Validates entries (finite, >= 0) and the unit sum within kMassTolerance.
  /// Throws DegenerateMarginal when the total mass is zero or there are no
  /// entries.
  explicit MassDistribution(std::vector<double> weights);

  static MassDistribution uniform(std::size_t n);
  /// Normalizes arbitrary nonnegative weights.
  static MassDistribution normalized(std::span<const double> weights);

  std::size_t size() const noexcept { return weights_.size(); }
  double operator[](std::size_t i) const { return weights_[i]; }
  std::span<const double> weights() const noexcept { return weights_; }

  friend bool operator==(const MassDistribution&, const MassDistribution&) = default;

 private:
  std::vector<double> weights_;
};

/// 1 - <u,v>/(|u||v|), clamped to [0, 2].
double cosine_distance(const VectorCRef& u, const VectorCRef& v);

/// Cosine ground cost between every real feature (row) and every centroid (row).
Matrix cost_matrix(const Matrix& real_feats, const Matrix& centroids);

MassDistribution softmax(const VectorCRef& logits);
/// Max-shifted softmax written over the input.
void softmax_inplace(Eigen::Ref<Vector> logits);

/// -log(probs[label] + kProbabilityFloor).
double cross_entropy(const MassDistribution& probs, std::size_t label);

/// `dim` independent standard-normal draws.
Vector gaussian_sample(Rng& rng, std::size_t dim);

void require_finite(const VectorCRef& v, const char* what);

}  // namespace sfot
