#include "sfot/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sfot/error.hpp"

namespace sfot {

MassDistribution::MassDistribution(std::vector<double> weights)
    : weights_(std::move(weights)) {
  if (weights_.empty()) {
    throw Error(ErrorCode::kDegenerateMarginal, "mass distribution has no entries");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    const double w = weights_[i];
    if (!std::isfinite(w) || w < 0.0) {
      throw Error(ErrorCode::kInvalidArgument,
                  "mass distribution entry is negative or non-finite", i);
    }
    total += w;
  }
  if (total == 0.0) {
    throw Error(ErrorCode::kDegenerateMarginal, "mass distribution has zero total mass");
  }
  if (std::abs(total - 1.0) > kMassTolerance) {
    throw Error(ErrorCode::kInvalidArgument,
                "mass distribution does not sum to one (sum=" + std::to_string(total) + ")");
  }
}

MassDistribution MassDistribution::uniform(std::size_t n) {
  if (n == 0) throw Error(ErrorCode::kDegenerateMarginal, "uniform distribution over zero points");
  return MassDistribution(std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

MassDistribution MassDistribution::normalized(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) {
    throw Error(ErrorCode::kDegenerateMarginal, "cannot normalize weights with zero total");
  }
  std::vector<double> out(weights.begin(), weights.end());
  for (double& w : out) w /= total;
  return MassDistribution(std::move(out));
}

double cosine_distance(const VectorCRef& u, const VectorCRef& v) {
  if (u.size() != v.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "cosine_distance: length mismatch");
  }
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu == 0.0) throw Error(ErrorCode::kZeroNormVector, "cosine_distance: zero-norm vector", 0);
  if (nv == 0.0) throw Error(ErrorCode::kZeroNormVector, "cosine_distance: zero-norm vector", 1);
  const double d = 1.0 - u.dot(v) / (nu * nv);
  return std::clamp(d, 0.0, 2.0);
}

Matrix cost_matrix(const Matrix& real_feats, const Matrix& centroids) {
  if (real_feats.cols() != centroids.cols()) {
    throw Error(ErrorCode::kDimensionMismatch, "cost_matrix: feature dimensions differ");
  }
  Vector real_norms = real_feats.rowwise().norm();
  Vector centroid_norms = centroids.rowwise().norm();
  for (Eigen::Index n = 0; n < real_norms.size(); ++n) {
    if (real_norms[n] == 0.0) {
      throw Error(ErrorCode::kZeroNormVector, "cost_matrix: zero-norm real feature",
                  static_cast<std::uint64_t>(n));
    }
  }
  for (Eigen::Index k = 0; k < centroid_norms.size(); ++k) {
    if (centroid_norms[k] == 0.0) {
      throw Error(ErrorCode::kZeroNormVector, "cost_matrix: zero-norm centroid",
                  static_cast<std::uint64_t>(k));
    }
  }
  Matrix cost = real_feats * centroids.transpose();
  for (Eigen::Index n = 0; n < cost.rows(); ++n) {
    for (Eigen::Index k = 0; k < cost.cols(); ++k) {
      const double sim = cost(n, k) / (real_norms[n] * centroid_norms[k]);
      cost(n, k) = std::clamp(1.0 - sim, 0.0, 2.0);
    }
  }
  return cost;
}

void softmax_inplace(Eigen::Ref<Vector> logits) {
  const double shift = logits.maxCoeff();
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    logits[i] = std::exp(logits[i] - shift);
    total += logits[i];
  }
  logits /= total;
}

MassDistribution softmax(const VectorCRef& logits) {
  if (logits.size() == 0) throw Error(ErrorCode::kInvalidArgument, "softmax of empty logits");
  require_finite(logits, "softmax logits");
  Vector p = logits;
  softmax_inplace(p);
  return MassDistribution(std::vector<double>(p.data(), p.data() + p.size()));
}

double cross_entropy(const MassDistribution& probs, std::size_t label) {
  if (label >= probs.size()) {
    throw Error(ErrorCode::kLabelOutOfRange, "cross_entropy: label out of range", label);
  }
  // The floor can lift a probability of 1 above 1; keep the loss nonnegative.
  return std::max(0.0, -std::log(probs[label] + kProbabilityFloor));
}

Vector gaussian_sample(Rng& rng, std::size_t dim) {
  if (dim == 0) throw Error(ErrorCode::kInvalidArgument, "gaussian_sample: dim must be >= 1");
  Vector z(static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
  return z;
}

void require_finite(const VectorCRef& v, const char* what) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw Error(ErrorCode::kNumericFailure, std::string(what) + " contains a non-finite value",
                  static_cast<std::uint64_t>(i));
    }
  }
}

}  // namespace sfot
