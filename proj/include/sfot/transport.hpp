#pragma once

#include "sfot/numerics.hpp"

namespace sfot {

struct SinkhornConfig {
  double epsilon = 0.05;       // cost units; costs live in [0, 2]
  int max_iterations = 2000;
  double marginal_tol = 1e-6;  // on the infinity norm of the marginal residuals
  bool log_domain = true;

  void validate() const;
};

/// Coupling between N sources and K targets.
struct TransportPlan {
  Matrix entries;
  MassDistribution row_marginal;
  MassDistribution col_marginal;
  bool converged = false;
  int iterations_used = 0;
  double row_residual = 0.0;
  double col_residual = 0.0;
};

/// Entropic OT by alternating Sinkhorn scaling of exp(-cost / epsilon).
///
/// Zero-mass rows and columns are removed before the solve and come back as
/// zero rows/columns of the plan. Hitting max_iterations is not an error: the
/// current plan is returned with converged == false.
TransportPlan sinkhorn(const Matrix& cost, const MassDistribution& r,
                       const MassDistribution& c, const SinkhornConfig& cfg);

/// <P, C>.
double ot_loss(const TransportPlan& plan, const Matrix& cost);

/// Gradient of <P, C(x, e)> with respect to each centroid e_k with P held fixed
/// (C is the cosine cost). Row k of the result is the gradient for centroid k.
Matrix ot_loss_grad_centroids(const Matrix& real_feats, const Matrix& centroids,
                              const TransportPlan& plan);

struct ExactTransport {
  Matrix plan;
  double value = 0.0;
  int pivots = 0;
};

/// Unregularized OT by the transportation simplex (northwest-corner start,
/// MODI potentials, cycle pivoting). Meant for small test instances: N*K <= 64.
ExactTransport exact_ot_small(const Matrix& cost, const MassDistribution& r,
                              const MassDistribution& c);

}  // namespace sfot
