#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "sfot/numerics.hpp"
#include "sfot/rng.hpp"

namespace sfot {

enum class ActivationKind { kReLU, kLeakyReLU };

struct Activation {
  ActivationKind kind = ActivationKind::kLeakyReLU;
  double slope = 0.1;  // negative-side slope; ignored for ReLU

  static Activation relu() { return {ActivationKind::kReLU, 0.0}; }
  static Activation leaky_relu(double slope) { return {ActivationKind::kLeakyReLU, slope}; }

  double negative_slope() const { return kind == ActivationKind::kReLU ? 0.0 : slope; }

  friend bool operator==(const Activation&, const Activation&) = default;
};

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out

  friend bool operator==(const DenseLayer& a, const DenseLayer& b) {
    return a.weight.rows() == b.weight.rows() && a.weight.cols() == b.weight.cols() &&
           a.bias.size() == b.bias.size() && a.weight == b.weight && a.bias == b.bias;
  }
};

/// Conditional generator G: x_hat = G([x; z]) with x, z in R^d.
///
/// The activation follows every layer except the last. `stamp` changes on
/// every parameter update and is what forward caches are validated against;
/// it is not part of the value (operator== ignores it).
struct GeneratorParams {
  std::vector<DenseLayer> layers;
  Activation activation;
  std::uint64_t stamp = 0;

  std::size_t feature_dim() const;
  std::size_t input_dim() const;
  /// Checks the 2d -> ... -> d chain and that all parameters are finite.
  void validate() const;
  void restamp();

  friend bool operator==(const GeneratorParams& a, const GeneratorParams& b) {
    return a.layers == b.layers && a.activation == b.activation;
  }
};

enum class GeneratorInit {
  kFanInUniform,  // U(-1/sqrt(fan_in), 1/sqrt(fan_in))
  kNearIdentity,  // x channel passes through exactly, plus small uniform noise
};

struct GeneratorArchitecture {
  /// Hidden widths; empty means the default {2d, 2d}.
  std::vector<std::size_t> hidden;
  Activation activation = Activation::leaky_relu(0.1);
  GeneratorInit init = GeneratorInit::kFanInUniform;
  double near_identity_noise = 0.01;
};

GeneratorParams make_generator(std::size_t feature_dim, const GeneratorArchitecture& arch, Rng& rng);

/// Per-layer inputs and hidden pre-activations of one batched forward pass.
struct GeneratorCache {
  std::vector<Matrix> inputs;          // inputs[l]: batch x in_l
  std::vector<Matrix> pre_activation;  // hidden layers only
  std::uint64_t stamp = 0;
};

struct GeneratorGrads {
  std::vector<DenseLayer> layers;

  static GeneratorGrads zeros_like(const GeneratorParams& params);
  void set_zero();
};

/// Batched forward; rows of x and z are paired samples. Fills `cache` when given.
Matrix gen_forward_batch(const GeneratorParams& params, const Matrix& x, const Matrix& z,
                         GeneratorCache* cache = nullptr);
Vector gen_forward(const GeneratorParams& params, const VectorCRef& x, const VectorCRef& z,
                   GeneratorCache* cache = nullptr);

/// Accumulates into `grads` the parameter gradients of the scalar loss whose
/// gradient with respect to the batch output is `upstream` (batch x d).
/// Throws StaleCache if params changed since the cached forward pass.
void gen_backward(const GeneratorParams& params, const GeneratorCache& cache,
                  const Matrix& upstream, GeneratorGrads& grads);
GeneratorGrads gen_backward(const GeneratorParams& params, const GeneratorCache& cache,
                            const VectorCRef& upstream);

/// Cosine classifier: logit_j = scale * cos(x, w_j).
struct ClassifierParams {
  Matrix prototypes;  // C x d
  double scale = 20.0;
  std::vector<bool> frozen;  // per class row

  std::size_t class_count() const { return static_cast<std::size_t>(prototypes.rows()); }
  std::size_t feature_dim() const { return static_cast<std::size_t>(prototypes.cols()); }
  bool is_frozen(std::size_t row) const { return frozen[row]; }
  void freeze_all() { frozen.assign(class_count(), true); }
  void validate() const;

  friend bool operator==(const ClassifierParams& a, const ClassifierParams& b) {
    return a.prototypes.rows() == b.prototypes.rows() && a.prototypes.cols() == b.prototypes.cols() &&
           a.prototypes == b.prototypes && a.scale == b.scale && a.frozen == b.frozen;
  }
};

/// Gaussian prototypes with the given per-entry standard deviation.
ClassifierParams make_classifier(std::size_t classes, std::size_t feature_dim, Rng& rng,
                                 double scale = 20.0, double init_std = 1.0);

Vector cls_forward(const ClassifierParams& params, const VectorCRef& x);
/// Logits for every row of `x`.
Matrix cls_forward_batch(const ClassifierParams& params, const Matrix& x);

struct ClassifierLossGrad {
  double loss = 0.0;
  Matrix prototype_grad;  // zero on frozen rows
  Vector input_grad;
};

ClassifierLossGrad cls_loss_and_grad(const ClassifierParams& params, const VectorCRef& x,
                                     std::size_t label);

/// Batched cross-entropy with each sample's loss multiplied by `weight`.
/// Adds prototype gradients into `prototype_grad` (frozen rows untouched) and
/// writes per-row input gradients into `input_grad`; either may be null.
/// Returns the weighted loss sum.
double cls_batch_loss_and_grad(const ClassifierParams& params, const Matrix& x,
                               std::span<const std::size_t> labels, double weight,
                               Matrix* prototype_grad, Matrix* input_grad);

/// Appends `novel_class_count` prototypes. With `init_features`, novel
/// prototype j is the normalized mean of init_features[j] (rows are features);
/// otherwise it is a 0.01-scaled Gaussian draw.
ClassifierParams extend_classifier(const ClassifierParams& base, std::size_t novel_class_count,
                                   const std::vector<Matrix>* init_features, Rng& rng,
                                   bool freeze_base);

struct SgdConfig {
  double learning_rate = 0.02;
  double momentum = 0.9;
  double weight_decay = 0.0;
  /// (step, multiplier): from `step` on, the rate is multiplied by
  /// `multiplier`. Entries compound.
  std::vector<std::pair<int, double>> schedule;

  double rate_at(int step) const;
  void validate() const;
};

struct SgdState {
  std::vector<double> velocity;
};

/// Momentum SGD with weight decay on a flat parameter block:
/// v = momentum * v + (g + weight_decay * p); p -= rate_at(step) * v.
void sgd_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity,
              const SgdConfig& cfg, int step);

void sgd_step(GeneratorParams& params, const GeneratorGrads& grads, const SgdConfig& cfg,
              SgdState& state, int step);
/// Frozen rows are skipped entirely (no decay, no momentum).
void sgd_step(ClassifierParams& params, const Matrix& prototype_grad, const SgdConfig& cfg,
              SgdState& state, int step);

}  // namespace sfot
