#include "sfot/nnet.hpp"

#include <atomic>
#include <algorithm>
#include <cmath>
#include <string>

#include "sfot/error.hpp"

namespace sfot {
namespace {

std::uint64_t next_stamp() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

void apply_activation(const Activation& act, Matrix& m) {
  const double slope = act.negative_slope();
  m = m.unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
}

Matrix activation_derivative(const Activation& act, const Matrix& pre) {
  const double slope = act.negative_slope();
  return pre.unaryExpr([slope](double v) { return v > 0.0 ? 1.0 : slope; });
}

}  // namespace

std::size_t GeneratorParams::feature_dim() const {
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.back().weight.rows());
}

std::size_t GeneratorParams::input_dim() const {
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().weight.cols());
}

void GeneratorParams::validate() const {
  if (layers.empty()) throw Error(ErrorCode::kInvalidArgument, "generator has no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    if (layer.bias.size() != layer.weight.rows()) {
      throw Error(ErrorCode::kShapeMismatch, "generator layer bias/weight mismatch", l);
    }
    if (l > 0 && layer.weight.cols() != layers[l - 1].weight.rows()) {
      throw Error(ErrorCode::kShapeMismatch, "generator layers do not chain", l);
    }
    if (!layer.weight.allFinite() || !layer.bias.allFinite()) {
      throw Error(ErrorCode::kNumericFailure, "generator parameters are not finite", l);
    }
  }
  if (input_dim() != 2 * feature_dim()) {
    throw Error(ErrorCode::kShapeMismatch, "generator input must be twice the output dimension");
  }
}

void GeneratorParams::restamp() { stamp = next_stamp(); }

GeneratorParams make_generator(std::size_t feature_dim, const GeneratorArchitecture& arch, Rng& rng) {
  if (feature_dim == 0) throw Error(ErrorCode::kInvalidArgument, "generator feature_dim must be >= 1");
  const Eigen::Index d = static_cast<Eigen::Index>(feature_dim);
  std::vector<std::size_t> widths{2 * feature_dim};
  if (arch.hidden.empty()) {
    widths.insert(widths.end(), {2 * feature_dim, 2 * feature_dim});
  } else {
    widths.insert(widths.end(), arch.hidden.begin(), arch.hidden.end());
  }
  widths.push_back(feature_dim);

  GeneratorParams params;
  params.activation = arch.activation;
  const std::size_t layer_count = widths.size() - 1;
  for (std::size_t l = 0; l < layer_count; ++l) {
    const Eigen::Index in = static_cast<Eigen::Index>(widths[l]);
    const Eigen::Index out = static_cast<Eigen::Index>(widths[l + 1]);
    DenseLayer layer{Matrix::Zero(out, in), Vector::Zero(out)};
    if (arch.init == GeneratorInit::kFanInUniform) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      for (Eigen::Index i = 0; i < out; ++i) {
        for (Eigen::Index j = 0; j < in; ++j) layer.weight(i, j) = (2.0 * rng.uniform() - 1.0) * bound;
      }
      for (Eigen::Index i = 0; i < out; ++i) layer.bias[i] = (2.0 * rng.uniform() - 1.0) * bound;
    } else {
      // Hidden state carries [x; -x]; (act(x) - act(-x)) / (1 + slope) == x
      // for ReLU and leaky ReLU alike.
      if (l + 1 < layer_count && out != 2 * d) {
        throw Error(ErrorCode::kInvalidArgument, "near-identity init needs hidden widths of 2d");
      }
      const Matrix eye = Matrix::Identity(d, d);
      const double inv = 1.0 / (1.0 + arch.activation.negative_slope());
      if (layer_count == 1) {
        layer.weight.leftCols(d) = eye;
      } else if (l == 0) {
        layer.weight.block(0, 0, d, d) = eye;
        layer.weight.block(d, 0, d, d) = -eye;
      } else if (l + 1 < layer_count) {
        layer.weight.block(0, 0, d, d) = inv * eye;
        layer.weight.block(0, d, d, d) = -inv * eye;
        layer.weight.block(d, 0, d, d) = -inv * eye;
        layer.weight.block(d, d, d, d) = inv * eye;
      } else {
        layer.weight.leftCols(d) = inv * eye;
        layer.weight.rightCols(d) = -inv * eye;
      }
      for (Eigen::Index i = 0; i < out; ++i) {
        for (Eigen::Index j = 0; j < in; ++j) {
          layer.weight(i, j) += (2.0 * rng.uniform() - 1.0) * arch.near_identity_noise;
        }
      }
    }
    params.layers.push_back(std::move(layer));
  }
  params.restamp();
  params.validate();
  return params;
}

GeneratorGrads GeneratorGrads::zeros_like(const GeneratorParams& params) {
  GeneratorGrads g;
  for (const auto& layer : params.layers) {
    g.layers.push_back({Matrix::Zero(layer.weight.rows(), layer.weight.cols()),
                        Vector::Zero(layer.bias.size())});
  }
  return g;
}

void GeneratorGrads::set_zero() {
  for (auto& layer : layers) {
    layer.weight.setZero();
    layer.bias.setZero();
  }
}

Matrix gen_forward_batch(const GeneratorParams& params, const Matrix& x, const Matrix& z,
                         GeneratorCache* cache) {
  const Eigen::Index d = static_cast<Eigen::Index>(params.feature_dim());
  if (x.cols() != d || z.cols() != d || x.rows() != z.rows()) {
    throw Error(ErrorCode::kDimensionMismatch, "gen_forward: x and z must both be batch x d");
  }
  Matrix h(x.rows(), 2 * d);
  h.leftCols(d) = x;
  h.rightCols(d) = z;
  if (cache) {
    cache->inputs.clear();
    cache->pre_activation.clear();
    cache->stamp = params.stamp;
  }
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    if (cache) cache->inputs.push_back(h);
    Matrix pre = h * layer.weight.transpose();
    pre.rowwise() += layer.bias.transpose();
    if (l + 1 < params.layers.size()) {
      if (cache) cache->pre_activation.push_back(pre);
      apply_activation(params.activation, pre);
    }
    h = std::move(pre);
  }
  return h;
}

Vector gen_forward(const GeneratorParams& params, const VectorCRef& x, const VectorCRef& z,
                   GeneratorCache* cache) {
  const Eigen::Index d = static_cast<Eigen::Index>(params.feature_dim());
  if (x.size() != d || z.size() != d) {
    throw Error(ErrorCode::kDimensionMismatch, "gen_forward: x and z must have length d");
  }
  const Matrix out = gen_forward_batch(params, x.transpose(), z.transpose(), cache);
  return out.row(0).transpose();
}

void gen_backward(const GeneratorParams& params, const GeneratorCache& cache,
                  const Matrix& upstream, GeneratorGrads& grads) {
  if (cache.stamp != params.stamp || cache.inputs.size() != params.layers.size() ||
      cache.pre_activation.size() + 1 != params.layers.size()) {
    throw Error(ErrorCode::kStaleCache, "gen_backward: cache does not belong to these parameters");
  }
  if (upstream.rows() != cache.inputs.front().rows() ||
      upstream.cols() != static_cast<Eigen::Index>(params.feature_dim())) {
    throw Error(ErrorCode::kShapeMismatch, "gen_backward: upstream gradient has the wrong shape");
  }
  if (grads.layers.size() != params.layers.size()) grads = GeneratorGrads::zeros_like(params);

  Matrix delta = upstream;  // gradient w.r.t. the current layer's pre-activation
  for (std::size_t l = params.layers.size(); l-- > 0;) {
    grads.layers[l].weight.noalias() += delta.transpose() * cache.inputs[l];
    grads.layers[l].bias += delta.colwise().sum().transpose();
    if (l == 0) break;
    Matrix back = delta * params.layers[l].weight;
    delta = back.cwiseProduct(activation_derivative(params.activation, cache.pre_activation[l - 1]));
  }
}

GeneratorGrads gen_backward(const GeneratorParams& params, const GeneratorCache& cache,
                            const VectorCRef& upstream) {
  GeneratorGrads grads = GeneratorGrads::zeros_like(params);
  gen_backward(params, cache, Matrix(upstream.transpose()), grads);
  return grads;
}

void ClassifierParams::validate() const {
  if (!(scale > 0.0)) throw Error(ErrorCode::kInvalidArgument, "classifier scale must be > 0");
  if (frozen.size() != class_count()) {
    throw Error(ErrorCode::kShapeMismatch, "classifier frozen mask has the wrong length");
  }
  for (Eigen::Index j = 0; j < prototypes.rows(); ++j) {
    if (!prototypes.row(j).allFinite()) {
      throw Error(ErrorCode::kNumericFailure, "classifier prototype is not finite",
                  static_cast<std::uint64_t>(j));
    }
    if (prototypes.row(j).norm() == 0.0) {
      throw Error(ErrorCode::kZeroNormVector, "classifier prototype has zero norm",
                  static_cast<std::uint64_t>(j));
    }
  }
}

ClassifierParams make_classifier(std::size_t classes, std::size_t feature_dim, Rng& rng,
                                 double scale, double init_std) {
  if (classes == 0 || feature_dim == 0) {
    throw Error(ErrorCode::kInvalidArgument, "make_classifier: empty shape");
  }
  ClassifierParams params;
  params.prototypes.resize(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(feature_dim));
  for (Eigen::Index j = 0; j < params.prototypes.rows(); ++j) {
    for (Eigen::Index i = 0; i < params.prototypes.cols(); ++i) params.prototypes(j, i) = init_std * rng.normal();
  }
  params.scale = scale;
  params.frozen.assign(classes, false);
  params.validate();
  return params;
}

Matrix cls_forward_batch(const ClassifierParams& params, const Matrix& x) {
  if (x.cols() != params.prototypes.cols()) {
    throw Error(ErrorCode::kDimensionMismatch, "cls_forward: feature dimension mismatch");
  }
  const Vector x_norms = x.rowwise().norm();
  for (Eigen::Index b = 0; b < x_norms.size(); ++b) {
    if (x_norms[b] == 0.0) {
      throw Error(ErrorCode::kZeroNormVector, "cls_forward: zero-norm feature", static_cast<std::uint64_t>(b));
    }
  }
  const Vector w_norms = params.prototypes.rowwise().norm();
  Matrix sims = x * params.prototypes.transpose();
  sims.array().colwise() /= x_norms.array();
  sims.array().rowwise() /= w_norms.transpose().array();
  return params.scale * sims;
}

Vector cls_forward(const ClassifierParams& params, const VectorCRef& x) {
  return cls_forward_batch(params, x.transpose()).row(0).transpose();
}

double cls_batch_loss_and_grad(const ClassifierParams& params, const Matrix& x,
                               std::span<const std::size_t> labels, double weight,
                               Matrix* prototype_grad, Matrix* input_grad) {
  if (static_cast<std::size_t>(x.rows()) != labels.size()) {
    throw Error(ErrorCode::kShapeMismatch, "cls_loss: one label per row required");
  }
  const std::size_t classes = params.class_count();
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] >= classes) throw Error(ErrorCode::kLabelOutOfRange, "cls_loss: label out of range", labels[b]);
  }
  const Matrix logits = cls_forward_batch(params, x);  // validates norms
  const Vector x_norms = x.rowwise().norm();
  const Vector w_norms = params.prototypes.rowwise().norm();
  const Matrix sims = logits / params.scale;

  // dL/dsim for each (sample, class).
  Matrix dsim(logits.rows(), logits.cols());
  double loss = 0.0;
  for (Eigen::Index b = 0; b < logits.rows(); ++b) {
    Vector p = logits.row(b).transpose();
    softmax_inplace(p);
    const std::size_t y = labels[b];
    const double floored = p[y] + kProbabilityFloor;
    loss += weight * std::max(0.0, -std::log(floored));
    // Exact gradient of -log(p_y + floor): the softmax gradient scaled by p_y / (p_y + floor).
    const double damp = p[y] / floored;
    p[y] -= 1.0;
    dsim.row(b) = (weight * params.scale * damp) * p.transpose();
  }

  const Matrix unit_x = x.array().colwise() / x_norms.array();
  const Matrix unit_w = params.prototypes.array().colwise() / w_norms.array();

  if (input_grad) {
    // d sim_j / dx = (w_hat_j - sim_j * x_hat) / |x|
    Matrix g = dsim * unit_w;
    const Vector along = (dsim.cwiseProduct(sims)).rowwise().sum();
    g -= (unit_x.array().colwise() * along.array()).matrix();
    g.array().colwise() /= x_norms.array();
    *input_grad = std::move(g);
  }
  if (prototype_grad) {
    if (prototype_grad->rows() != params.prototypes.rows() || prototype_grad->cols() != params.prototypes.cols()) {
      throw Error(ErrorCode::kShapeMismatch, "cls_loss: prototype gradient buffer has the wrong shape");
    }
    // d sim_j / dw_j = (x_hat - sim_j * w_hat_j) / |w_j|
    const Matrix toward = dsim.transpose() * unit_x;
    const Vector along = (dsim.cwiseProduct(sims)).colwise().sum().transpose();
    for (Eigen::Index j = 0; j < params.prototypes.rows(); ++j) {
      if (params.is_frozen(static_cast<std::size_t>(j))) continue;
      prototype_grad->row(j) += (toward.row(j) - along[j] * unit_w.row(j)) / w_norms[j];
    }
  }
  return loss;
}

ClassifierLossGrad cls_loss_and_grad(const ClassifierParams& params, const VectorCRef& x,
                                     std::size_t label) {
  ClassifierLossGrad out;
  out.prototype_grad = Matrix::Zero(params.prototypes.rows(), params.prototypes.cols());
  Matrix input_grad;
  const std::size_t labels[1] = {label};
  out.loss = cls_batch_loss_and_grad(params, x.transpose(), labels, 1.0, &out.prototype_grad, &input_grad);
  out.input_grad = input_grad.row(0).transpose();
  return out;
}

ClassifierParams extend_classifier(const ClassifierParams& base, std::size_t novel_class_count,
                                   const std::vector<Matrix>* init_features, Rng& rng,
                                   bool freeze_base) {
  if (novel_class_count == 0) {
    throw Error(ErrorCode::kInvalidArgument, "extend_classifier: novel_class_count must be >= 1");
  }
  if (init_features && init_features->size() != novel_class_count) {
    throw Error(ErrorCode::kShapeMismatch, "extend_classifier: one init list per novel class required");
  }
  const Eigen::Index base_rows = base.prototypes.rows();
  const Eigen::Index d = base.prototypes.cols();
  ClassifierParams out;
  out.scale = base.scale;
  out.prototypes.resize(base_rows + static_cast<Eigen::Index>(novel_class_count), d);
  out.prototypes.topRows(base_rows) = base.prototypes;
  for (std::size_t j = 0; j < novel_class_count; ++j) {
    auto row = out.prototypes.row(base_rows + static_cast<Eigen::Index>(j));
    if (init_features) {
      const Matrix& feats = (*init_features)[j];
      if (feats.rows() == 0) throw Error(ErrorCode::kEmptyInitClass, "extend_classifier: empty init class", j);
      if (feats.cols() != d) throw Error(ErrorCode::kDimensionMismatch, "extend_classifier: init feature dimension");
      const Vector mean = feats.colwise().mean().transpose();
      const double norm = mean.norm();
      if (norm == 0.0) throw Error(ErrorCode::kZeroNormVector, "extend_classifier: init mean has zero norm", j);
      row = (mean / norm).transpose();
    } else {
      for (Eigen::Index i = 0; i < d; ++i) row[i] = 0.01 * rng.normal();
    }
  }
  out.frozen = base.frozen;
  if (freeze_base) std::fill(out.frozen.begin(), out.frozen.end(), true);
  out.frozen.resize(out.class_count(), false);
  out.validate();
  return out;
}

double SgdConfig::rate_at(int step) const {
  double rate = learning_rate;
  for (const auto& [at, multiplier] : schedule) {
    if (step >= at) rate *= multiplier;
  }
  return rate;
}

void SgdConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::kInvalidArgument, "sgd: learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(ErrorCode::kInvalidArgument, "sgd: momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "sgd: weight_decay must be >= 0");
}

void sgd_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity,
              const SgdConfig& cfg, int step) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw Error(ErrorCode::kShapeMismatch, "sgd_step: parameter, gradient and state sizes differ");
  }
  const double rate = cfg.rate_at(step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = cfg.momentum * velocity[i] + (grads[i] + cfg.weight_decay * params[i]);
    params[i] -= rate * velocity[i];
  }
}

void sgd_step(GeneratorParams& params, const GeneratorGrads& grads, const SgdConfig& cfg,
              SgdState& state, int step) {
  if (grads.layers.size() != params.layers.size()) {
    throw Error(ErrorCode::kShapeMismatch, "sgd_step: generator gradient layer count");
  }
  std::size_t total = 0;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& p = params.layers[l];
    const auto& g = grads.layers[l];
    if (p.weight.rows() != g.weight.rows() || p.weight.cols() != g.weight.cols() || p.bias.size() != g.bias.size()) {
      throw Error(ErrorCode::kShapeMismatch, "sgd_step: generator gradient shape", l);
    }
    total += static_cast<std::size_t>(p.weight.size() + p.bias.size());
  }
  if (state.velocity.empty()) state.velocity.assign(total, 0.0);
  if (state.velocity.size() != total) throw Error(ErrorCode::kShapeMismatch, "sgd_step: optimizer state size");

  std::size_t offset = 0;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& p = params.layers[l];
    const auto& g = grads.layers[l];
    const auto w = static_cast<std::size_t>(p.weight.size());
    sgd_step({p.weight.data(), w}, {g.weight.data(), w}, {state.velocity.data() + offset, w}, cfg, step);
    offset += w;
    const auto b = static_cast<std::size_t>(p.bias.size());
    sgd_step({p.bias.data(), b}, {g.bias.data(), b}, {state.velocity.data() + offset, b}, cfg, step);
    offset += b;
  }
  params.restamp();
}

void sgd_step(ClassifierParams& params, const Matrix& prototype_grad, const SgdConfig& cfg,
              SgdState& state, int step) {
  if (prototype_grad.rows() != params.prototypes.rows() || prototype_grad.cols() != params.prototypes.cols()) {
    throw Error(ErrorCode::kShapeMismatch, "sgd_step: classifier gradient shape");
  }
  const auto total = static_cast<std::size_t>(params.prototypes.size());
  if (state.velocity.empty()) state.velocity.assign(total, 0.0);
  if (state.velocity.size() != total) throw Error(ErrorCode::kShapeMismatch, "sgd_step: optimizer state size");
  const auto d = static_cast<std::size_t>(params.prototypes.cols());
  for (Eigen::Index j = 0; j < params.prototypes.rows(); ++j) {
    if (params.is_frozen(static_cast<std::size_t>(j))) continue;
    const std::size_t offset = static_cast<std::size_t>(j) * d;
    sgd_step({params.prototypes.row(j).data(), d}, {prototype_grad.row(j).data(), d},
             {state.velocity.data() + offset, d}, cfg, step);
  }
}

}  // namespace sfot
