#include "sfot/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "sfot/error.hpp"

namespace sfot {
namespace {

constexpr double kVarianceFloor = 1e-6;

// Class ids must be 0..n-1 so that a class id is also its classifier row.
void require_dense_ids(const std::vector<std::uint32_t>& ids, const char* what) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] != i) {
      throw Error(ErrorCode::kInvalidArgument, std::string(what) + ": class ids must be 0..n-1", ids[i]);
    }
  }
}

Matrix repeat_rows(const Matrix& x, std::size_t times) {
  Matrix out(x.rows() * static_cast<Eigen::Index>(times), x.cols());
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (std::size_t t = 0; t < times; ++t) out.row(r++) = x.row(i);
  }
  return out;
}

Matrix gaussian_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix z(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) z(i, j) = rng.normal();
  }
  return z;
}

struct OtTerm {
  double loss = 0.0;
  bool converged = true;
  int iterations = 0;
};

// Clustered OT between `real` and the K-means centroids of `synthetic`.
// Centroid gradients are routed to member synthetic rows with weight 1/gamma_k
// (the Jacobian of the mean under fixed assignments) and added into `grad`
// scaled by `weight`.
OtTerm clustered_ot(const Matrix& real, const Matrix& synthetic, std::size_t k, const StageConfig& cfg,
                    Rng& rng, double weight, Eigen::Ref<Matrix> grad, int step,
                    const GenStepObserver* observer) {
  const std::size_t clusters_k = std::min<std::size_t>(k, static_cast<std::size_t>(synthetic.rows()));
  const ClusterResult clusters = kmeans(synthetic, clusters_k, cfg.kmeans_max_iters, rng);
  const Matrix cost = cost_matrix(real, clusters.centroids);
  const TransportPlan plan = sinkhorn(cost, MassDistribution::uniform(static_cast<std::size_t>(real.rows())),
                                      clusters.mass, cfg.sinkhorn);
  if (observer && *observer) (*observer)(GenStepTrace{step, &clusters, &plan});
  const Matrix centroid_grad = ot_loss_grad_centroids(real, clusters.centroids, plan);
  for (Eigen::Index m = 0; m < synthetic.rows(); ++m) {
    const std::size_t a = clusters.assignment[static_cast<std::size_t>(m)];
    grad.row(m) += (weight / static_cast<double>(clusters.counts[a])) * centroid_grad.row(static_cast<Eigen::Index>(a));
  }
  return {weight * ot_loss(plan, cost), plan.converged, plan.iterations_used};
}

}  // namespace

std::string to_string(GenLoss loss) {
  switch (loss) {
    case GenLoss::kOT: return "ot";
    case GenLoss::kL2: return "l2";
    case GenLoss::kKL: return "kl";
  }
  return "ot";
}

GenLoss parse_gen_loss(const std::string& name) {
  std::string lower = name;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "ot") return GenLoss::kOT;
  if (lower == "l2") return GenLoss::kL2;
  if (lower == "kl") return GenLoss::kKL;
  throw Error(ErrorCode::kInvalidArgument, "unknown generator loss '" + name + "' (expected ot, l2, kl)");
}

void StageConfig::validate() const {
  if (t_gen < 1 || t_finetune < 1 || k_centroids < 1 || batch_real < 1 || finetune_batch_real < 1 ||
      base_batch < 1) {
    throw Error(ErrorCode::kInvalidArgument, "stage config: T, K and batch sizes must be >= 1");
  }
  if (k_centroids > batch_real * t_gen || k_centroids > batch_real * t_finetune) {
    throw Error(ErrorCode::kInvalidArgument, "stage config: more centroids than synthetic points");
  }
  if (!(alpha >= 0.0) || !(beta >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "stage config: alpha and beta must be >= 0");
  }
  if (base_iterations < 0 || gen_iterations < 0 || finetune_iterations < 0 || kmeans_max_iters < 0) {
    throw Error(ErrorCode::kInvalidArgument, "stage config: iteration counts must be >= 0");
  }
  if (!(classifier_scale > 0.0)) throw Error(ErrorCode::kInvalidArgument, "stage config: classifier_scale must be > 0");
  sinkhorn.validate();
  base_sgd.validate();
  gen_sgd.validate();
  finetune_sgd.validate();
}

namespace {

nlohmann::json sgd_to_json(const SgdConfig& s) {
  nlohmann::json schedule = nlohmann::json::array();
  for (const auto& [step, mult] : s.schedule) schedule.push_back({step, mult});
  return {{"learning_rate", s.learning_rate}, {"momentum", s.momentum}, {"weight_decay", s.weight_decay},
          {"schedule", schedule}};
}

SgdConfig sgd_from_json(const nlohmann::json& j, SgdConfig s) {
  s.learning_rate = j.value("learning_rate", s.learning_rate);
  s.momentum = j.value("momentum", s.momentum);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  if (j.contains("schedule")) {
    s.schedule.clear();
    for (const auto& e : j["schedule"]) s.schedule.emplace_back(e.at(0).get<int>(), e.at(1).get<double>());
  }
  return s;
}

}  // namespace

nlohmann::json to_json(const StageConfig& c) {
  return {{"alpha", c.alpha},
          {"beta", c.beta},
          {"t_gen", c.t_gen},
          {"t_finetune", c.t_finetune},
          {"k_centroids", c.k_centroids},
          {"batch_real", c.batch_real},
          {"finetune_batch_real", c.finetune_batch_real},
          {"base_batch", c.base_batch},
          {"base_iterations", c.base_iterations},
          {"gen_iterations", c.gen_iterations},
          {"finetune_iterations", c.finetune_iterations},
          {"kmeans_max_iters", c.kmeans_max_iters},
          {"sinkhorn",
           {{"epsilon", c.sinkhorn.epsilon},
            {"max_iterations", c.sinkhorn.max_iterations},
            {"marginal_tol", c.sinkhorn.marginal_tol},
            {"log_domain", c.sinkhorn.log_domain}}},
          {"base_sgd", sgd_to_json(c.base_sgd)},
          {"gen_sgd", sgd_to_json(c.gen_sgd)},
          {"finetune_sgd", sgd_to_json(c.finetune_sgd)},
          {"generator",
           {{"hidden", c.generator.hidden},
            {"activation", c.generator.activation.kind == ActivationKind::kReLU ? "relu" : "leaky_relu"},
            {"slope", c.generator.activation.slope},
            {"init", c.generator.init == GeneratorInit::kNearIdentity ? "near_identity" : "fan_in_uniform"},
            {"near_identity_noise", c.generator.near_identity_noise}}},
          {"classifier_scale", c.classifier_scale},
          {"freeze_base_in_finetune", c.freeze_base_in_finetune},
          {"per_class_ot", c.per_class_ot},
          {"gen_loss", to_string(c.gen_loss)}};
}

StageConfig stage_config_from_json(const nlohmann::json& j, StageConfig c) {
  try {
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.t_gen = j.value("t_gen", c.t_gen);
    c.t_finetune = j.value("t_finetune", c.t_finetune);
    c.k_centroids = j.value("k_centroids", c.k_centroids);
    c.batch_real = j.value("batch_real", c.batch_real);
    c.finetune_batch_real = j.value("finetune_batch_real", c.finetune_batch_real);
    c.base_batch = j.value("base_batch", c.base_batch);
    c.base_iterations = j.value("base_iterations", c.base_iterations);
    c.gen_iterations = j.value("gen_iterations", c.gen_iterations);
    c.finetune_iterations = j.value("finetune_iterations", c.finetune_iterations);
    c.kmeans_max_iters = j.value("kmeans_max_iters", c.kmeans_max_iters);
    if (j.contains("sinkhorn")) {
      const auto& s = j["sinkhorn"];
      c.sinkhorn.epsilon = s.value("epsilon", c.sinkhorn.epsilon);
      c.sinkhorn.max_iterations = s.value("max_iterations", c.sinkhorn.max_iterations);
      c.sinkhorn.marginal_tol = s.value("marginal_tol", c.sinkhorn.marginal_tol);
      c.sinkhorn.log_domain = s.value("log_domain", c.sinkhorn.log_domain);
    }
    if (j.contains("base_sgd")) c.base_sgd = sgd_from_json(j["base_sgd"], c.base_sgd);
    if (j.contains("gen_sgd")) c.gen_sgd = sgd_from_json(j["gen_sgd"], c.gen_sgd);
    if (j.contains("finetune_sgd")) c.finetune_sgd = sgd_from_json(j["finetune_sgd"], c.finetune_sgd);
    if (j.contains("generator")) {
      const auto& g = j["generator"];
      c.generator.hidden = g.value("hidden", c.generator.hidden);
      const std::string act = g.value("activation", std::string("leaky_relu"));
      const double slope = g.value("slope", c.generator.activation.slope);
      c.generator.activation = act == "relu" ? Activation::relu() : Activation::leaky_relu(slope);
      const std::string init = g.value("init", std::string("fan_in_uniform"));
      c.generator.init = init == "near_identity" ? GeneratorInit::kNearIdentity : GeneratorInit::kFanInUniform;
      c.generator.near_identity_noise = g.value("near_identity_noise", c.generator.near_identity_noise);
    }
    c.classifier_scale = j.value("classifier_scale", c.classifier_scale);
    c.freeze_base_in_finetune = j.value("freeze_base_in_finetune", c.freeze_base_in_finetune);
    c.per_class_ot = j.value("per_class_ot", c.per_class_ot);
    if (j.contains("gen_loss")) c.gen_loss = parse_gen_loss(j["gen_loss"].get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("stage config: ") + e.what());
  }
  return c;
}

BaseTrainResult base_train(const LabeledFeatureSet& base_set, const StageConfig& cfg, Rng& rng) {
  cfg.validate();
  base_set.validate();
  const auto ids = base_set.roster.ids();
  if (!base_set.roster.novel_ids().empty()) {
    throw Error(ErrorCode::kInvalidArgument, "base_train: base set must contain base classes only");
  }
  if (ids.size() < 2) throw Error(ErrorCode::kInsufficientData, "base_train: need at least two classes");
  require_dense_ids(ids, "base_train");
  for (std::uint32_t id : ids) {
    if (base_set.indices_of(id).size() < 2) {
      throw Error(ErrorCode::kInsufficientData, "base_train: need at least two samples per class", id);
    }
  }

  Rng init_rng = rng.split(1);
  Rng batch_rng = rng.split(2);
  BaseTrainResult out;
  out.classifier = make_classifier(ids.size(), base_set.dim, init_rng, cfg.classifier_scale,
                                   1.0 / std::sqrt(static_cast<double>(base_set.dim)));
  SgdState state;
  const std::size_t batch = cfg.base_batch;
  Matrix xb(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(base_set.dim));
  std::vector<std::size_t> yb(batch);
  Matrix grad(out.classifier.prototypes.rows(), out.classifier.prototypes.cols());
  for (int step = 0; step < cfg.base_iterations; ++step) {
    for (std::size_t b = 0; b < batch; ++b) {
      const auto i = static_cast<Eigen::Index>(batch_rng.uniform_index(base_set.size()));
      xb.row(static_cast<Eigen::Index>(b)) = base_set.features.row(i);
      yb[b] = base_set.labels[static_cast<std::size_t>(i)];
    }
    grad.setZero();
    cls_batch_loss_and_grad(out.classifier, xb, yb, 1.0 / static_cast<double>(batch), &grad, nullptr);
    sgd_step(out.classifier, grad, cfg.base_sgd, state, step);
  }

  const Matrix logits = cls_forward_batch(out.classifier, base_set.features);
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    if (static_cast<std::uint32_t>(arg) == base_set.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  out.train_accuracy = static_cast<double>(correct) / static_cast<double>(base_set.size());
  out.separable = out.train_accuracy >= 0.95;
  return out;
}

double l2_match_loss(const Matrix& synthetic, const Matrix& conditioning_real, Matrix& grad) {
  if (synthetic.rows() != conditioning_real.rows() || synthetic.cols() != conditioning_real.cols()) {
    throw Error(ErrorCode::kShapeMismatch, "l2_match_loss: shapes differ");
  }
  const double m = static_cast<double>(synthetic.rows());
  const Matrix diff = synthetic - conditioning_real;
  grad = (2.0 / m) * diff;
  return diff.squaredNorm() / m;
}

double kl_match_loss(const Matrix& synthetic, const Matrix& real, Matrix& grad) {
  if (synthetic.cols() != real.cols()) throw Error(ErrorCode::kShapeMismatch, "kl_match_loss: dims differ");
  if (synthetic.rows() == 0 || real.rows() == 0) throw Error(ErrorCode::kEmptyInput, "kl_match_loss: empty batch");
  const double m = static_cast<double>(synthetic.rows());
  const Vector mu_r = real.colwise().mean().transpose();
  const Vector mu_s = synthetic.colwise().mean().transpose();
  const Matrix centered_s = synthetic.rowwise() - mu_s.transpose();
  const Matrix centered_r = real.rowwise() - mu_r.transpose();
  const Vector var_r = (centered_r.colwise().squaredNorm().transpose() / static_cast<double>(real.rows())).array() + kVarianceFloor;
  const Vector var_s = (centered_s.colwise().squaredNorm().transpose() / m).array() + kVarianceFloor;

  double kl = 0.0;
  Vector d_mu(mu_s.size());
  Vector d_var(mu_s.size());
  for (Eigen::Index j = 0; j < mu_s.size(); ++j) {
    const double gap = mu_r[j] - mu_s[j];
    kl += 0.5 * (std::log(var_s[j] / var_r[j]) + (var_r[j] + gap * gap) / var_s[j] - 1.0);
    d_mu[j] = -gap / var_s[j];
    d_var[j] = 0.5 * (1.0 / var_s[j] - (var_r[j] + gap * gap) / (var_s[j] * var_s[j]));
  }
  grad.resize(synthetic.rows(), synthetic.cols());
  for (Eigen::Index i = 0; i < synthetic.rows(); ++i) {
    grad.row(i) = (d_mu.transpose() + 2.0 * centered_s.row(i).cwiseProduct(d_var.transpose())) / m;
  }
  return kl;
}

GeneratorTrainResult train_generator(const ClassifierParams& frozen_cls, const LabeledFeatureSet& base_set,
                                     const StageConfig& cfg, Rng& rng, const GenStepObserver& observer) {
  Rng init_rng = rng.split(0x6e6574);
  GeneratorParams init = make_generator(base_set.dim, cfg.generator, init_rng);
  return train_generator(std::move(init), frozen_cls, base_set, cfg, rng, observer);
}

GeneratorTrainResult train_generator(GeneratorParams init, const ClassifierParams& frozen_cls,
                                     const LabeledFeatureSet& base_set, const StageConfig& cfg, Rng& rng,
                                     const GenStepObserver& observer) {
  cfg.validate();
  base_set.validate();
  init.validate();
  if (base_set.size() == 0) throw Error(ErrorCode::kInsufficientData, "train_generator: empty base set");
  if (init.feature_dim() != base_set.dim) {
    throw Error(ErrorCode::kDimensionMismatch, "train_generator: generator and data dimensions differ");
  }
  if (cfg.beta > 0.0) {
    if (frozen_cls.feature_dim() != base_set.dim) {
      throw Error(ErrorCode::kDimensionMismatch, "train_generator: classifier and data dimensions differ");
    }
    for (std::uint32_t label : base_set.roster.ids()) {
      if (label >= frozen_cls.class_count()) {
        throw Error(ErrorCode::kLabelOutOfRange, "train_generator: class not covered by classifier", label);
      }
    }
  }

  GeneratorTrainResult out;
  out.generator = std::move(init);
  GeneratorGrads grads = GeneratorGrads::zeros_like(out.generator);
  SgdState state;
  GeneratorCache cache;
  const auto n = static_cast<Eigen::Index>(cfg.batch_real);
  const auto d = static_cast<Eigen::Index>(base_set.dim);
  const std::size_t t = cfg.t_gen;
  Matrix x(n, d);
  std::vector<std::size_t> labels(cfg.batch_real);

  for (int step = 0; step < cfg.gen_iterations; ++step) {
    Rng step_rng = rng.split(static_cast<std::uint64_t>(step));
    Rng batch_rng = step_rng.split(0);
    Rng noise_rng = step_rng.split(1);
    Rng cluster_rng = step_rng.split(2);

    for (Eigen::Index i = 0; i < n; ++i) {
      const auto row = static_cast<Eigen::Index>(batch_rng.uniform_index(base_set.size()));
      x.row(i) = base_set.features.row(row);
      labels[static_cast<std::size_t>(i)] = base_set.labels[static_cast<std::size_t>(row)];
    }
    const Matrix x_rep = repeat_rows(x, t);
    std::vector<std::size_t> syn_labels;
    syn_labels.reserve(labels.size() * t);
    for (std::size_t label : labels) syn_labels.insert(syn_labels.end(), t, label);
    const Matrix z = gaussian_matrix(noise_rng, x_rep.rows(), d);
    const Matrix synthetic = gen_forward_batch(out.generator, x_rep, z, &cache);

    Matrix upstream = Matrix::Zero(synthetic.rows(), d);
    GenStepLog entry;
    entry.step = step;
    switch (cfg.gen_loss) {
      case GenLoss::kOT: {
        if (!cfg.per_class_ot) {
          const OtTerm term = clustered_ot(x, synthetic, cfg.k_centroids, cfg, cluster_rng, 1.0, upstream, step,
                                           &observer);
          entry.match_loss = term.loss;
          entry.sinkhorn_converged = term.converged;
          entry.sinkhorn_iterations = term.iterations;
        } else {
          // Group rows by class; each class contributes in proportion to its
          // share of the real batch.
          std::map<std::size_t, std::vector<Eigen::Index>> by_class;
          for (Eigen::Index i = 0; i < n; ++i) by_class[labels[static_cast<std::size_t>(i)]].push_back(i);
          for (const auto& [label, rows] : by_class) {
            Matrix real_c(static_cast<Eigen::Index>(rows.size()), d);
            Matrix syn_c(static_cast<Eigen::Index>(rows.size() * t), d);
            std::vector<Eigen::Index> syn_rows;
            for (std::size_t r = 0; r < rows.size(); ++r) {
              real_c.row(static_cast<Eigen::Index>(r)) = x.row(rows[r]);
              for (std::size_t s = 0; s < t; ++s) {
                const Eigen::Index src = rows[r] * static_cast<Eigen::Index>(t) + static_cast<Eigen::Index>(s);
                syn_c.row(static_cast<Eigen::Index>(syn_rows.size())) = synthetic.row(src);
                syn_rows.push_back(src);
              }
            }
            Matrix grad_c = Matrix::Zero(syn_c.rows(), d);
            Rng class_rng = cluster_rng.split(label);
            const double share = static_cast<double>(rows.size()) / static_cast<double>(n);
            const OtTerm term = clustered_ot(real_c, syn_c, cfg.k_centroids, cfg, class_rng, share, grad_c, step,
                                             nullptr);
            for (std::size_t s = 0; s < syn_rows.size(); ++s) upstream.row(syn_rows[s]) += grad_c.row(static_cast<Eigen::Index>(s));
            entry.match_loss += term.loss;
            entry.sinkhorn_converged = entry.sinkhorn_converged && term.converged;
            entry.sinkhorn_iterations = std::max(entry.sinkhorn_iterations, term.iterations);
          }
        }
        if (!entry.sinkhorn_converged) ++out.nonconverged_sinkhorn;
        break;
      }
      case GenLoss::kL2:
        entry.match_loss = l2_match_loss(synthetic, x_rep, upstream);
        break;
      case GenLoss::kKL:
        entry.match_loss = kl_match_loss(synthetic, x, upstream);
        break;
    }

    if (cfg.beta > 0.0) {
      Matrix input_grad;
      entry.syn_loss = cls_batch_loss_and_grad(frozen_cls, synthetic, syn_labels,
                                               1.0 / static_cast<double>(synthetic.rows()), nullptr, &input_grad);
      ++out.classifier_evaluations;
      upstream += cfg.beta * input_grad;
    }
    entry.gen_loss = entry.match_loss + cfg.beta * entry.syn_loss;

    grads.set_zero();
    gen_backward(out.generator, cache, upstream, grads);
    sgd_step(out.generator, grads, cfg.gen_sgd, state, step);
    out.log.push_back(entry);
  }
  out.generator.validate();
  return out;
}

FinetuneResult finetune(const GeneratorParams* frozen_gen, const ClassifierParams& cls,
                        const LabeledFeatureSet& kshot_set, const StageConfig& cfg, Rng& rng) {
  cfg.validate();
  kshot_set.validate();
  const auto ids = kshot_set.roster.ids();
  require_dense_ids(ids, "finetune");
  if (cls.feature_dim() != kshot_set.dim) {
    throw Error(ErrorCode::kDimensionMismatch, "finetune: classifier and data dimensions differ");
  }
  std::size_t shots = 0;
  for (std::uint32_t id : ids) {
    const std::size_t count = kshot_set.indices_of(id).size();
    if (count == 0) {
      if (kshot_set.roster.at(id).split == Split::kNovel) {
        throw Error(ErrorCode::kMissingNovelClasses, "finetune: novel class has no shots", id);
      }
      throw Error(ErrorCode::kInsufficientData, "finetune: base class has no shots", id);
    }
    if (shots == 0) shots = count;
    if (count != shots) throw Error(ErrorCode::kInsufficientData, "finetune: unequal shots per class", id);
  }

  ClassifierParams params;
  const std::size_t total = ids.size();
  if (cls.class_count() < total) {
    const std::size_t base_rows = cls.class_count();
    std::vector<Matrix> init;
    for (std::size_t id = base_rows; id < total; ++id) {
      if (kshot_set.roster.at(static_cast<std::uint32_t>(id)).split != Split::kNovel) {
        throw Error(ErrorCode::kInvalidArgument, "finetune: classes beyond the classifier must be novel", id);
      }
      init.push_back(kshot_set.subset(kshot_set.indices_of(static_cast<std::uint32_t>(id))).features);
    }
    Rng extend_rng = rng.split(3);
    params = extend_classifier(cls, total - base_rows, &init, extend_rng, cfg.freeze_base_in_finetune);
  } else if (cls.class_count() == total) {
    params = cls;
    if (cfg.freeze_base_in_finetune) {
      for (std::uint32_t id : kshot_set.roster.base_ids()) params.frozen[id] = true;
    }
  } else {
    throw Error(ErrorCode::kShapeMismatch, "finetune: classifier has more classes than the roster");
  }

  const bool use_generator = frozen_gen != nullptr && cfg.alpha > 0.0;
  if (use_generator) {
    frozen_gen->validate();
    if (frozen_gen->feature_dim() != kshot_set.dim) {
      throw Error(ErrorCode::kDimensionMismatch, "finetune: generator and data dimensions differ");
    }
  }

  Rng order_rng = rng.split(1);
  Rng noise_root = rng.split(2);
  FinetuneResult out;
  const std::size_t n = kshot_set.size();
  const std::size_t batch = std::min(cfg.finetune_batch_real, n);
  const auto d = static_cast<Eigen::Index>(kshot_set.dim);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;  // forces a shuffle on the first step
  SgdState state;
  Matrix grad(params.prototypes.rows(), params.prototypes.cols());
  Matrix xb(static_cast<Eigen::Index>(batch), d);
  std::vector<std::size_t> yb(batch);

  for (int step = 0; step < cfg.finetune_iterations; ++step) {
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == n) {
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[order_rng.uniform_index(i)]);
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      xb.row(static_cast<Eigen::Index>(b)) = kshot_set.features.row(static_cast<Eigen::Index>(idx));
      yb[b] = kshot_set.labels[idx];
    }
    grad.setZero();
    FinetuneStepLog entry;
    entry.step = step;
    entry.real_loss = cls_batch_loss_and_grad(params, xb, yb, 1.0 / static_cast<double>(batch), &grad, nullptr);
    if (use_generator) {
      Rng noise_rng = noise_root.split(static_cast<std::uint64_t>(step));
      const Matrix x_rep = repeat_rows(xb, cfg.t_finetune);
      const Matrix z = gaussian_matrix(noise_rng, x_rep.rows(), d);
      const Matrix synthetic = gen_forward_batch(*frozen_gen, x_rep, z);
      ++out.generator_evaluations;
      std::vector<std::size_t> syn_labels;
      syn_labels.reserve(static_cast<std::size_t>(x_rep.rows()));
      for (std::size_t label : yb) syn_labels.insert(syn_labels.end(), cfg.t_finetune, label);
      const double m = static_cast<double>(synthetic.rows());
      entry.syn_loss = cls_batch_loss_and_grad(params, synthetic, syn_labels, cfg.alpha / m, &grad, nullptr) / cfg.alpha;
    }
    sgd_step(params, grad, cfg.finetune_sgd, state, step);
    out.log.push_back(entry);
  }
  params.validate();
  out.classifier = std::move(params);
  return out;
}

EvalReport evaluate(const ClassifierParams& cls, const LabeledFeatureSet& test_set) {
  test_set.validate();
  for (std::uint32_t label : test_set.labels) {
    if (label >= cls.class_count()) {
      throw Error(ErrorCode::kUnknownClassInTestSet, "evaluate: test class unknown to the classifier", label);
    }
  }
  EvalReport report;
  std::map<std::uint32_t, std::pair<std::size_t, std::size_t>> tally;  // correct, total
  if (test_set.size() > 0) {
    const Matrix logits = cls_forward_batch(cls, test_set.features);
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      Eigen::Index arg = 0;
      logits.row(i).maxCoeff(&arg);
      const std::uint32_t label = test_set.labels[static_cast<std::size_t>(i)];
      auto& [correct, total] = tally[label];
      ++total;
      if (static_cast<std::uint32_t>(arg) == label) ++correct;
    }
  }
  double base_sum = 0.0, novel_sum = 0.0;
  std::size_t base_n = 0, novel_n = 0;
  for (const auto& [label, counts] : tally) {
    const double acc = static_cast<double>(counts.first) / static_cast<double>(counts.second);
    report.per_class_accuracy[label] = acc;
    if (test_set.roster.at(label).split == Split::kBase) {
      base_sum += acc;
      ++base_n;
    } else {
      novel_sum += acc;
      ++novel_n;
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  report.base_mean = base_n ? base_sum / static_cast<double>(base_n) : nan;
  report.novel_mean = novel_n ? novel_sum / static_cast<double>(novel_n) : nan;
  report.overall_mean = (base_n + novel_n) ? (base_sum + novel_sum) / static_cast<double>(base_n + novel_n) : nan;
  return report;
}

nlohmann::json to_json(const EvalReport& r) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [label, acc] : r.per_class_accuracy) per_class[std::to_string(label)] = acc;
  return {{"per_class_accuracy", per_class},
          {"base_mean", num(r.base_mean)},
          {"novel_mean", num(r.novel_mean)},
          {"overall_mean", num(r.overall_mean)},
          {"shots", r.shots},
          {"seed", r.seed}};
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  auto num = [](const nlohmann::json& v) {
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  };
  EvalReport r;
  try {
    for (const auto& [key, value] : j.at("per_class_accuracy").items()) {
      r.per_class_accuracy[static_cast<std::uint32_t>(std::stoul(key))] = value.get<double>();
    }
    r.base_mean = num(j.at("base_mean"));
    r.novel_mean = num(j.at("novel_mean"));
    r.overall_mean = num(j.at("overall_mean"));
    r.shots = j.value("shots", std::size_t{0});
    r.seed = j.value("seed", std::uint64_t{0});
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kFormatError, std::string("eval report: ") + e.what());
  }
  return r;
}

}  // namespace sfot
