#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfot/clustering.hpp"
#include "sfot/dataset.hpp"
#include "sfot/nnet.hpp"
#include "sfot/transport.hpp"

namespace sfot {

/// Distribution-matching term used while training the generator.
enum class GenLoss {
  kOT,  // clustered Sinkhorn OT against K-means centroids of the synthetic batch
  kL2,  // mean squared distance to the conditioning real feature
  kKL,  // KL between diagonal-Gaussian moment fits of the real and synthetic batches
};

std::string to_string(GenLoss loss);
GenLoss parse_gen_loss(const std::string& name);

struct StageConfig {
  double alpha = 0.01;  // weight of the synthetic term during fine-tuning
  double beta = 0.1;    // weight of the frozen-classifier term during generator training
  std::size_t t_gen = 16;        // synthetic features per real feature, generator training
  std::size_t t_finetune = 512;  // synthetic features per real feature, fine-tuning
  std::size_t k_centroids = 32;
  std::size_t batch_real = 64;          // real features per generator step
  std::size_t finetune_batch_real = 16; // real features per fine-tuning step
  std::size_t base_batch = 64;

  int base_iterations = 400;
  int gen_iterations = 1000;
  int finetune_iterations = 100;
  int kmeans_max_iters = 50;

  SinkhornConfig sinkhorn;
  SgdConfig base_sgd{0.1, 0.9, 0.0, {{300, 0.1}}};
  SgdConfig gen_sgd{0.02, 0.9, 0.0, {{250, 0.1}, {750, 0.1}}};
  SgdConfig finetune_sgd{0.1, 0.9, 0.0, {}};
  GeneratorArchitecture generator;
  double classifier_scale = 20.0;

  bool freeze_base_in_finetune = true;
  bool per_class_ot = false;
  GenLoss gen_loss = GenLoss::kOT;

  void validate() const;
};

nlohmann::json to_json(const StageConfig& cfg);
/// Missing keys keep their defaults.
StageConfig stage_config_from_json(const nlohmann::json& j, StageConfig base = {});

struct BaseTrainResult {
  ClassifierParams classifier;
  double train_accuracy = 0.0;
  bool separable = false;  // train_accuracy >= 0.95
};

/// Stage 1: cosine classifier over the base classes (row = class id).
BaseTrainResult base_train(const LabeledFeatureSet& base_set, const StageConfig& cfg, Rng& rng);

struct GenStepLog {
  int step = 0;
  double match_loss = 0.0;  // L_OT, or the L2/KL replacement
  double syn_loss = 0.0;
  double gen_loss = 0.0;    // match_loss + beta * syn_loss
  bool sinkhorn_converged = true;
  int sinkhorn_iterations = 0;
};

/// Per-step view of the clustered OT solve (OT loss only, whole-batch mode).
struct GenStepTrace {
  int step = 0;
  const ClusterResult* clusters = nullptr;
  const TransportPlan* plan = nullptr;
};

struct GeneratorTrainResult {
  GeneratorParams generator;
  std::vector<GenStepLog> log;
  std::size_t classifier_evaluations = 0;
  int nonconverged_sinkhorn = 0;
};

using GenStepObserver = std::function<void(const GenStepTrace&)>;

/// Stage 2: trains G on base features with L_match + beta * L_syn; the
/// classifier is frozen and only queried when beta > 0.
GeneratorTrainResult train_generator(const ClassifierParams& frozen_cls, const LabeledFeatureSet& base_set,
                                     const StageConfig& cfg, Rng& rng,
                                     const GenStepObserver& observer = {});

/// Same as above, continuing from an existing generator.
GeneratorTrainResult train_generator(GeneratorParams init, const ClassifierParams& frozen_cls,
                                     const LabeledFeatureSet& base_set, const StageConfig& cfg, Rng& rng,
                                     const GenStepObserver& observer = {});

/// Replacement losses for the generator ablation. Each returns the loss and
/// writes d loss / d synthetic into `grad`.
double l2_match_loss(const Matrix& synthetic, const Matrix& conditioning_real, Matrix& grad);
double kl_match_loss(const Matrix& synthetic, const Matrix& real, Matrix& grad);

struct FinetuneStepLog {
  int step = 0;
  double real_loss = 0.0;
  double syn_loss = 0.0;
};

struct FinetuneResult {
  ClassifierParams classifier;
  std::vector<FinetuneStepLog> log;
  std::size_t generator_evaluations = 0;
};

/// Stage 3: fine-tunes the classifier on the K-shot set with
/// L_real + alpha * L_syn. A base-only classifier is first extended with novel
/// prototypes initialized from the shots. With generator == nullptr or
/// alpha == 0 the generator is never run and no noise is drawn from the
/// real-batch stream, so both reduce to the same generator-free fine-tune.
FinetuneResult finetune(const GeneratorParams* frozen_gen, const ClassifierParams& cls,
                        const LabeledFeatureSet& kshot_set, const StageConfig& cfg, Rng& rng);

struct EvalReport {
  std::map<std::uint32_t, double> per_class_accuracy;
  double base_mean = 0.0;
  double novel_mean = 0.0;
  double overall_mean = 0.0;
  std::size_t shots = 0;
  std::uint64_t seed = 0;
};

/// Arg-max accuracy per class. Classes absent from the test set are omitted;
/// a group with no classes gets a NaN mean.
EvalReport evaluate(const ClassifierParams& cls, const LabeledFeatureSet& test_set);

nlohmann::json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& j);

}  // namespace sfot
