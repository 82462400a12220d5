// Command-line front end: one subcommand per pipeline stage plus the
// multi-seed experiment and ablation runners.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sfot/checkpoint.hpp"
#include "sfot/dataset.hpp"
#include "sfot/error.hpp"
#include "sfot/experiment.hpp"
#include "sfot/io.hpp"
#include "sfot/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sfot;

namespace {

constexpr const char* kBaseFile = "base_train.otfs";
constexpr const char* kPoolFile = "kshot_pool.otfs";
constexpr const char* kTestFile = "test.otfs";

struct Flags {
  std::uint64_t seed = 0;
  double alpha = 0, beta = 0, epsilon = 0;
  std::size_t t_gen = 0, t_finetune = 0, k_centroids = 0, workers = 1;
  std::vector<std::size_t> shots;
  std::string out, dataset, checkpoint, variant, config;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* alpha_opt = nullptr;
  CLI::Option* beta_opt = nullptr;
  CLI::Option* epsilon_opt = nullptr;
  CLI::Option* t_gen_opt = nullptr;
  CLI::Option* t_finetune_opt = nullptr;
  CLI::Option* k_opt = nullptr;
  CLI::Option* shots_opt = nullptr;
  CLI::Option* workers_opt = nullptr;
  CLI::Option* variant_opt = nullptr;
  CLI::Option* config_opt = nullptr;
};

bool given(const CLI::Option* opt) { return opt != nullptr && opt->count() > 0; }

std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

// Defaults, then the config file, then flags.
ExperimentConfig effective_config(const Flags& f) {
  ExperimentConfig cfg;
  if (given(f.config_opt)) {
    json j;
    try {
      j = json::parse(read_file(f.config));
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::kInvalidArgument, "config " + f.config + ": " + e.what());
    }
    cfg = experiment_config_from_json(j, cfg);
  }
  StageConfig& s = cfg.stages;
  if (given(f.alpha_opt)) s.alpha = f.alpha;
  if (given(f.beta_opt)) s.beta = f.beta;
  if (given(f.epsilon_opt)) s.sinkhorn.epsilon = f.epsilon;
  if (given(f.t_gen_opt)) s.t_gen = f.t_gen;
  if (given(f.t_finetune_opt)) s.t_finetune = f.t_finetune;
  if (given(f.k_opt)) s.k_centroids = f.k_centroids;
  if (given(f.shots_opt)) cfg.shots = f.shots;
  if (given(f.workers_opt)) cfg.workers = f.workers;
  return cfg;
}

LabeledFeatureSet load_split(const Flags& f, const char* name) { return read_features(fs::path(f.dataset) / name); }

std::size_t single_shots(const Flags& f) {
  if (!given(f.shots_opt) || f.shots.size() != 1) {
    throw Error(ErrorCode::kInvalidArgument, "--shots: exactly one value required");
  }
  return f.shots.front();
}

void write_log(const fs::path& path, const std::vector<json>& records) {
  std::string text;
  for (const auto& r : records) text += r.dump() + "\n";
  write_file_atomic(path, text);
}

void cmd_synth_data(const Flags& f) {
  ExperimentConfig cfg = effective_config(f);
  cfg.dataset.seed = f.seed;
  const SyntheticDataset data = make_synthetic_dataset(cfg.dataset);
  const fs::path dir(f.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot create " + dir.string() + ": " + ec.message());
  const ManifestInfo info{cfg.dataset.seed, cfg.dataset.hash()};
  write_features(dir / kBaseFile, data.base_train, info);
  write_features(dir / kPoolFile, data.kshot_pool, info);
  write_features(dir / kTestFile, data.test, info);
  json spec;
  to_json(spec, cfg.dataset);
  write_file_atomic(dir / "dataset_spec.json", spec.dump(2) + "\n");
}

void cmd_base_train(const Flags& f) {
  const ExperimentConfig cfg = effective_config(f);
  const LabeledFeatureSet base = load_split(f, kBaseFile);
  const Rng root(f.seed);
  Rng rng = root.split(1);
  const BaseTrainResult result = base_train(base, cfg.stages, rng);

  Checkpoint ckpt;
  ckpt.feature_dim = base.dim;
  ckpt.classifier = result.classifier;
  ckpt.rng = rng;
  ckpt.metadata = {{"stage", "base-train"},
                   {"seed", f.seed},
                   {"train_accuracy", result.train_accuracy},
                   {"separable", result.separable},
                   {"stages", to_json(cfg.stages)}};
  write_checkpoint(f.out, ckpt);
  if (!result.separable) std::cerr << "warning: base training accuracy " << result.train_accuracy << " < 0.95\n";
}

void cmd_gen_train(const Flags& f) {
  ExperimentConfig cfg = effective_config(f);
  if (given(f.variant_opt)) cfg.stages.gen_loss = parse_gen_loss(f.variant);
  const LabeledFeatureSet base = load_split(f, kBaseFile);
  Checkpoint ckpt = read_checkpoint(f.checkpoint);
  if (!ckpt.classifier) throw Error(ErrorCode::kFormatError, "checkpoint has no classifier: " + f.checkpoint);

  const Rng root(f.seed);
  Rng rng = root.split(2);
  const GeneratorTrainResult result = train_generator(*ckpt.classifier, base, cfg.stages, rng);

  std::vector<json> log;
  for (const auto& e : result.log) {
    log.push_back({{"step", e.step},
                   {"match_loss", e.match_loss},
                   {"syn_loss", e.syn_loss},
                   {"gen_loss", e.gen_loss},
                   {"sinkhorn_converged", e.sinkhorn_converged},
                   {"sinkhorn_iterations", e.sinkhorn_iterations}});
  }
  write_log(f.out + ".log.jsonl", log);

  ckpt.generator = result.generator;
  ckpt.rng = rng;
  ckpt.metadata["stage"] = "gen-train";
  ckpt.metadata["seed"] = f.seed;
  ckpt.metadata["stages"] = to_json(cfg.stages);
  ckpt.metadata["nonconverged_sinkhorn"] = result.nonconverged_sinkhorn;
  write_checkpoint(f.out, ckpt);
}

void cmd_finetune(const Flags& f) {
  ExperimentConfig cfg = effective_config(f);
  const std::size_t shots = single_shots(f);
  const std::string variant = given(f.variant_opt) ? f.variant : "sfot";
  if (variant != "sfot" && variant != "baseline") {
    throw Error(ErrorCode::kInvalidArgument, "--variant: finetune accepts sfot or baseline");
  }
  if (variant == "baseline") cfg.stages.alpha = 0.0;

  const LabeledFeatureSet pool = load_split(f, kPoolFile);
  Checkpoint ckpt = read_checkpoint(f.checkpoint);
  if (!ckpt.classifier) throw Error(ErrorCode::kFormatError, "checkpoint has no classifier: " + f.checkpoint);
  const GeneratorParams* gen = nullptr;
  if (variant == "sfot") {
    if (!ckpt.generator) throw Error(ErrorCode::kFormatError, "checkpoint has no generator: " + f.checkpoint);
    gen = &*ckpt.generator;
  }

  // Same stream layout as the experiment runner, so a CLI run reproduces a cell.
  const Rng root(f.seed);
  Rng sample_rng = root.split(100 + shots);
  const LabeledFeatureSet kshot = kshot_sample(pool, shots, sample_rng);
  Rng rng = root.split(200 + shots);
  const FinetuneResult result = finetune(gen, *ckpt.classifier, kshot, cfg.stages, rng);

  std::vector<json> log;
  for (const auto& e : result.log) {
    log.push_back({{"step", e.step}, {"real_loss", e.real_loss}, {"syn_loss", e.syn_loss}});
  }
  write_log(f.out + ".log.jsonl", log);

  ckpt.classifier = result.classifier;
  ckpt.rng = rng;
  ckpt.metadata["stage"] = "finetune";
  ckpt.metadata["seed"] = f.seed;
  ckpt.metadata["shots"] = shots;
  ckpt.metadata["variant"] = variant;
  ckpt.metadata["stages"] = to_json(cfg.stages);
  write_checkpoint(f.out, ckpt);
}

void cmd_eval(const Flags& f) {
  const LabeledFeatureSet test = load_split(f, kTestFile);
  const Checkpoint ckpt = read_checkpoint(f.checkpoint);
  if (!ckpt.classifier) throw Error(ErrorCode::kFormatError, "checkpoint has no classifier: " + f.checkpoint);
  EvalReport report = evaluate(*ckpt.classifier, test);
  report.seed = f.seed;
  report.shots = ckpt.metadata.value("shots", std::size_t{0});

  json doc = to_json(report);
  doc["variant"] = ckpt.metadata.value("variant", std::string("none"));
  doc["checkpoint_metadata"] = ckpt.metadata;
  doc["generated_at"] = timestamp();
  write_file_atomic(f.out, doc.dump(2) + "\n");
  std::cout << "base_mean=" << report.base_mean << " novel_mean=" << report.novel_mean
            << " overall_mean=" << report.overall_mean << "\n";
}

void cmd_experiment(const Flags& f, ExperimentMode mode) {
  ExperimentConfig cfg = effective_config(f);
  cfg.mode = mode;
  if (given(f.seed_opt)) cfg.seeds = {f.seed};
  if (!f.out.empty()) cfg.out_dir = f.out;
  if (given(f.variant_opt)) {
    cfg.variants.clear();
    std::stringstream ss(f.variant);
    for (std::string v; std::getline(ss, v, ',');) cfg.variants.push_back(v);
  }
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentSummary summary = run_experiment_to_files(cfg);
  std::cout << format_summary(summary);
  std::cout << "elapsed_seconds="
            << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << "\n";
}

void fail(std::string_view code, const std::string& message) {
  std::string escaped;
  for (char c : message) {
    if (c == '"' || c == '\\') escaped += '\\';
    escaped += (c == '\n') ? ' ' : c;
  }
  std::cerr << "error code=" << code << " message=\"" << escaped << "\"\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic-feature few-shot training with clustered optimal transport"};
  app.require_subcommand(1);
  Flags f;

  auto add_common = [&](CLI::App* sub, bool seed_required) {
    auto* seed = sub->add_option("--seed", f.seed, "Root seed");
    if (seed_required) seed->required();
    sub->add_option("--config", f.config, "JSON configuration file")->check(CLI::ExistingFile);
  };
  auto add_stage = [&](CLI::App* sub) {
    sub->add_option("--alpha", f.alpha, "Synthetic-loss weight during fine-tuning");
    sub->add_option("--beta", f.beta, "Classifier-loss weight during generator training");
    sub->add_option("--t-gen", f.t_gen, "Synthetic features per real feature (generator training)");
    sub->add_option("--t-finetune", f.t_finetune, "Synthetic features per real feature (fine-tuning)");
    sub->add_option("--k-centroids", f.k_centroids, "K-means centroids");
    sub->add_option("--epsilon", f.epsilon, "Sinkhorn entropic regularization");
  };

  auto* synth = app.add_subcommand("synth-data", "Generate the synthetic feature dataset");
  add_common(synth, true);
  synth->add_option("--out", f.out, "Output directory")->required();

  auto* base = app.add_subcommand("base-train", "Stage 1: train the base cosine classifier");
  add_common(base, true);
  add_stage(base);
  base->add_option("--dataset", f.dataset, "Dataset directory")->required();
  base->add_option("--out", f.out, "Output checkpoint")->required();

  auto* gen = app.add_subcommand("gen-train", "Stage 2: train the feature generator");
  add_common(gen, true);
  add_stage(gen);
  gen->add_option("--dataset", f.dataset, "Dataset directory")->required();
  gen->add_option("--checkpoint", f.checkpoint, "Base-training checkpoint")->required();
  gen->add_option("--variant", f.variant, "Matching loss: ot, l2 or kl");
  gen->add_option("--out", f.out, "Output checkpoint")->required();

  auto* ft = app.add_subcommand("finetune", "Stage 3: few-shot fine-tuning");
  add_common(ft, true);
  add_stage(ft);
  ft->add_option("--dataset", f.dataset, "Dataset directory")->required();
  ft->add_option("--checkpoint", f.checkpoint, "Generator checkpoint")->required();
  ft->add_option("--shots", f.shots, "Samples per class")->required();
  ft->add_option("--variant", f.variant, "sfot or baseline");
  ft->add_option("--out", f.out, "Output checkpoint")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  add_common(ev, true);
  ev->add_option("--dataset", f.dataset, "Dataset directory")->required();
  ev->add_option("--checkpoint", f.checkpoint, "Checkpoint to evaluate")->required();
  ev->add_option("--out", f.out, "Output report")->required();

  auto* exp = app.add_subcommand("run-experiment", "Multi-seed baseline vs generator comparison");
  auto* abl = app.add_subcommand("ablation", "Multi-seed generator-loss ablation (ot, l2, kl)");
  for (auto* sub : {exp, abl}) {
    add_common(sub, false);
    add_stage(sub);
    sub->add_option("--shots", f.shots, "Shot counts");
    sub->add_option("--workers", f.workers, "Parallel seeds");
    sub->add_option("--variant", f.variant, "Comma-separated variant subset");
    sub->add_option("--out", f.out, "Output directory");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail("InvalidArgument", e.what());
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  auto opt = [&](const char* name) { return sub->get_option_no_throw(name); };
  f.seed_opt = opt("--seed");
  f.alpha_opt = opt("--alpha");
  f.beta_opt = opt("--beta");
  f.epsilon_opt = opt("--epsilon");
  f.t_gen_opt = opt("--t-gen");
  f.t_finetune_opt = opt("--t-finetune");
  f.k_opt = opt("--k-centroids");
  f.shots_opt = opt("--shots");
  f.workers_opt = opt("--workers");
  f.variant_opt = opt("--variant");
  f.config_opt = opt("--config");

  try {
    if (sub == synth) cmd_synth_data(f);
    else if (sub == base) cmd_base_train(f);
    else if (sub == gen) cmd_gen_train(f);
    else if (sub == ft) cmd_finetune(f);
    else if (sub == ev) cmd_eval(f);
    else if (sub == exp) cmd_experiment(f, ExperimentMode::kMethod);
    else cmd_experiment(f, ExperimentMode::kAblation);
  } catch (const Error& e) {
    fail(to_string(e.code()), e.what());
    switch (category_of(e.code())) {
      case ErrorCategory::kUsage: return 2;
      case ErrorCategory::kData: return 3;
      case ErrorCategory::kNumeric: return 4;
    }
  } catch (const std::exception& e) {
    fail("Internal", e.what());
    return 1;
  }
  return 0;
}
