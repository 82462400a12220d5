// Acceptance runner: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli_runner.hpp"
#include "oracles.hpp"
#include "test_util.hpp"
#include "sfot/checkpoint.hpp"
#include "sfot/clustering.hpp"
#include "sfot/experiment.hpp"
#include "sfot/io.hpp"
#include "sfot/pipeline.hpp"
#include "sfot/transport.hpp"

using namespace sfot;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      if (pass) detail << " first failure: " << what << ";";
      pass = false;
    }
  }
};

Matrix uniform_cost(Rng& rng, Eigen::Index n, Eigen::Index k) {
  Matrix c(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) c(i, j) = 2.0 * rng.uniform();
  }
  return c;
}

// 1. Entropic OT at small epsilon against the exact optimum.
void sinkhorn_vs_exact(Outcome& out) {
  SinkhornConfig cfg;
  cfg.epsilon = 0.004;
  cfg.max_iterations = 200000;
  cfg.marginal_tol = 1e-9;
  double worst_gap = 0.0, worst_residual = 0.0;
  const auto t0 = Clock::now();
  for (int t = 0; t < 200; ++t) {
    Rng rng(10000 + static_cast<std::uint64_t>(t));
    const Matrix c = uniform_cost(rng, 5, 4);
    // Coprime denominators keep proper partial sums of r and c apart, so the
    // optimum has no split block structure that stalls Sinkhorn.
    const MassDistribution r(testutil::rational_marginal(rng, 5, 97));
    const MassDistribution col(testutil::rational_marginal(rng, 4, 89));
    const TransportPlan p = sinkhorn(c, r, col, cfg);
    const ExactTransport exact = exact_ot_small(c, r, col);
    const double gap = (ot_loss(p, c) - exact.value) / (c.maxCoeff() - c.minCoeff());
    double residual = 0.0;
    for (Eigen::Index i = 0; i < 5; ++i) residual = std::max(residual, std::abs(p.entries.row(i).sum() - r[static_cast<std::size_t>(i)]));
    for (Eigen::Index j = 0; j < 4; ++j) residual = std::max(residual, std::abs(p.entries.col(j).sum() - col[static_cast<std::size_t>(j)]));
    worst_gap = std::max(worst_gap, gap);
    worst_residual = std::max(worst_residual, residual);
    // Only the 1e-9 marginal slack can put the entropic plan below the optimum.
    out.require(gap >= -1e-7, "entropic cost below the exact optimum");
  }
  const double elapsed = seconds_since(t0);
  out.require(worst_gap <= 0.02, "gap above 2% of the cost range");
  out.require(worst_residual <= 1e-6, "marginal residual above 1e-6");
  out.require(elapsed < 5.0, "runtime");
  out.detail << " worst_gap_fraction=" << worst_gap << " worst_residual=" << worst_residual << " seconds=" << elapsed;
}

std::vector<double> as_vector(const Vector& v) { return {v.data(), v.data() + v.size()}; }

// 2. Analytic gradients against central differences.
void gradient_suite(Outcome& out) {
  const auto t0 = Clock::now();
  double worst_ot = 0.0, worst_gen = 0.0, worst_cls = 0.0;
  SinkhornConfig scfg;
  scfg.epsilon = 0.1;
  for (int t = 0; t < 50; ++t) {
    Rng rng(20000 + static_cast<std::uint64_t>(t));
    const auto d = static_cast<Eigen::Index>(2 + rng.uniform_index(15));

    // Fixed-plan OT gradient with respect to the centroids.
    const auto n = static_cast<Eigen::Index>(2 + rng.uniform_index(6));
    const auto k = static_cast<Eigen::Index>(2 + rng.uniform_index(5));
    const Matrix x = testutil::gaussian_matrix(rng, n, d);
    Matrix e = testutil::gaussian_matrix(rng, k, d);
    const TransportPlan p = sinkhorn(cost_matrix(x, e), MassDistribution::uniform(static_cast<std::size_t>(n)),
                                     MassDistribution(testutil::rational_marginal(rng, static_cast<std::size_t>(k))), scfg);
    const Matrix g = ot_loss_grad_centroids(x, e, p);
    const auto fd = oracle::central_diff(
        [&] {
          double v = 0.0;
          for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < k; ++j) v += p.entries(i, j) * oracle::cosine_distance(x.row(i).transpose(), e.row(j).transpose());
          }
          return v;
        },
        e.data(), static_cast<std::size_t>(e.size()));
    worst_ot = std::max(worst_ot, oracle::relative_error(oracle::flatten(g), fd));

    // Generator backward through every layer.
    GeneratorArchitecture arch;
    GeneratorParams gen = make_generator(static_cast<std::size_t>(d), arch, rng);
    const Matrix gx = testutil::gaussian_matrix(rng, 3, d), gz = testutil::gaussian_matrix(rng, 3, d);
    const Matrix w = testutil::gaussian_matrix(rng, 3, d);
    GeneratorCache cache;
    gen_forward_batch(gen, gx, gz, &cache);
    GeneratorGrads grads = GeneratorGrads::zeros_like(gen);
    gen_backward(gen, cache, w, grads);
    auto probe = [&] { return gen_forward_batch(gen, gx, gz).cwiseProduct(w).sum(); };
    for (std::size_t l = 0; l < gen.layers.size(); ++l) {
      auto& layer = gen.layers[l];
      const auto fd_w = oracle::central_diff(probe, layer.weight.data(), static_cast<std::size_t>(layer.weight.size()));
      const auto fd_b = oracle::central_diff(probe, layer.bias.data(), static_cast<std::size_t>(layer.bias.size()));
      worst_gen = std::max(worst_gen, oracle::relative_error(oracle::flatten(grads.layers[l].weight), fd_w));
      worst_gen = std::max(worst_gen, oracle::relative_error(as_vector(grads.layers[l].bias), fd_b));
    }

    // Cosine classifier: prototypes and input.
    const std::size_t classes = 2 + rng.uniform_index(6);
    ClassifierParams cls = make_classifier(classes, static_cast<std::size_t>(d), rng, 20.0, 1.0);
    Vector v = gaussian_sample(rng, static_cast<std::size_t>(d));
    const std::size_t label = rng.uniform_index(classes);
    const ClassifierLossGrad cg = cls_loss_and_grad(cls, v, label);
    auto loss = [&] { return oracle::cosine_classifier_loss(cls.prototypes, cls.scale, v, label); };
    const auto fd_p = oracle::central_diff(loss, cls.prototypes.data(), static_cast<std::size_t>(cls.prototypes.size()));
    const auto fd_x = oracle::central_diff(loss, v.data(), static_cast<std::size_t>(d));
    worst_cls = std::max(worst_cls, oracle::relative_error(oracle::flatten(cg.prototype_grad), fd_p));
    worst_cls = std::max(worst_cls, oracle::relative_error(as_vector(cg.input_grad), fd_x));
  }
  const double elapsed = seconds_since(t0);
  out.require(worst_ot <= 1e-4, "OT gradient");
  out.require(worst_gen <= 1e-4, "generator backward");
  out.require(worst_cls <= 1e-4, "classifier backward");
  out.require(elapsed < 10.0, "runtime");
  out.detail << " worst_rel_err ot=" << worst_ot << " generator=" << worst_gen << " classifier=" << worst_cls
             << " seconds=" << elapsed;
}

bool cluster_invariants_hold(const ClusterResult& res, const Matrix& points) {
  const auto k = static_cast<std::size_t>(res.centroids.rows());
  std::size_t total = 0;
  double mass = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    total += res.counts[j];
    mass += res.mass[j];
  }
  if (total != static_cast<std::size_t>(points.rows()) || std::abs(mass - 1.0) > 1e-12) return false;
  Matrix sums = Matrix::Zero(res.centroids.rows(), points.cols());
  for (Eigen::Index p = 0; p < points.rows(); ++p) {
    sums.row(static_cast<Eigen::Index>(res.assignment[static_cast<std::size_t>(p)])) += points.row(p);
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (res.counts[j] == 0) continue;
    const auto row = static_cast<Eigen::Index>(j);
    const Eigen::RowVectorXd mean = sums.row(row) / static_cast<double>(res.counts[j]);
    if ((res.centroids.row(row) - mean).cwiseAbs().maxCoeff() > 1e-10) return false;
  }
  return true;
}

// 3. Lloyd monotonicity, result invariants and two-blob recovery.
void clustering_suite(Outcome& out) {
  int monotone = 0, invariant = 0;
  for (int s = 0; s < 100; ++s) {
    Rng rng(30000 + static_cast<std::uint64_t>(s));
    const auto m = static_cast<Eigen::Index>(20 + rng.uniform_index(300));
    const std::size_t k = 1 + rng.uniform_index(16);
    const Matrix pts = testutil::gaussian_matrix(rng, m, 2 + static_cast<Eigen::Index>(rng.uniform_index(8)));
    Rng krng = rng.split(1);
    const ClusterResult res = kmeans(pts, k, 50, krng);
    bool mono = true;
    for (std::size_t i = 1; i < res.inertia_history.size(); ++i) mono = mono && res.inertia_history[i] <= res.inertia_history[i - 1];
    monotone += mono;
    invariant += cluster_invariants_hold(res, pts);
  }
  out.require(monotone == 100, "inertia increased in some run");
  out.require(invariant == 100, "ClusterResult invariant violated");

  Rng rng(31);
  Matrix pts(100, 2);
  for (Eigen::Index i = 0; i < 100; ++i) {
    pts(i, 0) = (i < 50 ? 0.0 : 10.0) + 0.01 * rng.normal();
    pts(i, 1) = 0.01 * rng.normal();
  }
  Rng krng(1);
  const ClusterResult res = kmeans(pts, 2, 50, krng);
  const Eigen::RowVectorXd m0 = pts.topRows(50).colwise().mean(), m1 = pts.bottomRows(50).colwise().mean();
  const bool order = res.centroids(0, 0) < res.centroids(1, 0);
  const double err = std::max((res.centroids.row(order ? 0 : 1) - m0).norm(), (res.centroids.row(order ? 1 : 0) - m1).norm());
  out.require(err < 0.05, "two-blob recovery");
  out.detail << " monotone_runs=" << monotone << "/100 invariant_runs=" << invariant << "/100 two_blob_err=" << err;
}

// 4. Fine-tuning with alpha = 0 never touches the generator.
void baseline_reduction(Outcome& out) {
  const ExperimentConfig cfg;
  const SyntheticDataset data = make_synthetic_dataset(cfg.dataset);
  StageConfig stages = cfg.stages;
  stages.alpha = 0.0;
  int identical = 0, total = 0;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const Rng root(seed);
    Rng base_rng = root.split(1);
    const BaseTrainResult base = base_train(data.base_train, stages, base_rng);
    Rng gen_rng = root.split(2);
    const GeneratorParams gen = make_generator(cfg.dataset.dim, stages.generator, gen_rng);
    for (std::size_t shots : cfg.shots) {
      Rng sample_rng = root.split(100 + shots);
      const LabeledFeatureSet kshot = kshot_sample(data.kshot_pool, shots, sample_rng);
      Rng a = root.split(200 + shots), b = root.split(200 + shots);
      const FinetuneResult with = finetune(&gen, base.classifier, kshot, stages, a);
      const FinetuneResult without = finetune(nullptr, base.classifier, kshot, stages, b);
      const Matrix& pa = with.classifier.prototypes;
      const Matrix& pb = without.classifier.prototypes;
      const bool same = pa.rows() == pb.rows() && pa.cols() == pb.cols() &&
                        std::memcmp(pa.data(), pb.data(), sizeof(double) * static_cast<std::size_t>(pa.size())) == 0 &&
                        with.generator_evaluations == 0 && a == b;
      identical += same;
      ++total;
    }
  }
  out.require(identical == total, "alpha = 0 run differs from the generator-free run");
  out.detail << " bitwise_identical=" << identical << "/" << total;
}

// 5. Paired multi-seed method comparison on the reference dataset.
void method_experiment(Outcome& out) {
  const ExperimentConfig cfg;
  const auto t0 = Clock::now();
  const auto rows = run_experiment(cfg);
  const double elapsed = seconds_since(t0);
  const ExperimentSummary summary = summarize(rows, cfg.effective_variants());
  std::istringstream table(format_summary(summary));
  for (std::string line; std::getline(table, line);) std::cout << "    " << line << "\n";
  for (const PairedDelta& d : summary.deltas) {
    if (d.shots == 1 || d.shots == 2) {
      out.require(d.novel_mean > 0.0, "novel delta not positive at " + std::to_string(d.shots) + "-shot");
    }
    out.require(d.base_mean > -0.02, "base accuracy dropped by 2 points or more at " + std::to_string(d.shots) + "-shot");
    out.detail << " shots" << d.shots << "_novel_delta=" << 100.0 * d.novel_mean << "pt base_delta=" << 100.0 * d.base_mean
               << "pt";
  }
  out.require(elapsed < 600.0, "runtime");
  out.detail << " seconds=" << elapsed;
}

// 6. Clustered OT step against the full synthetic-batch Sinkhorn.
void clustered_speedup(Outcome& out) {
  Rng rng(60);
  const Matrix real = testutil::gaussian_matrix(rng, 64, 32);
  const Matrix synthetic = testutil::gaussian_matrix(rng, 1024, 32);
  const StageConfig stages;
  const SinkhornConfig& scfg = stages.sinkhorn;
  std::vector<double> clustered, full;
  for (int rep = 0; rep < 20; ++rep) {
    auto t0 = Clock::now();
    Rng krng = rng.split(static_cast<std::uint64_t>(rep));
    const ClusterResult cl = kmeans(synthetic, 32, stages.kmeans_max_iters, krng);
    const TransportPlan pc = sinkhorn(cost_matrix(real, cl.centroids), MassDistribution::uniform(64),
                                      MassDistribution(cl.mass), scfg);
    clustered.push_back(seconds_since(t0));
    t0 = Clock::now();
    const TransportPlan pf = sinkhorn(cost_matrix(real, synthetic), MassDistribution::uniform(64),
                                      MassDistribution::uniform(1024), scfg);
    full.push_back(seconds_since(t0));
    out.require(std::isfinite(ot_loss(pc, cost_matrix(real, cl.centroids))) && pf.entries.allFinite(), "non-finite plan");
  }
  std::nth_element(clustered.begin(), clustered.begin() + 10, clustered.end());
  std::nth_element(full.begin(), full.begin() + 10, full.end());
  const double ratio = full[10] / clustered[10];
  out.require(ratio >= 2.0, "clustered step less than 2x faster");
  out.detail << " median_clustered_ms=" << 1e3 * clustered[10] << " median_full_ms=" << 1e3 * full[10]
             << " speedup=" << ratio;
}

// 7. Generator-loss ablation harness.
void ablation(Outcome& out) {
  ExperimentConfig cfg;
  cfg.mode = ExperimentMode::kAblation;
  cfg.seeds = {0, 1, 2};
  const auto t0 = Clock::now();
  const auto rows = run_experiment(cfg);
  const double elapsed = seconds_since(t0);
  const auto variants = cfg.effective_variants();
  out.require(rows.size() == variants.size() * cfg.seeds.size() * cfg.shots.size(), "row count");
  for (const auto& r : rows) {
    out.require(std::isfinite(r.report.novel_mean) && r.report.novel_mean >= 0.0 && r.report.novel_mean <= 1.0,
                "novel accuracy out of range");
  }
  const ExperimentSummary summary = summarize(rows, variants);
  out.require(summary.cells.size() == variants.size() * cfg.shots.size(), "summary cell count");
  const std::string text = format_summary(summary);
  for (const auto& v : variants) out.require(text.find(v) != std::string::npos, "variant missing from table");
  std::istringstream table(text);
  for (std::string line; std::getline(table, line);) std::cout << "    " << line << "\n";
  out.detail << " rows=" << rows.size() << " seconds=" << elapsed;
}

// 8. The five stage commands, run twice with the same flags.
void cli_determinism(Outcome& out, const std::string& cli) {
  const fs::path dir = fs::temp_directory_path() / "sfot_acceptance_cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string data = (dir / "data").string(), base = (dir / "base.json").string();
  const std::string gen = (dir / "gen.json").string(), ft = (dir / "ft.json").string();
  const std::string report = (dir / "report.json").string();
  const std::vector<std::vector<std::string>> commands{
      {"synth-data", "--seed", "0", "--out", data},
      {"base-train", "--seed", "0", "--dataset", data, "--out", base},
      {"gen-train", "--seed", "0", "--dataset", data, "--checkpoint", base, "--out", gen},
      {"finetune", "--seed", "0", "--dataset", data, "--checkpoint", gen, "--shots", "1", "--out", ft},
      {"eval", "--seed", "0", "--dataset", data, "--checkpoint", ft, "--out", report}};
  const std::vector<std::string> artifacts{data + "/base_train.otfs", data + "/test.otfs", base, gen, ft,
                                           gen + ".log.jsonl", ft + ".log.jsonl"};
  std::vector<std::string> first_reports, first_artifacts;
  for (int round = 0; round < 2; ++round) {
    for (const auto& args : commands) {
      const auto res = clitest::run(cli, args);
      out.require(res.exit_code == 0, args.front() + " exited with " + std::to_string(res.exit_code));
    }
    const std::string doc = clitest::strip_timestamps(nlohmann::json::parse(read_file(report))).dump();
    std::vector<std::string> files;
    for (const auto& a : artifacts) files.push_back(read_file(a));
    if (round == 0) {
      first_reports.push_back(doc);
      first_artifacts = files;
    } else {
      out.require(doc == first_reports.front(), "eval report differs");
      out.require(files == first_artifacts, "stage outputs differ");
    }
  }
  out.detail << " compared=report+" << artifacts.size() << "_artifacts";
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const std::string cli = SFOT_CLI_PATH;
  const std::vector<std::pair<const char*, std::function<void(Outcome&)>>> criteria{
      {"sinkhorn-vs-exact", sinkhorn_vs_exact},
      {"gradient-suite", gradient_suite},
      {"clustering-suite", clustering_suite},
      {"baseline-reduction", baseline_reduction},
      {"method-experiment", method_experiment},
      {"clustered-speedup", clustered_speedup},
      {"ablation-harness", ablation},
      {"cli-determinism", [&](Outcome& o) { cli_determinism(o, cli); }},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome out;
    try {
      criteria[i].second(out);
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail << " exception: " << e.what();
    }
    std::cout << (out.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << out.detail.str() << std::endl;
    all = all && out.pass;
  }
  return all ? 0 : 1;
}
