#include "sfot/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "sfot/error.hpp"
#include "sfot/io.hpp"

namespace sfot {
namespace {

const std::vector<std::string>& mode_variants(ExperimentMode mode) {
  static const std::vector<std::string> method{"baseline", "sfot"};
  static const std::vector<std::string> ablation{"ot", "l2", "kl"};
  return mode == ExperimentMode::kMethod ? method : ablation;
}

std::string mode_name(ExperimentMode mode) { return mode == ExperimentMode::kMethod ? "method" : "ablation"; }

ExperimentMode parse_mode(const std::string& s) {
  if (s == "method") return ExperimentMode::kMethod;
  if (s == "ablation") return ExperimentMode::kAblation;
  throw Error(ErrorCode::kInvalidArgument, "experiment: unknown mode '" + s + "'");
}

std::string fixed(double v, int digits) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

void ExperimentConfig::validate() const {
  dataset.validate();
  stages.validate();
  if (seeds.empty()) throw Error(ErrorCode::kInvalidArgument, "experiment: seeds must be nonempty");
  if (shots.empty()) throw Error(ErrorCode::kInvalidArgument, "experiment: shots must be nonempty");
  for (std::size_t s : shots) {
    if (s < 1) throw Error(ErrorCode::kInvalidArgument, "experiment: shots must be >= 1");
    if (s > dataset.pool_samples_per_class) {
      throw Error(ErrorCode::kNotEnoughSamples, "experiment: shots exceed the K-shot pool", s);
    }
  }
  if (workers < 1) throw Error(ErrorCode::kInvalidArgument, "experiment: workers must be >= 1");
  const auto& known = mode_variants(mode);
  for (const auto& v : variants) {
    if (std::find(known.begin(), known.end(), v) == known.end()) {
      throw Error(ErrorCode::kInvalidArgument, "experiment: variant '" + v + "' is not valid in " + mode_name(mode) + " mode");
    }
  }
}

std::vector<std::string> ExperimentConfig::effective_variants() const {
  if (variants.empty()) return mode_variants(mode);
  // Keep the canonical order so the reference variant comes first.
  std::vector<std::string> out;
  for (const auto& v : mode_variants(mode)) {
    if (std::find(variants.begin(), variants.end(), v) != variants.end()) out.push_back(v);
  }
  return out;
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  nlohmann::json ds;
  to_json(ds, cfg.dataset);
  return {{"dataset", ds},
          {"stages", to_json(cfg.stages)},
          {"shots", cfg.shots},
          {"seeds", cfg.seeds},
          {"mode", mode_name(cfg.mode)},
          {"variants", cfg.effective_variants()},
          {"out_dir", cfg.out_dir.string()},
          {"workers", cfg.workers}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig c) {
  try {
    if (j.contains("dataset")) {
      nlohmann::json merged;
      to_json(merged, c.dataset);
      merged.update(j["dataset"]);
      from_json(merged, c.dataset);
    }
    if (j.contains("stages")) c.stages = stage_config_from_json(j["stages"], c.stages);
    if (j.contains("shots")) c.shots = j["shots"].get<std::vector<std::size_t>>();
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("mode")) c.mode = parse_mode(j["mode"].get<std::string>());
    if (j.contains("variants")) c.variants = j["variants"].get<std::vector<std::string>>();
    if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
    if (j.contains("workers")) c.workers = j["workers"].get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("experiment config: ") + e.what());
  }
  return c;
}

std::string csv_line(const ExperimentRow& row) {
  std::ostringstream os;
  os << row.variant << ',' << row.seed << ',' << row.shots << ',' << fixed(row.report.base_mean, 6) << ','
     << fixed(row.report.novel_mean, 6) << ',' << fixed(row.report.overall_mean, 6);
  return os.str();
}

std::vector<ExperimentRow> run_cell(const ExperimentConfig& cfg, const SyntheticDataset& data, std::uint64_t seed) {
  const auto variants = cfg.effective_variants();
  const Rng root(seed);

  Rng base_rng = root.split(1);
  const BaseTrainResult base = base_train(data.base_train, cfg.stages, base_rng);

  // One generator per generator-backed variant, all from the same stream.
  std::map<std::string, GeneratorParams> generators;
  for (const auto& v : variants) {
    if (v == "baseline") continue;
    StageConfig sc = cfg.stages;
    if (cfg.mode == ExperimentMode::kAblation) sc.gen_loss = parse_gen_loss(v);
    Rng gen_rng = root.split(2);
    generators.emplace(v, train_generator(base.classifier, data.base_train, sc, gen_rng).generator);
  }

  std::vector<ExperimentRow> rows;
  for (std::size_t shots : cfg.shots) {
    Rng sample_rng = root.split(100 + shots);
    const LabeledFeatureSet kshot = kshot_sample(data.kshot_pool, shots, sample_rng);
    for (const auto& v : variants) {
      StageConfig sc = cfg.stages;
      const GeneratorParams* gen = nullptr;
      if (v == "baseline") {
        sc.alpha = 0.0;
      } else {
        gen = &generators.at(v);
      }
      Rng ft_rng = root.split(200 + shots);
      const FinetuneResult ft = finetune(gen, base.classifier, kshot, sc, ft_rng);
      ExperimentRow row{v, seed, shots, evaluate(ft.classifier, data.test)};
      row.report.shots = shots;
      row.report.seed = seed;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::vector<ExperimentRow> run_experiment(const ExperimentConfig& cfg,
                                          const std::function<void(const std::vector<ExperimentRow>&)>& on_cell) {
  cfg.validate();
  const SyntheticDataset data = make_synthetic_dataset(cfg.dataset);
  const std::size_t cells = cfg.seeds.size();
  std::vector<std::optional<std::vector<ExperimentRow>>> done(cells);
  std::exception_ptr failure;
  std::mutex mu;
  std::size_t next = 0;
  std::size_t flushed = 0;

  auto worker = [&] {
    for (;;) {
      std::size_t cell;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (failure || next == cells) return;
        cell = next++;
      }
      try {
        auto rows = run_cell(cfg, data, cfg.seeds[cell]);
        std::lock_guard<std::mutex> lock(mu);
        done[cell] = std::move(rows);
        while (flushed < cells && done[flushed]) {
          if (on_cell) on_cell(*done[flushed]);
          ++flushed;
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };

  const std::size_t n_threads = std::min(cfg.workers, cells);
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<ExperimentRow> all;
  for (auto& cell : done) {
    for (auto& row : *cell) all.push_back(std::move(row));
  }
  return all;
}

ExperimentSummary summarize(const std::vector<ExperimentRow>& rows, const std::vector<std::string>& variants) {
  ExperimentSummary out;
  if (variants.empty()) return out;
  out.reference_variant = variants.front();
  std::vector<std::size_t> shot_list;
  for (const auto& r : rows) {
    if (std::find(shot_list.begin(), shot_list.end(), r.shots) == shot_list.end()) shot_list.push_back(r.shots);
  }
  std::sort(shot_list.begin(), shot_list.end());

  for (std::size_t shots : shot_list) {
    std::map<std::string, std::map<std::uint64_t, const ExperimentRow*>> by_variant;
    for (const auto& r : rows) {
      if (r.shots == shots) by_variant[r.variant][r.seed] = &r;
    }
    for (const auto& v : variants) {
      std::vector<double> novel, base;
      for (const auto& [seed, r] : by_variant[v]) {
        novel.push_back(r->report.novel_mean);
        base.push_back(r->report.base_mean);
      }
      out.cells.push_back({v, shots, novel.size(), mean_of(novel), std_of(novel), mean_of(base), std_of(base)});
    }
    const auto& ref = by_variant[out.reference_variant];
    for (std::size_t i = 1; i < variants.size(); ++i) {
      PairedDelta delta;
      delta.variant = variants[i];
      delta.shots = shots;
      for (const auto& [seed, r] : by_variant[variants[i]]) {
        const auto it = ref.find(seed);
        if (it == ref.end()) continue;
        delta.novel.push_back(r->report.novel_mean - it->second->report.novel_mean);
        delta.base.push_back(r->report.base_mean - it->second->report.base_mean);
      }
      delta.novel_mean = mean_of(delta.novel);
      delta.base_mean = mean_of(delta.base);
      out.deltas.push_back(std::move(delta));
    }
  }
  return out;
}

std::string format_summary(const ExperimentSummary& s) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "variant" << std::right << std::setw(6) << "shots" << std::setw(6) << "runs"
     << std::setw(20) << "novel acc" << std::setw(20) << "base acc" << '\n';
  for (const auto& c : s.cells) {
    os << std::left << std::setw(10) << c.variant << std::right << std::setw(6) << c.shots << std::setw(6) << c.runs
       << std::setw(20) << (fixed(100 * c.novel_mean, 2) + " +- " + fixed(100 * c.novel_std, 2)) << std::setw(20)
       << (fixed(100 * c.base_mean, 2) + " +- " + fixed(100 * c.base_std, 2)) << '\n';
  }
  if (!s.deltas.empty()) {
    os << "\npaired deltas vs " << s.reference_variant << " (accuracy points)\n";
    os << std::left << std::setw(10) << "variant" << std::right << std::setw(6) << "shots" << std::setw(12)
       << "novel" << std::setw(12) << "base" << "  per-seed novel\n";
    for (const auto& d : s.deltas) {
      os << std::left << std::setw(10) << d.variant << std::right << std::setw(6) << d.shots << std::setw(12)
         << fixed(100 * d.novel_mean, 2) << std::setw(12) << fixed(100 * d.base_mean, 2) << ' ';
      for (double x : d.novel) os << ' ' << fixed(100 * x, 2);
      os << '\n';
    }
  }
  return os.str();
}

nlohmann::json to_json(const ExperimentSummary& s) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : s.cells) {
    cells.push_back({{"variant", c.variant},
                     {"shots", c.shots},
                     {"runs", c.runs},
                     {"novel_mean", num(c.novel_mean)},
                     {"novel_std", num(c.novel_std)},
                     {"base_mean", num(c.base_mean)},
                     {"base_std", num(c.base_std)}});
  }
  nlohmann::json deltas = nlohmann::json::array();
  for (const auto& d : s.deltas) {
    deltas.push_back({{"variant", d.variant},
                      {"shots", d.shots},
                      {"novel", d.novel},
                      {"base", d.base},
                      {"novel_mean", num(d.novel_mean)},
                      {"base_mean", num(d.base_mean)}});
  }
  return {{"reference_variant", s.reference_variant}, {"cells", cells}, {"paired_deltas", deltas}};
}

ExperimentSummary run_experiment_to_files(const ExperimentConfig& cfg) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir, ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot create " + cfg.out_dir.string() + ": " + ec.message());

  const auto csv_path = cfg.out_dir / "results.csv";
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw Error(ErrorCode::kIoError, "cannot open " + csv_path.string());
  csv << kCsvHeader << '\n' << std::flush;

  const auto rows = run_experiment(cfg, [&](const std::vector<ExperimentRow>& cell) {
    for (const auto& r : cell) csv << csv_line(r) << '\n';
    csv.flush();
  });
  csv.close();

  const auto variants = cfg.effective_variants();
  ExperimentSummary summary = summarize(rows, variants);
  write_file_atomic(cfg.out_dir / "summary.txt", format_summary(summary));

  nlohmann::json row_json = nlohmann::json::array();
  for (const auto& r : rows) {
    row_json.push_back({{"variant", r.variant}, {"seed", r.seed}, {"shots", r.shots}, {"report", to_json(r.report)}});
  }
  nlohmann::json report{{"config", to_json(cfg)}, {"rows", row_json}, {"summary", to_json(summary)}};
  write_file_atomic(cfg.out_dir / "report.json", report.dump(2) + "\n");
  return summary;
}

}  // namespace sfot
