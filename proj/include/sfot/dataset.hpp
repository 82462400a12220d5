#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfot/numerics.hpp"
#include "sfot/rng.hpp"

namespace sfot {

enum class Split { kBase, kNovel };

struct ClassInfo {
  std::uint32_t id = 0;
  std::string name;
  Split split = Split::kBase;

  friend bool operator==(const ClassInfo&, const ClassInfo&) = default;
};

/// Class roster. Ids are unique, so the base and novel sets are disjoint by
/// construction; a repeated id is rejected.
class Roster {
 public:
  Roster() = default;
  explicit Roster(std::vector<ClassInfo> classes);

  const std::vector<ClassInfo>& classes() const noexcept { return classes_; }
  std::size_t size() const noexcept { return classes_.size(); }
  bool contains(std::uint32_t id) const;
  const ClassInfo& at(std::uint32_t id) const;
  std::vector<std::uint32_t> ids() const;
  std::vector<std::uint32_t> base_ids() const;
  std::vector<std::uint32_t> novel_ids() const;
  /// Roster restricted to base classes.
  Roster base_only() const;

  friend bool operator==(const Roster&, const Roster&) = default;

 private:
  std::vector<ClassInfo> classes_;  // sorted by id
};

/// Labeled feature vectors (rows of `features`) over a roster.
struct LabeledFeatureSet {
  std::size_t dim = 0;
  Matrix features;  // n x dim
  std::vector<std::uint32_t> labels;
  Roster roster;

  std::size_t size() const noexcept { return labels.size(); }
  /// Throws DimensionMismatch / FormatError on any broken invariant.
  void validate() const;
  std::vector<std::size_t> indices_of(std::uint32_t class_id) const;
  LabeledFeatureSet subset(const std::vector<std::size_t>& indices) const;

  friend bool operator==(const LabeledFeatureSet& a, const LabeledFeatureSet& b) {
    return a.dim == b.dim && a.labels == b.labels && a.roster == b.roster &&
           a.features.rows() == b.features.rows() && a.features.cols() == b.features.cols() &&
           a.features == b.features;
  }
};

/// Parameters of the Gaussian-cloud stand-in for detector features.
///
/// Class means are independent uniform directions scaled to `mean_radius`.
/// Every class shares one random orthonormal frame whose axis scales fall
/// geometrically from 1 to 1/anisotropy (rescaled to unit mean variance), so
/// within-class variation has the same shape in every class.
struct DatasetSpec {
  std::size_t dim = 32;
  std::size_t base_classes = 15;
  std::size_t novel_classes = 5;
  double mean_radius = 1.0;
  double noise_scale = 0.3;  // per-axis standard deviation before anisotropy
  double anisotropy = 6.0;
  std::size_t base_samples_per_class = 200;
  std::size_t pool_samples_per_class = 20;
  std::size_t test_samples_per_class = 100;
  std::uint64_t seed = 2024;

  void validate() const;
  /// 16 hex digits of FNV-1a over the canonical JSON form.
  std::string hash() const;

  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

void to_json(nlohmann::json& j, const DatasetSpec& spec);
void from_json(const nlohmann::json& j, DatasetSpec& spec);

/// The desk-scale reference dataset: 15 base + 5 novel classes, d = 32,
/// 200 base samples per class, moderately overlapping classes.
DatasetSpec reference_dataset_spec();

struct ClassModel {
  std::vector<Vector> means;  // indexed by class id
  Matrix mixing;              // d x d; noise = noise_scale * mixing * g
};

ClassModel class_model(const DatasetSpec& spec);

struct SyntheticDataset {
  LabeledFeatureSet base_train;  // base classes only
  LabeledFeatureSet kshot_pool;  // every class, held out
  LabeledFeatureSet test;        // every class, disjoint from the above
};

/// Features are rounded to float precision, matching the on-disk format.
SyntheticDataset make_synthetic_dataset(const DatasetSpec& spec, Rng& rng);
SyntheticDataset make_synthetic_dataset(const DatasetSpec& spec);

/// Exactly `shots` samples per roster class, without replacement; output is
/// ordered by class id, then by position in `pool`.
LabeledFeatureSet kshot_sample(const LabeledFeatureSet& pool, std::size_t shots, Rng& rng);

struct ManifestInfo {
  std::uint64_t seed = 0;
  std::string spec_hash;
};

/// "<features path>.manifest.json"
std::filesystem::path manifest_path(const std::filesystem::path& features_path);

/// Writes the OTFS binary and its manifest, each through a temp file and an
/// atomic rename.
void write_features(const std::filesystem::path& path, const LabeledFeatureSet& set,
                    const ManifestInfo& info = {});

/// Reads the OTFS binary plus manifest. Throws FormatError (with the byte
/// offset) on malformed input and DimensionMismatch when manifest and file
/// disagree on d. Nothing is returned on failure.
LabeledFeatureSet read_features(const std::filesystem::path& path, ManifestInfo* info = nullptr);

nlohmann::json roster_to_json(const Roster& roster);
Roster roster_from_json(const nlohmann::json& j);

}  // namespace sfot
