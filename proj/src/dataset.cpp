#include "sfot/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "sfot/error.hpp"
#include "sfot/io.hpp"

namespace sfot {
namespace {

constexpr char kMagic[4] = {'O', 'T', 'F', 'S'};
constexpr std::uint32_t kFormatVersion = 1;

std::string_view split_name(Split s) { return s == Split::kBase ? "base" : "novel"; }

Split parse_split(const std::string& s) {
  if (s == "base") return Split::kBase;
  if (s == "novel") return Split::kNovel;
  throw Error(ErrorCode::kFormatError, "unknown split '" + s + "' in roster");
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFFu));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) {
    if (bytes_.size() - pos_ < 4 || pos_ > bytes_.size()) {
      throw Error(ErrorCode::kFormatError, std::string("truncated file while reading ") + what, pos_);
    }
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    pos_ += 4;
    return v;
  }

  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

LabeledFeatureSet empty_set(std::size_t dim, const Roster& roster, std::size_t reserve) {
  LabeledFeatureSet set;
  set.dim = dim;
  set.roster = roster;
  set.features.resize(static_cast<Eigen::Index>(reserve), static_cast<Eigen::Index>(dim));
  set.labels.reserve(reserve);
  return set;
}

void draw_class_samples(LabeledFeatureSet& set, Eigen::Index& row, std::uint32_t class_id,
                        std::size_t count, const ClassModel& model, double noise_scale, Rng& rng) {
  const Eigen::Index d = static_cast<Eigen::Index>(set.dim);
  Vector g(d);
  for (std::size_t s = 0; s < count; ++s) {
    for (Eigen::Index i = 0; i < d; ++i) g[i] = rng.normal();
    const Vector x = model.means[class_id] + noise_scale * (model.mixing * g);
    for (Eigen::Index i = 0; i < d; ++i) set.features(row, i) = static_cast<double>(static_cast<float>(x[i]));
    set.labels.push_back(class_id);
    ++row;
  }
}

}  // namespace

Roster::Roster(std::vector<ClassInfo> classes) : classes_(std::move(classes)) {
  std::sort(classes_.begin(), classes_.end(),
            [](const ClassInfo& a, const ClassInfo& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < classes_.size(); ++i) {
    if (classes_[i].id == classes_[i - 1].id) {
      const bool crosses = classes_[i].split != classes_[i - 1].split;
      throw Error(ErrorCode::kFormatError,
                  crosses ? "roster: class id is both base and novel" : "roster: duplicate class id",
                  classes_[i].id);
    }
  }
}

bool Roster::contains(std::uint32_t id) const {
  return std::binary_search(classes_.begin(), classes_.end(), ClassInfo{id, {}, Split::kBase},
                            [](const ClassInfo& a, const ClassInfo& b) { return a.id < b.id; });
}

const ClassInfo& Roster::at(std::uint32_t id) const {
  auto it = std::lower_bound(classes_.begin(), classes_.end(), id,
                             [](const ClassInfo& a, std::uint32_t v) { return a.id < v; });
  if (it == classes_.end() || it->id != id) {
    throw Error(ErrorCode::kUnknownClassInTestSet, "class id not in roster", id);
  }
  return *it;
}

std::vector<std::uint32_t> Roster::ids() const {
  std::vector<std::uint32_t> out;
  for (const auto& c : classes_) out.push_back(c.id);
  return out;
}

std::vector<std::uint32_t> Roster::base_ids() const {
  std::vector<std::uint32_t> out;
  for (const auto& c : classes_) {
    if (c.split == Split::kBase) out.push_back(c.id);
  }
  return out;
}

std::vector<std::uint32_t> Roster::novel_ids() const {
  std::vector<std::uint32_t> out;
  for (const auto& c : classes_) {
    if (c.split == Split::kNovel) out.push_back(c.id);
  }
  return out;
}

Roster Roster::base_only() const {
  std::vector<ClassInfo> out;
  for (const auto& c : classes_) {
    if (c.split == Split::kBase) out.push_back(c);
  }
  return Roster(std::move(out));
}

void LabeledFeatureSet::validate() const {
  if (static_cast<std::size_t>(features.cols()) != dim) {
    throw Error(ErrorCode::kDimensionMismatch, "feature set: feature width differs from dim");
  }
  if (static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw Error(ErrorCode::kFormatError, "feature set: one label per feature row required");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!roster.contains(labels[i])) {
      throw Error(ErrorCode::kFormatError, "feature set: sample class id not in roster", labels[i]);
    }
    if (!features.row(static_cast<Eigen::Index>(i)).allFinite()) {
      throw Error(ErrorCode::kFormatError, "feature set: non-finite feature value", i);
    }
  }
}

std::vector<std::size_t> LabeledFeatureSet::indices_of(std::uint32_t class_id) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == class_id) out.push_back(i);
  }
  return out;
}

LabeledFeatureSet LabeledFeatureSet::subset(const std::vector<std::size_t>& indices) const {
  LabeledFeatureSet out = empty_set(dim, roster, indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    out.features.row(static_cast<Eigen::Index>(r)) = features.row(static_cast<Eigen::Index>(indices[r]));
    out.labels.push_back(labels[indices[r]]);
  }
  return out;
}

void DatasetSpec::validate() const {
  if (dim == 0 || base_classes == 0 || novel_classes == 0 || base_samples_per_class == 0 ||
      pool_samples_per_class == 0 || test_samples_per_class == 0) {
    throw Error(ErrorCode::kInvalidArgument, "dataset spec: counts must be >= 1");
  }
  if (!(mean_radius > 0.0)) throw Error(ErrorCode::kInvalidArgument, "dataset spec: mean_radius must be > 0");
  if (!(noise_scale >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "dataset spec: noise_scale must be >= 0");
  if (!(anisotropy >= 1.0)) throw Error(ErrorCode::kInvalidArgument, "dataset spec: anisotropy must be >= 1");
}

std::string DatasetSpec::hash() const {
  const nlohmann::json j = *this;
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << fnv1a64(j.dump());
  return out.str();
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"dim", s.dim},
                     {"base_classes", s.base_classes},
                     {"novel_classes", s.novel_classes},
                     {"mean_radius", s.mean_radius},
                     {"noise_scale", s.noise_scale},
                     {"anisotropy", s.anisotropy},
                     {"base_samples_per_class", s.base_samples_per_class},
                     {"pool_samples_per_class", s.pool_samples_per_class},
                     {"test_samples_per_class", s.test_samples_per_class},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  DatasetSpec d;
  s.dim = j.value("dim", d.dim);
  s.base_classes = j.value("base_classes", d.base_classes);
  s.novel_classes = j.value("novel_classes", d.novel_classes);
  s.mean_radius = j.value("mean_radius", d.mean_radius);
  s.noise_scale = j.value("noise_scale", d.noise_scale);
  s.anisotropy = j.value("anisotropy", d.anisotropy);
  s.base_samples_per_class = j.value("base_samples_per_class", d.base_samples_per_class);
  s.pool_samples_per_class = j.value("pool_samples_per_class", d.pool_samples_per_class);
  s.test_samples_per_class = j.value("test_samples_per_class", d.test_samples_per_class);
  s.seed = j.value("seed", d.seed);
}

DatasetSpec reference_dataset_spec() { return DatasetSpec{}; }

ClassModel class_model(const DatasetSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  Rng mean_rng = root.split(1);
  Rng frame_rng = root.split(2);
  const Eigen::Index d = static_cast<Eigen::Index>(spec.dim);

  ClassModel model;
  const std::size_t total = spec.base_classes + spec.novel_classes;
  for (std::size_t c = 0; c < total; ++c) {
    Vector direction = gaussian_sample(mean_rng, spec.dim);
    while (direction.norm() == 0.0) direction = gaussian_sample(mean_rng, spec.dim);
    model.means.push_back(spec.mean_radius * direction / direction.norm());
  }

  Matrix gauss(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) gauss(i, j) = frame_rng.normal();
  }
  const Matrix frame = Eigen::HouseholderQR<Matrix>(gauss).householderQ();
  Vector axis(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const double t = d > 1 ? static_cast<double>(i) / static_cast<double>(d - 1) : 0.0;
    axis[i] = std::pow(spec.anisotropy, -t);
  }
  axis *= std::sqrt(static_cast<double>(d) / axis.squaredNorm());
  model.mixing = frame * axis.asDiagonal();
  return model;
}

SyntheticDataset make_synthetic_dataset(const DatasetSpec& spec, Rng& rng) {
  const ClassModel model = class_model(spec);
  std::vector<ClassInfo> classes;
  for (std::size_t c = 0; c < spec.base_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof name, "base_%02zu", c);
    classes.push_back({static_cast<std::uint32_t>(c), name, Split::kBase});
  }
  for (std::size_t c = 0; c < spec.novel_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof name, "novel_%02zu", c);
    classes.push_back({static_cast<std::uint32_t>(spec.base_classes + c), name, Split::kNovel});
  }
  const Roster roster(std::move(classes));
  const std::size_t total = roster.size();

  Rng base_rng = rng.split(11);
  Rng pool_rng = rng.split(12);
  Rng test_rng = rng.split(13);

  SyntheticDataset out;
  out.base_train = empty_set(spec.dim, roster.base_only(), spec.base_classes * spec.base_samples_per_class);
  out.kshot_pool = empty_set(spec.dim, roster, total * spec.pool_samples_per_class);
  out.test = empty_set(spec.dim, roster, total * spec.test_samples_per_class);
  Eigen::Index base_row = 0, pool_row = 0, test_row = 0;
  for (const auto& info : roster.classes()) {
    if (info.split == Split::kBase) {
      draw_class_samples(out.base_train, base_row, info.id, spec.base_samples_per_class, model,
                         spec.noise_scale, base_rng);
    }
    draw_class_samples(out.kshot_pool, pool_row, info.id, spec.pool_samples_per_class, model,
                       spec.noise_scale, pool_rng);
    draw_class_samples(out.test, test_row, info.id, spec.test_samples_per_class, model,
                       spec.noise_scale, test_rng);
  }
  return out;
}

SyntheticDataset make_synthetic_dataset(const DatasetSpec& spec) {
  Rng rng(spec.seed);
  return make_synthetic_dataset(spec, rng);
}

LabeledFeatureSet kshot_sample(const LabeledFeatureSet& pool, std::size_t shots, Rng& rng) {
  if (shots == 0) throw Error(ErrorCode::kInvalidArgument, "kshot_sample: shots must be >= 1");
  std::vector<std::size_t> chosen;
  for (std::uint32_t id : pool.roster.ids()) {
    std::vector<std::size_t> idx = pool.indices_of(id);
    if (idx.size() < shots) {
      throw Error(ErrorCode::kNotEnoughSamples, "kshot_sample: class has fewer samples than shots", id);
    }
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < shots; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(idx.size() - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(shots);
    std::sort(idx.begin(), idx.end());
    chosen.insert(chosen.end(), idx.begin(), idx.end());
  }
  return pool.subset(chosen);
}

std::filesystem::path manifest_path(const std::filesystem::path& features_path) {
  std::filesystem::path p = features_path;
  p += ".manifest.json";
  return p;
}

nlohmann::json roster_to_json(const Roster& roster) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : roster.classes()) {
    arr.push_back({{"id", c.id}, {"name", c.name}, {"split", split_name(c.split)}});
  }
  return arr;
}

Roster roster_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw Error(ErrorCode::kFormatError, "roster must be a JSON array");
  std::vector<ClassInfo> classes;
  for (const auto& e : j) {
    classes.push_back({e.at("id").get<std::uint32_t>(), e.at("name").get<std::string>(),
                       parse_split(e.at("split").get<std::string>())});
  }
  return Roster(std::move(classes));
}

void write_features(const std::filesystem::path& path, const LabeledFeatureSet& set,
                    const ManifestInfo& info) {
  set.validate();
  std::string bytes;
  bytes.reserve(16 + set.size() * (4 + 4 * set.dim));
  bytes.append(kMagic, 4);
  put_u32(bytes, kFormatVersion);
  put_u32(bytes, static_cast<std::uint32_t>(set.size()));
  put_u32(bytes, static_cast<std::uint32_t>(set.dim));
  for (std::size_t i = 0; i < set.size(); ++i) {
    put_u32(bytes, set.labels[i]);
    for (std::size_t k = 0; k < set.dim; ++k) {
      const float v = static_cast<float>(set.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)));
      put_u32(bytes, std::bit_cast<std::uint32_t>(v));
    }
  }
  const nlohmann::json manifest = {{"format", "OTFS"},
                                   {"version", kFormatVersion},
                                   {"dim", set.dim},
                                   {"samples", set.size()},
                                   {"seed", info.seed},
                                   {"spec_hash", info.spec_hash},
                                   {"roster", roster_to_json(set.roster)}};
  write_file_atomic(path, bytes);
  write_file_atomic(manifest_path(path), manifest.dump(2) + "\n");
}

LabeledFeatureSet read_features(const std::filesystem::path& path, ManifestInfo* info) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(manifest_path(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormatError, std::string("manifest: ") + e.what());
  }
  const std::string bytes = read_file(path);
  ByteReader reader(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorCode::kFormatError, "bad magic, expected OTFS", 0);
  }
  reader.u32("magic");
  const std::uint32_t version = reader.u32("version");
  if (version != kFormatVersion) throw Error(ErrorCode::kFormatError, "unsupported OTFS version", 4);
  const std::uint32_t n = reader.u32("sample count");
  const std::uint32_t d = reader.u32("dim");

  std::size_t manifest_dim = 0;
  Roster roster;
  try {
    manifest_dim = manifest.at("dim").get<std::size_t>();
    roster = roster_from_json(manifest.at("roster"));
    if (info) {
      info->seed = manifest.value("seed", std::uint64_t{0});
      info->spec_hash = manifest.value("spec_hash", std::string{});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormatError, std::string("manifest: ") + e.what());
  }
  if (manifest_dim != d) {
    throw Error(ErrorCode::kDimensionMismatch,
                "manifest dim " + std::to_string(manifest_dim) + " != file dim " + std::to_string(d));
  }
  if (manifest.contains("samples") && manifest["samples"].get<std::size_t>() != n) {
    throw Error(ErrorCode::kFormatError, "manifest sample count differs from file", 8);
  }

  LabeledFeatureSet set = empty_set(d, roster, n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t record_at = reader.position();
    const std::uint32_t label = reader.u32("class id");
    if (!roster.contains(label)) throw Error(ErrorCode::kFormatError, "class id not in manifest roster", record_at);
    for (std::uint32_t k = 0; k < d; ++k) {
      const float v = reader.f32("feature value");
      if (!std::isfinite(v)) throw Error(ErrorCode::kFormatError, "non-finite feature value", reader.position() - 4);
      set.features(i, k) = static_cast<double>(v);
    }
    set.labels.push_back(label);
  }
  if (reader.remaining() != 0) {
    throw Error(ErrorCode::kFormatError, "trailing bytes after last record", reader.position());
  }
  return set;
}

}  // namespace sfot
