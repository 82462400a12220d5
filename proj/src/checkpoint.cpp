#include "sfot/checkpoint.hpp"

#include <string>

#include "sfot/error.hpp"
#include "sfot/io.hpp"

namespace sfot {
namespace {

constexpr const char* kFormat = "sfot-checkpoint";
constexpr int kVersion = 1;

nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    rows.push_back(std::vector<double>(m.row(i).data(), m.row(i).data() + m.cols()));
  }
  return rows;
}

Matrix matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols, const char* what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) {
    throw Error(ErrorCode::kDimensionMismatch, std::string(what) + ": wrong row count");
  }
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw Error(ErrorCode::kDimensionMismatch, std::string(what) + ": wrong column count",
                  static_cast<std::uint64_t>(i));
    }
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = row[static_cast<std::size_t>(k)].get<double>();
  }
  return m;
}

nlohmann::json activation_to_json(const Activation& a) {
  if (a.kind == ActivationKind::kReLU) return {{"kind", "relu"}};
  return {{"kind", "leaky_relu"}, {"slope", a.slope}};
}

Activation activation_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "relu") return Activation::relu();
  if (kind == "leaky_relu") return Activation::leaky_relu(j.at("slope").get<double>());
  throw Error(ErrorCode::kFormatError, "unknown activation '" + kind + "'");
}

}  // namespace

nlohmann::json rng_to_json(const Rng& rng) {
  return {{"algorithm", Rng::kAlgorithm}, {"seed", rng.seed()}, {"stream", rng.stream()},
          {"counter", rng.counter()}};
}

Rng rng_from_json(const nlohmann::json& j) {
  if (j.at("algorithm").get<std::string>() != Rng::kAlgorithm) {
    throw Error(ErrorCode::kFormatError, "unsupported rng algorithm");
  }
  return Rng(j.at("seed").get<std::uint64_t>(), j.at("stream").get<std::uint64_t>(),
             j.at("counter").get<std::uint64_t>());
}

nlohmann::json to_json(const Checkpoint& ckpt) {
  nlohmann::json j = {{"format", kFormat}, {"version", kVersion}, {"feature_dim", ckpt.feature_dim},
                      {"rng", rng_to_json(ckpt.rng)}, {"metadata", ckpt.metadata}};
  if (ckpt.generator) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : ckpt.generator->layers) {
      layers.push_back({{"in", layer.weight.cols()},
                        {"out", layer.weight.rows()},
                        {"weight", matrix_to_json(layer.weight)},
                        {"bias", std::vector<double>(layer.bias.data(), layer.bias.data() + layer.bias.size())}});
    }
    j["generator"] = {{"activation", activation_to_json(ckpt.generator->activation)}, {"layers", layers}};
  } else {
    j["generator"] = nullptr;
  }
  if (ckpt.classifier) {
    const auto& c = *ckpt.classifier;
    std::vector<std::size_t> frozen;
    for (std::size_t r = 0; r < c.class_count(); ++r) {
      if (c.is_frozen(r)) frozen.push_back(r);
    }
    j["classifier"] = {{"classes", c.class_count()},
                       {"dim", c.feature_dim()},
                       {"scale", c.scale},
                       {"frozen_rows", frozen},
                       {"prototypes", matrix_to_json(c.prototypes)}};
  } else {
    j["classifier"] = nullptr;
  }
  return j;
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kFormat || j.at("version").get<int>() != kVersion) {
      throw Error(ErrorCode::kFormatError, "not an sfot checkpoint (format/version)");
    }
    Checkpoint ckpt;
    ckpt.feature_dim = j.at("feature_dim").get<std::size_t>();
    ckpt.rng = rng_from_json(j.at("rng"));
    ckpt.metadata = j.value("metadata", nlohmann::json::object());
    const auto d = static_cast<Eigen::Index>(ckpt.feature_dim);

    if (j.contains("generator") && !j["generator"].is_null()) {
      const auto& g = j["generator"];
      GeneratorParams params;
      params.activation = activation_from_json(g.at("activation"));
      for (const auto& layer : g.at("layers")) {
        const auto in = layer.at("in").get<Eigen::Index>();
        const auto out = layer.at("out").get<Eigen::Index>();
        DenseLayer dl;
        dl.weight = matrix_from_json(layer.at("weight"), out, in, "generator weight");
        const auto bias = layer.at("bias").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(bias.size()) != out) {
          throw Error(ErrorCode::kDimensionMismatch, "generator bias length");
        }
        dl.bias = Eigen::Map<const Vector>(bias.data(), out);
        params.layers.push_back(std::move(dl));
      }
      params.validate();
      if (static_cast<Eigen::Index>(params.feature_dim()) != d) {
        throw Error(ErrorCode::kDimensionMismatch, "generator output dim differs from feature_dim");
      }
      params.restamp();
      ckpt.generator = std::move(params);
    }
    if (j.contains("classifier") && !j["classifier"].is_null()) {
      const auto& c = j["classifier"];
      ClassifierParams params;
      const auto classes = c.at("classes").get<Eigen::Index>();
      if (c.at("dim").get<Eigen::Index>() != d) {
        throw Error(ErrorCode::kDimensionMismatch, "classifier dim differs from feature_dim");
      }
      params.prototypes = matrix_from_json(c.at("prototypes"), classes, d, "classifier prototypes");
      params.scale = c.at("scale").get<double>();
      params.frozen.assign(static_cast<std::size_t>(classes), false);
      for (std::size_t r : c.at("frozen_rows").get<std::vector<std::size_t>>()) {
        if (r >= params.frozen.size()) throw Error(ErrorCode::kFormatError, "frozen row out of range", r);
        params.frozen[r] = true;
      }
      params.validate();
      ckpt.classifier = std::move(params);
    }
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormatError, std::string("checkpoint: ") + e.what());
  }
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, to_json(ckpt).dump(1) + "\n");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormatError, std::string("checkpoint: ") + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace sfot
