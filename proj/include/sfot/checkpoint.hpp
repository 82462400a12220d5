#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>

#include <json.hpp>

#include "sfot/nnet.hpp"
#include "sfot/rng.hpp"

namespace sfot {

/// Self-describing model checkpoint. Either network may be absent (a
/// base-training checkpoint carries only the classifier).
struct Checkpoint {
  std::size_t feature_dim = 0;
  std::optional<GeneratorParams> generator;
  std::optional<ClassifierParams> classifier;
  Rng rng{0};
  /// Free-form provenance (effective configuration etc.).
  nlohmann::json metadata = nlohmann::json::object();
};

nlohmann::json to_json(const Checkpoint& ckpt);
/// Throws FormatError on schema violations, DimensionMismatch on shape
/// inconsistencies.
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

nlohmann::json rng_to_json(const Rng& rng);
Rng rng_from_json(const nlohmann::json& j);

}  // namespace sfot
