#include <gtest/gtest.h>

#include <filesystem>

#include "test_util.hpp"
#include "sfot/checkpoint.hpp"
#include "sfot/io.hpp"

using namespace sfot;
using testutil::code_of;
namespace fs = std::filesystem;

namespace {

Checkpoint sample_checkpoint() {
  Rng rng(31);
  GeneratorArchitecture arch;
  arch.hidden = {10, 10};
  Checkpoint c;
  c.feature_dim = 5;
  c.generator = make_generator(5, arch, rng);
  ClassifierParams cls = make_classifier(4, 5, rng, 20.0, 0.3);
  cls.frozen = {true, false, true, false};
  c.classifier = cls;
  c.rng = rng.split(9);
  c.rng.next_u64();
  c.metadata = {{"stage", "test"}, {"alpha", 0.01}};
  return c;
}

fs::path temp_file(const std::string& name) {
  fs::create_directories(fs::temp_directory_path() / "sfot_ckpt");
  return fs::temp_directory_path() / "sfot_ckpt" / name;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  const Checkpoint c = sample_checkpoint();
  const fs::path p = temp_file("full.json");
  write_checkpoint(p, c);
  const Checkpoint back = read_checkpoint(p);
  EXPECT_EQ(back.feature_dim, c.feature_dim);
  ASSERT_TRUE(back.generator && back.classifier);
  EXPECT_EQ(*back.generator, *c.generator);
  EXPECT_EQ(*back.classifier, *c.classifier);
  EXPECT_EQ(back.rng, c.rng);
  EXPECT_EQ(back.metadata, c.metadata);
  // Writing the loaded checkpoint reproduces the file byte for byte.
  const fs::path q = temp_file("again.json");
  write_checkpoint(q, back);
  EXPECT_EQ(read_file(p), read_file(q));
}

TEST(Checkpoint, ClassifierOnly) {
  Checkpoint c = sample_checkpoint();
  c.generator.reset();
  const fs::path p = temp_file("cls.json");
  write_checkpoint(p, c);
  const Checkpoint back = read_checkpoint(p);
  EXPECT_FALSE(back.generator.has_value());
  EXPECT_EQ(*back.classifier, *c.classifier);
}

TEST(Checkpoint, SchemaErrors) {
  nlohmann::json j = to_json(sample_checkpoint());
  nlohmann::json bad = j;
  bad["format"] = "other";
  EXPECT_EQ(code_of([&] { checkpoint_from_json(bad); }), ErrorCode::kFormatError);
  bad = j;
  bad["classifier"]["dim"] = 6;
  EXPECT_EQ(code_of([&] { checkpoint_from_json(bad); }), ErrorCode::kDimensionMismatch);
  bad = j;
  bad["classifier"]["prototypes"].erase(0);
  EXPECT_EQ(code_of([&] { checkpoint_from_json(bad); }), ErrorCode::kDimensionMismatch);
  bad = j;
  bad["rng"]["algorithm"] = "mt19937";
  EXPECT_EQ(code_of([&] { checkpoint_from_json(bad); }), ErrorCode::kFormatError);
  bad = j;
  bad.erase("feature_dim");
  EXPECT_EQ(code_of([&] { checkpoint_from_json(bad); }), ErrorCode::kFormatError);

  const fs::path p = temp_file("garbage.json");
  write_file_atomic(p, "{not json");
  EXPECT_EQ(code_of([&] { read_checkpoint(p); }), ErrorCode::kFormatError);
}
