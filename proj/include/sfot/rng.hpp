#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace sfot {

/// Counter-based Philox4x32-10 generator.
///
/// The full state is (seed, stream, counter): every draw is a pure function of
/// it, so a stream can be replayed from any checkpoint and split into
/// independent child streams without sharing mutable state. Each call consumes
/// exactly one 128-bit block.
class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "philox4x32-10";

  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0,
               std::uint64_t counter = 0) noexcept
      : seed_(seed), stream_(stream), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::array<std::uint32_t, 4> next_block() noexcept;
  std::uint64_t next_u64() noexcept;
  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept;
  /// Unbiased integer in [0, n). n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n) noexcept;
  /// Standard normal draw (Box-Muller on one block).
  double normal() noexcept;

  /// Derive an independent stream; does not advance this generator.
  Rng split(std::uint64_t stream_id) const noexcept;

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_;
};

/// Raw Philox4x32-10 bijection, exposed for known-answer tests.
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                           std::array<std::uint32_t, 2> key) noexcept;

}  // namespace sfot
