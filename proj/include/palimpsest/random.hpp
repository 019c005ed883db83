#pragma once

// Counter-based random streams (Philox4x32-10).
//
// A RandomSource is addressed by (seed, stream). Draw number i of a source is a
// pure function of (seed, stream, i), so any schedule that hands stream j to
// work item j reproduces the same bits regardless of thread count.

#include <array>
#include <cstdint>
#include <limits>
#include <span>

namespace palimpsest {

using PhiloxBlock = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

PhiloxBlock philox4x32_10(PhiloxBlock counter, PhiloxKey key) noexcept;

class RandomSource {
 public:
  using result_type = std::uint64_t;

  explicit RandomSource(std::uint64_t seed = 0, std::uint64_t stream = 0) noexcept
      : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t position() const noexcept { return position_; }

  // Independent child source. Children of distinct (seed, stream) parents
  // or with distinct ids do not share draws.
  RandomSource substream(std::uint64_t id) const noexcept;

  std::uint64_t next_u64() noexcept;
  std::uint64_t operator()() noexcept { return next_u64(); }
  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

  // [0, 1) with 53 bits of resolution.
  double uniform() noexcept;
  // Unbiased integer in [0, bound); bound must be > 0.
  std::uint64_t uniform_below(std::uint64_t bound) noexcept;
  double normal() noexcept;
  bool bernoulli(double p) noexcept { return uniform() < p; }

  template <class T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t position_ = 0;  // 128-bit block index
  std::uint64_t buffered_ = 0;
  bool has_buffered_ = false;
};

}  // namespace palimpsest
