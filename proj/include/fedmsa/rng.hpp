#pragma once

// Counter-based random streams (Philox4x32-10). A stream is identified by a
// 64-bit key (the experiment seed) and a 64-bit stream id; the 64-bit block
// counter walks through the stream. Child streams are derived by hashing tags
// into the stream id, so every (seed, round, client, ...) tuple gets its own
// independent sequence regardless of evaluation order or thread count.
//
// All distributions are implemented here rather than through <random> so the
// bit patterns are identical across standard libraries.

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <vector>

namespace fedmsa {

namespace detail {

inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

}  // namespace detail

// Stable tags used when deriving substreams. Values are part of the
// determinism contract; do not renumber.
enum class StreamTag : std::uint64_t {
  kTrial = 1,
  kRound = 2,
  kClient = 3,
  kSelect = 4,
  kLocalStep = 5,
  kGlobalDirection = 6,
  kReport = 7,
  kData = 8,
  kPartition = 9,
  kInstance = 10,
  kInit = 11,
  kOracle = 12,
};

class Stream {
 public:
  using result_type = std::uint64_t;

  Stream() : Stream(0, 0) {}
  Stream(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), id_(stream_id) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t id() const noexcept { return id_; }

  // Independent child stream; deterministic in (seed, id, tags).
  Stream derive(std::initializer_list<std::uint64_t> tags) const {
    std::uint64_t h = detail::mix64(id_ ^ 0x5851f42d4c957f2dULL);
    for (std::uint64_t t : tags) h = detail::mix64(h ^ detail::mix64(t));
    return Stream(seed_, h);
  }
  Stream derive(StreamTag tag, std::uint64_t index) const {
    return derive({static_cast<std::uint64_t>(tag), index});
  }

  result_type operator()() { return next_u64(); }

  std::uint64_t next_u64() {
    if (buffered_ == 0) refill();
    const std::uint64_t out = (static_cast<std::uint64_t>(block_[4 - buffered_]) << 32) |
                              block_[5 - buffered_];
    buffered_ -= 2;
    return out;
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1]; safe as a log argument.
  double uniform_open0() { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

  // Uniform integer on [0, n) by Lemire's multiply-and-reject.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n <= 1) return 0;
    __uint128_t m = static_cast<__uint128_t>(next_u64()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<__uint128_t>(next_u64()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  bool coin() { return (next_u64() >> 63) != 0; }
  double sign() { return coin() ? 1.0 : -1.0; }

  // Standard normal by Box-Muller (no caching, so each call consumes exactly
  // two uniforms).
  double normal() {
    const double u1 = uniform_open0();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  void refill() {
    const std::array<std::uint32_t, 4> ctr{
        static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
        static_cast<std::uint32_t>(id_), static_cast<std::uint32_t>(id_ >> 32)};
    const std::array<std::uint32_t, 2> key{static_cast<std::uint32_t>(seed_),
                                           static_cast<std::uint32_t>(seed_ >> 32)};
    block_ = detail::philox4x32(ctr, key);
    ++counter_;
    buffered_ = 4;
  }

  std::uint64_t seed_;
  std::uint64_t id_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int buffered_ = 0;
};

}  // namespace fedmsa
