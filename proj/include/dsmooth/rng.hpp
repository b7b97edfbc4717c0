#pragma once

// Counter-based random numbers (Philox4x32-10). Every draw is a pure function
// of (key, counter), so sample i of stream s is reproducible no matter how the
// work is batched or which thread produces it.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace dsmooth::rng {

using Counter = std::array<std::uint32_t, 4>;
using Key = std::array<std::uint32_t, 2>;

namespace detail {

constexpr std::uint32_t kWeylA = 0x9E3779B9;
constexpr std::uint32_t kWeylB = 0xBB67AE85;
constexpr std::uint32_t kMulA = 0xD2511F53;
constexpr std::uint32_t kMulB = 0xCD9E8D57;

constexpr void philox_round(Counter& ctr, const Key& key) noexcept {
  const std::uint64_t p0 = static_cast<std::uint64_t>(kMulA) * ctr[0];
  const std::uint64_t p1 = static_cast<std::uint64_t>(kMulB) * ctr[2];
  const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
  const auto lo0 = static_cast<std::uint32_t>(p0);
  const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
  const auto lo1 = static_cast<std::uint32_t>(p1);
  ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
}

}  // namespace detail

/// Philox4x32 with 10 rounds (Salmon et al., "Parallel random numbers: as easy as 1, 2, 3").
constexpr Counter philox4x32_10(Counter ctr, Key key) noexcept {
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += detail::kWeylA;
      key[1] += detail::kWeylB;
    }
    detail::philox_round(ctr, key);
  }
  return ctr;
}

/// SplitMix64 finalizer; used to fold seeds and stream ids into a Philox key.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr Key make_key(std::uint64_t seed, std::uint64_t stream) noexcept {
  const std::uint64_t k = mix64(seed ^ mix64(stream + 0x632BE59BD9B4E019ull));
  return {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
}

/// Uniform double in the open interval (0, 1) built from 53 random bits.
constexpr double to_unit_open(std::uint32_t lo, std::uint32_t hi) noexcept {
  const std::uint64_t bits = (static_cast<std::uint64_t>(hi) << 32) | lo;
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

inline std::array<double, 2> box_muller(double u1, double u2) noexcept {
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  return {r * std::cos(theta), r * std::sin(theta)};
}

/// Standard normal draws addressed by (sample, element) within one stream.
///
/// The stream id selects the key; the counter carries the sample index and
/// the element block, two normals per Philox call.
class GaussianStream {
 public:
  GaussianStream(std::uint64_t seed, std::uint64_t stream) noexcept
      : key_(make_key(seed, stream)) {}

  /// Writes sigma * N(0, 1) draws for sample `sample` into `out`.
  void fill(std::uint64_t sample, std::span<double> out, double sigma = 1.0) const noexcept {
    const auto s_lo = static_cast<std::uint32_t>(sample);
    const auto s_hi = static_cast<std::uint32_t>(sample >> 32);
    std::uint32_t block = 0;
    for (std::size_t i = 0; i < out.size(); i += 2, ++block) {
      const Counter r = philox4x32_10({block, 0u, s_lo, s_hi}, key_);
      const auto z = box_muller(to_unit_open(r[0], r[1]), to_unit_open(r[2], r[3]));
      out[i] = sigma * z[0];
      if (i + 1 < out.size()) out[i + 1] = sigma * z[1];
    }
  }

 private:
  Key key_;
};

/// Sequential generator on top of Philox; portable replacement for
/// std::mt19937 + distributions, whose outputs vary across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : key_(make_key(seed, stream)) {}

  std::uint64_t next_u64() noexcept {
    if (used_ >= 2) refill();
    const std::uint64_t v = (static_cast<std::uint64_t>(buf_[2 * used_ + 1]) << 32) |
                            buf_[2 * used_];
    ++used_;
    return v;
  }

  /// Uniform in (0, 1).
  double uniform() noexcept {
    const std::uint64_t v = next_u64();
    return (static_cast<double>(v >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  double normal() noexcept {
    const double u1 = uniform();
    const double u2 = uniform();
    return box_muller(u1, u2)[0];
  }

  /// Uniform integer in [0, bound), bound >= 1 (Lemire's multiply-shift, rejection-free
  /// bias is < 2^-64 * bound which is negligible here).
  std::uint64_t below(std::uint64_t bound) noexcept {
    const unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * bound;
    return static_cast<std::uint64_t>(m >> 64);
  }

  /// Number of 64-bit words consumed so far.
  [[nodiscard]] std::uint64_t position() const noexcept { return 2 * counter_ - (2 - used_); }

 private:
  void refill() noexcept {
    buf_ = philox4x32_10({static_cast<std::uint32_t>(counter_),
                          static_cast<std::uint32_t>(counter_ >> 32), 0u, 0u},
                         key_);
    ++counter_;
    used_ = 0;
  }

  Key key_;
  Counter buf_{};
  std::uint64_t counter_ = 0;
  int used_ = 2;
};

template <class Range>
void shuffle(Range& range, Rng& rng) {
  using std::size;
  for (std::size_t i = size(range); i > 1; --i) {
    const std::size_t j = rng.below(i);
    using std::swap;
    swap(range[i - 1], range[j]);
  }
}

}  // namespace dsmooth::rng
