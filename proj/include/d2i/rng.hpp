#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>

namespace d2i {

/// Philox4x32-10 counter-based generator.
///
/// Every draw is a pure function of (key, counter), so a stream can be
/// addressed directly by coordinates such as (row, dimension) without
/// advancing any shared state.
class Philox {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Counter block(Counter ctr, Key key) {
    for (int round = 0; round < 10; ++round) {
      ctr = single_round(ctr, key);
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    return ctr;
  }

  static Key key_from_seed(std::uint64_t seed) {
    return {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  }

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  static Counter single_round(const Counter& c, const Key& k) {
    const std::uint64_t p0 = std::uint64_t{kMul0} * c[0];
    const std::uint64_t p1 = std::uint64_t{kMul1} * c[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
  }
};

inline double to_unit_double(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits = (std::uint64_t{hi} << 21) ^ (lo >> 11);
  return static_cast<double>(bits & ((std::uint64_t{1} << 53) - 1)) * 0x1.0p-53;
}

/// Stateless uniform draw in [0,1) addressed by (seed, stream, index, lane).
inline double counter_uniform(std::uint64_t seed, std::uint64_t stream, std::uint32_t index,
                              std::uint32_t lane = 0) {
  const Philox::Counter ctr = {static_cast<std::uint32_t>(stream),
                               static_cast<std::uint32_t>(stream >> 32), index, lane};
  const auto out = Philox::block(ctr, Philox::key_from_seed(seed));
  return to_unit_double(out[0], out[1]);
}

/// Sequential engine over a Philox stream. Satisfies UniformRandomBitGenerator.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(Philox::key_from_seed(seed)), stream_(stream) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    if (cached_ == 0) refill();
    const auto hi = buffer_[4 - cached_];
    const auto lo = buffer_[5 - cached_];
    cached_ -= 2;
    return (std::uint64_t{hi} << 32) | lo;
  }

  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  /// Box-Muller; portable across standard libraries unlike std::normal_distribution.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  /// Uniform integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t v = (*this)();
    while (v >= limit) v = (*this)();
    return v % n;
  }

 private:
  void refill() {
    const Philox::Counter ctr = {static_cast<std::uint32_t>(counter_),
                                 static_cast<std::uint32_t>(counter_ >> 32),
                                 static_cast<std::uint32_t>(stream_),
                                 static_cast<std::uint32_t>(stream_ >> 32)};
    buffer_ = Philox::block(ctr, key_);
    ++counter_;
    cached_ = 4;
  }

  Philox::Key key_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  Philox::Counter buffer_{};
  int cached_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Fisher-Yates shuffle driven by a CounterRng (std::shuffle is not portable).
template <typename Container>
void shuffle_in_place(Container& c, CounterRng& rng) {
  for (std::size_t i = c.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(c[i - 1], c[j]);
  }
}

}  // namespace d2i
