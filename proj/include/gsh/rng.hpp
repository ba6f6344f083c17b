#pragma once

#include <cstdint>
#include <initializer_list>

namespace gsh {

/// SplitMix64 finalizer; bijective mix on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Counter-based generator: draw i of stream `key` is mix64(key ^ mix64(i)).
// Streams derived from (seed, path...) are mutually independent and
// bit-reproducible across runs on one platform; every stochastic choice in
// the library (init, dropout masks, shuffles, synthetic poses) flows through
// this type, never through std::random devices.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  /// Derive a stream from a seed and a path of tags, e.g. {kDropout, step, site}.
  static CounterRng from_path(std::uint64_t seed,
                              std::initializer_list<std::uint64_t> path) {
    std::uint64_t k = mix64(seed);
    for (std::uint64_t p : path) k = mix64(k ^ mix64(p));
    return CounterRng(k);
  }

  std::uint64_t next_u64() { return mix64(key_ ^ mix64(counter_++)); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  /// Uniform integer in [0, n); modulo bias is ~n/2^64, immaterial here.
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Fixed stream tags so independent consumers never collide.
namespace rng_tag {
inline constexpr std::uint64_t kInit = 0x01;
inline constexpr std::uint64_t kDropout = 0x02;
inline constexpr std::uint64_t kShuffle = 0x03;
inline constexpr std::uint64_t kSynthPose = 0x04;
inline constexpr std::uint64_t kSynthCamera = 0x05;
inline constexpr std::uint64_t kSynthAction = 0x06;
}  // namespace rng_tag

}  // namespace gsh
