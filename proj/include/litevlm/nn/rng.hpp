#pragma once

#include <cstdint>
#include <string_view>

namespace litevlm {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a64(std::string_view s,
                                       std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Counter-based generator: the i-th draw is a pure function of (key, i), so
/// streams are random-access and reproducible on every platform. Integer and
/// float conversions avoid libm entirely.
class CounterRng {
 public:
  explicit constexpr CounterRng(std::uint64_t key) : key_(splitmix64(key)) {}

  /// Independent child stream keyed by a tag (e.g. a parameter path).
  CounterRng split(std::string_view tag) const {
    return CounterRng(fnv1a64(tag, key_));
  }
  CounterRng split(std::uint64_t index) const {
    return CounterRng(splitmix64(key_ ^ splitmix64(index + 0x632BE59BD9B4E019ULL)));
  }

  std::uint64_t key() const { return key_; }

  std::uint64_t at(std::uint64_t i) const {
    return splitmix64(key_ + (i + 1) * 0x9E3779B97F4A7C15ULL);
  }
  std::uint64_t next_u64() { return at(counter_++); }

  /// Uniform in [0, 1) with 24 random bits, exactly representable as float.
  float next_float() {
    return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
  }
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
  }
  /// Uniform integer in [lo, hi] (inclusive).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace litevlm
