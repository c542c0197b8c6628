#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace oat {

// Counter-free deterministic RNG. Every logical unit of work (an episode, a
// parameter tensor, a training step) derives its own stream from (seed, tag,
// index), so results do not depend on scheduling order or thread count, and
// resuming at step t only needs t itself, not saved generator state.
class Rng {
 public:
  explicit Rng(uint64_t seed) : base_(mix(seed + 0x9E3779B97F4A7C15ull)), cur_(base_) {}

  // Child stream keyed by tag and index. Derivation uses the parent's base
  // state, not its position, so derivation order is irrelevant.
  Rng stream(std::string_view tag, uint64_t index = 0) const {
    uint64_t s = base_ ^ fnv1a(tag);
    s = mix(s);
    s = mix(s + (index + 1) * 0x9E3779B97F4A7C15ull);
    return Rng(raw{}, s);
  }

  uint64_t u64() {
    cur_ += 0x9E3779B97F4A7C15ull;
    return mix(cur_);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive bounds.
  int uniform_int(int lo, int hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(u64() % span);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.28318530717958647692 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Fisher-Yates over [0, n).
  template <typename Vec>
  void shuffle(Vec& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      int j = uniform_int(0, i);
      auto tmp = v[i];
      v[i] = v[j];
      v[j] = tmp;
    }
  }

 private:
  struct raw {};
  Rng(raw, uint64_t state) : base_(state), cur_(state) {}

  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (char ch : s) {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001B3ull;
    }
    return h;
  }

  uint64_t base_;
  uint64_t cur_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace oat
