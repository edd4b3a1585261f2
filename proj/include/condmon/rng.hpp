#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

namespace condmon {

// Deterministic PRNG (xoshiro256** seeded via splitmix64). The standard
// library engines are portable but the distributions are not, so all draws
// are implemented here. Streams can be split by string tag, which keeps
// per-demonstration randomness independent of iteration order.
class Rng {
 public:
  Rng() : Rng(0x9e3779b97f4a7c15ull) {}

  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
    has_spare_ = false;
    spare_ = 0.0;
  }

  static std::uint64_t hash_combine(std::uint64_t seed, std::string_view tag) {
    // FNV-1a over the tag, folded into the seed.
    std::uint64_t h = 1469598103934665603ull ^ seed;
    for (unsigned char c : tag) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return h;
  }

  // Independent stream for (seed, tag); used to split per demonstration id.
  static Rng split(std::uint64_t seed, std::string_view tag) {
    return Rng(hash_combine(seed, tag));
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Serialized engine state: 4 state words, spare flag, spare value bits.
  std::array<std::uint64_t, 6> serialize() const {
    std::array<std::uint64_t, 6> out{};
    for (int i = 0; i < 4; ++i) out[static_cast<std::size_t>(i)] = state_[static_cast<std::size_t>(i)];
    out[4] = has_spare_ ? 1u : 0u;
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(spare_));
    std::memcpy(&bits, &spare_, sizeof(bits));
    out[5] = bits;
    return out;
  }

  static Rng deserialize(const std::array<std::uint64_t, 6>& s) {
    Rng r(0);
    for (int i = 0; i < 4; ++i) r.state_[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(i)];
    r.has_spare_ = s[4] != 0;
    std::memcpy(&r.spare_, &s[5], sizeof(r.spare_));
    return r;
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::array<std::uint64_t, 4> state_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace condmon
