#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffdepth {

inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Stable per-stream seed derivation (sample indices, corruption draws, ...).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t s = base ^ (0x9e3779b97f4a7c15ull * (stream + 1));
  return splitmix64(s);
}

// xoshiro256++ with hand-rolled uniform/normal draws. The standard library
// distributions are implementation-defined, so everything that must replay
// bitwise (training, sampling, dataset generation) goes through this class.
// State is serializable for checkpoint resume.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : state_) w = splitmix64(sm);
    have_gauss_ = false;
    gauss_ = 0.0;
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0,1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], inclusive. Rejection sampling, no modulo bias.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw std::invalid_argument("Rng::uniform_int: hi < lo");
    const std::uint64_t n = static_cast<std::uint64_t>(hi - lo) + 1;
    if (n == 0) return static_cast<std::int64_t>(next_u64());  // full range
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return lo + static_cast<std::int64_t>(v % n);
  }

  /// Standard normal via Box-Muller; second draw of each pair is cached.
  double normal() {
    if (have_gauss_) {
      have_gauss_ = false;
      return gauss_;
    }
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0,1]
    const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    gauss_ = r * std::sin(a);
    have_gauss_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string state_hex() const {
    std::string out;
    auto word = [&out](std::uint64_t w) {
      static const char* digits = "0123456789abcdef";
      for (int i = 15; i >= 0; --i) out.push_back(digits[(w >> (4 * i)) & 0xf]);
    };
    for (auto w : state_) word(w);
    std::uint64_t g;
    static_assert(sizeof(g) == sizeof(gauss_));
    std::memcpy(&g, &gauss_, sizeof(g));
    word(g);
    word(have_gauss_ ? 1 : 0);
    return out;
  }

  void restore_hex(const std::string& hex) {
    if (hex.size() != 96) throw std::invalid_argument("Rng::restore_hex: bad state length");
    auto word = [&hex](int k) {
      std::uint64_t w = 0;
      for (int i = 0; i < 16; ++i) {
        const char c = hex[static_cast<std::size_t>(16 * k + i)];
        int d;
        if (c >= '0' && c <= '9') d = c - '0';
        else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
        else throw std::invalid_argument("Rng::restore_hex: bad hex digit");
        w = (w << 4) | static_cast<std::uint64_t>(d);
      }
      return w;
    };
    for (int k = 0; k < 4; ++k) state_[static_cast<std::size_t>(k)] = word(k);
    const std::uint64_t g = word(4);
    std::memcpy(&gauss_, &g, sizeof(gauss_));
    have_gauss_ = word(5) != 0;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<std::uint64_t, 4> state_{};
  double gauss_ = 0.0;
  bool have_gauss_ = false;
};

}  // namespace diffdepth
