#pragma once

#include "semantix/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace semantix {

/// splitmix64 finalizer; used to derive independent substreams from one seed.
inline std::uint64_t mix_seed(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
  return mix_seed(mix_seed(a) ^ (b + 0x9e3779b97f4a7c15ULL), rest...);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n) {
  return fnv1a64(std::string_view(static_cast<const char*>(bytes), n));
}

/// Deterministic standard-normal stream (mt19937_64 + Box-Muller). The
/// transform is hand-rolled so sequences do not depend on the standard
/// library's distribution internals.
class NormalSampler {
 public:
  explicit NormalSampler(std::uint64_t seed) : eng_(seed) {}

  Real uniform() {  // in (0,1]
    return (static_cast<Real>(eng_() >> 11) + 1.0) * 0x1.0p-53;
  }

  Real next() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    Real u1 = uniform();
    Real u2 = uniform();
    Real r = std::sqrt(-2.0 * std::log(u1));
    Real a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  void fill(Array& out) {
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = next();
  }
  void fill(Tensor& out) { fill(out.array()); }

  Tensor normal_tensor(int b, int c, int h, int w) {
    Tensor t(b, c, h, w);
    fill(t);
    return t;
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return eng_() % n; }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  Real spare_ = 0.0;
};

}  // namespace semantix
