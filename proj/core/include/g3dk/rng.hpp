#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "g3dk/tensor.hpp"

namespace g3dk {

/// Derives an independent seed from (seed, salt, index). Used to give every
/// episode/worker its own stream so generation stays a pure function of the
/// top-level seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view salt = {}, std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ull;
    }
  };
  feed(seed);
  for (char c : salt) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  feed(index);
  // splitmix64 finalizer
  h += 0x9e3779b97f4a7c15ull;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
  return h ^ (h >> 31);
}

/// Deterministic RNG: mt19937_64 core with hand-rolled distributions, so
/// streams are bit-identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {  // inclusive bounds
    const auto span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<std::int64_t>(gen_() % span);
  }

  double normal() {  // Box-Muller, one value per draw pair
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  Rng fork(std::string_view salt, std::uint64_t index = 0) { return Rng(mix_seed(gen_(), salt, index)); }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

inline Tensor randn(Rng& rng, Shape shape, double mean = 0.0, double stddev = 1.0) {
  Tensor t{std::move(shape)};
  for (auto& v : t.data) v = mean + stddev * rng.normal();
  return t;
}

inline Tensor rand_uniform(Rng& rng, Shape shape, double lo = 0.0, double hi = 1.0) {
  Tensor t{std::move(shape)};
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace g3dk
