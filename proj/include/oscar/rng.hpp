#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace oscar {

inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Combine a base seed with stream identifiers so that every consumer
// (init, data order, dropout at a given step/example) gets its own
// deterministic stream.
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0) {
  return mix64(mix64(base ^ mix64(a)) ^ mix64(b + 0x517cc1b727220a95ULL));
}

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(seed) {}

  float normal(float mean = 0.0f, float stddev = 1.0f) {
    std::normal_distribution<float> d(mean, stddev);
    return d(gen_);
  }
  float uniform(float lo = 0.0f, float hi = 1.0f) {
    std::uniform_real_distribution<float> d(lo, hi);
    return d(gen_);
  }
  // Uniform integer in [0, n).
  int index(int n) {
    std::uniform_int_distribution<int> d(0, n - 1);
    return d(gen_);
  }
  bool bernoulli(double p) {
    std::bernoulli_distribution d(p);
    return d(gen_);
  }
  template <typename T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), gen_);
  }
  template <typename T>
  const T& choice(const std::vector<T>& v) {
    return v[index(static_cast<int>(v.size()))];
  }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace oscar
