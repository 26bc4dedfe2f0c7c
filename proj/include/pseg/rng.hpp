#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "pseg/common.hpp"

namespace pseg {

// Deterministic RNG. Streams for independent purposes are derived from
// (seed, stream id) through a splitmix-style mix so that adding a consumer
// never shifts the draws of another.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  static uint64_t derive(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static Rng stream(uint64_t seed, uint64_t stream_id) { return Rng(derive(seed, stream_id)); }

  float normal() { return normal_(gen_); }
  float uniform(float lo, float hi) { return lo + (hi - lo) * unit_(gen_); }
  // [0, n)
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(std::uniform_int_distribution<uint64_t>(0, static_cast<uint64_t>(n - 1))(gen_));
  }

  void fill_normal(NdArray& a, float mean = 0.0f, float stddev = 1.0f) {
    for (auto& x : a.v) x = mean + stddev * normal();
  }

  // Xavier/Glorot uniform for a (fan_in, fan_out) weight matrix.
  void fill_xavier(NdArray& a, int64_t fan_in, int64_t fan_out) {
    const float limit = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
    for (auto& x : a.v) x = uniform(-limit, limit);
  }

  template <class It>
  void shuffle(It first, It last) {
    std::shuffle(first, last, gen_);
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<float> normal_{0.0f, 1.0f};
  std::uniform_real_distribution<float> unit_{0.0f, 1.0f};
};

}  // namespace pseg
