#pragma once

#include <cstdint>
#include <random>

#include "vitedit/common.hpp"

namespace vitedit {

// Thin wrapper so every consumer draws from one engine type; sequences are
// reproducible for a fixed seed on a fixed platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  float normal(float mean = 0.0f, float stddev = 1.0f) {
    std::normal_distribution<float> d(mean, stddev);
    return d(eng_);
  }
  double uniform() {
    std::uniform_real_distribution<double> d(0.0, 1.0);
    return d(eng_);
  }
  // Uniform integer in [0, n).
  int below(int n) {
    std::uniform_int_distribution<int> d(0, n - 1);
    return d(eng_);
  }
  VecF normal_vec(Eigen::Index n, float stddev = 1.0f) {
    VecF v(n);
    std::normal_distribution<float> d(0.0f, stddev);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = d(eng_);
    return v;
  }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace vitedit
