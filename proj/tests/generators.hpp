#pragma once

// Seeded generators for the property tests.

#include <cstdint>
#include <random>
#include <vector>

#include "ctrlot/linalg.hpp"

namespace gen {

using ctrlot::Mat;
using ctrlot::Vec;

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform(double lo = -1.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
  double normal() { return std::normal_distribution<double>()(eng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(eng_); }

  Vec vec(int n, double scale = 1.0) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v(i) = scale * uniform();
    return v;
  }
  Mat mat(int r, int c, double scale = 1.0) {
    Mat M(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) M(i, j) = scale * uniform();
    return M;
  }
  Mat spd(int n, double floor = 0.1) {
    const Mat A = mat(n, n);
    return A * A.transpose() + floor * Mat::Identity(n, n);
  }
  Vec simplex(int n, double floor = 0.05) {
    Vec w(n);
    for (int i = 0; i < n; ++i) w(i) = floor + uniform(0.0, 1.0);
    return w / w.sum();
  }
  std::vector<Vec> points(int count, int d, double scale = 1.0) {
    std::vector<Vec> out;
    for (int i = 0; i < count; ++i) out.push_back(vec(d, scale));
    return out;
  }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace gen
