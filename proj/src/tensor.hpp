#pragma once

#include <cstring>
#include <vector>

#include "util.hpp"

namespace seqctl {

// Dense row-major matrix of doubles. All model math runs at 64-bit precision;
// checkpoints store parameters as 32-bit floats (see checkpoint.hpp).
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

  double* row(int i) { return a.data() + static_cast<size_t>(i) * cols; }
  const double* row(int i) const { return a.data() + static_cast<size_t>(i) * cols; }
  double& at(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
  double at(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }
  double* data() { return a.data(); }
  const double* data() const { return a.data(); }
  size_t size() const { return a.size(); }

  void zero() { std::memset(a.data(), 0, a.size() * sizeof(double)); }
  void resize(int r, int c) {
    rows = r;
    cols = c;
    a.assign(static_cast<size_t>(r) * c, 0.0);
  }
};

inline double dot(const double* x, const double* y, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

inline void axpy(double alpha, const double* x, double* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace seqctl
