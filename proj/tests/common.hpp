#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "rng.hpp"

namespace seqctl::testing {

inline double rel_err(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
  return std::fabs(a - b) / denom;
}

// Central-difference derivative of f along coordinate i of x.
inline double central_diff(const std::function<double(const std::vector<double>&)>& f,
                           std::vector<double> x, size_t i, double h) {
  double orig = x[i];
  x[i] = orig + h;
  double up = f(x);
  x[i] = orig - h;
  double down = f(x);
  return (up - down) / (2.0 * h);
}

// Largest relative error between analytic and finite-difference gradients over
// the probed coordinates.
inline double max_grad_err(const std::function<double(const std::vector<double>&)>& f,
                           const std::vector<double>& x,
                           const std::vector<double>& grad,
                           const std::vector<size_t>& coords, double h) {
  double worst = 0.0;
  for (size_t i : coords) {
    double fd = central_diff(f, x, i, h);
    worst = std::max(worst, rel_err(grad[i], fd));
  }
  return worst;
}

inline std::vector<size_t> sample_coords(size_t n, size_t count, Rng& rng) {
  std::vector<size_t> coords;
  for (size_t i = 0; i < count; ++i)
    coords.push_back(static_cast<size_t>(
        rng.uniform_int(0, static_cast<int>(n) - 1)));
  return coords;
}

inline std::vector<double> random_vec(size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.gaussian() * scale;
  return v;
}

}  // namespace seqctl::testing
