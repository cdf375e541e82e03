#pragma once

// Shared helpers for the unit and acceptance suites: random fills, central
// finite differences and random valid MIIM geometries.

#include "wrim/miim.hpp"

#include <cmath>
#include <functional>
#include <random>

namespace wrim::testing {

template <typename Scalar>
Tensor<Scalar> random_tensor(const Shape& shape, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
RowMatrix<Scalar> random_matrix(Index rows, Index cols, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  RowMatrix<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
  return m;
}

/// Rows normalised to unit L2 norm.
inline RowMatrix<double> random_unit_rows(Index rows, Index cols, Rng& rng) {
  RowMatrix<double> m = random_matrix<double>(rows, cols, rng);
  m.rowwise().normalize();
  return m;
}

/// Central differences of a scalar function over every entry of `x`.
inline Vector<double> numeric_gradient(const std::function<double(const Vector<double>&)>& f,
                                       const Vector<double>& x, double step = 1e-6) {
  Vector<double> g(x.size());
  Vector<double> probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    const double keep = probe[i];
    probe[i] = keep + step;
    const double up = f(probe);
    probe[i] = keep - step;
    const double down = f(probe);
    probe[i] = keep;
    g[i] = (up - down) / (2 * step);
  }
  return g;
}

inline double relative_error(const Vector<double>& a, const Vector<double>& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / scale;
}

/// Draws a MIIM geometry satisfying every configuration invariant.
inline MiimConfig random_miim_config(Rng& rng) {
  auto pick = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  MiimConfig cfg;
  cfg.heads = pick(1, 3);
  cfg.channel_ratio = pick(1, 3);
  const Index c2 = 4 * cfg.heads * pick(1, 2);
  cfg.in_channels = c2 * cfg.channel_ratio;
  cfg.spatial_ratio = pick(1, 3);
  cfg.pool_window = pick(1, 3);
  cfg.in_height = cfg.spatial_ratio * cfg.pool_window * pick(1, 3);
  cfg.in_width = cfg.spatial_ratio * cfg.pool_window * pick(1, 2);
  cfg.positional_embedding = pick(0, 1) == 1;
  return cfg;
}

}  // namespace wrim::testing
