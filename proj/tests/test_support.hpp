#pragma once

#include <functional>

#include "ada/core.hpp"

namespace ada::testing {

/// Central finite difference of f at p, one coordinate at a time.
inline Vector numeric_gradient(const std::function<double(const Vector&)>& f, Vector p, double h = 1e-5) {
  Vector g(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = f(p);
    p[i] = keep - h;
    const double down = f(p);
    p[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|a|_inf, floor).
inline double relative_error(const Vector& a, const Vector& b, double floor = 1e-8) {
  const double scale = std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), floor});
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
  return sd * detail::normal_matrix(r, c, rng);
}

}  // namespace ada::testing
