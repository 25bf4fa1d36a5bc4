#pragma once

// Isotropic Gaussian mixtures and finite-grid discretizations.

#include <algorithm>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ada/core.hpp"

namespace ada {

namespace detail {

/// log(sum(exp(terms))) with a max shift. Terms are summed in sorted order so
/// the result does not depend on the order in which they were supplied.
inline double log_sum_exp(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end(), std::greater<>());
  const double top = terms.front();
  if (!std::isfinite(top)) return top;
  double s = 0.0;
  for (double t : terms) s += std::exp(t - top);
  return top + std::log(s);
}

}  // namespace detail

class GaussianMixture {
 public:
  /// means: one component per row. variances are isotropic sigma^2 per component.
  GaussianMixture(Matrix means, std::vector<double> variances, std::vector<double> weights)
      : means_(std::move(means)), variances_(std::move(variances)), weights_(std::move(weights)) {
    const auto k = static_cast<std::size_t>(means_.rows());
    detail::require(k >= 1 && means_.cols() >= 1, "GaussianMixture: need at least one component");
    detail::require(variances_.size() == k && weights_.size() == k,
                    "GaussianMixture: means, variances and weights disagree in length");
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      detail::require(variances_[i] > 0.0 && std::isfinite(variances_[i]),
                      detail::concat("GaussianMixture: variance ", i, " must be positive"));
      detail::require(weights_[i] > 0.0, detail::concat("GaussianMixture: weight ", i, " must be positive"));
      total += weights_[i];
    }
    detail::require(std::abs(total - 1.0) <= 1e-12,
                    detail::concat("GaussianMixture: weights sum to ", total, ", expected 1"));
    for (std::size_t i = 0; i < k; ++i) {
      log_norm_.push_back(std::log(weights_[i]) -
                          0.5 * static_cast<double>(dim()) *
                              std::log(2.0 * std::numbers::pi * variances_[i]));
    }
  }

  int dim() const { return static_cast<int>(means_.cols()); }
  int components() const { return static_cast<int>(means_.rows()); }
  const Matrix& means() const { return means_; }
  const std::vector<double>& variances() const { return variances_; }
  const std::vector<double>& weights() const { return weights_; }

  /// Draws n states; optionally reports the component of each draw.
  Matrix sample(int n, Rng& rng, std::vector<int>* labels = nullptr) const {
    detail::require(n >= 1, "gmm_sample: n must be at least 1");
    Matrix out(n, dim());
    if (labels != nullptr) labels->assign(n, 0);
    for (int i = 0; i < n; ++i) {
      const double u = detail::uniform01(rng);
      int k = 0;
      double acc = weights_[0];
      while (k + 1 < components() && u >= acc) acc += weights_[++k];
      const double sd = std::sqrt(variances_[k]);
      for (int j = 0; j < dim(); ++j) out(i, j) = means_(k, j) + sd * detail::normal(rng);
      if (labels != nullptr) (*labels)[i] = k;
    }
    return out;
  }

  double log_pdf(std::span<const double> x) const {
    check_dim(x.size());
    std::vector<double> terms = component_terms(x);
    return detail::log_sum_exp(terms);
  }

  Vector log_pdf(const Matrix& xs) const {
    check_dim(static_cast<std::size_t>(xs.cols()));
    Vector out(xs.rows());
    for (Eigen::Index i = 0; i < xs.rows(); ++i) {
      out[i] = log_pdf(std::span<const double>(xs.row(i).data(), xs.cols()));
    }
    return out;
  }

  double energy(std::span<const double> x) const { return -log_pdf(x); }

  Vector energy(const Matrix& xs) const { return -log_pdf(xs); }

  /// Responsibilities r_k proportional to w_k N(x; mean_k, var_k I).
  Vector posterior(std::span<const double> x) const {
    check_dim(x.size());
    std::vector<double> terms = component_terms(x);
    std::vector<double> copy = terms;
    const double lse = detail::log_sum_exp(copy);
    Vector r(components());
    for (int k = 0; k < components(); ++k) r[k] = std::exp(terms[k] - lse);
    return r;
  }

  Matrix posterior(const Matrix& xs) const {
    Matrix out(xs.rows(), components());
    for (Eigen::Index i = 0; i < xs.rows(); ++i) {
      out.row(i) = posterior(std::span<const double>(xs.row(i).data(), xs.cols())).transpose();
    }
    return out;
  }

  /// Row i: gradient of log density at xs.row(i).
  Matrix grad_log_pdf(const Matrix& xs) const {
    check_dim(static_cast<std::size_t>(xs.cols()));
    Matrix g = Matrix::Zero(xs.rows(), xs.cols());
    for (Eigen::Index i = 0; i < xs.rows(); ++i) {
      std::span<const double> x(xs.row(i).data(), xs.cols());
      const Vector r = posterior(x);
      for (int k = 0; k < components(); ++k) {
        g.row(i) += (r[k] / variances_[k]) * (means_.row(k) - xs.row(i));
      }
    }
    return g;
  }

  Vector mean() const {
    Vector m = Vector::Zero(dim());
    for (int k = 0; k < components(); ++k) m += weights_[k] * means_.row(k).transpose();
    return m;
  }

  Matrix covariance() const {
    const Vector mu = mean();
    Matrix c = Matrix::Zero(dim(), dim());
    for (int k = 0; k < components(); ++k) {
      const Vector dm = means_.row(k).transpose() - mu;
      c += weights_[k] * (dm * dm.transpose());
      c.diagonal().array() += weights_[k] * variances_[k];
    }
    return c;
  }

 private:
  void check_dim(std::size_t n) const {
    if (static_cast<int>(n) != dim()) {
      throw InputError(detail::concat("GaussianMixture: point has dimension ", n, ", expected ", dim()));
    }
  }

  std::vector<double> component_terms(std::span<const double> x) const {
    std::vector<double> terms(components());
    for (int k = 0; k < components(); ++k) {
      double sq = 0.0;
      for (int j = 0; j < dim(); ++j) {
        const double d = x[j] - means_(k, j);
        sq += d * d;
      }
      terms[k] = log_norm_[k] - 0.5 * sq / variances_[k];
    }
    return terms;
  }

  Matrix means_;
  std::vector<double> variances_;
  std::vector<double> weights_;
  std::vector<double> log_norm_;
};

/// Vertices of the +-3 cube in table order: (+,+,+), (+,+,-), (+,-,+), ..., (-,-,-).
inline Matrix cube_vertices(double half_side = 3.0) {
  Matrix v(8, 3);
  for (int i = 0; i < 8; ++i) {
    v(i, 0) = (i & 4) ? -half_side : half_side;
    v(i, 1) = (i & 2) ? -half_side : half_side;
    v(i, 2) = (i & 1) ? -half_side : half_side;
  }
  return v;
}

/// Diagonal pairs (vertex, antipode), in order of first appearance.
inline constexpr int kCubeDiagonalPairs[4][2] = {{0, 7}, {1, 6}, {2, 5}, {3, 4}};

struct MixturePreset {
  GaussianMixture base;
  GaussianMixture target;
};

/// The synthetic cube benchmark. With `values_are_std_devs` the per-vertex
/// table values are read as standard deviations instead of variances.
inline MixturePreset synthetic_cube(bool values_are_std_devs = false) {
  const std::vector<double> table_base(8, 0.5);
  const std::vector<double> table_target = {0.3, 0.5, 1.0, 0.4, 0.6, 1.2, 0.5, 0.3};
  const double pair_weights[4] = {0.40, 0.30, 0.10, 0.20};
  std::vector<double> target_w(8);
  for (int p = 0; p < 4; ++p) {
    target_w[kCubeDiagonalPairs[p][0]] = pair_weights[p] / 2.0;
    target_w[kCubeDiagonalPairs[p][1]] = pair_weights[p] / 2.0;
  }
  auto var = [&](std::vector<double> v) {
    if (values_are_std_devs) for (double& x : v) x *= x;
    return v;
  };
  return {GaussianMixture(cube_vertices(), var(table_base), std::vector<double>(8, 0.125)),
          GaussianMixture(cube_vertices(), var(table_target), target_w)};
}

/// Two 8-particle templates flattened as (x0, y0, z0, x1, ...): a cube of
/// half-side 1 and the same cube stretched along x to half-side 1.9. At
/// variance 0.25 the two states sit about five standard deviations apart.
inline std::pair<Matrix, Matrix> ensemble_templates() {
  Matrix compact(1, 24), extended(1, 24);
  for (int a = 0; a < 8; ++a) {
    compact(0, 3 * a) = (a & 4) ? -1.0 : 1.0;
    compact(0, 3 * a + 1) = (a & 2) ? -1.0 : 1.0;
    compact(0, 3 * a + 2) = (a & 1) ? -1.0 : 1.0;
    extended(0, 3 * a) = 1.9 * compact(0, 3 * a);
    extended(0, 3 * a + 1) = compact(0, 3 * a + 1);
    extended(0, 3 * a + 2) = compact(0, 3 * a + 2);
  }
  return {compact, extended};
}

/// Compact/extended particle ensemble; base favors the compact state, target the extended one.
inline MixturePreset toy_ensemble(double variance = 0.25) {
  auto [compact, extended] = ensemble_templates();
  Matrix means(2, 24);
  means.row(0) = compact.row(0);
  means.row(1) = extended.row(0);
  return {GaussianMixture(means, {variance, variance}, {0.8, 0.2}),
          GaussianMixture(means, {variance, variance}, {0.3, 0.7})};
}

inline MixturePreset mixture_preset(const std::string& name) {
  if (name == "toy-ensemble-v1") return toy_ensemble();
  if (name == "synthetic-cube-v1") return synthetic_cube(false);
  if (name == "synthetic-cube-sd") return synthetic_cube(true);
  throw ConfigError("unknown mixture preset '" + name + "'");
}

struct DiscreteDist {
  Matrix points;  // one state per row
  Vector masses;

  DiscreteDist() = default;
  DiscreteDist(Matrix pts, Vector m) : points(std::move(pts)), masses(std::move(m)) {
    detail::require(points.rows() == masses.size() && masses.size() > 0,
                    "DiscreteDist: points and masses disagree in length");
    detail::require((masses.array() >= 0.0).all(), "DiscreteDist: negative mass");
    detail::require(std::abs(masses.sum() - 1.0) <= 1e-12, "DiscreteDist: masses must sum to 1");
  }

  /// 1-D convenience constructor.
  static DiscreteDist on_line(const std::vector<double>& xs, const std::vector<double>& ps) {
    Matrix pts(static_cast<Eigen::Index>(xs.size()), 1);
    for (std::size_t i = 0; i < xs.size(); ++i) pts(static_cast<Eigen::Index>(i), 0) = xs[i];
    Vector m = Eigen::Map<const Vector>(ps.data(), static_cast<Eigen::Index>(ps.size()));
    return {std::move(pts), std::move(m)};
  }

  Eigen::Index size() const { return masses.size(); }
};

struct GridSpec {
  std::vector<double> lo;
  std::vector<double> hi;
  std::vector<int> bins;
};

/// Cell mass = density at the cell center times cell volume, renormalized.
/// Cells are enumerated with the last axis varying fastest.
inline DiscreteDist grid_discretize(const GaussianMixture& g, const GridSpec& spec) {
  const std::size_t d = static_cast<std::size_t>(g.dim());
  detail::require(spec.lo.size() == d && spec.hi.size() == d && spec.bins.size() == d,
                  "grid_discretize: grid spec dimension mismatch");
  Eigen::Index cells = 1;
  for (std::size_t a = 0; a < d; ++a) {
    detail::require(spec.bins[a] >= 1, "grid_discretize: empty grid");
    detail::require(spec.hi[a] > spec.lo[a], "grid_discretize: axis range must be non-empty");
    cells *= spec.bins[a];
  }
  Matrix pts(cells, static_cast<Eigen::Index>(d));
  Vector logm(cells);
  double log_volume = 0.0;
  for (std::size_t a = 0; a < d; ++a) log_volume += std::log((spec.hi[a] - spec.lo[a]) / spec.bins[a]);
  for (Eigen::Index c = 0; c < cells; ++c) {
    Eigen::Index rem = c;
    for (std::size_t a = d; a-- > 0;) {
      const int idx = static_cast<int>(rem % spec.bins[a]);
      rem /= spec.bins[a];
      const double w = (spec.hi[a] - spec.lo[a]) / spec.bins[a];
      pts(c, static_cast<Eigen::Index>(a)) = spec.lo[a] + (idx + 0.5) * w;
    }
    logm[c] = g.log_pdf(std::span<const double>(pts.row(c).data(), d)) + log_volume;
  }
  const double top = logm.maxCoeff();
  Vector m = (logm.array() - top).exp().matrix();
  double total = 0.0;
  for (Eigen::Index c = 0; c < cells; ++c) total += m[c];
  m /= total;
  // Renormalize once more so the sum is 1 to within rounding of a single pass.
  double again = 0.0;
  for (Eigen::Index c = 0; c < cells; ++c) again += m[c];
  m /= again;
  return {std::move(pts), std::move(m)};
}

}  // namespace ada
