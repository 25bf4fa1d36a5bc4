#pragma once

// Reference solutions: the single-observable tilt, an exact solver for the
// soft-constrained problem on finite grids, and brute-force transport costs.

#include <numeric>

#include "ada/densities.hpp"

namespace ada {

/// W1 between two distributions on the real line: integral of |F_p - F_q|.
inline double w1_discrete_1d(const DiscreteDist& p, const DiscreteDist& q) {
  detail::require(p.points.cols() == 1 && q.points.cols() == 1, "w1_discrete_1d: distributions must be 1-D");
  std::vector<std::pair<double, double>> ev;  // (location, mass_p - mass_q)
  ev.reserve(static_cast<std::size_t>(p.size() + q.size()));
  for (Eigen::Index i = 0; i < p.size(); ++i) ev.emplace_back(p.points(i, 0), p.masses[i]);
  for (Eigen::Index i = 0; i < q.size(); ++i) ev.emplace_back(q.points(i, 0), -q.masses[i]);
  std::sort(ev.begin(), ev.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double cdf_diff = 0.0, total = 0.0;
  for (std::size_t k = 0; k < ev.size(); ++k) {
    if (k > 0) total += std::abs(cdf_diff) * (ev[k].first - ev[k - 1].first);
    cdf_diff += ev[k].second;
  }
  return total;
}

/// min over permutations of the mean matched cost; rows are points (Euclidean cost).
inline double w1_assignment_bruteforce(const Matrix& a, const Matrix& b) {
  detail::require(a.rows() == b.rows(), "w1_assignment_bruteforce: sets must have equal size");
  detail::require(a.cols() == b.cols(), "w1_assignment_bruteforce: dimension mismatch");
  detail::require(a.rows() >= 1 && a.rows() <= 8, "w1_assignment_bruteforce: size must be in [1, 8]");
  const auto n = static_cast<int>(a.rows());
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += (a.row(i) - b.row(perm[i])).norm();
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / n;
}

inline double w1_assignment_bruteforce(const Vector& a, const Vector& b) {
  return w1_assignment_bruteforce(Matrix(a), Matrix(b));
}

/// KL(p || q) for masses on a common support.
inline double kl_discrete(const Vector& p, const Vector& q) {
  detail::require(p.size() == q.size(), "kl_discrete: support mismatch");
  double s = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
    s += p[i] * std::log(p[i] / q[i]);
  }
  return s;
}

/// Pushforward of masses on the grid through per-point observable values.
inline DiscreteDist pushforward_1d(const Vector& masses, const Vector& values) {
  detail::require(masses.size() == values.size(), "pushforward: one observable value per grid point required");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(values.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return values[i] < values[j]; });
  std::vector<double> xs, ps;
  for (auto i : order) {
    if (!xs.empty() && values[i] == xs.back()) {
      ps.back() += masses[i];
    } else {
      xs.push_back(values[i]);
      ps.push_back(masses[i]);
    }
  }
  const double total = std::accumulate(ps.begin(), ps.end(), 0.0);
  for (double& p : ps) p /= total;
  return DiscreteDist::on_line(xs, ps);
}

// ---- tilt ----

/// Base reweighted by target/base marginal ratios of a discrete observable.
struct DiscreteTilt {
  Vector weights;  // per grid point
  DiscreteDist tilted;
};

/// `target` lives on observable values; every value it charges must be hit
/// by some base point with positive mass.
inline DiscreteTilt analytic_tilt(const DiscreteDist& base, const Vector& values, const DiscreteDist& target,
                                  double match_tol = 1e-12) {
  detail::require(values.size() == base.size(), "analytic_tilt: one observable value per base point required");
  detail::require(target.points.cols() == 1, "analytic_tilt: target must be 1-D");
  const Eigen::Index n = base.size();
  std::vector<int> slot(static_cast<std::size_t>(n), -1);
  Vector base_marginal = Vector::Zero(target.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index t = 0; t < target.size(); ++t) {
      if (std::abs(values[i] - target.points(t, 0)) <= match_tol) {
        slot[static_cast<std::size_t>(i)] = static_cast<int>(t);
        base_marginal[t] += base.masses[i];
        break;
      }
    }
  }
  for (Eigen::Index t = 0; t < target.size(); ++t) {
    if (target.masses[t] > 0.0 && base_marginal[t] <= 0.0) {
      throw NumericalError(detail::concat("analytic_tilt: target value ", target.points(t, 0),
                                          " has no base mass; the constraint is unrealizable"));
    }
  }
  DiscreteTilt out;
  out.weights = Vector::Zero(n);
  Vector m(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int t = slot[static_cast<std::size_t>(i)];
    out.weights[i] = (t >= 0 && base_marginal[t] > 0.0) ? target.masses[t] / base_marginal[t] : 0.0;
    m[i] = base.masses[i] * out.weights[i];
  }
  const double total = m.sum();
  detail::require(total > 0.0, "analytic_tilt: tilted distribution has no mass");
  m /= total;
  out.tilted = DiscreteDist(base.points, m);
  return out;
}

struct BinSpec {
  double lo = 0.0;
  double hi = 1.0;
  int bins = 50;

  void validate() const {
    detail::require(bins >= 1 && hi > lo, "BinSpec: need at least one bin over a non-empty range");
  }
  /// Clamped bin index of v.
  int index(double v) const {
    const int k = static_cast<int>(std::floor((v - lo) / (hi - lo) * bins));
    return std::clamp(k, 0, bins - 1);
  }
};

/// Binned ratio nu_hat(o) / mu_base_hat(o) for a scalar observable.
struct TiltedDensity {
  BinSpec bins;
  Vector target_mass;  // nu_hat per bin
  Vector base_mass;    // mu_base_hat per bin
  Vector ratio;        // target_mass / base_mass, 0 where both vanish
  double normalizer = 1.0;

  double weight(double o) const { return ratio[bins.index(o)] / normalizer; }

  /// Self-normalized importance resampling of base states by their observable values.
  Matrix resample(const Matrix& base_states, const Vector& base_values, int n, Rng& rng) const {
    detail::require(base_states.rows() == base_values.size() && base_values.size() >= 1,
                    "TiltedDensity::resample: one observable value per base state required");
    detail::require(n >= 1, "TiltedDensity::resample: n must be positive");
    std::vector<double> cum(static_cast<std::size_t>(base_values.size()));
    double acc = 0.0;
    for (Eigen::Index i = 0; i < base_values.size(); ++i) cum[static_cast<std::size_t>(i)] = (acc += weight(base_values[i]));
    detail::require(acc > 0.0, "TiltedDensity::resample: all weights vanish");
    Matrix out(n, base_states.cols());
    for (int k = 0; k < n; ++k) {
      const double u = detail::uniform01(rng) * acc;
      const auto it = std::upper_bound(cum.begin(), cum.end(), u);
      const auto idx = std::min<std::ptrdiff_t>(it - cum.begin(), static_cast<std::ptrdiff_t>(cum.size()) - 1);
      out.row(k) = base_states.row(idx);
    }
    return out;
  }
};

/// Tilt from samples: base observable values and target observable samples.
inline TiltedDensity analytic_tilt(const Vector& base_values, const Vector& target_values, const BinSpec& bins) {
  bins.validate();
  detail::require(base_values.size() >= 1 && target_values.size() >= 1, "analytic_tilt: empty sample set");
  TiltedDensity t;
  t.bins = bins;
  t.target_mass = Vector::Zero(bins.bins);
  t.base_mass = Vector::Zero(bins.bins);
  for (Eigen::Index i = 0; i < base_values.size(); ++i) t.base_mass[bins.index(base_values[i])] += 1.0;
  for (Eigen::Index i = 0; i < target_values.size(); ++i) t.target_mass[bins.index(target_values[i])] += 1.0;
  t.base_mass /= static_cast<double>(base_values.size());
  t.target_mass /= static_cast<double>(target_values.size());
  t.ratio = Vector::Zero(bins.bins);
  for (int k = 0; k < bins.bins; ++k) {
    if (t.target_mass[k] > 0.0 && t.base_mass[k] <= 0.0) {
      throw NumericalError(detail::concat("analytic_tilt: target bin ", k, " has no base mass; the constraint is unrealizable"));
    }
    if (t.base_mass[k] > 0.0) t.ratio[k] = t.target_mass[k] / t.base_mass[k];
  }
  t.normalizer = t.ratio.dot(t.base_mass);
  return t;
}

// ---- exact finite-grid solver ----

struct GridObservable {
  Vector values;        // observable value at every grid point
  DiscreteDist target;  // target marginal on the real line
};

struct GridAlignOptions {
  int max_iterations = 200000;
  double tolerance = 1e-8;  // duality gap, relative to max(1, beta, |dual|)
  int check_every = 50;
};

struct GridAlignResult {
  DiscreteDist solution;
  std::vector<double> w1_gaps;  // per observable
  double kl = 0.0;              // KL(solution || base)
  double primal = 0.0;          // -KL - beta * sum W1
  double dual = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> dual_trace;  // dual objective per iteration (non-increasing)
};

namespace detail {

/// CDF constraint rows of one observable over the merged breakpoints of model and target supports.
struct CdfBlock {
  std::vector<std::vector<Eigen::Index>> below;  // grid points with value <= t_k
  Vector target_cdf;                              // F_target(t_k)
  Vector widths;                                  // t_{k+1} - t_k
};

inline CdfBlock cdf_block(const GridObservable& g) {
  std::vector<double> t(g.values.data(), g.values.data() + g.values.size());
  for (Eigen::Index i = 0; i < g.target.size(); ++i) t.push_back(g.target.points(i, 0));
  std::sort(t.begin(), t.end());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  CdfBlock b;
  const auto m = static_cast<Eigen::Index>(t.size()) - 1;
  b.below.resize(static_cast<std::size_t>(std::max<Eigen::Index>(m, 0)));
  b.target_cdf = Vector::Zero(std::max<Eigen::Index>(m, 0));
  b.widths = Vector::Zero(std::max<Eigen::Index>(m, 0));
  for (Eigen::Index k = 0; k < m; ++k) {
    b.widths[k] = t[k + 1] - t[k];
    for (Eigen::Index j = 0; j < g.values.size(); ++j) {
      if (g.values[j] <= t[k]) b.below[k].push_back(j);
    }
    for (Eigen::Index i = 0; i < g.target.size(); ++i) {
      if (g.target.points(i, 0) <= t[k]) b.target_cdf[k] += g.target.masses[i];
    }
  }
  return b;
}

}  // namespace detail

/// Maximizes -KL(mu || base) - beta * sum_i W1(o_i # mu, target_i) over the
/// simplex. Each W1 is written as a maximum over CDF-difference potentials
/// |lambda_k| <= beta * width_k, so the problem's dual
///   D(lambda) = log sum_j base_j exp(-(C^T lambda)_j) + lambda . F
/// is smooth on a box; it is minimized by accelerated projected gradient with
/// backtracking and a monotone restart. mu(lambda) is the Gibbs form
/// base * exp(-C^T lambda), and D - J(mu) certifies optimality.
inline GridAlignResult grid_align(const DiscreteDist& base, const std::vector<GridObservable>& observables, double beta,
                                  const GridAlignOptions& opts = {}) {
  detail::require(beta >= 0.0, "grid_align: beta must be non-negative");
  for (const auto& g : observables) {
    detail::require(g.values.size() == base.size(), "grid_align: one observable value per grid point required");
    detail::require(g.target.points.cols() == 1, "grid_align: target marginals must be 1-D");
  }
  const Eigen::Index n = base.size();
  for (Eigen::Index j = 0; j < n; ++j) detail::require(base.masses[j] > 0.0, "grid_align: base must have full support");

  auto gaps_of = [&](const Vector& mu) {
    std::vector<double> gaps;
    for (const auto& g : observables) gaps.push_back(w1_discrete_1d(pushforward_1d(mu, g.values), g.target));
    return gaps;
  };
  auto primal_of = [&](const Vector& mu, std::vector<double>* gaps_out, double* kl_out) {
    const std::vector<double> gaps = gaps_of(mu);
    const double kl = kl_discrete(mu, base.masses);
    if (gaps_out) *gaps_out = gaps;
    if (kl_out) *kl_out = kl;
    return -kl - beta * std::accumulate(gaps.begin(), gaps.end(), 0.0);
  };

  GridAlignResult res;
  if (beta == 0.0 || observables.empty()) {
    res.solution = base;
    res.primal = primal_of(base.masses, &res.w1_gaps, &res.kl);
    res.dual = res.primal;
    res.converged = true;
    return res;
  }

  std::vector<detail::CdfBlock> blocks;
  for (const auto& g : observables) blocks.push_back(detail::cdf_block(g));
  Eigen::Index m = 0;
  for (const auto& b : blocks) m += b.widths.size();
  Vector bound(m), target(m);
  {
    Eigen::Index r = 0;
    for (const auto& b : blocks) {
      bound.segment(r, b.widths.size()) = beta * b.widths;
      target.segment(r, b.widths.size()) = b.target_cdf;
      r += b.widths.size();
    }
  }
  const Vector log_base = base.masses.array().log().matrix();

  // C^T lambda and C mu through the index lists.
  auto potential = [&](const Vector& lambda) {
    Vector h = Vector::Zero(n);
    Eigen::Index r = 0;
    for (const auto& b : blocks) {
      for (std::size_t k = 0; k < b.below.size(); ++k, ++r) {
        for (auto j : b.below[k]) h[j] += lambda[r];
      }
    }
    return h;
  };
  auto cdfs = [&](const Vector& mu) {
    Vector c(m);
    Eigen::Index r = 0;
    for (const auto& b : blocks) {
      for (std::size_t k = 0; k < b.below.size(); ++k, ++r) {
        double s = 0.0;
        for (auto j : b.below[k]) s += mu[j];
        c[r] = s;
      }
    }
    return c;
  };
  auto gibbs = [&](const Vector& lambda, double* log_z) {
    Vector a = log_base - potential(lambda);
    const double top = a.maxCoeff();
    Vector mu = (a.array() - top).exp().matrix();
    const double s = mu.sum();
    mu /= s;
    if (log_z) *log_z = top + std::log(s);
    return mu;
  };
  auto dual_of = [&](const Vector& lambda) {
    double log_z = 0.0;
    gibbs(lambda, &log_z);
    return log_z + lambda.dot(target);
  };
  auto project = [&](Vector v) {
    for (Eigen::Index r = 0; r < m; ++r) v[r] = std::clamp(v[r], -bound[r], bound[r]);
    return v;
  };

  Vector lambda = Vector::Zero(m), y = lambda;
  double d_lambda = dual_of(lambda);
  double t = 1.0, lip = 1.0;
  res.dual_trace.push_back(d_lambda);
  for (int it = 1; it <= opts.max_iterations; ++it) {
    double log_z = 0.0;
    const Vector mu_y = gibbs(y, &log_z);
    const double d_y = log_z + y.dot(target);
    const Vector grad = target - cdfs(mu_y);
    Vector next;
    double d_next = 0.0;
    for (;;) {
      next = project(y - grad / lip);
      d_next = dual_of(next);
      const Vector step = next - y;
      if (d_next <= d_y + grad.dot(step) + 0.5 * lip * step.squaredNorm() + 1e-15) break;
      lip *= 2.0;
    }
    if (d_next > d_lambda) {
      // Momentum overshot: restart from the last accepted point.
      y = lambda;
      t = 1.0;
      res.dual_trace.push_back(d_lambda);
      res.iterations = it;
      continue;
    }
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = next + ((t - 1.0) / t_next) * (next - lambda);
    lambda = next;
    d_lambda = d_next;
    t = t_next;
    res.dual_trace.push_back(d_lambda);
    res.iterations = it;
    if (it % opts.check_every == 0) {
      const double j = primal_of(gibbs(lambda, nullptr), nullptr, nullptr);
      if (d_lambda - j <= opts.tolerance * std::max({1.0, beta, std::abs(d_lambda)})) {
        res.converged = true;
        break;
      }
    }
  }
  const Vector mu = gibbs(lambda, nullptr);
  res.solution = DiscreteDist(base.points, mu / mu.sum());
  res.primal = primal_of(res.solution.masses, &res.w1_gaps, &res.kl);
  res.dual = d_lambda;
  if (!res.converged) res.converged = res.dual - res.primal <= opts.tolerance * std::max({1.0, beta, std::abs(res.dual)});
  return res;
}

}  // namespace ada
