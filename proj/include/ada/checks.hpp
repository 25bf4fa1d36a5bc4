#pragma once

// Randomized invariant suites shared by `ada selftest` and the acceptance run.

#include "ada/critics.hpp"
#include "ada/flowgen.hpp"
#include "ada/metrics.hpp"
#include "ada/oracle.hpp"

namespace ada {

struct CheckResult {
  std::string name;
  bool passed = true;
  int trials = 0;
  double worst = 0.0;  // largest observed error
  double tolerance = 0.0;
  std::string note;
};

namespace checks {

inline Vector central_difference(const std::function<double(const Vector&)>& f, Vector p, double h) {
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

// Errors are relative to the largest gradient entry, so tiny entries do not
// turn rounding noise into failures.
inline double scaled_error(const Vector& a, const Vector& b) {
  const double scale = std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), 1e-8});
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

inline std::vector<int> random_widths(Rng& rng, int in, int out) {
  const int hidden = 1 + static_cast<int>(rng() % 2);
  std::vector<int> w = {in};
  for (int l = 0; l < hidden; ++l) w.push_back(2 + static_cast<int>(rng() % 15));
  w.push_back(out);
  return w;
}

inline void record(CheckResult& r, double err) {
  ++r.trials;
  r.worst = std::max(r.worst, err);
  if (!(err <= r.tolerance)) r.passed = false;
}

}  // namespace checks

/// Parameter gradients of 0.5 * sum(out^2) against central differences.
inline CheckResult check_grad_params(int trials, std::uint64_t seed, double tol = 1e-4) {
  CheckResult r{"grad_params", true, 0, 0.0, tol, ""};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    const int in = 1 + static_cast<int>(rng() % 16), out = 1 + static_cast<int>(rng() % 4);
    DenseNet net = DenseNet::random(checks::random_widths(rng, in, out), rng);
    const Matrix x = detail::normal_matrix(5, in, rng);
    auto loss = [](const Matrix& o) { return LossValue{Matrix::Constant(1, 1, 0.5 * o.squaredNorm()), o}; };
    const Vector g = grad_params(net, x, loss);
    DenseNet probe = net;
    const Vector fd = checks::central_difference(
        [&](const Vector& p) {
          probe.params() = p;
          return 0.5 * probe.forward(x).squaredNorm();
        },
        net.params(), 1e-5);
    checks::record(r, checks::scaled_error(g, fd));
  }
  return r;
}

/// Input gradients of scalar nets against central differences.
inline CheckResult check_grad_input(int trials, std::uint64_t seed, double tol = 1e-4) {
  CheckResult r{"grad_input", true, 0, 0.0, tol, ""};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    const int in = 1 + static_cast<int>(rng() % 16);
    DenseNet net = DenseNet::random(checks::random_widths(rng, in, 1), rng);
    const Matrix x = detail::normal_matrix(1, in, rng);
    const Vector g = grad_input(net, x).row(0).transpose();
    const Vector fd = checks::central_difference(
        [&](const Vector& v) { return net.forward(Matrix(v.transpose()))(0, 0); }, x.row(0).transpose(), 1e-5);
    checks::record(r, checks::scaled_error(g, fd));
  }
  return r;
}

/// Pathwise KL gradient of small perturbed flows against central differences.
inline CheckResult check_kl_gradient(int trials, std::uint64_t seed, double tol = 1e-4) {
  CheckResult r{"kl_to_base_gradient", true, 0, 0.0, tol, ""};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    const int d = 1 + static_cast<int>(rng() % 3);
    const int k = 1 + static_cast<int>(rng() % 2);
    Matrix means = detail::normal_matrix(k, d, rng);
    std::vector<double> var, w;
    for (int c = 0; c < k; ++c) {
      var.push_back(0.3 + detail::uniform01(rng));
      w.push_back(1.0 / k);
    }
    FlowSpec spec;
    spec.kind = t % 2 == 0 ? FlowSpec::Kind::affine : FlowSpec::Kind::spline;
    spec.blocks = std::max(2, d);
    spec.hidden = {6};
    spec.spline_bins = 4;
    spec.spline_bound = 3.0;
    FlowGenerator gen(GaussianMixture(means, var, w), spec, rng());
    Vector p = gen.parameters();
    for (Eigen::Index i = 0; i < p.size(); ++i) p[i] += 0.2 * detail::normal(rng);
    gen.set_parameters(p);
    const Matrix z = gen.base().sample(8, rng);
    Vector grad;
    gen.kl_and_gradient(z, grad);
    FlowGenerator probe = gen;
    const Vector fd = checks::central_difference(
        [&](const Vector& q) {
          probe.set_parameters(q);
          return detail::ordered_mean(probe.kl_integrand(z, probe.forward(z)));
        },
        p, 1e-5);
    checks::record(r, checks::scaled_error(grad, fd));
  }
  return r;
}

/// Parameter gradient of the gradient penalty (a second-order path).
inline CheckResult check_penalty_gradient(int trials, std::uint64_t seed, double tol = 1e-3) {
  CheckResult r{"gradient_penalty_gradient", true, 0, 0.0, tol, ""};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    const int in = 1 + static_cast<int>(rng() % 6);
    const PenaltyKind kind = t % 2 == 0 ? PenaltyKind::two_sided : PenaltyKind::one_sided;
    DenseNet net = DenseNet::random(checks::random_widths(rng, in, 1), rng);
    // Scale up so one-sided trials see active constraints.
    net.params() *= 2.0;
    const Critic c = Critic::raw(net, 10.0, kind);
    const Matrix pts = detail::normal_matrix(6, in, rng);
    const Vector g = gradient_penalty_at(c, pts).grad;
    Critic probe = c;
    const Vector fd = checks::central_difference(
        [&](const Vector& p) {
          probe.net().params() = p;
          return gradient_penalty_at(probe, pts).value;
        },
        c.net().params(), 1e-5);
    checks::record(r, checks::scaled_error(g, fd));
  }
  return r;
}

/// Sorted-coupling and CDF forms of 1-D W1 against exhaustive assignment.
inline CheckResult check_w1_oracles(int trials, std::uint64_t seed, double tol = 1e-10) {
  CheckResult r{"w1_empirical_vs_assignment", true, 0, 0.0, tol, ""};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    Vector a(6), b(6);
    for (int i = 0; i < 6; ++i) {
      a[i] = 3.0 * detail::normal(rng);
      b[i] = 1.0 + 2.0 * detail::normal(rng);
    }
    const double exact = w1_assignment_bruteforce(a, b);
    const std::vector<double> u(6, 1.0 / 6.0);
    const double discrete = w1_discrete_1d(DiscreteDist::on_line({a.data(), a.data() + 6}, u),
                                           DiscreteDist::on_line({b.data(), b.data() + 6}, u));
    checks::record(r, std::max(std::abs(w1_empirical(a, b) - exact), std::abs(discrete - exact)));
  }
  return r;
}

inline Eigen::Matrix3d random_rotation(Rng& rng) {
  Eigen::Quaterniond q(detail::normal(rng), detail::normal(rng), detail::normal(rng), detail::normal(rng));
  return q.normalized().toRotationMatrix();
}

/// Rigid motions give zero RMSD; a mirror image of a chiral frame does not.
inline CheckResult check_kabsch(int trials, std::uint64_t seed, double tol = 1e-8) {
  CheckResult r{"kabsch_rigid_invariance", true, 0, 0.0, tol, ""};
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    const int n = 3 + static_cast<int>(rng() % 10);
    const Matrix p = detail::normal_matrix(n, 3, rng);
    const Eigen::Matrix3d rot = random_rotation(rng);
    const Eigen::RowVector3d shift(5.0 * detail::normal(rng), 5.0 * detail::normal(rng), 5.0 * detail::normal(rng));
    const Matrix moved = (p * rot.transpose()).rowwise() + shift;
    checks::record(r, kabsch_rmsd(moved, p));
  }
  Matrix chiral(4, 3);
  chiral << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
  Matrix mirror = chiral;
  mirror.col(0) *= -1.0;
  const double reflected = kabsch_rmsd(mirror, chiral);
  r.note = detail::concat("mirror rmsd ", reflected);
  if (!(reflected > 0.1)) r.passed = false;
  return r;
}

}  // namespace ada
