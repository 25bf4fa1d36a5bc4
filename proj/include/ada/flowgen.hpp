#pragma once

// Invertible coupling generator with exact log-density.
//
// Samples are produced as x = forward(z) with z drawn from the base mixture
// itself, so the identity map reproduces the base distribution exactly. The
// coupling blocks act in a standardized frame y = A (z - c), where c and A
// are the mean and the inverse square root (principal axes, descending
// variance) of the base covariance:
//
//     x = z + A^{-1} (T(y) - y),     log|det dx/dz| = sum of block log-dets.
//
// Two block kinds are available: affine couplings (scale and shift nets) and
// monotone rational-quadratic spline couplings, which can move mass between
// separated modes along a coordinate.

#include <fstream>
#include <variant>

#include "ada/densities.hpp"
#include "ada/diffcore.hpp"

namespace ada {

/// Indices of transformed and conditioning coordinates for one block.
struct CouplingMask {
  std::vector<int> transformed;
  std::vector<int> conditioner;

  /// from_flags(flags): flags[j] == true marks a transformed coordinate.
  static CouplingMask from_flags(const std::vector<bool>& flags) {
    CouplingMask m;
    for (int j = 0; j < static_cast<int>(flags.size()); ++j) {
      (flags[j] ? m.transformed : m.conditioner).push_back(j);
    }
    return m;
  }
};

struct AffineCoupling {
  CouplingMask mask;
  DenseNet scale_net;
  DenseNet shift_net;
  double scale_bound = 3.0;  // s = bound * tanh(raw / bound)
};

struct SplineCoupling {
  CouplingMask mask;
  DenseNet net;  // outputs (3 * bins - 1) values per transformed coordinate
  int bins = 8;
  double bound = 4.0;  // identity outside [-bound, bound]
};

using CouplingBlock = std::variant<AffineCoupling, SplineCoupling>;

namespace spline {

inline constexpr double kMinBin = 1e-3;
inline constexpr double kMinSlope = 1e-3;
// softplus(kSlopeShift) + kMinSlope == 1, so zero parameters give unit knot slopes.
inline const double kSlopeShift = std::log(std::expm1(1.0 - kMinSlope));

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Knot layout derived from unnormalized parameters.
struct Knots {
  std::vector<double> x, y, slope;    // K+1 knots each
  std::vector<double> pw, ph;         // softmax probabilities (K each)
};

inline void softmax(const double* u, int k, std::vector<double>& p) {
  p.resize(k);
  double top = u[0];
  for (int i = 1; i < k; ++i) top = std::max(top, u[i]);
  double s = 0.0;
  for (int i = 0; i < k; ++i) s += (p[i] = std::exp(u[i] - top));
  for (int i = 0; i < k; ++i) p[i] /= s;
}

inline void make_knots(const double* params, int k, double bound, Knots& kn) {
  softmax(params, k, kn.pw);
  softmax(params + k, k, kn.ph);
  kn.x.resize(k + 1);
  kn.y.resize(k + 1);
  kn.slope.resize(k + 1);
  const double scale = 1.0 - kMinBin * k;
  double cw = 0.0, ch = 0.0;
  kn.x[0] = kn.y[0] = -bound;
  for (int i = 1; i < k; ++i) {
    cw += kMinBin + scale * kn.pw[i - 1];
    ch += kMinBin + scale * kn.ph[i - 1];
    kn.x[i] = -bound + 2.0 * bound * cw;
    kn.y[i] = -bound + 2.0 * bound * ch;
  }
  kn.x[k] = kn.y[k] = bound;
  kn.slope[0] = kn.slope[k] = 1.0;
  for (int i = 1; i < k; ++i) kn.slope[i] = kMinSlope + softplus(params[2 * k + i - 1] + kSlopeShift);
}

inline int find_bin(const std::vector<double>& knots, double v) {
  const int k = static_cast<int>(knots.size()) - 1;
  auto it = std::upper_bound(knots.begin() + 1, knots.end() - 1, v);
  return std::min(static_cast<int>(it - knots.begin()) - 1, k - 1);
}

struct Eval {
  double y;
  double logdet;
  int bin;
};

inline Eval forward(double x, const Knots& kn) {
  const int k = static_cast<int>(kn.x.size()) - 1;
  if (!(x > kn.x[0] && x < kn.x[k])) return {x, 0.0, -1};
  const int b = find_bin(kn.x, x);
  const double w = kn.x[b + 1] - kn.x[b];
  const double h = kn.y[b + 1] - kn.y[b];
  const double s = h / w;
  const double xi = (x - kn.x[b]) / w;
  const double q = xi * (1.0 - xi);
  const double d0 = kn.slope[b], d1 = kn.slope[b + 1];
  const double num = h * (s * xi * xi + d0 * q);
  const double den = s + (d1 + d0 - 2.0 * s) * q;
  const double m = d1 * xi * xi + 2.0 * s * q + d0 * (1.0 - xi) * (1.0 - xi);
  return {kn.y[b] + num / den, std::log(s * s * m) - 2.0 * std::log(den), b};
}

inline double inverse(double y, const Knots& kn) {
  const int k = static_cast<int>(kn.y.size()) - 1;
  if (!(y > kn.y[0] && y < kn.y[k])) return y;
  const int b = find_bin(kn.y, y);
  const double w = kn.x[b + 1] - kn.x[b];
  const double h = kn.y[b + 1] - kn.y[b];
  const double s = h / w;
  const double d0 = kn.slope[b], d1 = kn.slope[b + 1];
  const double dy = y - kn.y[b];
  const double a = h * (s - d0) + dy * (d1 + d0 - 2.0 * s);
  const double bb = h * d0 - dy * (d1 + d0 - 2.0 * s);
  const double c = -s * dy;
  const double disc = std::max(bb * bb - 4.0 * a * c, 0.0);
  const double xi = 2.0 * c / (-bb - std::sqrt(disc));
  return kn.x[b] + xi * w;
}

/// Adds d(y_bar*y + ld_bar*logdet)/d(params) into p_bar; returns the input adjoint.
inline double backward(double x, const Knots& kn, const double* params, double bound,
                       double y_bar, double ld_bar, double* p_bar) {
  const int k = static_cast<int>(kn.x.size()) - 1;
  if (!(x > kn.x[0] && x < kn.x[k])) return y_bar;
  const int b = find_bin(kn.x, x);
  const double w = kn.x[b + 1] - kn.x[b];
  const double h = kn.y[b + 1] - kn.y[b];
  const double s = h / w;
  const double xi = (x - kn.x[b]) / w;
  const double q = xi * (1.0 - xi);
  const double dq = 1.0 - 2.0 * xi;
  const double d0 = kn.slope[b], d1 = kn.slope[b + 1];
  const double num = h * (s * xi * xi + d0 * q);
  const double den = s + (d1 + d0 - 2.0 * s) * q;
  const double m = d1 * xi * xi + 2.0 * s * q + d0 * (1.0 - xi) * (1.0 - xi);

  // y = y_b + num/den ; ld = 2 log s + log m - 2 log den
  const double inv_den = 1.0 / den;
  const double r = num * inv_den;
  // partials of num, den, m
  const double num_h = s * xi * xi + d0 * q, num_s = h * xi * xi,
               num_xi = h * (2.0 * s * xi + d0 * dq), num_d0 = h * q;
  const double den_s = 1.0 - 2.0 * q, den_xi = (d1 + d0 - 2.0 * s) * dq, den_d = q;
  const double m_s = 2.0 * q, m_xi = 2.0 * d1 * xi + 2.0 * s * dq - 2.0 * d0 * (1.0 - xi),
               m_d0 = (1.0 - xi) * (1.0 - xi), m_d1 = xi * xi;

  auto y_partial = [&](double dn, double dd) { return (dn - r * dd) * inv_den; };
  auto ld_partial = [&](double dm, double dd) { return dm / m - 2.0 * dd * inv_den; };

  const double xi_bar = y_bar * y_partial(num_xi, den_xi) + ld_bar * ld_partial(m_xi, den_xi);
  const double s_bar = y_bar * y_partial(num_s, den_s) + ld_bar * (2.0 / s + ld_partial(m_s, den_s));
  double h_bar = y_bar * y_partial(num_h, 0.0);
  const double d0_bar = y_bar * y_partial(num_d0, den_d) + ld_bar * ld_partial(m_d0, den_d);
  const double d1_bar = y_bar * y_partial(0.0, den_d) + ld_bar * ld_partial(m_d1, den_d);
  const double yb_bar = y_bar;

  // xi = (x - x_b)/w ; s = h/w
  const double x_bar = xi_bar / w;
  double xb_bar = -xi_bar / w;
  double w_bar = -xi_bar * xi / w - s_bar * s / w;
  h_bar += s_bar / w;

  // Knot adjoints: w = x_{b+1} - x_b, h = y_{b+1} - y_b.
  std::vector<double> kx_bar(k + 1, 0.0), ky_bar(k + 1, 0.0);
  kx_bar[b] += xb_bar - w_bar;
  kx_bar[b + 1] += w_bar;
  ky_bar[b] += yb_bar - h_bar;
  ky_bar[b + 1] += h_bar;

  // Interior knots x_i = -B + 2B * sum_{j<i} (kMinBin + scale * p_j).
  const double scale = 1.0 - kMinBin * k;
  std::vector<double> pw_bar(k, 0.0), ph_bar(k, 0.0);
  double acc_x = 0.0, acc_y = 0.0;
  for (int i = k - 1; i >= 1; --i) {
    acc_x += kx_bar[i];
    acc_y += ky_bar[i];
    pw_bar[i - 1] = 2.0 * bound * scale * acc_x;
    ph_bar[i - 1] = 2.0 * bound * scale * acc_y;
  }
  auto softmax_back = [&](const std::vector<double>& p, const std::vector<double>& pb, double* ub) {
    double dot = 0.0;
    for (int i = 0; i < k; ++i) dot += p[i] * pb[i];
    for (int i = 0; i < k; ++i) ub[i] += p[i] * (pb[i] - dot);
  };
  softmax_back(kn.pw, pw_bar, p_bar);
  softmax_back(kn.ph, ph_bar, p_bar + k);
  if (b >= 1) p_bar[2 * k + b - 1] += d0_bar * sigmoid(params[2 * k + b - 1] + kSlopeShift);
  if (b + 1 <= k - 1) p_bar[2 * k + b] += d1_bar * sigmoid(params[2 * k + b] + kSlopeShift);
  return x_bar;
}

}  // namespace spline

struct FlowSample {
  Matrix x;
  Vector logdet;
};

/// Intermediate values kept by a forward pass for the backward pass.
struct FlowTape {
  Matrix z;
  std::vector<Matrix> block_inputs;
  std::vector<std::vector<ForwardCache>> caches;  // per block: one cache per net
  std::vector<Matrix> net_outputs;                // per block: raw scale output or spline params
};

struct KlEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

struct FlowSpec {
  enum class Kind { affine, spline };
  Kind kind = Kind::affine;
  std::vector<CouplingMask> masks;  // empty: alternating half masks (affine) or one-per-coordinate cycles (spline)
  int blocks = 4;                   // used when masks are generated
  std::vector<int> hidden = {64, 64};
  int spline_bins = 8;
  double spline_bound = 4.0;
  double scale_bound = 3.0;
};

class FlowGenerator {
 public:
  /// Identity-initialized generator; inner layers random, output layers zero.
  FlowGenerator(GaussianMixture base, const FlowSpec& spec, std::uint64_t seed)
      : base_(std::move(base)) {
    const int d = base_.dim();
    detail::require(d >= 1, "FlowGenerator: dimension must be at least 1");
    init_frame();
    std::vector<CouplingMask> masks = spec.masks.empty() ? default_masks(d, spec) : spec.masks;
    detail::require(!masks.empty(), "FlowGenerator: no coupling blocks");
    std::vector<int> touched(d, 0);
    for (const auto& m : masks) {
      detail::require(static_cast<int>(m.transformed.size() + m.conditioner.size()) == d,
                      "FlowGenerator: mask must partition every coordinate");
      std::vector<int> seen(d, 0);
      for (int j : m.transformed) {
        detail::require(j >= 0 && j < d && !seen[j]++, "FlowGenerator: bad transformed index");
        touched[j] = 1;
      }
      for (int j : m.conditioner) detail::require(j >= 0 && j < d && !seen[j]++, "FlowGenerator: bad conditioner index");
    }
    for (int j = 0; j < d; ++j) {
      if (!touched[j]) {
        throw InputError(detail::concat("FlowGenerator: coordinate ", j, " is never transformed"));
      }
    }
    Rng rng(seed);
    for (const auto& m : masks) {
      const int c = static_cast<int>(m.conditioner.size());
      const int t = static_cast<int>(m.transformed.size());
      auto widths = [&](int out) {
        std::vector<int> w = {c};
        w.insert(w.end(), spec.hidden.begin(), spec.hidden.end());
        w.push_back(out);
        return w;
      };
      if (spec.kind == FlowSpec::Kind::affine) {
        AffineCoupling blk{m, DenseNet::random(widths(t), rng), DenseNet::random(widths(t), rng),
                           spec.scale_bound};
        blk.scale_net.zero_output_layer();
        blk.shift_net.zero_output_layer();
        blocks_.emplace_back(std::move(blk));
      } else {
        SplineCoupling blk{m, DenseNet::random(widths(t * (3 * spec.spline_bins - 1)), rng),
                           spec.spline_bins, spec.spline_bound};
        blk.net.zero_output_layer();
        blocks_.emplace_back(std::move(blk));
      }
    }
  }

  int dim() const { return base_.dim(); }
  const GaussianMixture& base() const { return base_; }
  const std::vector<CouplingBlock>& blocks() const { return blocks_; }
  std::vector<CouplingBlock>& blocks() { return blocks_; }
  const Matrix& frame_to_latent() const { return to_latent_; }
  /// Maps row adjoints of x to adjoints in the standardized frame (dy = dx * this).
  const Matrix& frame_from_latent() const { return from_latent_; }

  /// Replaces the standardizing frame with the identity (coupling acts on z directly).
  void use_identity_frame() {
    center_ = Vector::Zero(dim());
    to_latent_ = Matrix::Identity(dim(), dim());
    from_latent_ = Matrix::Identity(dim(), dim());
  }

  Eigen::Index num_params() const {
    Eigen::Index n = 0;
    for_each_net([&](const DenseNet& net) { n += net.num_params(); });
    return n;
  }

  Vector parameters() const {
    Vector p(num_params());
    Eigen::Index off = 0;
    for_each_net([&](const DenseNet& net) {
      p.segment(off, net.num_params()) = net.params();
      off += net.num_params();
    });
    return p;
  }

  void set_parameters(const Vector& p) {
    detail::require(p.size() == num_params(), "FlowGenerator::set_parameters: size mismatch");
    Eigen::Index off = 0;
    for_each_net_mut([&](DenseNet& net) {
      net.params() = p.segment(off, net.num_params());
      off += net.num_params();
    });
  }

  FlowSample forward(const Matrix& z) const {
    FlowTape tape;
    return forward(z, tape);
  }

  FlowSample forward(const Matrix& z, FlowTape& tape) const {
    check_width(z);
    const Eigen::Index n = z.rows();
    tape.z = z;
    tape.block_inputs.assign(blocks_.size(), Matrix());
    tape.caches.assign(blocks_.size(), {});
    tape.net_outputs.assign(blocks_.size(), Matrix());
    Matrix y0 = to_frame(z);
    Matrix y = y0;
    Vector logdet = Vector::Zero(n);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      tape.block_inputs[b] = y;
      std::visit([&](const auto& blk) { block_forward(blk, y, logdet, tape, b); }, blocks_[b]);
    }
    if (const auto bad = detail::first_non_finite(logdet); bad >= 0) {
      throw NumericalError(detail::concat("flow_forward: non-finite log-determinant for row ", bad));
    }
    FlowSample out;
    out.x = z + (y - y0) * from_latent_.transpose();
    out.logdet = std::move(logdet);
    return out;
  }

  /// Parameter gradient given adjoints of x (n x d) and of the log-determinant (n).
  Vector backward(const FlowTape& tape, const Matrix& dx, const Vector& dlogdet) const {
    // x = z + (y_T - y_0) A^{-T}: adjoint of y_T is dx A^{-1}; y_0 carries no parameters.
    return backward_frame(tape, dx * from_latent_, dlogdet);
  }

  /// As backward(), with the adjoint given directly for the last block output.
  Vector backward_frame(const FlowTape& tape, Matrix dy, const Vector& dlogdet) const {
    Vector grad = Vector::Zero(num_params());
    std::vector<Eigen::Index> offsets;
    Eigen::Index off = 0;
    for (const auto& blk : blocks_) {
      offsets.push_back(off);
      std::visit([&](const auto& b) { off += block_params(b); }, blk);
    }
    for (std::size_t b = blocks_.size(); b-- > 0;) {
      std::visit(
          [&](const auto& blk) { block_backward(blk, tape, b, dy, dlogdet, grad, offsets[b]); },
          blocks_[b]);
    }
    return grad;
  }

  Matrix inverse(const Matrix& x) const {
    check_width(x);
    Matrix y = to_frame(x);
    for (std::size_t b = blocks_.size(); b-- > 0;) {
      std::visit([&](const auto& blk) { block_inverse(blk, y); }, blocks_[b]);
    }
    return from_frame(y);
  }

  /// Per-sample integrand log mu_base(z) - logdet - log mu_base(x) for given z.
  Vector kl_integrand(const Matrix& z, const FlowSample& fs) const {
    return base_.log_pdf(z) - fs.logdet - base_.log_pdf(fs.x);
  }

  /// Monte-Carlo KL(mu_theta || mu_base) with z ~ mu_base.
  KlEstimate kl_to_base(int n, std::uint64_t seed) const {
    detail::require(n >= 2, "kl_to_base: need at least two samples");
    Rng rng(seed);
    const Matrix z = base_.sample(n, rng);
    const Vector v = kl_integrand(z, forward(z));
    return summarize(v);
  }

  /// KL estimate on the supplied base draws and its parameter gradient.
  KlEstimate kl_and_gradient(const Matrix& z, Vector& grad) const {
    FlowTape tape;
    const FlowSample fs = forward(z, tape);
    const Vector v = kl_integrand(z, fs);
    const double n = static_cast<double>(z.rows());
    const Matrix dx = -base_.grad_log_pdf(fs.x) / n;
    const Vector dld = Vector::Constant(z.rows(), -1.0 / n);
    grad = backward(tape, dx, dld);
    return summarize(v);
  }

  /// log mu_theta at arbitrary states, through the inverse map.
  Vector log_density(const Matrix& x) const {
    const Matrix z = inverse(x);
    return base_.log_pdf(z) - forward(z).logdet;
  }

  /// Row i: gradient of log mu_theta at x_i = forward(z_i), expressed in the
  /// standardized frame of the last block output. Propagated forward through
  /// the blocks with  s_b = J_b^{-T} (s_{b-1} - grad log|det J_b|).
  Matrix density_score_frame(const FlowTape& tape) const {
    Matrix s = base_.grad_log_pdf(tape.z) * from_latent_;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      std::visit([&](const auto& blk) { block_score(blk, tape, b, s); }, blocks_[b]);
    }
    return s;
  }

  /// Path-derivative KL gradient: backpropagates grad log mu_theta(x) -
  /// grad log mu_base(x) through the sample path only. It drops the
  /// zero-mean score term of the full pathwise gradient, so it vanishes
  /// exactly wherever mu_theta equals mu_base. Returns the KL estimate.
  KlEstimate kl_path_gradient(const Matrix& z, Vector& grad) const {
    FlowTape tape;
    const FlowSample fs = forward(z, tape);
    grad = backward_frame(tape, kl_path_adjoint(tape, fs), Vector::Zero(z.rows()));
    return summarize(kl_integrand(z, fs));
  }

  /// Adjoint of the last block output for kl_path_gradient().
  Matrix kl_path_adjoint(const FlowTape& tape, const FlowSample& fs) const {
    const double n = static_cast<double>(tape.z.rows());
    return (density_score_frame(tape) - base_.grad_log_pdf(fs.x) * from_latent_) / n;
  }

  static KlEstimate summarize(const Vector& v) {
    KlEstimate e;
    const double n = static_cast<double>(v.size());
    e.mean = detail::ordered_mean(v);
    double ss = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) ss += (v[i] - e.mean) * (v[i] - e.mean);
    e.std_error = std::sqrt(ss / (n - 1.0) / n);
    return e;
  }

  // The architecture is rebuilt from the run configuration; the stored count
  // guards against loading into a mismatched generator.
  void save(std::ostream& os) const { detail::write_checkpoint(os, "flow", parameters()); }
  void load(std::istream& is) { set_parameters(detail::read_checkpoint(is, "flow", num_params())); }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    save(os);
  }

  void load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path);
    load(is);
  }

 private:
  static std::vector<CouplingMask> default_masks(int d, const FlowSpec& spec) {
    std::vector<CouplingMask> masks;
    if (d == 1) {
      for (int b = 0; b < spec.blocks; ++b) masks.push_back({{0}, {}});
      return masks;
    }
    if (spec.kind == FlowSpec::Kind::spline && d <= 4) {
      // One coordinate at a time, conditioned on all others, cycling.
      for (int b = 0; b < spec.blocks; ++b) {
        std::vector<bool> flags(d, false);
        flags[b % d] = true;
        masks.push_back(CouplingMask::from_flags(flags));
      }
      return masks;
    }
    for (int b = 0; b < spec.blocks; ++b) {
      std::vector<bool> flags(d);
      for (int j = 0; j < d; ++j) flags[j] = (j % 2) == (b % 2);
      masks.push_back(CouplingMask::from_flags(flags));
    }
    return masks;
  }

  void init_frame() {
    const int d = dim();
    center_ = base_.mean();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(base_.covariance()));
    const Eigen::VectorXd evals = es.eigenvalues();
    const Eigen::MatrixXd evecs = es.eigenvectors();
    to_latent_.resize(d, d);
    from_latent_.resize(d, d);
    // Descending variance order: latent coordinate 0 is the widest principal axis.
    for (int i = 0; i < d; ++i) {
      const int src = d - 1 - i;
      const double sd = std::sqrt(std::max(evals[src], 1e-300));
      to_latent_.row(i) = evecs.col(src).transpose() / sd;
      from_latent_.col(i) = evecs.col(src) * sd;
    }
  }

  Matrix to_frame(const Matrix& x) const {
    return (x.rowwise() - center_.transpose()) * to_latent_.transpose();
  }
  Matrix from_frame(const Matrix& y) const {
    Matrix x = y * from_latent_.transpose();
    x.rowwise() += center_.transpose();
    return x;
  }

  void check_width(const Matrix& m) const {
    if (m.cols() != dim()) {
      throw InputError(detail::concat("FlowGenerator: batch width ", m.cols(), ", expected ", dim()));
    }
  }

  static Matrix gather(const Matrix& y, const std::vector<int>& cols) {
    Matrix out(y.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = y.col(cols[j]);
    return out;
  }

  template <typename F>
  void for_each_net(F&& f) const {
    for (const auto& blk : blocks_) {
      if (const auto* a = std::get_if<AffineCoupling>(&blk)) {
        f(a->scale_net);
        f(a->shift_net);
      } else {
        f(std::get<SplineCoupling>(blk).net);
      }
    }
  }
  template <typename F>
  void for_each_net_mut(F&& f) {
    for (auto& blk : blocks_) {
      if (auto* a = std::get_if<AffineCoupling>(&blk)) {
        f(a->scale_net);
        f(a->shift_net);
      } else {
        f(std::get<SplineCoupling>(blk).net);
      }
    }
  }

  static Eigen::Index block_params(const AffineCoupling& b) {
    return b.scale_net.num_params() + b.shift_net.num_params();
  }
  static Eigen::Index block_params(const SplineCoupling& b) { return b.net.num_params(); }

  // ---- affine ----
  void block_forward(const AffineCoupling& blk, Matrix& y, Vector& logdet, FlowTape& tape,
                     std::size_t b) const {
    const Matrix cond = gather(y, blk.mask.conditioner);
    tape.caches[b].resize(2);
    const Matrix raw = blk.scale_net.forward(cond, tape.caches[b][0]);
    const Matrix shift = blk.shift_net.forward(cond, tape.caches[b][1]);
    tape.net_outputs[b] = raw;
    const double sb = blk.scale_bound;
    for (std::size_t j = 0; j < blk.mask.transformed.size(); ++j) {
      const int c = blk.mask.transformed[j];
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const double s = sb * std::tanh(raw(i, j) / sb);
        y(i, c) = y(i, c) * std::exp(s) + shift(i, j);
        logdet[i] += s;
      }
    }
  }

  void block_backward(const AffineCoupling& blk, const FlowTape& tape, std::size_t b, Matrix& dy,
                      const Vector& dlogdet, Vector& grad, Eigen::Index off) const {
    const Matrix& yin = tape.block_inputs[b];
    const Matrix& raw = tape.net_outputs[b];
    const Eigen::Index n = yin.rows();
    const auto t = static_cast<Eigen::Index>(blk.mask.transformed.size());
    Matrix d_raw(n, t), d_shift(n, t);
    const double sb = blk.scale_bound;
    for (Eigen::Index j = 0; j < t; ++j) {
      const int c = blk.mask.transformed[j];
      for (Eigen::Index i = 0; i < n; ++i) {
        const double th = std::tanh(raw(i, j) / sb);
        const double es = std::exp(sb * th);
        const double g = dy(i, c);
        d_shift(i, j) = g;
        const double ds = g * yin(i, c) * es + dlogdet[i];
        d_raw(i, j) = ds * (1.0 - th * th);
        dy(i, c) = g * es;
      }
    }
    Matrix dc1, dc2;
    grad.segment(off, blk.scale_net.num_params()) = blk.scale_net.backward(tape.caches[b][0], d_raw, &dc1);
    grad.segment(off + blk.scale_net.num_params(), blk.shift_net.num_params()) =
        blk.shift_net.backward(tape.caches[b][1], d_shift, &dc2);
    for (std::size_t j = 0; j < blk.mask.conditioner.size(); ++j) {
      const int c = blk.mask.conditioner[j];
      dy.col(c) += dc1.col(static_cast<Eigen::Index>(j)) + dc2.col(static_cast<Eigen::Index>(j));
    }
  }

  void block_score(const AffineCoupling& blk, const FlowTape& tape, std::size_t b, Matrix& s) const {
    const Matrix& yin = tape.block_inputs[b];
    const Matrix& raw = tape.net_outputs[b];
    const Eigen::Index n = yin.rows();
    const auto t = static_cast<Eigen::Index>(blk.mask.transformed.size());
    const double sb = blk.scale_bound;
    Matrix d_raw(n, t), d_shift(n, t);
    for (Eigen::Index j = 0; j < t; ++j) {
      const int c = blk.mask.transformed[j];
      for (Eigen::Index i = 0; i < n; ++i) {
        const double th = std::tanh(raw(i, j) / sb);
        const double es = std::exp(sb * th);
        const double w = s(i, c) / es;  // the log-det does not depend on y_T here
        s(i, c) = w;
        d_shift(i, j) = w;
        d_raw(i, j) = (w * yin(i, c) * es + 1.0) * (1.0 - th * th);
      }
    }
    Matrix dc1, dc2;
    blk.scale_net.backward(tape.caches[b][0], d_raw, &dc1);
    blk.shift_net.backward(tape.caches[b][1], d_shift, &dc2);
    for (std::size_t j = 0; j < blk.mask.conditioner.size(); ++j) {
      const int c = blk.mask.conditioner[j];
      s.col(c) -= dc1.col(static_cast<Eigen::Index>(j)) + dc2.col(static_cast<Eigen::Index>(j));
    }
  }

  void block_inverse(const AffineCoupling& blk, Matrix& y) const {
    const Matrix cond = gather(y, blk.mask.conditioner);
    const Matrix raw = blk.scale_net.forward(cond);
    const Matrix shift = blk.shift_net.forward(cond);
    const double sb = blk.scale_bound;
    for (std::size_t j = 0; j < blk.mask.transformed.size(); ++j) {
      const int c = blk.mask.transformed[j];
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const double s = sb * std::tanh(raw(i, j) / sb);
        y(i, c) = (y(i, c) - shift(i, j)) * std::exp(-s);
      }
    }
  }

  // ---- spline ----
  void block_forward(const SplineCoupling& blk, Matrix& y, Vector& logdet, FlowTape& tape,
                     std::size_t b) const {
    const Matrix cond = gather(y, blk.mask.conditioner);
    tape.caches[b].resize(1);
    const Matrix params = blk.net.forward(cond, tape.caches[b][0]);
    const int per = 3 * blk.bins - 1;
    spline::Knots kn;
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      for (std::size_t j = 0; j < blk.mask.transformed.size(); ++j) {
        const int c = blk.mask.transformed[j];
        spline::make_knots(params.row(i).data() + j * per, blk.bins, blk.bound, kn);
        const spline::Eval ev = spline::forward(y(i, c), kn);
        y(i, c) = ev.y;
        logdet[i] += ev.logdet;
      }
    }
  }

  void block_backward(const SplineCoupling& blk, const FlowTape& tape, std::size_t b, Matrix& dy,
                      const Vector& dlogdet, Vector& grad, Eigen::Index off) const {
    const Matrix& yin = tape.block_inputs[b];
    const Matrix& params = tape.caches[b][0].output;
    const int per = 3 * blk.bins - 1;
    Matrix d_params = Matrix::Zero(params.rows(), params.cols());
    spline::Knots kn;
    for (Eigen::Index i = 0; i < yin.rows(); ++i) {
      for (std::size_t j = 0; j < blk.mask.transformed.size(); ++j) {
        const int c = blk.mask.transformed[j];
        const double* p = params.row(i).data() + j * per;
        spline::make_knots(p, blk.bins, blk.bound, kn);
        dy(i, c) = spline::backward(yin(i, c), kn, p, blk.bound, dy(i, c), dlogdet[i],
                                    d_params.row(i).data() + j * per);
      }
    }
    Matrix dc;
    grad.segment(off, blk.net.num_params()) = blk.net.backward(tape.caches[b][0], d_params, &dc);
    for (std::size_t j = 0; j < blk.mask.conditioner.size(); ++j) {
      dy.col(blk.mask.conditioner[j]) += dc.col(static_cast<Eigen::Index>(j));
    }
  }

  void block_score(const SplineCoupling& blk, const FlowTape& tape, std::size_t b, Matrix& s) const {
    const Matrix& yin = tape.block_inputs[b];
    const Matrix& params = tape.caches[b][0].output;
    const int per = 3 * blk.bins - 1;
    Matrix d_params = Matrix::Zero(params.rows(), params.cols());
    std::vector<double> scratch(static_cast<std::size_t>(per));
    spline::Knots kn;
    for (Eigen::Index i = 0; i < yin.rows(); ++i) {
      for (std::size_t j = 0; j < blk.mask.transformed.size(); ++j) {
        const int c = blk.mask.transformed[j];
        const double* p = params.row(i).data() + j * per;
        spline::make_knots(p, blk.bins, blk.bound, kn);
        const double x = yin(i, c);
        const spline::Eval ev = spline::forward(x, kn);
        std::fill(scratch.begin(), scratch.end(), 0.0);
        const double dld_dx = spline::backward(x, kn, p, blk.bound, 0.0, 1.0, scratch.data());
        const double w = (s(i, c) - dld_dx) / std::exp(ev.logdet);
        s(i, c) = w;
        spline::backward(x, kn, p, blk.bound, w, 1.0, d_params.row(i).data() + j * per);
      }
    }
    Matrix dc;
    blk.net.backward(tape.caches[b][0], d_params, &dc);
    for (std::size_t j = 0; j < blk.mask.conditioner.size(); ++j) {
      s.col(blk.mask.conditioner[j]) -= dc.col(static_cast<Eigen::Index>(j));
    }
  }

  void block_inverse(const SplineCoupling& blk, Matrix& y) const {
    const Matrix cond = gather(y, blk.mask.conditioner);
    const Matrix params = blk.net.forward(cond);
    const int per = 3 * blk.bins - 1;
    spline::Knots kn;
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      for (std::size_t j = 0; j < blk.mask.transformed.size(); ++j) {
        const int c = blk.mask.transformed[j];
        spline::make_knots(params.row(i).data() + j * per, blk.bins, blk.bound, kn);
        y(i, c) = spline::inverse(y(i, c), kn);
      }
    }
  }

  GaussianMixture base_;
  Vector center_;
  Matrix to_latent_;
  Matrix from_latent_;
  std::vector<CouplingBlock> blocks_;
};

}  // namespace ada
