#pragma once

// Per-observable critics with a gradient penalty at random interpolates.

#include <fstream>

#include "ada/diffcore.hpp"

namespace ada {

enum class PenaltyKind {
  two_sided,  // (|g| - 1)^2
  one_sided,  // max(0, |g| - 1)^2
};

struct CriticOptions {
  std::vector<int> hidden = {512, 512};
  double lambda_gp = 1000.0;
  PenaltyKind penalty = PenaltyKind::two_sided;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
};

/// Scalar scorer on observables. Inputs are standardized with a transform
/// frozen at construction; the penalty acts in the standardized space.
class Critic {
 public:
  Critic(DenseNet net, Vector shift, Vector scale, double lambda_gp, PenaltyKind penalty, OptState opt)
      : net_(std::move(net)), shift_(std::move(shift)), scale_(std::move(scale)),
        lambda_gp_(lambda_gp), penalty_(penalty), opt_(std::move(opt)) {
    detail::require(net_.output_width() == 1, "Critic: scorer must have scalar output");
    detail::require(shift_.size() == net_.input_width() && scale_.size() == net_.input_width(),
                    "Critic: normalization width mismatch");
    detail::require((scale_.array() > 0.0).all(), "Critic: normalization scales must be positive");
    detail::require(lambda_gp_ >= 0.0, "Critic: penalty weight must be non-negative");
    detail::require(opt_.m.size() == net_.num_params(), "Critic: optimizer state size mismatch");
  }

  /// Random scorer whose normalization is the reference mean and standard deviation.
  static Critic for_reference(const Matrix& reference, const CriticOptions& opts, Rng& rng) {
    detail::require(reference.rows() >= 2, "Critic: need at least two reference rows");
    const auto k = static_cast<int>(reference.cols());
    std::vector<int> widths = {k};
    widths.insert(widths.end(), opts.hidden.begin(), opts.hidden.end());
    widths.push_back(1);
    DenseNet net = DenseNet::random(widths, rng);
    Vector shift(k), scale(k);
    const double n = static_cast<double>(reference.rows());
    for (int j = 0; j < k; ++j) {
      shift[j] = detail::ordered_mean(reference.col(j));
      double ss = 0.0;
      for (Eigen::Index i = 0; i < reference.rows(); ++i) ss += (reference(i, j) - shift[j]) * (reference(i, j) - shift[j]);
      const double sd = std::sqrt(ss / (n - 1.0));
      scale[j] = sd > 1e-12 ? sd : 1.0;
    }
    OptState opt(net.num_params(), opts.learning_rate, opts.beta1, opts.beta2);
    return {std::move(net), std::move(shift), std::move(scale), opts.lambda_gp, opts.penalty, std::move(opt)};
  }

  /// Critic without normalization (shift 0, scale 1).
  static Critic raw(DenseNet net, double lambda_gp, PenaltyKind penalty = PenaltyKind::two_sided,
                    double learning_rate = 1e-3) {
    const int k = net.input_width();
    OptState opt(net.num_params(), learning_rate);
    return {std::move(net), Vector::Zero(k), Vector::Ones(k), lambda_gp, penalty, std::move(opt)};
  }

  int input_dim() const { return net_.input_width(); }
  const DenseNet& net() const { return net_; }
  DenseNet& net() { return net_; }
  const Vector& shift() const { return shift_; }
  const Vector& scale() const { return scale_; }
  double lambda_gp() const { return lambda_gp_; }
  PenaltyKind penalty() const { return penalty_; }
  OptState& optimizer() { return opt_; }
  const OptState& optimizer() const { return opt_; }

  Matrix normalize(const Matrix& o) const {
    check_width(o);
    Matrix u = o.rowwise() - shift_.transpose();
    u.array().rowwise() /= scale_.transpose().array();
    return u;
  }

  Vector scores(const Matrix& o) const { return net_.forward(normalize(o)).col(0); }

  /// Row i: gradient of the score with respect to the raw observable o_i.
  Matrix score_gradient(const Matrix& o) const {
    Matrix g = net_.input_gradient(normalize(o));
    g.array().rowwise() /= scale_.transpose().array();
    return g;
  }

  void check_width(const Matrix& o) const {
    if (o.cols() != input_dim()) {
      throw InputError(detail::concat("Critic: observable width ", o.cols(), ", expected ", input_dim()));
    }
  }

  void save(std::ostream& os) const { detail::write_checkpoint(os, "critic", net_.params()); }
  void load(std::istream& is) { net_.params() = detail::read_checkpoint(is, "critic", net_.num_params()); }

 private:
  DenseNet net_;
  Vector shift_;
  Vector scale_;
  double lambda_gp_;
  PenaltyKind penalty_;
  OptState opt_;
};

/// Mean score on the model batch minus mean score on the reference batch.
inline double wasserstein_gap(const Critic& c, const Matrix& model, const Matrix& reference) {
  detail::require(model.rows() >= 1 && reference.rows() >= 1, "wasserstein_gap: empty batch");
  detail::require(model.cols() == reference.cols(), "wasserstein_gap: batch widths differ");
  return detail::ordered_mean(c.scores(model)) - detail::ordered_mean(c.scores(reference));
}

struct PenaltyValue {
  double value = 0.0;
  Vector grad;  // with respect to the critic parameters
  double mean_grad_norm = 0.0;
};

/// Penalty at the given standardized points.
inline PenaltyValue gradient_penalty_at(const Critic& c, const Matrix& points) {
  const Eigen::Index n = points.rows();
  const double lambda = c.lambda_gp();
  PenaltyValue out;
  double total = 0.0, norms = 0.0;
  auto adjoint = [&](const Matrix& g) {
    Matrix g_bar(n, g.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const double norm = g.row(i).norm();
      norms += norm;
      double excess = norm - 1.0;
      if (c.penalty() == PenaltyKind::one_sided) excess = std::max(excess, 0.0);
      total += excess * excess;
      const double coef = norm > 0.0 ? lambda * 2.0 * excess / (norm * static_cast<double>(n)) : 0.0;
      g_bar.row(i) = coef * g.row(i);
    }
    return g_bar;
  };
  out.grad = c.net().input_gradient_vjp(points, adjoint);
  out.value = lambda * total / static_cast<double>(n);
  out.mean_grad_norm = norms / static_cast<double>(n);
  return out;
}

/// Interpolates u * model + (1 - u) * reference with one u ~ U(0, 1) per row,
/// after standardization. Rows are paired by index (cycled for unequal sizes).
inline Matrix penalty_interpolates(const Critic& c, const Matrix& model, const Matrix& reference, Rng& rng) {
  detail::require(model.cols() == reference.cols(), "gradient_penalty: batch widths differ");
  detail::require(model.rows() >= 1 && reference.rows() >= 1, "gradient_penalty: empty batch");
  const Matrix a = c.normalize(model);
  const Matrix b = c.normalize(reference);
  const Eigen::Index n = std::max(a.rows(), b.rows());
  Matrix out(n, a.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = detail::uniform01(rng);
    out.row(i) = u * a.row(i % a.rows()) + (1.0 - u) * b.row(i % b.rows());
  }
  return out;
}

inline PenaltyValue gradient_penalty(const Critic& c, const Matrix& model, const Matrix& reference, Rng& rng) {
  return gradient_penalty_at(c, penalty_interpolates(c, model, reference, rng));
}

struct CriticStepInfo {
  double loss = 0.0;  // gap + penalty before the step
  double gap = 0.0;
  double penalty = 0.0;
  double mean_grad_norm = 0.0;
};

/// Loss gap + penalty and its parameter gradient.
inline CriticStepInfo critic_loss(const Critic& c, const Matrix& model, const Matrix& reference, Rng& rng,
                                  Vector& grad) {
  detail::require(model.rows() >= 1 && reference.rows() >= 1, "critic_update: empty batch");
  detail::require(model.cols() == reference.cols(), "critic_update: batch widths differ");
  const DenseNet& net = c.net();
  ForwardCache cm, cr;
  const Matrix fm = net.forward(c.normalize(model), cm);
  const Matrix fr = net.forward(c.normalize(reference), cr);
  CriticStepInfo info;
  info.gap = detail::ordered_mean(fm.col(0)) - detail::ordered_mean(fr.col(0));
  grad = net.backward(cm, Matrix::Constant(fm.rows(), 1, 1.0 / static_cast<double>(fm.rows())));
  grad -= net.backward(cr, Matrix::Constant(fr.rows(), 1, 1.0 / static_cast<double>(fr.rows())));
  const PenaltyValue gp = gradient_penalty(c, model, reference, rng);
  grad += gp.grad;
  info.penalty = gp.value;
  info.mean_grad_norm = gp.mean_grad_norm;
  info.loss = info.gap + info.penalty;
  return info;
}

/// One descent step on gap + penalty (the critic side of the Lagrangian).
inline CriticStepInfo critic_update(Critic& c, const Matrix& model, const Matrix& reference, Rng& rng) {
  Vector grad;
  const CriticStepInfo info = critic_loss(c, model, reference, rng, grad);
  if (!std::isfinite(info.loss)) {
    throw NumericalError(detail::concat("critic_update: non-finite loss (gap ", info.gap, ", penalty ",
                                        info.penalty, ") at optimizer step ", c.optimizer().step));
  }
  adam_step(c.net().params(), grad, c.optimizer(), Direction::descend);
  return info;
}

}  // namespace ada
