#pragma once

// Adversarial distribution alignment and the moment-matching baseline.
//
// The generator ascends
//     L = -KL(mu_theta || mu_base) + beta * sum_i w_i (E_model f_i - E_ref f_i)
// while each critic f_i descends the same expression plus its gradient penalty.

#include <chrono>
#include <functional>

#include "ada/critics.hpp"
#include "ada/flowgen.hpp"
#include "ada/metrics.hpp"
#include "ada/observables.hpp"

namespace ada {

enum class KlGradient {
  path,      // drops the zero-mean score term; vanishes exactly at the base
  pathwise,  // full derivative of the Monte-Carlo estimate
};

struct AlignConfig {
  double beta = 128.0;
  std::vector<double> observable_weights;  // empty: 1 for every observable
  int steps = 10000;
  int critic_steps = 1;
  int batch = 1024;
  double generator_lr = 1e-5;
  double generator_beta1 = 0.9;
  double generator_beta2 = 0.999;
  double critic_lr = 1e-3;
  double critic_beta1 = 0.9;
  double critic_beta2 = 0.999;
  double lambda_gp = 1000.0;
  PenaltyKind penalty = PenaltyKind::two_sided;
  std::vector<int> critic_hidden = {512, 512};
  KlGradient kl_gradient = KlGradient::path;
  int kl_samples = 10000;  // final KL report
  std::uint64_t seed = 0;
  int ea_order = 4;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (!(beta >= 0.0) || !std::isfinite(beta)) fail("beta must be finite and non-negative");
    if (steps < 1 || critic_steps < 1 || batch < 1 || kl_samples < 2) fail("step, batch and sample counts must be positive");
    if (!(generator_lr >= 0.0) || !(critic_lr >= 0.0)) fail("learning rates must be non-negative");
    if (!(lambda_gp >= 0.0)) fail("lambda_gp must be non-negative");
    if (ea_order < 1) fail("ea_order must be at least 1");
    for (double w : observable_weights) {
      if (!(w >= 0.0)) fail("observable weights must be non-negative");
    }
    for (int h : critic_hidden) {
      if (h < 1) fail("critic hidden widths must be positive");
    }
  }

  double weight(std::size_t i) const { return observable_weights.empty() ? 1.0 : observable_weights.at(i); }
};

/// An observable with its reference data. Deterministic observables keep
/// precomputed values; stochastic ones (the noisy image) are re-evaluated on
/// resampled reference states with fresh noise for every batch.
struct ObservableTarget {
  ObservablePtr observable;
  Matrix reference_values;
  Matrix reference_states;
  bool stochastic = false;

  static ObservableTarget from_values(ObservablePtr obs, Matrix values) {
    detail::require(obs != nullptr, "ObservableTarget: null observable");
    detail::require(values.rows() >= 2 && values.cols() == obs->output_dim(), "ObservableTarget: reference values shape mismatch");
    return {std::move(obs), std::move(values), Matrix(), false};
  }

  static ObservableTarget from_states(ObservablePtr obs, Matrix states, bool stochastic, Rng& noise) {
    detail::require(obs != nullptr, "ObservableTarget: null observable");
    detail::require(states.rows() >= 2, "ObservableTarget: need at least two reference states");
    ObservableTarget t;
    t.reference_values = obs->evaluate(states, stochastic ? &noise : nullptr);
    t.observable = std::move(obs);
    t.reference_states = std::move(states);
    t.stochastic = stochastic;
    return t;
  }

  /// n reference observations drawn with replacement.
  Matrix draw(int n, Rng& rng) const {
    const Eigen::Index pool = stochastic ? reference_states.rows() : reference_values.rows();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    for (auto& i : idx) i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(pool));
    if (stochastic) {
      Matrix states(n, reference_states.cols());
      for (int k = 0; k < n; ++k) states.row(k) = reference_states.row(idx[static_cast<std::size_t>(k)]);
      return observable->evaluate(states, &rng);
    }
    Matrix out(n, reference_values.cols());
    for (int k = 0; k < n; ++k) out.row(k) = reference_values.row(idx[static_cast<std::size_t>(k)]);
    return out;
  }

  Matrix model_values(const Matrix& states, Rng& rng) const {
    return observable->evaluate(states, stochastic ? &rng : nullptr);
  }
};

struct LagrangianValue {
  double kl = 0.0;
  std::vector<double> gaps;
  double value = 0.0;
};

/// -KL + beta * sum_i w_i gap_i on one batch of base draws and reference observations.
inline LagrangianValue lagrangian(const FlowGenerator& gen, const std::vector<Critic>& critics,
                                  const std::vector<ObservableTarget>& targets, const Matrix& z,
                                  const std::vector<Matrix>& reference_batches, const AlignConfig& cfg,
                                  Rng* noise = nullptr) {
  if (critics.size() != targets.size() || reference_batches.size() != targets.size()) {
    throw InputError(detail::concat("lagrangian: ", targets.size(), " observables but ", critics.size(),
                                    " critics and ", reference_batches.size(), " reference batches"));
  }
  const FlowSample fs = gen.forward(z);
  LagrangianValue out;
  out.kl = detail::ordered_mean(gen.kl_integrand(z, fs));
  out.value = -out.kl;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const Matrix u = targets[i].observable->evaluate(fs.x, targets[i].stochastic ? noise : nullptr);
    out.gaps.push_back(wasserstein_gap(critics[i], u, reference_batches[i]));
    out.value += cfg.beta * cfg.weight(i) * out.gaps.back();
  }
  return out;
}

struct StepInfo {
  double kl = 0.0;
  std::vector<double> gaps;  // critic gaps (ADA) or squared moment residuals (EA)
  double lagrangian = 0.0;
  std::vector<double> critic_loss;
  std::vector<double> critic_grad_norm;
};

/// Everything the training loop mutates.
struct AlignState {
  FlowGenerator generator;
  std::vector<ObservableTarget> targets;
  std::vector<Critic> critics;
  AlignConfig config;
  OptState generator_opt;
  Rng rng;

  AlignState(FlowGenerator gen, std::vector<ObservableTarget> tg, AlignConfig cfg, bool with_critics = true)
      : generator(std::move(gen)), targets(std::move(tg)), config(std::move(cfg)), rng(config.seed) {
    config.validate();
    detail::require(!targets.empty(), "AlignState: no observables");
    if (!config.observable_weights.empty() && config.observable_weights.size() != targets.size()) {
      throw ConfigError(detail::concat("observable_weights has ", config.observable_weights.size(),
                                       " entries for ", targets.size(), " observables"));
    }
    for (const auto& t : targets) {
      detail::require(t.observable->input_dim() == generator.dim(),
                      detail::concat("observable ", t.observable->name(), " expects states of width ",
                                     t.observable->input_dim(), ", generator has ", generator.dim()));
    }
    generator_opt = OptState(generator.num_params(), config.generator_lr, config.generator_beta1, config.generator_beta2);
    if (with_critics) {
      CriticOptions co;
      co.hidden = config.critic_hidden;
      co.lambda_gp = config.lambda_gp;
      co.penalty = config.penalty;
      co.learning_rate = config.critic_lr;
      co.beta1 = config.critic_beta1;
      co.beta2 = config.critic_beta2;
      for (const auto& t : targets) critics.push_back(Critic::for_reference(t.reference_values, co, rng));
    }
  }
};

namespace detail {

/// KL estimate and the adjoint of the last block output for -KL.
inline double neg_kl_adjoint(const FlowGenerator& gen, const FlowTape& tape, const FlowSample& fs, KlGradient kind,
                             Matrix& dy, Vector& dlogdet) {
  const Vector v = gen.kl_integrand(tape.z, fs);
  const double n = static_cast<double>(tape.z.rows());
  if (kind == KlGradient::path) {
    dy = -gen.kl_path_adjoint(tape, fs);
    dlogdet = Vector::Zero(tape.z.rows());
  } else {
    dy = (gen.base().grad_log_pdf(fs.x) / n) * gen.frame_from_latent();
    dlogdet = Vector::Constant(tape.z.rows(), 1.0 / n);
  }
  return ordered_mean(v);
}

}  // namespace detail

/// One iteration: generator ascent and critic descent, both from the current
/// parameters. The reported gap is the critic's pre-step gap on the batch.
inline StepInfo ada_step(AlignState& st) {
  const AlignConfig& cfg = st.config;
  FlowGenerator& gen = st.generator;
  const int n = cfg.batch;
  const Matrix z = gen.base().sample(n, st.rng);
  FlowTape tape;
  const FlowSample fs = gen.forward(z, tape);

  StepInfo info;
  Matrix dy;
  Vector dlogdet;
  info.kl = detail::neg_kl_adjoint(gen, tape, fs, cfg.kl_gradient, dy, dlogdet);
  info.lagrangian = -info.kl;

  Matrix dx = Matrix::Zero(n, gen.dim());
  for (std::size_t i = 0; i < st.targets.size(); ++i) {
    const auto& t = st.targets[i];
    Critic& critic = st.critics[i];
    const Matrix model_obs = t.model_values(fs.x, st.rng);
    const double coef = cfg.beta * cfg.weight(i);
    if (coef != 0.0) {
      dx += (coef / n) * t.observable->pullback(fs.x, critic.score_gradient(model_obs));
    }
    CriticStepInfo first, last;
    for (int k = 0; k < cfg.critic_steps; ++k) {
      last = critic_update(critic, model_obs, t.draw(n, st.rng), st.rng);
      if (k == 0) first = last;
    }
    info.gaps.push_back(first.gap);
    info.lagrangian += coef * first.gap;
    info.critic_loss.push_back(last.loss);
    info.critic_grad_norm.push_back(last.mean_grad_norm);
  }
  if (!std::isfinite(info.lagrangian)) {
    throw NumericalError(detail::concat("ada_step: non-finite Lagrangian (KL ", info.kl, ") at generator step ",
                                        st.generator_opt.step + 1));
  }
  dy += dx * gen.frame_from_latent();
  Vector params = gen.parameters();
  adam_step(params, gen.backward_frame(tape, dy, dlogdet), st.generator_opt, Direction::ascend);
  gen.set_parameters(params);
  return info;
}

// ---- expectation alignment ----

/// All exponent vectors alpha with 1 <= |alpha| <= order over k variables.
inline std::vector<std::vector<int>> monomials(int k, int order) {
  detail::require(k >= 1 && order >= 1, "monomials: need k >= 1 and order >= 1");
  std::vector<std::vector<int>> out;
  std::vector<int> alpha(static_cast<std::size_t>(k), 0);
  std::function<void(int, int)> rec = [&](int pos, int left) {
    if (pos == k) {
      int deg = 0;
      for (int a : alpha) deg += a;
      if (deg >= 1) out.push_back(alpha);
      return;
    }
    for (int e = 0; e <= left; ++e) {
      alpha[static_cast<std::size_t>(pos)] = e;
      rec(pos + 1, left - e);
    }
    alpha[static_cast<std::size_t>(pos)] = 0;
  };
  rec(0, order);
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    int da = 0, db = 0;
    for (int x : a) da += x;
    for (int x : b) db += x;
    return da < db;
  });
  return out;
}

/// Moment constraints of one observable on standardized values.
struct MomentTarget {
  Vector shift, scale;
  std::vector<std::vector<int>> alphas;
  Vector reference;  // reference moments

  static MomentTarget fit(const Matrix& ref, int order) {
    MomentTarget m;
    const auto k = static_cast<int>(ref.cols());
    m.shift.resize(k);
    m.scale.resize(k);
    const double n = static_cast<double>(ref.rows());
    for (int j = 0; j < k; ++j) {
      m.shift[j] = detail::ordered_mean(ref.col(j));
      double ss = 0.0;
      for (Eigen::Index i = 0; i < ref.rows(); ++i) ss += (ref(i, j) - m.shift[j]) * (ref(i, j) - m.shift[j]);
      const double sd = std::sqrt(ss / (n - 1.0));
      m.scale[j] = sd > 1e-12 ? sd : 1.0;
    }
    m.alphas = monomials(k, order);
    m.reference = m.moments(ref);
    return m;
  }

  Matrix standardize(const Matrix& o) const {
    Matrix u = o.rowwise() - shift.transpose();
    u.array().rowwise() /= scale.transpose().array();
    return u;
  }

  Vector moments(const Matrix& o) const {
    const Matrix u = standardize(o);
    Vector m = Vector::Zero(static_cast<Eigen::Index>(alphas.size()));
    for (std::size_t a = 0; a < alphas.size(); ++a) {
      double s = 0.0;
      for (Eigen::Index i = 0; i < u.rows(); ++i) {
        double v = 1.0;
        for (Eigen::Index j = 0; j < u.cols(); ++j) v *= std::pow(u(i, j), alphas[a][static_cast<std::size_t>(j)]);
        s += v;
      }
      m[static_cast<Eigen::Index>(a)] = s / static_cast<double>(u.rows());
    }
    return m;
  }

  /// Row i: d/d o_i of sum_a coef_a * monomial_a(standardized o_i).
  Matrix pull(const Matrix& o, const Vector& coef) const {
    const Matrix u = standardize(o);
    Matrix g = Matrix::Zero(u.rows(), u.cols());
    for (std::size_t a = 0; a < alphas.size(); ++a) {
      const double c = coef[static_cast<Eigen::Index>(a)];
      if (c == 0.0) continue;
      for (Eigen::Index i = 0; i < u.rows(); ++i) {
        for (Eigen::Index j = 0; j < u.cols(); ++j) {
          const int e = alphas[a][static_cast<std::size_t>(j)];
          if (e == 0) continue;
          double v = e * std::pow(u(i, j), e - 1);
          for (Eigen::Index l = 0; l < u.cols(); ++l) {
            if (l != j) v *= std::pow(u(i, l), alphas[a][static_cast<std::size_t>(l)]);
          }
          g(i, j) += c * v / scale[j];
        }
      }
    }
    return g;
  }
};

/// One generator ascent step on -KL - beta * sum_i w_i |moments_i - reference_i|^2.
inline StepInfo ea_step(AlignState& st, const std::vector<MomentTarget>& moments) {
  const AlignConfig& cfg = st.config;
  FlowGenerator& gen = st.generator;
  const int n = cfg.batch;
  const Matrix z = gen.base().sample(n, st.rng);
  FlowTape tape;
  const FlowSample fs = gen.forward(z, tape);
  StepInfo info;
  Matrix dy;
  Vector dlogdet;
  info.kl = detail::neg_kl_adjoint(gen, tape, fs, cfg.kl_gradient, dy, dlogdet);
  info.lagrangian = -info.kl;
  Matrix dx = Matrix::Zero(n, gen.dim());
  for (std::size_t i = 0; i < st.targets.size(); ++i) {
    const auto& t = st.targets[i];
    const Matrix u = t.model_values(fs.x, st.rng);
    const Vector r = moments[i].moments(u) - moments[i].reference;
    const double sq = r.squaredNorm();
    info.gaps.push_back(sq);
    const double coef = cfg.beta * cfg.weight(i);
    info.lagrangian -= coef * sq;
    if (coef != 0.0) dx += t.observable->pullback(fs.x, moments[i].pull(u, (-2.0 * coef / n) * r));
  }
  if (!std::isfinite(info.lagrangian)) {
    throw NumericalError(detail::concat("ea_step: non-finite objective (KL ", info.kl, ") at generator step ",
                                        st.generator_opt.step + 1));
  }
  dy += dx * gen.frame_from_latent();
  Vector params = gen.parameters();
  adam_step(params, gen.backward_frame(tape, dy, dlogdet), st.generator_opt, Direction::ascend);
  gen.set_parameters(params);
  return info;
}

struct AlignReport {
  std::string method;  // "ada" or "ea"
  AlignConfig config;
  std::vector<std::string> observables;
  std::vector<double> kl_trace;
  std::vector<std::vector<double>> gap_trace;  // [step][observable]
  std::vector<double> lagrangian_trace;
  double final_kl = 0.0;
  double final_kl_std_error = 0.0;
  MetricBlock metrics;
  double wall_seconds = 0.0;

  void record(const StepInfo& s) {
    kl_trace.push_back(s.kl);
    gap_trace.push_back(s.gaps);
    lagrangian_trace.push_back(s.lagrangian);
  }
};

/// Called every `every` steps (and after the last) with the 1-based step count.
struct Checkpointing {
  int every = 0;
  std::function<void(int, const AlignState&)> callback;
};

namespace detail {

template <typename Step>
AlignReport run_loop(AlignState& st, const std::string& method, Step&& step, const Checkpointing& ck) {
  const auto t0 = std::chrono::steady_clock::now();
  AlignReport rep;
  rep.method = method;
  rep.config = st.config;
  for (const auto& t : st.targets) rep.observables.push_back(t.observable->name());
  for (int s = 1; s <= st.config.steps; ++s) {
    rep.record(step());
    if (ck.callback && ((ck.every > 0 && s % ck.every == 0) || s == st.config.steps)) ck.callback(s, st);
  }
  const KlEstimate kl = st.generator.kl_to_base(st.config.kl_samples, st.config.seed ^ 0x9e3779b97f4a7c15ULL);
  rep.final_kl = kl.mean;
  rep.final_kl_std_error = kl.std_error;
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace detail

/// Runs cfg.steps ADA iterations on `st` (generator at its pre-trained state).
inline AlignReport run_ada(AlignState& st, const Checkpointing& ck = {}) {
  detail::require(st.critics.size() == st.targets.size(), "run_ada: one critic per observable required");
  return detail::run_loop(st, "ada", [&] { return ada_step(st); }, ck);
}

/// Moment-matching baseline of order cfg.ea_order with reference moments fixed up front.
inline AlignReport run_ea(AlignState& st, const Checkpointing& ck = {}) {
  std::vector<MomentTarget> moments;
  for (const auto& t : st.targets) moments.push_back(MomentTarget::fit(t.reference_values, st.config.ea_order));
  return detail::run_loop(st, "ea", [&] { return ea_step(st, moments); }, ck);
}

}  // namespace ada
