#pragma once

// Glue between a resolved ExperimentConfig and the library: reference data,
// training state, evaluation and the grid-oracle sweep.

#include "ada/config.hpp"
#include "ada/metrics.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ada {

/// Training allocates and frees batch-sized buffers every step; keeping them
/// on the heap instead of fresh mappings removes most of the system time.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

/// Independent RNG stream for (seed, purpose).
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t purpose) {
  std::uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (purpose + 1);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

enum StreamPurpose : std::uint64_t { kFlowInit = 1, kReference, kReferenceNoise, kEvalModel, kEvalReference, kEvalNoise };

struct Experiment {
  ExperimentConfig config;
  MixturePreset mixtures;
  std::vector<ObservablePtr> observables;
  std::vector<bool> stochastic;

  explicit Experiment(ExperimentConfig c)
      : config(std::move(c)), mixtures(resolve_mixtures(config)) {
    observables = resolve_observables(config, mixtures.base.dim());
    for (std::size_t i = 0; i < observables.size(); ++i) {
      stochastic.push_back(!config.observables.empty() && is_stochastic(config.observables[i]));
    }
  }

  FlowGenerator make_generator() const {
    return FlowGenerator(mixtures.base, config.flow, stream_seed(config.seed, kFlowInit));
  }

  std::vector<ObservableTarget> make_targets() const {
    Rng rng(stream_seed(config.seed, kReference));
    Rng noise(stream_seed(config.seed, kReferenceNoise));
    const Matrix states = mixtures.target.sample(config.reference_samples, rng);
    std::vector<ObservableTarget> out;
    for (std::size_t i = 0; i < observables.size(); ++i) {
      out.push_back(ObservableTarget::from_states(observables[i], states, stochastic[i], noise));
    }
    return out;
  }

  AlignState make_state(bool with_critics) const {
    return AlignState(make_generator(), make_targets(), config.align, with_critics);
  }
};

struct Evaluation {
  MetricBlock metrics;
  std::vector<Histogram1D> histograms;
};

/// Held-out comparison of generator samples against fresh target samples.
inline Evaluation evaluate(const Experiment& ex, const FlowGenerator& gen) {
  const ExperimentConfig& c = ex.config;
  Rng model_rng(stream_seed(c.seed, kEvalModel));
  Rng ref_rng(stream_seed(c.seed, kEvalReference));
  Rng noise(stream_seed(c.seed, kEvalNoise));
  const Matrix generated = gen.forward(gen.base().sample(c.eval_samples, model_rng)).x;
  const Matrix reference = ex.mixtures.target.sample(c.eval_samples, ref_rng);
  if (const auto bad = detail::first_non_finite(generated); bad >= 0) {
    throw NumericalError(detail::concat("evaluate: non-finite generated sample at flat index ", bad));
  }
  Evaluation ev;
  ev.metrics = mixture_metrics(ex.mixtures.target, generated, reference);
  ev.metrics.jsd_bins = c.jsd_bins;
  for (std::size_t i = 0; i < ex.observables.size(); ++i) {
    const auto& obs = ex.observables[i];
    Rng* r = ex.stochastic[i] ? &noise : nullptr;
    const Matrix m = obs->evaluate(generated, r);
    const Matrix q = obs->evaluate(reference, r);
    const std::string name = obs->name();
    if (m.cols() <= 3) {
      for (Eigen::Index k = 0; k < m.cols(); ++k) {
        const std::string key = m.cols() == 1 ? name : detail::concat(name, ".", k);
        ev.metrics.observable_w1[key] = w1_empirical(m.col(k), q.col(k));
        ev.histograms.push_back(histogram_1d(key, m.col(k), q.col(k), c.histogram_bins));
      }
    }
    if (m.cols() == 2) ev.metrics.fes_jsd[name] = jsd_2d(m, q, HistogramSpec2D::covering(m, q, c.jsd_bins));
  }
  // Structural summaries for particle states.
  const int dim = gen.dim();
  if (dim % 3 == 0 && dim / 3 >= 3) {
    const int atoms = dim / 3;
    const std::vector<double> unit(static_cast<std::size_t>(atoms), 1.0);
    Vector rg_model(generated.rows()), rg_ref(reference.rows());
    for (Eigen::Index r = 0; r < generated.rows(); ++r) {
      rg_model[r] = radius_of_gyration(Configuration::from_flat(generated.row(r).data(), unit));
      rg_ref[r] = radius_of_gyration(Configuration::from_flat(reference.row(r).data(), unit));
    }
    ev.metrics.extra["w1.radius_of_gyration"] = w1_empirical(rg_model, rg_ref);
    std::vector<Matrix> gen_frames, ref_frames;
    for (Eigen::Index r = 0; r < std::min<Eigen::Index>(generated.rows(), 200); ++r) {
      gen_frames.push_back(Configuration::from_flat(generated.row(r).data(), unit).positions);
    }
    for (int k = 0; k < ex.mixtures.target.components(); ++k) {
      ref_frames.push_back(Configuration::from_flat(ex.mixtures.target.means().row(k).data(), unit).positions);
    }
    ev.metrics.max_rmsd = max_rmsd_to_set(gen_frames, ref_frames);
  }
  return ev;
}

// ---- grid oracle ----

struct OracleProblem {
  DiscreteDist base;
  DiscreteDist target;  // on the same grid
  std::vector<GridObservable> observables;
  std::vector<std::string> names;
};

inline GaussianMixture mixture_1d(const Mixture1DSpec& m) {
  if (m.means.empty() || m.means.size() != m.sds.size() || m.means.size() != m.weights.size()) {
    throw ConfigError("1-D mixture: means, sds and weights must be non-empty and of equal length");
  }
  Matrix means(static_cast<Eigen::Index>(m.means.size()), 1);
  std::vector<double> var;
  for (std::size_t k = 0; k < m.means.size(); ++k) {
    means(static_cast<Eigen::Index>(k), 0) = m.means[k];
    var.push_back(m.sds[k] * m.sds[k]);
  }
  try {
    return {means, var, m.weights};
  } catch (const InputError& e) {
    throw ConfigError(std::string("1-D mixture: ") + e.what());
  }
}

/// Identity and absolute-value observables on a regular 1-D grid.
inline OracleProblem oracle_problem(const OracleSpec& o, bool with_identity = true) {
  const GridSpec grid{{o.lo}, {o.hi}, {o.grid_points}};
  OracleProblem p{grid_discretize(mixture_1d(o.base), grid), grid_discretize(mixture_1d(o.target), grid), {}, {}};
  const Vector x = p.base.points.col(0);
  if (with_identity) {
    p.observables.push_back({x, pushforward_1d(p.target.masses, x)});
    p.names.push_back("identity");
  }
  const Vector ax = x.cwiseAbs();
  p.observables.push_back({ax, pushforward_1d(p.target.masses, ax)});
  p.names.push_back("abs");
  return p;
}

struct OracleRow {
  double beta = 0.0;
  std::vector<double> gaps;
  double gap_sum = 0.0;
  double kl = 0.0;
  double bound = 0.0;  // KL(target || base) / beta
  double dual_gap = 0.0;
  int iterations = 0;
  bool converged = false;
};

inline std::vector<OracleRow> oracle_sweep(const OracleProblem& p, const std::vector<double>& betas,
                                           const GridAlignOptions& opts = {}) {
  const double kl_target = kl_discrete(p.target.masses, p.base.masses);
  std::vector<OracleRow> rows;
  for (double beta : betas) {
    const GridAlignResult r = grid_align(p.base, p.observables, beta, opts);
    OracleRow row;
    row.beta = beta;
    row.gaps = r.w1_gaps;
    for (double g : r.w1_gaps) row.gap_sum += g;
    row.kl = r.kl;
    row.bound = beta > 0.0 ? kl_target / beta : std::numeric_limits<double>::infinity();
    row.dual_gap = r.dual - r.primal;
    row.iterations = r.iterations;
    row.converged = r.converged;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline double total_variation(const Vector& p, const Vector& q) {
  detail::require(p.size() == q.size(), "total_variation: size mismatch");
  return 0.5 * (p - q).cwiseAbs().sum();
}

struct TiltComparison {
  double beta = 0.0;
  double total_variation = 0.0;
  double w1_gap = 0.0;
};

/// Single |x| observable: exact solver at large beta against the closed-form tilt.
inline TiltComparison tilt_comparison(const OracleSpec& o, const GridAlignOptions& opts = {}) {
  const OracleProblem p = oracle_problem(o, false);
  const GridObservable& g = p.observables.front();
  const DiscreteTilt tilt = analytic_tilt(p.base, g.values, g.target);
  const GridAlignResult r = grid_align(p.base, p.observables, o.tilt_beta, opts);
  return {o.tilt_beta, total_variation(r.solution.masses, tilt.tilted.masses), r.w1_gaps.front()};
}

// ---- ADA on the 1-D tilt problem ----

/// Settings that keep the 1-D critic ahead of the generator; with Adam's
/// default momentum the generator overshoots the target and oscillates.
inline AlignConfig tilt_ada_config(std::uint64_t seed) {
  AlignConfig c;
  c.beta = 1000.0;
  c.steps = 5000;
  c.critic_steps = 5;
  c.batch = 1024;
  c.generator_lr = 1e-5;
  c.generator_beta1 = 0.5;
  c.critic_lr = 1e-3;
  c.critic_beta1 = 0.5;
  c.lambda_gp = 100.0;
  c.penalty = PenaltyKind::one_sided;
  c.critic_hidden = {32, 32};
  c.kl_samples = 4000;
  c.seed = seed;
  return c;
}

struct TiltAdaResult {
  double w1_base = 0.0;     // base |x| marginal vs tilt marginal
  double w1_aligned = 0.0;  // aligned model vs tilt marginal
  AlignReport report;
};

/// ADA with the single |x| observable on the continuous oracle mixtures,
/// scored against samples of the binned analytic tilt.
inline TiltAdaResult tilt_ada(const OracleSpec& o, const AlignConfig& cfg, int reference_samples = 20000,
                              int eval_samples = 20000) {
  const GaussianMixture base = mixture_1d(o.base);
  const GaussianMixture target = mixture_1d(o.target);
  Rng ref_rng(stream_seed(cfg.seed, kReference));
  const Matrix ref = target.sample(reference_samples, ref_rng).cwiseAbs();
  auto abs_obs = std::make_shared<AbsoluteValue>(1, 0);
  FlowSpec flow;
  flow.kind = FlowSpec::Kind::spline;
  flow.blocks = 2;
  flow.hidden = {32, 32};
  AlignState st(FlowGenerator(base, flow, stream_seed(cfg.seed, kFlowInit)),
                {ObservableTarget::from_values(abs_obs, ref)}, cfg);

  Rng eval_rng(stream_seed(cfg.seed, kEvalReference));
  const Matrix base_states = base.sample(200000, eval_rng);
  const Vector base_values = base_states.col(0).cwiseAbs();
  const Vector target_values = target.sample(200000, eval_rng).col(0).cwiseAbs();
  // Edge bins are clamped, so both tails share one populated bin.
  const TiltedDensity tilt = analytic_tilt(base_values, target_values, BinSpec{0.0, 4.0, 80});
  const Vector tilt_values = tilt.resample(base_states, base_values, eval_samples, eval_rng).col(0).cwiseAbs();

  TiltAdaResult out;
  Rng model_rng(stream_seed(cfg.seed, kEvalModel));
  out.w1_base = w1_empirical(st.generator.forward(base.sample(eval_samples, model_rng)).x.col(0).cwiseAbs(), tilt_values);
  out.report = run_ada(st);
  out.w1_aligned = w1_empirical(st.generator.forward(base.sample(eval_samples, model_rng)).x.col(0).cwiseAbs(), tilt_values);
  return out;
}

}  // namespace ada
