#pragma once

// Experiment configuration: a single JSON document, validated strictly
// (unknown keys and wrong types are rejected), plus its resolution into
// library objects.

#include <json.hpp>

#include <set>

#include "ada/align.hpp"
#include "ada/io.hpp"
#include "ada/oracle.hpp"

namespace ada {

using Json = nlohmann::ordered_json;

struct ObservableSpec {
  std::string type = "projection";  // projection | abs | radius_of_gyration | mean_interatomic_distance
                                    // | pair_distance | group_com_distance | splat_image
  std::vector<int> axes;            // projection; abs uses the first axis
  int i = 0, j = 1;                 // pair_distance
  std::vector<int> group_a, group_b;
  std::vector<double> masses;       // particle observables; empty = unit masses
  ImageSpec image;
};

struct Mixture1DSpec {
  std::vector<double> means, sds, weights;
};

struct OracleSpec {
  int grid_points = 64;
  double lo = -3.0, hi = 3.0;
  std::vector<double> betas = {1.0, 10.0, 100.0, 1000.0};
  double tilt_beta = 1000.0;
  Mixture1DSpec base{{-1.5, 1.5}, {0.7, 0.7}, {0.5, 0.5}};
  Mixture1DSpec target{{-1.2, 1.8}, {0.5, 0.6}, {0.3, 0.7}};
};

struct ExperimentConfig {
  std::string preset = "synthetic-cube-v1";
  std::optional<MixturePreset> mixtures;  // inline definition overrides the preset
  std::uint64_t seed = 0;
  std::string out = "out";
  AlignConfig align;
  FlowSpec flow;
  std::vector<ObservableSpec> observables;  // empty: pairwise projections of 3-D states
  int reference_samples = 100000;
  int eval_samples = 2000;
  int jsd_bins = 50;
  int histogram_bins = 60;
  int checkpoint_every = 1000;
  std::vector<std::string> checkpoints;  // eval: generator checkpoints to score
  OracleSpec oracle;

  /// Defaults of the synthetic-cube preset.
  ExperimentConfig() {
    align.penalty = PenaltyKind::one_sided;
    align.critic_hidden = {64, 64};
    flow.kind = FlowSpec::Kind::spline;
    flow.blocks = 6;
    flow.hidden = {32, 32};
    flow.spline_bins = 8;
    flow.spline_bound = 3.0;
  }
};

namespace detail {

class JsonReader {
 public:
  JsonReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }
  ~JsonReader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(concat(path_, ": unknown key '", it.key(), "'"));
    }
  }

  bool has(const std::string& k) const { return j_.contains(k); }
  const Json* child(const std::string& k) {
    seen_.insert(k);
    return j_.contains(k) ? &j_.at(k) : nullptr;
  }
  std::string where(const std::string& k) const { return path_ + "." + k; }

  template <typename T>
  void get(const std::string& k, T& out) {
    const Json* v = child(k);
    if (v == nullptr) return;
    try {
      out = read<T>(*v, where(k));
    } catch (const Json::exception& e) {
      throw ConfigError(concat(where(k), ": ", e.what()));
    }
  }

 private:
  template <typename T>
  static T read(const Json& v, const std::string& at) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(at + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(at + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError(at + ": expected a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(at + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(at + ": expected a string");
    } else {
      if (!v.is_array()) throw ConfigError(at + ": expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) out.push_back(read<typename T::value_type>(v[i], concat(at, "[", i, "]")));
      return out;
    }
    return v.get<T>();
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline GaussianMixture mixture_from_json(const Json& j, const std::string& at) {
  Matrix means;
  std::vector<std::vector<double>> rows;
  std::vector<double> variances, weights;
  {
    JsonReader r(j, at);
    r.get("means", rows);
    r.get("variances", variances);
    r.get("weights", weights);
  }
  if (rows.empty() || rows[0].empty()) throw ConfigError(at + ".means: need at least one component");
  means.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k].size() != rows[0].size()) throw ConfigError(at + ".means: ragged rows");
    for (std::size_t d = 0; d < rows[k].size(); ++d) means(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d)) = rows[k][d];
  }
  try {
    return {std::move(means), std::move(variances), std::move(weights)};
  } catch (const InputError& e) {
    throw ConfigError(at + ": " + e.what());
  }
}

inline Mixture1DSpec mixture1d_from_json(const Json& j, const std::string& at) {
  Mixture1DSpec m;
  JsonReader r(j, at);
  r.get("means", m.means);
  r.get("sds", m.sds);
  r.get("weights", m.weights);
  return m;
}

}  // namespace detail

inline ExperimentConfig parse_config(const Json& root) {
  using detail::JsonReader;
  ExperimentConfig c;
  {
    JsonReader r(root, "config");
    r.get("preset", c.preset);
    if (const Json* m = r.child("mixture")) {
      JsonReader mr(*m, "config.mixture");
      const Json* b = mr.child("base");
      const Json* t = mr.child("target");
      if (!b || !t) throw ConfigError("config.mixture: needs both 'base' and 'target'");
      c.mixtures = MixturePreset{detail::mixture_from_json(*b, "config.mixture.base"),
                                 detail::mixture_from_json(*t, "config.mixture.target")};
      if (c.mixtures->base.dim() != c.mixtures->target.dim()) throw ConfigError("config.mixture: base and target dimensions differ");
    }
    r.get("seed", c.seed);
    r.get("out", c.out);
    r.get("reference_samples", c.reference_samples);
    r.get("eval_samples", c.eval_samples);
    r.get("jsd_bins", c.jsd_bins);
    r.get("histogram_bins", c.histogram_bins);
    r.get("checkpoint_every", c.checkpoint_every);
    r.get("checkpoints", c.checkpoints);
    if (const Json* a = r.child("align")) {
      JsonReader ar(*a, "config.align");
      AlignConfig& al = c.align;
      ar.get("beta", al.beta);
      ar.get("observable_weights", al.observable_weights);
      ar.get("steps", al.steps);
      ar.get("critic_steps", al.critic_steps);
      ar.get("batch", al.batch);
      ar.get("generator_lr", al.generator_lr);
      ar.get("generator_beta1", al.generator_beta1);
      ar.get("generator_beta2", al.generator_beta2);
      ar.get("critic_lr", al.critic_lr);
      ar.get("critic_beta1", al.critic_beta1);
      ar.get("critic_beta2", al.critic_beta2);
      ar.get("lambda_gp", al.lambda_gp);
      std::string penalty = penalty_name(al.penalty), klg = kl_gradient_name(al.kl_gradient);
      ar.get("penalty", penalty);
      if (penalty == "one_sided") al.penalty = PenaltyKind::one_sided;
      else if (penalty == "two_sided") al.penalty = PenaltyKind::two_sided;
      else throw ConfigError("config.align.penalty: expected 'one_sided' or 'two_sided'");
      ar.get("kl_gradient", klg);
      if (klg == "path") al.kl_gradient = KlGradient::path;
      else if (klg == "pathwise") al.kl_gradient = KlGradient::pathwise;
      else throw ConfigError("config.align.kl_gradient: expected 'path' or 'pathwise'");
      ar.get("critic_hidden", al.critic_hidden);
      ar.get("kl_samples", al.kl_samples);
      ar.get("ea_order", al.ea_order);
    }
    if (const Json* f = r.child("flow")) {
      JsonReader fr(*f, "config.flow");
      std::string kind = c.flow.kind == FlowSpec::Kind::spline ? "spline" : "affine";
      fr.get("kind", kind);
      if (kind == "spline") c.flow.kind = FlowSpec::Kind::spline;
      else if (kind == "affine") c.flow.kind = FlowSpec::Kind::affine;
      else throw ConfigError("config.flow.kind: expected 'spline' or 'affine'");
      fr.get("blocks", c.flow.blocks);
      fr.get("hidden", c.flow.hidden);
      fr.get("bins", c.flow.spline_bins);
      fr.get("bound", c.flow.spline_bound);
      fr.get("scale_bound", c.flow.scale_bound);
    }
    if (const Json* obs = r.child("observables")) {
      if (!obs->is_array()) throw ConfigError("config.observables: expected an array");
      for (std::size_t k = 0; k < obs->size(); ++k) {
        ObservableSpec s;
        JsonReader orr((*obs)[k], detail::concat("config.observables[", k, "]"));
        orr.get("type", s.type);
        orr.get("axes", s.axes);
        orr.get("i", s.i);
        orr.get("j", s.j);
        orr.get("group_a", s.group_a);
        orr.get("group_b", s.group_b);
        orr.get("masses", s.masses);
        orr.get("side", s.image.side);
        orr.get("sigma_pixels", s.image.sigma_pixels);
        orr.get("pixel_size", s.image.pixel_size);
        orr.get("snr", s.image.snr);
        orr.get("noiseless", s.image.noiseless);
        c.observables.push_back(std::move(s));
      }
    }
    if (const Json* o = r.child("oracle")) {
      JsonReader orr(*o, "config.oracle");
      orr.get("grid_points", c.oracle.grid_points);
      orr.get("lo", c.oracle.lo);
      orr.get("hi", c.oracle.hi);
      orr.get("betas", c.oracle.betas);
      orr.get("tilt_beta", c.oracle.tilt_beta);
      if (const Json* b = orr.child("base")) c.oracle.base = detail::mixture1d_from_json(*b, "config.oracle.base");
      if (const Json* t = orr.child("target")) c.oracle.target = detail::mixture1d_from_json(*t, "config.oracle.target");
    }
  }
  c.align.seed = c.seed;
  try {
    c.align.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config.align: ") + e.what());
  }
  if (c.reference_samples < 2 || c.eval_samples < 2 || c.jsd_bins < 1 || c.histogram_bins < 1 || c.checkpoint_every < 0) {
    throw ConfigError("config: sample, bin and checkpoint counts must be positive");
  }
  if (c.flow.blocks < 1 || c.flow.spline_bins < 2 || !(c.flow.spline_bound > 0.0) || !(c.flow.scale_bound > 0.0)) {
    throw ConfigError("config.flow: need blocks >= 1, bins >= 2 and positive bounds");
  }
  if (c.oracle.grid_points < 2 || !(c.oracle.hi > c.oracle.lo)) throw ConfigError("config.oracle: bad grid");
  if (!c.mixtures) {
    try {
      mixture_preset(c.preset);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config.preset: ") + e.what());
    }
  }
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

inline Json to_json(const GaussianMixture& g) {
  Json j;
  j["means"] = Json::array();
  for (int k = 0; k < g.components(); ++k) {
    Json row = Json::array();
    for (int d = 0; d < g.dim(); ++d) row.push_back(g.means()(k, d));
    j["means"].push_back(row);
  }
  j["variances"] = g.variances();
  j["weights"] = g.weights();
  return j;
}

/// Fully resolved configuration, suitable for re-parsing.
inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["preset"] = c.preset;
  if (c.mixtures) j["mixture"] = {{"base", to_json(c.mixtures->base)}, {"target", to_json(c.mixtures->target)}};
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["reference_samples"] = c.reference_samples;
  j["eval_samples"] = c.eval_samples;
  j["jsd_bins"] = c.jsd_bins;
  j["histogram_bins"] = c.histogram_bins;
  j["checkpoint_every"] = c.checkpoint_every;
  j["checkpoints"] = c.checkpoints;
  const AlignConfig& a = c.align;
  j["align"] = {{"beta", a.beta},
                {"observable_weights", a.observable_weights},
                {"steps", a.steps},
                {"critic_steps", a.critic_steps},
                {"batch", a.batch},
                {"generator_lr", a.generator_lr},
                {"generator_beta1", a.generator_beta1},
                {"generator_beta2", a.generator_beta2},
                {"critic_lr", a.critic_lr},
                {"critic_beta1", a.critic_beta1},
                {"critic_beta2", a.critic_beta2},
                {"lambda_gp", a.lambda_gp},
                {"penalty", penalty_name(a.penalty)},
                {"kl_gradient", kl_gradient_name(a.kl_gradient)},
                {"critic_hidden", a.critic_hidden},
                {"kl_samples", a.kl_samples},
                {"ea_order", a.ea_order}};
  j["flow"] = {{"kind", c.flow.kind == FlowSpec::Kind::spline ? "spline" : "affine"},
               {"blocks", c.flow.blocks},
               {"hidden", c.flow.hidden},
               {"bins", c.flow.spline_bins},
               {"bound", c.flow.spline_bound},
               {"scale_bound", c.flow.scale_bound}};
  j["observables"] = Json::array();
  for (const auto& s : c.observables) {
    Json o = {{"type", s.type}};
    if (s.type == "projection" || s.type == "abs") o["axes"] = s.axes;
    if (s.type == "pair_distance") {
      o["i"] = s.i;
      o["j"] = s.j;
    }
    if (s.type == "group_com_distance") {
      o["group_a"] = s.group_a;
      o["group_b"] = s.group_b;
    }
    if (!s.masses.empty()) o["masses"] = s.masses;
    if (s.type == "splat_image") {
      o["side"] = s.image.side;
      o["sigma_pixels"] = s.image.sigma_pixels;
      o["pixel_size"] = s.image.pixel_size;
      o["snr"] = s.image.snr;
      o["noiseless"] = s.image.noiseless;
    }
    j["observables"].push_back(o);
  }
  const auto mix = [](const Mixture1DSpec& m) { return Json{{"means", m.means}, {"sds", m.sds}, {"weights", m.weights}}; };
  j["oracle"] = {{"grid_points", c.oracle.grid_points}, {"lo", c.oracle.lo},         {"hi", c.oracle.hi},
                 {"betas", c.oracle.betas},             {"tilt_beta", c.oracle.tilt_beta}, {"base", mix(c.oracle.base)},
                 {"target", mix(c.oracle.target)}};
  return j;
}

inline MixturePreset resolve_mixtures(const ExperimentConfig& c) {
  return c.mixtures ? *c.mixtures : mixture_preset(c.preset);
}

/// Observable objects for states of width `dim`.
inline std::vector<ObservablePtr> resolve_observables(const ExperimentConfig& c, int dim) {
  std::vector<ObservablePtr> out;
  if (c.observables.empty()) {
    if (dim != 3) throw ConfigError("config.observables: required unless states are 3-D");
    return pairwise_projections();
  }
  for (std::size_t k = 0; k < c.observables.size(); ++k) {
    const ObservableSpec& s = c.observables[k];
    const std::string at = detail::concat("config.observables[", k, "]");
    try {
      if (s.type == "projection") {
        out.push_back(std::make_shared<CoordinateProjection>(dim, s.axes));
        continue;
      }
      if (s.type == "abs") {
        if (s.axes.size() != 1) throw ConfigError(at + ": abs takes exactly one axis");
        out.push_back(std::make_shared<AbsoluteValue>(dim, s.axes.front()));
        continue;
      }
      if (dim % 3 != 0) throw ConfigError(at + ": particle observables need states of width 3N");
      const int atoms = dim / 3;
      std::vector<double> masses = s.masses.empty() ? std::vector<double>(static_cast<std::size_t>(atoms), 1.0) : s.masses;
      if (static_cast<int>(masses.size()) != atoms) throw ConfigError(at + ": one mass per particle required");
      if (s.type == "radius_of_gyration") out.push_back(make_radius_of_gyration(masses));
      else if (s.type == "mean_interatomic_distance") out.push_back(make_mean_interatomic_distance(masses));
      else if (s.type == "pair_distance") out.push_back(make_pair_distance(masses, s.i, s.j));
      else if (s.type == "group_com_distance") out.push_back(make_group_com_distance(masses, s.group_a, s.group_b));
      else if (s.type == "splat_image") out.push_back(std::make_shared<SplatImage>(atoms, s.image));
      else throw ConfigError(at + ": unknown observable type '" + s.type + "'");
    } catch (const InputError& e) {
      throw ConfigError(at + ": " + e.what());
    }
  }
  return out;
}

inline bool is_stochastic(const ObservableSpec& s) { return s.type == "splat_image" && !s.image.noiseless; }

}  // namespace ada
