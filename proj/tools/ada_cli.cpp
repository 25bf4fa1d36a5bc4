// ada: experiment runner.
//
//   ada align-ada --preset synthetic-cube-v1 --seed 1 --out runs/cube
//   ada align-ea  --config configs/synthetic_cube_ea.json
//   ada oracle    --config configs/oracle_grid.json
//   ada eval      --config configs/synthetic_cube_ada.json --checkpoint runs/cube/checkpoints/generator_final.ckpt
//   ada selftest
//
// Exit codes: 0 ok, 2 configuration, 3 numerical failure, 4 I/O.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "ada/ada.hpp"
#include "ada/checks.hpp"
#include "ada/experiment.hpp"

namespace fs = std::filesystem;
using namespace ada;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kNumerical = 3, kIo = 4 };

struct Options {
  std::string config_path;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> checkpoints;
  bool quick = false;
};

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig() : load_config(o.config_path);
  if (!o.preset.empty()) {
    c.preset = o.preset;
    c.mixtures.reset();
    mixture_preset(c.preset);
  }
  if (o.seed) c.seed = *o.seed;
  c.align.seed = c.seed;
  if (!o.out.empty()) c.out = o.out;
  if (!o.checkpoints.empty()) c.checkpoints = o.checkpoints;
  return c;
}

fs::path prepare_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
  return p;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  return os;
}

void write_resolved_config(const ExperimentConfig& c, const fs::path& dir) {
  auto os = open_out(dir / "config.json");
  os << to_json(c).dump(2) << '\n';
  if (!os) throw IoError("config.json: write failed");
}

std::string safe_name(std::string s) {
  for (char& ch : s) {
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '.' && ch != '_' && ch != '-') ch = '_';
  }
  return s;
}

void write_histograms(const std::vector<Histogram1D>& hs, const fs::path& dir, const std::string& prefix = "") {
  prepare_dir(dir);
  for (const auto& h : hs) {
    auto os = open_out(dir / (prefix + safe_name(h.name) + ".csv"));
    write_histogram(os, h);
  }
}

void print_metrics(const MetricBlock& m) {
  for (const auto& [k, v] : m.entries()) std::printf("  %-32s %.6g\n", k.c_str(), v);
}

int run_align(const Options& o, bool ada_method) {
  const ExperimentConfig c = resolve(o);
  const Experiment ex(c);
  const fs::path dir = prepare_dir(c.out);
  const fs::path ck_dir = prepare_dir(dir / "checkpoints");
  write_resolved_config(c, dir);
  AlignState st = ex.make_state(ada_method);

  Checkpointing ck;
  ck.every = c.checkpoint_every;
  ck.callback = [&](int step, const AlignState& s) {
    const std::string tag = step == c.align.steps ? "final" : std::to_string(step);
    s.generator.save((ck_dir / ("generator_" + tag + ".ckpt")).string());
    for (std::size_t i = 0; i < s.critics.size(); ++i) {
      auto os = open_out(ck_dir / ("critic_" + std::to_string(i) + "_" + tag + ".ckpt"));
      s.critics[i].save(os);
    }
  };
  std::printf("%s: %d steps, batch %d, beta %g, %zu observables\n", ada_method ? "align-ada" : "align-ea",
              c.align.steps, c.align.batch, c.align.beta, ex.observables.size());
  std::fflush(stdout);
  AlignReport rep;
  try {
    rep = ada_method ? run_ada(st, ck) : run_ea(st, ck);
  } catch (const NumericalError&) {
    // Steps throw before touching parameters, so the generator is still the last good one.
    st.generator.save((ck_dir / "generator_last_good.ckpt").string());
    throw;
  }
  const Evaluation ev = evaluate(ex, st.generator);
  rep.metrics = ev.metrics;

  KeyValueReport r = make_report(rep, {{"preset", c.mixtures ? "inline" : c.preset},
                                       {"generator_params", std::to_string(st.generator.num_params())},
                                       {"resolved_config", to_json(c).dump()}});
  write_report(r, (dir / "report.txt").string());
  {
    auto os = open_out(dir / "trace.csv");
    write_trace(os, rep);
  }
  write_histograms(ev.histograms, dir / "histograms");
  std::printf("final KL %.5f (se %.5f), %.1f s\n", rep.final_kl, rep.final_kl_std_error, rep.wall_seconds);
  print_metrics(rep.metrics);
  return kOk;
}

int run_oracle(const Options& o) {
  const ExperimentConfig c = resolve(o);
  const fs::path dir = prepare_dir(c.out);
  write_resolved_config(c, dir);
  const OracleProblem p = oracle_problem(c.oracle);
  const auto rows = oracle_sweep(p, c.oracle.betas);
  {
    auto os = open_out(dir / "oracle_sweep.csv");
    os << "# ada-oracle 1\nbeta";
    for (const auto& n : p.names) os << ",gap." << n;
    os << ",gap_sum,kl,bound,dual_gap,iterations,converged\n";
    for (const auto& row : rows) {
      os << format_double(row.beta);
      for (double g : row.gaps) os << ',' << format_double(g);
      os << ',' << format_double(row.gap_sum) << ',' << format_double(row.kl) << ',' << format_double(row.bound) << ','
         << format_double(row.dual_gap) << ',' << row.iterations << ',' << (row.converged ? 1 : 0) << '\n';
    }
    if (!os) throw IoError("oracle_sweep.csv: write failed");
  }
  const TiltComparison tc = tilt_comparison(c.oracle);
  KeyValueReport r;
  r.set("format", std::string("ada-report"));
  r.set("format_version", kReportVersion);
  r.set("method", std::string("oracle"));
  r.set("resolved_config", to_json(c).dump());
  r.set("target_kl_to_base", kl_discrete(p.target.masses, p.base.masses));
  for (const auto& row : rows) {
    const std::string b = "beta." + format_double(row.beta) + ".";
    r.set(b + "gap_sum", row.gap_sum);
    r.set(b + "kl", row.kl);
    r.set(b + "bound", row.bound);
    r.set(b + "converged", std::string(row.converged ? "true" : "false"));
  }
  r.set("tilt.beta", tc.beta);
  r.set("tilt.total_variation", tc.total_variation);
  r.set("tilt.w1_gap", tc.w1_gap);
  write_report(r, (dir / "report.txt").string());
  std::printf("%10s %14s %14s %14s\n", "beta", "sum W1 gaps", "KL(mu||base)", "KL(nu||b)/beta");
  for (const auto& row : rows) std::printf("%10g %14.6g %14.6g %14.6g\n", row.beta, row.gap_sum, row.kl, row.bound);
  std::printf("tilt at beta %g: total variation %.3g\n", tc.beta, tc.total_variation);
  return kOk;
}

int run_eval(const Options& o) {
  const ExperimentConfig c = resolve(o);
  if (c.checkpoints.empty()) throw ConfigError("eval: no checkpoints given (config 'checkpoints' or --checkpoint)");
  const Experiment ex(c);
  const fs::path dir = prepare_dir(c.out);
  write_resolved_config(c, dir);
  KeyValueReport r;
  r.set("format", std::string("ada-report"));
  r.set("format_version", kReportVersion);
  r.set("method", std::string("eval"));
  r.set("resolved_config", to_json(c).dump());
  for (std::size_t k = 0; k < c.checkpoints.size(); ++k) {
    FlowGenerator gen = ex.make_generator();
    gen.load(c.checkpoints[k]);
    const Evaluation ev = evaluate(ex, gen);
    const std::string prefix = "checkpoint." + std::to_string(k) + ".";
    r.set(prefix + "path", c.checkpoints[k]);
    for (const auto& [key, v] : ev.metrics.entries()) r.set(prefix + key, v);
    write_histograms(ev.histograms, dir / "histograms", "checkpoint" + std::to_string(k) + "_");
    std::printf("%s\n", c.checkpoints[k].c_str());
    print_metrics(ev.metrics);
  }
  write_report(r, (dir / "report.txt").string());
  return kOk;
}

int run_selftest(const Options& o) {
  const int n = o.quick ? 10 : 100;
  const std::uint64_t seed = o.seed.value_or(20240501);
  const std::vector<CheckResult> results = {
      check_grad_params(n, seed),        check_grad_input(n, seed + 1), check_kl_gradient(n, seed + 2),
      check_penalty_gradient(n, seed + 3), check_w1_oracles(50, seed + 4), check_kabsch(n, seed + 5)};
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-4s %-30s trials %3d  worst %.3g (tol %.0e) %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                r.trials, r.worst, r.tolerance, r.note.c_str());
    ok = ok && r.passed;
  }
  return ok ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Adversarial distribution alignment experiments"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "experiment config (JSON)");
    sub->add_option("--preset", o.preset, "mixture preset (synthetic-cube-v1, synthetic-cube-sd, toy-ensemble-v1)");
    sub->add_option_function<std::uint64_t>("--seed", [&](std::uint64_t s) { o.seed = s; }, "seed (overrides config)");
    sub->add_option("--out", o.out, "output directory (overrides config)");
  };
  auto* ada_cmd = app.add_subcommand("align-ada", "adversarial alignment with per-observable critics");
  auto* ea_cmd = app.add_subcommand("align-ea", "expectation-alignment baseline");
  auto* oracle_cmd = app.add_subcommand("oracle", "exact grid solver beta sweep and tilt comparison");
  auto* eval_cmd = app.add_subcommand("eval", "metrics for saved generator checkpoints");
  auto* self_cmd = app.add_subcommand("selftest", "randomized gradient and oracle checks");
  for (auto* s : {ada_cmd, ea_cmd, oracle_cmd, eval_cmd, self_cmd}) add_common(s);
  eval_cmd->add_option("--checkpoint", o.checkpoints, "generator checkpoint(s)");
  self_cmd->add_flag("--quick", o.quick, "10 trials per suite instead of 100");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (ada_cmd->parsed()) return run_align(o, true);
    if (ea_cmd->parsed()) return run_align(o, false);
    if (oracle_cmd->parsed()) return run_oracle(o);
    if (eval_cmd->parsed()) return run_eval(o);
    if (self_cmd->parsed()) return run_selftest(o);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const InputError& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return kConfig;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kNumerical;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kOther;
  }
  return kOther;
}
