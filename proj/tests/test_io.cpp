#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "ada/experiment.hpp"
#include "ada/io.hpp"

namespace fs = std::filesystem;

namespace ada {
namespace {

TEST(FormatDouble, RoundTripsExactly) {
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    const double v = detail::normal_matrix(1, 1, rng)(0, 0) * std::pow(10.0, static_cast<int>(rng() % 40) - 20);
    EXPECT_EQ(parse_double(format_double(v)), v);
  }
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_TRUE(std::isnan(parse_double(format_double(std::nan("")))));
  EXPECT_EQ(parse_double(format_double(-INFINITY)), -INFINITY);
  EXPECT_THROW(parse_double("1.5x"), IoError);
  EXPECT_THROW(parse_double(""), IoError);
}

TEST(KeyValueReport, WriteParseRoundTrip) {
  KeyValueReport r;
  r.set("method", std::string("ada"));
  r.set("final.kl", 0.123456789012345);
  r.set("steps", 10);
  r.set("note", std::string("values may have = and spaces"));
  r.set("steps", 11);  // overwrite keeps position
  std::stringstream ss;
  r.write(ss);
  const KeyValueReport back = KeyValueReport::parse(ss);
  EXPECT_EQ(back, r);
  EXPECT_EQ(back.entries()[2].first, "steps");
  EXPECT_EQ(back.number("steps"), 11.0);
  EXPECT_EQ(back.number("final.kl"), 0.123456789012345);
  EXPECT_EQ(back.get("note"), "values may have = and spaces");
  EXPECT_THROW(back.get("missing"), IoError);
}

TEST(KeyValueReport, RejectsReservedCharactersAndBadInput) {
  KeyValueReport r;
  EXPECT_THROW(r.set("a b", 1), InputError);
  EXPECT_THROW(r.set("a=b", 1), InputError);
  EXPECT_THROW(r.set("", 1), InputError);
  EXPECT_THROW(r.set("k", std::string("two\nlines")), InputError);
  std::stringstream no_header("k = v\n");
  EXPECT_THROW(KeyValueReport::parse(no_header), IoError);
  std::stringstream bad_version("# ada-report 99\n");
  EXPECT_THROW(KeyValueReport::parse(bad_version), IoError);
  std::stringstream bad_line("# ada-report 1\nnot a pair\n");
  EXPECT_THROW(KeyValueReport::parse(bad_line), IoError);
}

AlignReport small_report(int steps) {
  AlignReport rep;
  rep.method = "ada";
  rep.config.steps = steps;
  rep.config.seed = 42;
  rep.observables = {"proj_0_1", "proj_0_2"};
  for (int s = 0; s < steps; ++s) {
    StepInfo info;
    info.kl = 0.01 * s;
    info.gaps = {-0.5 + 0.01 * s, -0.25};
    info.lagrangian = -info.kl + 128.0 * (info.gaps[0] + info.gaps[1]);
    rep.record(info);
  }
  rep.final_kl = 0.07;
  rep.metrics.samples = 2000;
  rep.metrics.energy_w1 = 0.15;
  return rep;
}

TEST(Report, MakeReportIsSelfDescribing) {
  const KeyValueReport r = make_report(small_report(7), {{"preset", "synthetic-cube-v1"}});
  EXPECT_EQ(r.get("method"), "ada");
  EXPECT_EQ(r.get("seed"), "42");
  EXPECT_EQ(r.get("preset"), "synthetic-cube-v1");
  EXPECT_EQ(r.number("steps_completed"), 7.0);
  EXPECT_EQ(r.number("config.steps"), 7.0);
  EXPECT_EQ(r.number("config.beta"), 128.0);
  EXPECT_EQ(r.get("observables"), "proj_0_1,proj_0_2");
  EXPECT_EQ(r.number("final.gap.proj_0_2"), -0.25);
  EXPECT_EQ(r.number("final.kl"), 0.07);
  EXPECT_EQ(r.number("metrics.energy_w1"), 0.15);
}

TEST(Trace, RowCountMatchesStepsAndValuesRoundTrip) {
  const AlignReport rep = small_report(25);
  std::stringstream ss;
  write_trace(ss, rep);
  const TraceTable t = read_trace(ss);
  EXPECT_EQ(t.columns, (std::vector<std::string>{"step", "kl", "gap.proj_0_1", "gap.proj_0_2", "lagrangian"}));
  ASSERT_EQ(t.rows.size(), 25u);
  for (std::size_t s = 0; s < 25; ++s) {
    EXPECT_EQ(t.rows[s][0], static_cast<double>(s + 1));
    EXPECT_EQ(t.rows[s][1], rep.kl_trace[s]);
    EXPECT_EQ(t.rows[s][2], rep.gap_trace[s][0]);
    EXPECT_EQ(t.rows[s][4], rep.lagrangian_trace[s]);
  }
}

TEST(Trace, EaColumnsNameMomentResiduals) {
  AlignReport rep = small_report(2);
  rep.method = "ea";
  std::stringstream ss;
  write_trace(ss, rep);
  EXPECT_EQ(read_trace(ss).columns[2], "moment_residual.proj_0_1");
}

TEST(Trace, RejectsRaggedRows) {
  std::stringstream ss("# ada-trace 1\nstep,kl\n1,0.5,3\n");
  EXPECT_THROW(read_trace(ss), IoError);
}

TEST(Histogram, CountsSumToSampleSizesAndRoundTrip) {
  Rng rng(2);
  const Vector a = detail::normal_matrix(333, 1, rng).col(0);
  const Vector b = (detail::normal_matrix(517, 1, rng).array() + 2.0).matrix().col(0);
  const Histogram1D h = histogram_1d("x", a, b, 17);
  long sm = 0, sr = 0;
  for (long c : h.model) sm += c;
  for (long c : h.reference) sr += c;
  EXPECT_EQ(sm, 333);
  EXPECT_EQ(sr, 517);
  EXPECT_EQ(h.edges.size(), 18u);
  EXPECT_EQ(h.edges.front(), std::min(a.minCoeff(), b.minCoeff()));
  std::stringstream ss;
  write_histogram(ss, h);
  const Histogram1D back = read_histogram(ss);
  EXPECT_EQ(back.name, "x");
  EXPECT_EQ(back.edges, h.edges);
  EXPECT_EQ(back.model, h.model);
  EXPECT_EQ(back.reference, h.reference);
}

TEST(Config, DefaultsAreTheCubePreset) {
  const ExperimentConfig c = parse_config_text("{}");
  EXPECT_EQ(c.preset, "synthetic-cube-v1");
  EXPECT_EQ(c.align.beta, 128.0);
  EXPECT_EQ(c.align.lambda_gp, 1000.0);
  EXPECT_EQ(c.align.batch, 1024);
  EXPECT_EQ(c.align.steps, 10000);
  EXPECT_EQ(c.align.critic_steps, 1);
  EXPECT_EQ(c.align.generator_lr, 1e-5);
  EXPECT_EQ(c.align.critic_lr, 1e-3);
  EXPECT_EQ(c.eval_samples, 2000);
}

TEST(Config, ResolvedJsonParsesBackToSameConfig) {
  const ExperimentConfig c = parse_config_text(R"({
    "preset": "toy-ensemble-v1", "seed": 9,
    "align": {"beta": 5.5, "observable_weights": [2.0], "penalty": "two_sided", "kl_gradient": "pathwise"},
    "flow": {"kind": "affine", "blocks": 3},
    "observables": [{"type": "splat_image", "snr": 0.1, "side": 8}],
    "oracle": {"betas": [2.0, 4.0]}
  })");
  const Json j = to_json(c);
  EXPECT_EQ(to_json(parse_config(j)), j);
  EXPECT_EQ(c.align.seed, 9u);
  EXPECT_EQ(c.observables[0].image.snr, 0.1);
}

TEST(Config, RejectsUnknownKeysAtEveryLevel) {
  EXPECT_THROW(parse_config_text(R"({"bogus": 1})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"align": {"betta": 1}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"flow": {"layers": 2}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"observables": [{"type": "projection", "axis": [0]}]})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"oracle": {"base": {"means": [0], "sds": [1], "weights": [1], "x": 0}}})"),
               ConfigError);
}

TEST(Config, RejectsBadValues) {
  EXPECT_THROW(parse_config_text("not json"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"align": {"beta": -1}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"align": {"steps": 1.5}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"align": {"penalty": "both"}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"seed": -3})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"preset": "no-such-preset"})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"flow": {"kind": "diffusion"}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"mixture": {"base": {"means": [[0, 0]], "variances": [1], "weights": [1]},
                                                  "target": {"means": [[0]], "variances": [1], "weights": [1]}}})"),
               ConfigError);
}

TEST(Config, ObservableResolution) {
  ExperimentConfig c = parse_config_text(R"({"observables": [{"type": "abs", "axes": [2]}, {"type": "projection", "axes": [0, 1]}]})");
  const auto obs = resolve_observables(c, 3);
  ASSERT_EQ(obs.size(), 2u);
  EXPECT_EQ(obs[0]->name(), "abs_2");
  EXPECT_EQ(obs[1]->output_dim(), 2);
  c = parse_config_text(R"({"observables": [{"type": "radius_of_gyration"}]})");
  EXPECT_THROW(resolve_observables(c, 4), ConfigError);
  c = parse_config_text(R"({"observables": [{"type": "abs", "axes": [0, 1]}]})");
  EXPECT_THROW(resolve_observables(c, 3), ConfigError);
  c = parse_config_text(R"({"observables": [{"type": "projection", "axes": [5]}]})");
  EXPECT_THROW(resolve_observables(c, 3), ConfigError);
}

// ---- command-line tool ----

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("ada_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const std::string& text) const {
    const fs::path p = dir_ / name;
    std::ofstream(p) << text;
    return p;
  }

  static int run(const std::string& args) {
    const std::string cmd = std::string(ADA_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  // A tiny ADA run on the cube preset.
  std::string tiny_config() const {
    return R"({"reference_samples": 200, "eval_samples": 300, "checkpoint_every": 0,
               "align": {"steps": 4, "batch": 32, "critic_hidden": [8], "kl_samples": 50},
               "flow": {"blocks": 3, "hidden": [8]}})";
  }

  fs::path dir_;
};

TEST_F(Cli, AlignAdaWritesConsistentArtifacts) {
  const fs::path cfg = write("tiny.json", tiny_config());
  const fs::path out = dir_ / "run";
  ASSERT_EQ(run("align-ada --config " + cfg.string() + " --seed 3 --out " + out.string()), 0);
  const KeyValueReport r = read_report((out / "report.txt").string());
  EXPECT_EQ(r.get("method"), "ada");
  EXPECT_EQ(r.get("seed"), "3");
  EXPECT_EQ(r.number("steps_completed"), 4.0);
  EXPECT_TRUE(r.has("metrics.energy_w1"));
  EXPECT_TRUE(r.has("resolved_config"));
  std::ifstream ts(out / "trace.csv");
  EXPECT_EQ(read_trace(ts).rows.size(), 4u);
  std::ifstream hs(out / "histograms" / "proj_0_1.0.csv");
  const Histogram1D h = read_histogram(hs);
  long total = 0;
  for (long c : h.model) total += c;
  EXPECT_EQ(total, 300);
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "generator_final.ckpt"));
  EXPECT_TRUE(fs::exists(out / "config.json"));

  // The resolved config reproduces the run bit for bit.
  const fs::path again = dir_ / "again";
  ASSERT_EQ(run("align-ada --config " + (out / "config.json").string() + " --out " + again.string()), 0);
  std::ifstream a(out / "trace.csv"), b(again / "trace.csv");
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  EXPECT_EQ(sa.str(), sb.str());

  // eval scores the saved checkpoint.
  ASSERT_EQ(run("eval --config " + cfg.string() + " --seed 3 --out " + (dir_ / "ev").string() + " --checkpoint " +
                (out / "checkpoints" / "generator_final.ckpt").string()),
            0);
  EXPECT_TRUE(read_report((dir_ / "ev" / "report.txt").string()).has("checkpoint.0.energy_w1"));
}

TEST_F(Cli, ConfigErrorsExitWithTwo) {
  EXPECT_EQ(run("align-ada --config " + write("bad.json", R"({"align": {"stepz": 3}})").string()), 2);
  EXPECT_EQ(run("align-ada --config " + write("neg.json", R"({"align": {"beta": -2}})").string()), 2);
  EXPECT_EQ(run("align-ada --preset no-such-preset"), 2);
  EXPECT_EQ(run("align-ada --no-such-flag"), 2);
  EXPECT_EQ(run("eval --out " + (dir_ / "e").string()), 2);  // no checkpoint
  EXPECT_EQ(run(""), 2);
}

TEST_F(Cli, IoErrorsExitWithFour) {
  EXPECT_EQ(run("align-ada --config " + (dir_ / "missing.json").string()), 4);
  const fs::path file = write("plain", "x");
  EXPECT_EQ(run("oracle --out " + (file / "sub").string()), 4);
  EXPECT_EQ(run("eval --checkpoint " + (dir_ / "nope.ckpt").string() + " --out " + (dir_ / "e").string()), 4);
}

TEST_F(Cli, NumericalFailureExitsWithThree) {
  const fs::path cfg = write("tiny.json", tiny_config());
  const fs::path out = dir_ / "run";
  ASSERT_EQ(run("align-ada --config " + cfg.string() + " --out " + out.string()), 0);
  const int n = static_cast<int>(read_report((out / "report.txt").string()).number("generator_params"));
  std::ofstream ck(dir_ / "nan.ckpt");
  ck << "ada-checkpoint 1 flow\nparams " << n << '\n';
  for (int i = 0; i < n; ++i) ck << "nan\n";
  ck.close();
  EXPECT_EQ(run("eval --config " + cfg.string() + " --out " + (dir_ / "e").string() + " --checkpoint " +
                (dir_ / "nan.ckpt").string()),
            3);
}

TEST_F(Cli, OracleAndSelftestSucceed) {
  const fs::path out = dir_ / "oracle";
  ASSERT_EQ(run("oracle --out " + out.string()), 0);
  const KeyValueReport r = read_report((out / "report.txt").string());
  EXPECT_LE(r.number("tilt.total_variation"), 1e-2);
  EXPECT_EQ(r.get("beta.1000.converged"), "true");
  EXPECT_EQ(run("selftest --quick"), 0);
}

}  // namespace
}  // namespace ada
