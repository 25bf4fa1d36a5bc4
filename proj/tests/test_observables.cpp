#include <gtest/gtest.h>

#include <sstream>

#include "ada/checks.hpp"
#include "ada/densities.hpp"
#include "ada/observables.hpp"
#include "test_support.hpp"

namespace ada {
namespace {

Configuration make_config(std::initializer_list<std::array<double, 3>> pts, std::vector<double> masses = {}) {
  Matrix pos(static_cast<Eigen::Index>(pts.size()), 3);
  Eigen::Index r = 0;
  for (const auto& p : pts) {
    pos.row(r++) << p[0], p[1], p[2];
  }
  if (masses.empty()) masses.assign(pts.size(), 1.0);
  return {pos, masses};
}

Configuration rigidly_moved(const Configuration& c, Rng& rng) {
  const Eigen::Matrix3d rot = random_rotation(rng);
  const Eigen::RowVector3d shift(3.0 * detail::normal(rng), 3.0 * detail::normal(rng), 3.0 * detail::normal(rng));
  return {(c.positions * rot.transpose()).rowwise() + shift, c.masses};
}

// Central-difference Jacobian-vector check of obs.pullback against obs.evaluate.
double pullback_error(const Observable& obs, const Matrix& state, const Matrix& d_out) {
  const Vector analytic = obs.pullback(state, d_out).row(0).transpose();
  const Vector x0 = state.row(0).transpose();
  const Vector fd = testing::numeric_gradient(
      [&](const Vector& x) {
        const Matrix s = x.transpose();
        return (obs.evaluate(s).array() * d_out.array()).sum();
      },
      x0);
  return testing::relative_error(analytic, fd, 1e-8);
}

TEST(ProjectPair, SelectsCoordinates) {
  const auto out = project_pair({1.0, 2.0, 3.0}, 0, 2);
  EXPECT_EQ(out[0], 1.0);
  EXPECT_EQ(out[1], 3.0);
  EXPECT_THROW(project_pair({1.0, 2.0, 3.0}, 0, 3), InputError);
  EXPECT_THROW(project_pair({1.0, 2.0, 3.0}, 1, 1), InputError);
  EXPECT_THROW(CoordinateProjection(3, {0, 3}), InputError);
}

TEST(ProjectPair, PullbackIsSelectorMatrix) {
  const CoordinateProjection obs(3, {2, 0});
  Matrix x(1, 3), d(1, 2);
  x << 0.1, 0.2, 0.3;
  d << 5.0, 7.0;
  Matrix expect(1, 3);
  expect << 7.0, 0.0, 5.0;
  EXPECT_EQ(obs.pullback(x, d), expect);
  EXPECT_LT(pullback_error(obs, x, d), 1e-8);
}

TEST(ProjectPair, BaseCubePushforwardIsCentered) {
  const GaussianMixture base = synthetic_cube().base;
  Rng rng(1);
  const int n = 50000;
  const Matrix s = base.sample(n, rng);
  const double band = 4.0 * std::sqrt(9.5 / n);
  for (const auto& obs : pairwise_projections()) {
    const Matrix u = obs->evaluate(s);
    EXPECT_LT(std::abs(u.col(0).mean()), band) << obs->name();
    EXPECT_LT(std::abs(u.col(1).mean()), band) << obs->name();
  }
}

TEST(AbsoluteValue, ValuesAndSignPullback) {
  const AbsoluteValue a(2, 1);
  Matrix x(3, 2);
  x << 5.0, -2.0, -1.0, 0.5, 7.0, 0.0;
  EXPECT_EQ(a.evaluate(x), (Matrix(3, 1) << 2.0, 0.5, 0.0).finished());
  const Matrix g = a.pullback(x, Matrix::Constant(3, 1, 3.0));
  EXPECT_EQ(g, (Matrix(3, 2) << 0.0, -3.0, 0.0, 3.0, 0.0, 0.0).finished());
  EXPECT_THROW(AbsoluteValue(2, 2), InputError);
}

TEST(RadiusOfGyration, ClosedFormCases) {
  EXPECT_EQ(radius_of_gyration(make_config({{1.0, 2.0, 3.0}})), 0.0);
  EXPECT_NEAR(radius_of_gyration(make_config({{0, 0, 0}, {2.4, 0, 0}})), 1.2, 1e-15);
  const double s = 1.7;
  EXPECT_NEAR(radius_of_gyration(make_config({{0, 0, 0}, {s, 0, 0}, {0, s, 0}, {s, s, 0}})), s / std::sqrt(2.0), 1e-15);
}

TEST(RadiusOfGyration, MassWeighting) {
  // Masses 3 and 1 at distance 4: COM at 1 from the heavy atom, Rg^2 = (3 * 1 + 1 * 9) / 4.
  EXPECT_NEAR(radius_of_gyration(make_config({{0, 0, 0}, {4, 0, 0}}, {3.0, 1.0})), std::sqrt(3.0), 1e-15);
}

TEST(MeanInteratomicDistance, ClosedFormCases) {
  EXPECT_NEAR(mean_interatomic_distance(make_config({{0, 0, 0}, {0, 0, 2.5}})), 2.5, 1e-15);
  const double a = 1.3;
  EXPECT_NEAR(mean_interatomic_distance(make_config({{0, 0, 0}, {a, 0, 0}, {2 * a, 0, 0}})), 4.0 * a / 3.0, 1e-15);
  EXPECT_THROW(mean_interatomic_distance(make_config({{0, 0, 0}})), InputError);
}

TEST(PairDistance, ClosedFormCases) {
  const Configuration c = make_config({{1, 1, 1}, {1, 1, 1}, {2, 1, 1}});
  Matrix g;
  EXPECT_EQ(pair_distance(c, 0, 1, &g), 0.0);
  EXPECT_EQ(g.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(pair_distance(c, 2, 0, &g), 1.0);
  EXPECT_EQ(g.row(2), Eigen::RowVector3d(1, 0, 0));
  EXPECT_EQ(g.row(0), Eigen::RowVector3d(-1, 0, 0));
  EXPECT_THROW(pair_distance(c, 0, 3), InputError);
  EXPECT_THROW(pair_distance(c, 1, 1), InputError);
}

TEST(GroupComDistance, ClosedFormCases) {
  const Configuration c = make_config({{0, 0, 0}, {0, 3, 4}, {1, 0, 0}, {-1, 0, 0}, {1, 0, 6}, {-1, 0, 6}});
  EXPECT_NEAR(group_com_distance(c, {0}, {1}), pair_distance(c, 0, 1), 1e-15);
  EXPECT_NEAR(group_com_distance(c, {2, 3}, {4, 5}), 6.0, 1e-15);
  EXPECT_THROW(group_com_distance(c, {}, {1}), InputError);
  EXPECT_THROW(group_com_distance(c, {0, 1}, {1}), InputError);
}

TEST(GroupComDistance, UnequalMassesByHand) {
  // Group A: masses 1, 2, 3 at x = 0, 3, 6 -> COM x = 24 / 6 = 4.
  // Group B: masses 2, 6 at (10, 4, 0), (10, 0, 0) -> COM (10, 1, 0).
  const Configuration c =
      make_config({{0, 0, 0}, {3, 0, 0}, {6, 0, 0}, {10, 4, 0}, {10, 0, 0}}, {1.0, 2.0, 3.0, 2.0, 6.0});
  EXPECT_NEAR(group_com_distance(c, {0, 1, 2}, {3, 4}), std::sqrt(37.0), 1e-14);
}

TEST(ScalarObservables, InvariantUnderRigidMotion) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const int n = 4 + static_cast<int>(rng() % 6);
    std::vector<double> masses(static_cast<std::size_t>(n));
    for (double& m : masses) m = 0.5 + detail::uniform01(rng) * 15.0;
    const Configuration c(detail::normal_matrix(n, 3, rng), masses);
    const Configuration moved = rigidly_moved(c, rng);
    EXPECT_LE(std::abs(radius_of_gyration(c) - radius_of_gyration(moved)), 1e-10);
    EXPECT_LE(std::abs(mean_interatomic_distance(c) - mean_interatomic_distance(moved)), 1e-10);
    EXPECT_LE(std::abs(pair_distance(c, 0, n - 1) - pair_distance(moved, 0, n - 1)), 1e-10);
    EXPECT_LE(std::abs(group_com_distance(c, {0, 1}, {2, 3}) - group_com_distance(moved, {0, 1}, {2, 3})), 1e-10);
  }
}

TEST(ScalarObservables, PullbackMatchesFiniteDifferences) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    const int n = 4 + static_cast<int>(rng() % 5);
    std::vector<double> masses(static_cast<std::size_t>(n));
    for (double& m : masses) m = 1.0 + detail::uniform01(rng) * 11.0;
    const std::vector<ObservablePtr> list = {
        make_radius_of_gyration(masses), make_mean_interatomic_distance(masses),
        make_pair_distance(masses, 0, n - 1), make_group_com_distance(masses, {0, 1}, {2, n - 1})};
    const Matrix x = 2.0 * detail::normal_matrix(1, 3 * n, rng);
    const Matrix d = Matrix::Constant(1, 1, detail::normal(rng));
    for (const auto& obs : list) {
      ASSERT_LT(pullback_error(*obs, x, d), 1e-4) << obs->name() << " trial " << t;
    }
  }
}

TEST(ConfigurationObservable, BatchRowsMatchSingleConfigurations) {
  Rng rng(5);
  const std::vector<double> masses = {1.0, 12.0, 16.0};
  const auto obs = make_radius_of_gyration(masses);
  const Matrix states = detail::normal_matrix(5, 9, rng);
  const Matrix out = obs->evaluate(states);
  for (Eigen::Index r = 0; r < 5; ++r) {
    EXPECT_EQ(out(r, 0), radius_of_gyration(Configuration::from_flat(states.row(r).data(), masses)));
  }
  EXPECT_THROW(obs->evaluate(Matrix::Zero(1, 8)), InputError);
}

TEST(ConfigurationObservable, RejectsBadConstruction) {
  EXPECT_THROW(make_mean_interatomic_distance({1.0}), InputError);
  EXPECT_THROW(make_pair_distance({1.0, 1.0}, 0, 2), InputError);
  EXPECT_THROW(make_group_com_distance({1.0, 1.0, 1.0}, {0}, {0}), InputError);
  EXPECT_THROW(Configuration(Matrix::Zero(2, 3), {1.0, -1.0}), InputError);
}

TEST(Xyz, RoundTripIsExact) {
  Rng rng(6);
  const Configuration c(detail::normal_matrix(5, 3, rng), {1.008, 12.011, 15.999, 14.007, 32.06});
  std::stringstream ss;
  write_xyz(ss, c);
  const Configuration back = read_xyz(ss);
  EXPECT_EQ(back.positions, c.positions);
  EXPECT_EQ(back.masses, c.masses);
}

TEST(Xyz, MalformedInputIsAnIoError) {
  std::istringstream missing("");
  EXPECT_THROW(read_xyz(missing), IoError);
  std::istringstream truncated("2\n1 0 0 0\n1 0 0\n");
  EXPECT_THROW(read_xyz(truncated), IoError);
  std::istringstream bad_mass("1\n-1 0 0 0\n");
  EXPECT_THROW(read_xyz(bad_mass), IoError);
  EXPECT_THROW(read_xyz(std::string("/nonexistent/file.xyz")), IoError);
}

ImageSpec noiseless_spec(int side = 16) {
  ImageSpec s;
  s.side = side;
  s.noiseless = true;
  return s;
}

TEST(SplatImage, SingleAtomPeaksAtCenterAndIsSymmetric) {
  const ImageSpec spec = noiseless_spec();
  const Vector img = splat_image(make_config({{0, 0, 0}}), spec, nullptr);
  const int p = spec.side, c = p / 2;
  Eigen::Index arg;
  img.maxCoeff(&arg);
  EXPECT_EQ(arg, c * p + c);
  EXPECT_DOUBLE_EQ(img[c * p + c], 1.0);
  // Mirror symmetry about the center pixel and under transposition.
  for (int r = 1; r < p; ++r) {
    for (int k = 1; k < p; ++k) {
      EXPECT_NEAR(img[r * p + k], img[(2 * c - r) * p + (2 * c - k)], 1e-15);
      EXPECT_NEAR(img[r * p + k], img[k * p + r], 1e-15);
    }
  }
}

TEST(SplatImage, TotalIntensityIsSumOfKernelMasses) {
  const ImageSpec spec = noiseless_spec();
  const Configuration c = make_config({{0.3, -1.1, 2.0}, {-2.0, 0.7, -5.0}, {1.5, 1.5, 0.0}});
  const Vector img = splat_image(c, spec, nullptr);
  const double s = spec.sigma_pixels * spec.pixel_size;
  double expect = 0.0;
  for (int a = 0; a < c.atoms(); ++a) {
    double mx = 0.0, my = 0.0;
    for (int i = 0; i < spec.side; ++i) {
      const double u = (i - spec.side / 2) * spec.pixel_size;
      mx += std::exp(-0.5 * (u - c.positions(a, 0)) * (u - c.positions(a, 0)) / (s * s));
      my += std::exp(-0.5 * (u - c.positions(a, 1)) * (u - c.positions(a, 1)) / (s * s));
    }
    expect += mx * my;
  }
  EXPECT_NEAR(img.sum(), expect, 1e-12);
}

TEST(SplatImage, DepthDoesNotChangeTheImage) {
  const ImageSpec spec = noiseless_spec();
  const Vector a = splat_image(make_config({{0.5, 0.2, 0.0}}), spec, nullptr);
  const Vector b = splat_image(make_config({{0.5, 0.2, 9.0}}), spec, nullptr);
  EXPECT_EQ(a, b);
}

TEST(SplatImage, FarOutsideAtomsAreClippedNotErrors) {
  const Vector img = splat_image(make_config({{1e3, -1e3, 0.0}}), noiseless_spec(), nullptr);
  EXPECT_TRUE(img.allFinite());
  EXPECT_EQ(img.cwiseAbs().maxCoeff(), 0.0);
}

TEST(SplatImage, NoiseVarianceMatchesSnr) {
  for (double snr : {1.0, 0.1}) {
    ImageSpec spec;
    spec.snr = snr;
    const Configuration c = make_config({{0.5, -0.5, 0.0}, {-2.0, 1.0, 0.0}});
    const Vector clean = splat_image(c, noiseless_spec(), nullptr);
    const double clean_var = (clean.array() - clean.mean()).square().mean();
    Rng rng(7);
    double acc = 0.0;
    const int draws = 1000;
    for (int t = 0; t < draws; ++t) acc += (splat_image(c, spec, &rng) - clean).squaredNorm();
    const double noise_var = acc / (draws * static_cast<double>(clean.size()));
    EXPECT_NEAR(noise_var / (clean_var / snr), 1.0, 0.1) << "snr " << snr;
  }
}

TEST(SplatImage, SameSeedIsBitwiseReproducible) {
  ImageSpec spec;
  const Configuration c = make_config({{0.5, -0.5, 0.0}, {1.0, 2.0, 0.0}});
  Rng a(9), b(9);
  EXPECT_EQ(splat_image(c, spec, &a), splat_image(c, spec, &b));
}

TEST(SplatImage, PullbackMatchesFiniteDifferences) {
  Rng rng(10);
  ImageSpec spec = noiseless_spec(8);
  const SplatImage obs(3, spec);
  for (int t = 0; t < 100; ++t) {
    const Matrix x = 1.5 * detail::normal_matrix(1, 9, rng);
    const Matrix d = detail::normal_matrix(1, obs.output_dim(), rng);
    ASSERT_LT(pullback_error(obs, x, d), 1e-4) << "trial " << t;
  }
}

TEST(SplatImage, RejectsBadSpec) {
  ImageSpec small;
  small.side = 3;
  EXPECT_THROW(SplatImage(1, small), InputError);
  ImageSpec bad_snr;
  bad_snr.snr = 0.0;
  EXPECT_THROW(SplatImage(1, bad_snr), InputError);
}

}  // namespace
}  // namespace ada
