#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "ada/checks.hpp"
#include "ada/critics.hpp"
#include "ada/oracle.hpp"
#include "test_support.hpp"

namespace ada {
namespace {

Critic linear_critic(std::initializer_list<double> w, double lambda = 10.0,
                     PenaltyKind kind = PenaltyKind::two_sided) {
  DenseNet net({static_cast<int>(w.size()), 1});
  int k = 0;
  for (double v : w) net.weight(0)(0, k++) = v;
  return Critic::raw(std::move(net), lambda, kind);
}

Matrix column(std::initializer_list<double> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

Matrix shifted_normals(int n, double shift, Rng& rng) {
  return (detail::normal_matrix(n, 1, rng).array() + shift).matrix();
}

TEST(WassersteinGap, ConstantCriticGivesZero) {
  DenseNet net({2, 1});
  net.bias(0)[0] = 3.5;
  const Critic c = Critic::raw(net, 1.0);
  Rng rng(1);
  EXPECT_EQ(wasserstein_gap(c, detail::normal_matrix(7, 2, rng), 5.0 * detail::normal_matrix(3, 2, rng)), 0.0);
}

TEST(WassersteinGap, IdentityCriticGivesMeanDifference) {
  const Critic c = linear_critic({1.0});
  EXPECT_DOUBLE_EQ(wasserstein_gap(c, column({1.0, 2.0, 6.0}), column({0.0, 1.0})), 3.0 - 0.5);
}

TEST(WassersteinGap, SameBatchGivesZero) {
  Rng rng(2);
  CriticOptions opts;
  opts.hidden = {16, 16};
  const Matrix a = detail::normal_matrix(40, 3, rng);
  const Critic c = Critic::for_reference(a, opts, rng);
  EXPECT_EQ(wasserstein_gap(c, a, a), 0.0);
}

TEST(WassersteinGap, RejectsWidthMismatch) {
  const Critic c = linear_critic({1.0});
  EXPECT_THROW(wasserstein_gap(c, Matrix::Zero(2, 1), Matrix::Zero(2, 2)), InputError);
  EXPECT_THROW(wasserstein_gap(c, Matrix::Zero(2, 2), Matrix::Zero(2, 2)), InputError);
}

// Rescales the last layer so the critic's Lipschitz constant on the given points is 1.
void make_one_lipschitz_on(Critic& c, const Vector& pts) {
  const Vector s = c.scores(pts);
  double lip = 0.0;
  for (Eigen::Index i = 0; i < pts.size(); ++i) {
    for (Eigen::Index j = i + 1; j < pts.size(); ++j) {
      if (pts[i] != pts[j]) lip = std::max(lip, std::abs(s[i] - s[j]) / std::abs(pts[i] - pts[j]));
    }
  }
  const int last = c.net().num_layers() - 1;
  c.net().weight(last) /= lip;
  c.net().bias(last) /= lip;
}

TEST(WassersteinGap, OneLipschitzCriticNeverExceedsExactW1) {
  Rng rng(3);
  CriticOptions opts;
  opts.hidden = {8, 8};
  for (int t = 0; t < 50; ++t) {
    const Vector a = detail::normal_matrix(6, 1, rng).col(0);
    const Vector b = (2.0 * detail::normal_matrix(6, 1, rng).array() + 0.5).matrix().col(0);
    Vector both(12);
    both << a, b;
    Critic c = Critic::raw(DenseNet::random({1, 8, 8, 1}, rng), 0.0);
    make_one_lipschitz_on(c, both);
    const double gap = wasserstein_gap(c, a, b);
    EXPECT_LE(std::abs(gap), w1_assignment_bruteforce(a, b) + 1e-9) << "trial " << t;
  }
}

TEST(GradientPenalty, UnitLinearCriticHasZeroPenalty) {
  const Critic c = linear_critic({0.6, 0.8}, 10.0);
  Rng rng(4);
  const PenaltyValue p = gradient_penalty(c, detail::normal_matrix(20, 2, rng), detail::normal_matrix(20, 2, rng), rng);
  EXPECT_NEAR(p.value, 0.0, 1e-25);
  EXPECT_NEAR(p.mean_grad_norm, 1.0, 1e-15);
}

TEST(GradientPenalty, DoubledIdentityGivesLambda) {
  for (double lambda : {1.0, 10.0, 1000.0}) {
    const Critic c = linear_critic({2.0}, lambda);
    Rng rng(5);
    const PenaltyValue p = gradient_penalty(c, column({0.0, 1.0, 2.0}), column({3.0, -1.0, 0.5}), rng);
    EXPECT_DOUBLE_EQ(p.value, lambda);
  }
}

TEST(GradientPenalty, OneSidedIgnoresSmallSlopes) {
  Rng rng(6);
  const Critic shallow = linear_critic({0.5}, 10.0, PenaltyKind::one_sided);
  EXPECT_EQ(gradient_penalty(shallow, column({0.0, 1.0}), column({2.0, 3.0}), rng).value, 0.0);
  const Critic steep = linear_critic({3.0}, 10.0, PenaltyKind::one_sided);
  EXPECT_DOUBLE_EQ(gradient_penalty(steep, column({0.0, 1.0}), column({2.0, 3.0}), rng).value, 40.0);
}

TEST(GradientPenalty, InterpolatesLieBetweenPairedRows) {
  const Critic c = linear_critic({1.0});
  Rng rng(7);
  const Matrix a = column({0.0, 10.0, -4.0});
  const Matrix b = column({1.0, 12.0, -8.0});
  const Matrix u = penalty_interpolates(c, a, b, rng);
  for (Eigen::Index i = 0; i < 3; ++i) {
    EXPECT_GE(u(i, 0), std::min(a(i, 0), b(i, 0)));
    EXPECT_LE(u(i, 0), std::max(a(i, 0), b(i, 0)));
  }
}

TEST(GradientPenalty, ParameterGradientMatchesFiniteDifferences) {
  const CheckResult r = check_penalty_gradient(100, 8);
  EXPECT_TRUE(r.passed) << "worst " << r.worst;
}

TEST(CriticUpdate, IdenticalBatchesOnlyPenaltyDrives) {
  Rng rng(9);
  const Matrix a = detail::normal_matrix(64, 2, rng);
  Critic c = Critic::raw(DenseNet::random({2, 16, 1}, rng), 10.0);
  Rng r1(10);
  const CriticStepInfo info = critic_update(c, a, a, r1);
  EXPECT_EQ(info.gap, 0.0);
  EXPECT_EQ(info.loss, info.penalty);
}

TEST(CriticUpdate, ZeroLearningRateLeavesParameters) {
  Rng rng(11);
  Critic c = Critic::raw(DenseNet::random({1, 16, 1}, rng), 10.0, PenaltyKind::two_sided, 0.0);
  const Vector before = c.net().params();
  critic_update(c, shifted_normals(32, 0.0, rng), shifted_normals(32, 2.0, rng), rng);
  EXPECT_EQ(c.net().params(), before);
}

TEST(CriticUpdate, ReturnsPreStepLoss) {
  Rng rng(12);
  Critic c = Critic::raw(DenseNet::random({1, 8, 1}, rng), 10.0);
  const Matrix a = shifted_normals(32, 0.0, rng), b = shifted_normals(32, 1.0, rng);
  Vector grad;
  Rng r1(13), r2(13);
  const double expect = critic_loss(c, a, b, r1, grad).loss;
  EXPECT_EQ(critic_update(c, a, b, r2).loss, expect);
}

TEST(CriticUpdate, NonFiniteLossFailsWithDiagnostics) {
  Critic c = linear_critic({1.0});
  Rng rng(14);
  Matrix a = column({0.0, std::nan("")});
  EXPECT_THROW(critic_update(c, a, column({1.0, 2.0}), rng), NumericalError);
}

CriticOptions small_critic(PenaltyKind kind, double lambda) {
  CriticOptions o;
  o.hidden = {32, 32};
  o.lambda_gp = lambda;
  o.penalty = kind;
  return o;
}

// Trains a critic between model N(0, 1) and reference N(m, 1) on fresh batches.
Critic train_critic(double m, const CriticOptions& opts, std::uint64_t seed, int steps = 1500) {
  Rng rng(seed);
  Critic c = Critic::for_reference(shifted_normals(4096, m, rng), opts, rng);
  for (int s = 0; s < steps; ++s) critic_update(c, shifted_normals(256, 0.0, rng), shifted_normals(256, m, rng), rng);
  return c;
}

TEST(CriticTraining, OrdersSeparatedClusters) {
  Rng rng(15);
  const Matrix left = (0.1 * detail::normal_matrix(256, 1, rng).array() - 2.0).matrix();
  const Matrix right = (0.1 * detail::normal_matrix(256, 1, rng).array() + 2.0).matrix();
  Critic c = Critic::for_reference(right, small_critic(PenaltyKind::two_sided, 10.0), rng);
  for (int s = 0; s < 500; ++s) critic_update(c, left, right, rng);
  // Descending model minus reference pushes reference scores up.
  EXPECT_GT(c.scores(right).mean(), c.scores(left).mean());
}

TEST(CriticTraining, GapEstimatesShiftW1) {
  for (double m : {0.5, 1.0, 2.0}) {
    for (std::uint64_t seed : {21, 22, 23}) {
      const Critic c = train_critic(m, small_critic(PenaltyKind::one_sided, 100.0), seed);
      Rng held(seed + 100);
      const double gap = wasserstein_gap(c, shifted_normals(20000, 0.0, held), shifted_normals(20000, m, held));
      EXPECT_GE(-gap / m, 0.7) << "m " << m << " seed " << seed;
      EXPECT_LE(-gap / m, 1.1) << "m " << m << " seed " << seed;
    }
  }
}

// In 1-D a two-sided penalty separates the two slope signs by a barrier of
// height about lambda; this initialization starts on the wrong side and stays.
TEST(CriticTraining, TwoSidedPenaltyCanLockInWrongSlopeSign) {
  const Critic c = train_critic(1.0, small_critic(PenaltyKind::two_sided, 100.0), 23);
  Rng held(123);
  EXPECT_GT(wasserstein_gap(c, shifted_normals(20000, 0.0, held), shifted_normals(20000, 1.0, held)), 0.5);
}

TEST(CriticTraining, LargePenaltyKeepsInterpolateSlopeNearOne) {
  const Critic c = train_critic(1.0, small_critic(PenaltyKind::two_sided, 1000.0), 31);
  Rng rng(32);
  const PenaltyValue p = gradient_penalty(c, shifted_normals(4096, 0.0, rng), shifted_normals(4096, 1.0, rng), rng);
  EXPECT_GE(p.mean_grad_norm, 0.8);
  EXPECT_LE(p.mean_grad_norm, 1.2);
}

TEST(CriticCheckpoint, RoundTripRestoresScores) {
  Rng rng(33);
  const Matrix ref = detail::normal_matrix(50, 2, rng);
  const Critic c = Critic::for_reference(ref, small_critic(PenaltyKind::one_sided, 10.0), rng);
  std::stringstream ss;
  c.save(ss);
  Critic d = Critic::for_reference(ref, small_critic(PenaltyKind::one_sided, 10.0), rng);
  d.load(ss);
  EXPECT_EQ(c.scores(ref), d.scores(ref));
}

TEST(Critic, NormalizationIsFrozenReferenceMoments) {
  Rng rng(34);
  const Matrix ref = (3.0 * detail::normal_matrix(1000, 2, rng).array() + 5.0).matrix();
  const Critic c = Critic::for_reference(ref, small_critic(PenaltyKind::two_sided, 10.0), rng);
  const Matrix u = c.normalize(ref);
  for (int j = 0; j < 2; ++j) {
    EXPECT_NEAR(u.col(j).mean(), 0.0, 1e-12);
    EXPECT_NEAR(std::sqrt(u.col(j).squaredNorm() / 999.0), 1.0, 1e-12);
  }
}

}  // namespace
}  // namespace ada
