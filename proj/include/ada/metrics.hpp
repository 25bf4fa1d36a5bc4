#pragma once

// Evaluation metrics: 1-D Wasserstein distances, 2-D histogram JSD, cluster
// weight KL, energy-histogram distance and Kabsch-aligned RMSD.

#include <limits>
#include <map>
#include <optional>

#include <Eigen/SVD>

#include "ada/densities.hpp"

namespace ada {

namespace detail {

inline std::vector<double> sorted_copy(const Vector& v) {
  std::vector<double> s(v.data(), v.data() + v.size());
  std::sort(s.begin(), s.end());
  return s;
}

}  // namespace detail

/// W1 between two empirical 1-D distributions. Equal sizes use the sorted
/// coupling; otherwise the integral of |F_a - F_b| over the merged support.
inline double w1_empirical(const Vector& a, const Vector& b) {
  detail::require(a.size() >= 1 && b.size() >= 1, "w1_empirical: empty sample set");
  const std::vector<double> sa = detail::sorted_copy(a), sb = detail::sorted_copy(b);
  if (sa.size() == sb.size()) {
    double s = 0.0;
    for (std::size_t i = 0; i < sa.size(); ++i) s += std::abs(sa[i] - sb[i]);
    return s / static_cast<double>(sa.size());
  }
  const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
  std::size_t i = 0, j = 0;
  double prev = std::min(sa.front(), sb.front());
  double total = 0.0;
  while (i < sa.size() || j < sb.size()) {
    const double next = (j >= sb.size() || (i < sa.size() && sa[i] <= sb[j])) ? sa[i] : sb[j];
    total += std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) * (next - prev);
    while (i < sa.size() && sa[i] == next) ++i;
    while (j < sb.size() && sb[j] == next) ++j;
    prev = next;
  }
  return total;
}

/// W2 between two empirical 1-D distributions via their quantile functions.
inline double w2_empirical(const Vector& a, const Vector& b) {
  detail::require(a.size() >= 1 && b.size() >= 1, "w2_empirical: empty sample set");
  const std::vector<double> sa = detail::sorted_copy(a), sb = detail::sorted_copy(b);
  const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
  std::size_t i = 0, j = 0;
  double u = 0.0, total = 0.0;
  while (i < sa.size() && j < sb.size()) {
    const double ua = static_cast<double>(i + 1) / na, ub = static_cast<double>(j + 1) / nb;
    const double next = std::min(ua, ub);
    total += (next - u) * (sa[i] - sb[j]) * (sa[i] - sb[j]);
    u = next;
    if (ua <= next) ++i;
    if (ub <= next) ++j;
  }
  return std::sqrt(total);
}

struct HistogramSpec2D {
  double lo_x = 0.0, hi_x = 1.0, lo_y = 0.0, hi_y = 1.0;
  int bins_x = 50, bins_y = 50;

  void validate() const {
    detail::require(bins_x >= 1 && bins_y >= 1, "histogram: bin counts must be positive");
    detail::require(hi_x > lo_x && hi_y > lo_y, "histogram: degenerate axis range");
  }

  /// bins x bins over the joint range of both sample sets.
  static HistogramSpec2D covering(const Matrix& a, const Matrix& b, int bins = 50) {
    detail::require(a.cols() == 2 && b.cols() == 2, "histogram: samples must be 2-D");
    detail::require(a.rows() >= 1 && b.rows() >= 1, "histogram: empty sample set");
    HistogramSpec2D s;
    s.lo_x = std::min(a.col(0).minCoeff(), b.col(0).minCoeff());
    s.hi_x = std::max(a.col(0).maxCoeff(), b.col(0).maxCoeff());
    s.lo_y = std::min(a.col(1).minCoeff(), b.col(1).minCoeff());
    s.hi_y = std::max(a.col(1).maxCoeff(), b.col(1).maxCoeff());
    if (s.hi_x <= s.lo_x) s.hi_x = s.lo_x + 1.0;
    if (s.hi_y <= s.lo_y) s.hi_y = s.lo_y + 1.0;
    s.bins_x = s.bins_y = bins;
    return s;
  }
};

/// Counts per bin, x index major. Points outside the range are dropped; the
/// upper edge belongs to the last bin.
inline Vector histogram_2d(const Matrix& pts, const HistogramSpec2D& spec) {
  spec.validate();
  detail::require(pts.cols() == 2, "histogram_2d: samples must be 2-D");
  Vector counts = Vector::Zero(static_cast<Eigen::Index>(spec.bins_x) * spec.bins_y);
  auto index = [](double v, double lo, double hi, int bins) {
    if (v < lo || v > hi) return -1;
    return std::min(static_cast<int>((v - lo) / (hi - lo) * bins), bins - 1);
  };
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    const int ix = index(pts(i, 0), spec.lo_x, spec.hi_x, spec.bins_x);
    const int iy = index(pts(i, 1), spec.lo_y, spec.hi_y, spec.bins_y);
    if (ix >= 0 && iy >= 0) counts[ix * spec.bins_y + iy] += 1.0;
  }
  return counts;
}

/// Jensen-Shannon divergence (natural log) between two count vectors after
/// adding `pseudo_count` to every bin.
inline double jsd_counts(const Vector& p_counts, const Vector& q_counts, double pseudo_count = 1e-10) {
  detail::require(p_counts.size() == q_counts.size() && p_counts.size() > 0, "jsd: bin count mismatch");
  const Vector p = (p_counts.array() + pseudo_count).matrix() / (p_counts.sum() + pseudo_count * p_counts.size());
  const Vector q = (q_counts.array() + pseudo_count).matrix() / (q_counts.sum() + pseudo_count * q_counts.size());
  double s = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    const double m = 0.5 * (p[k] + q[k]);
    if (p[k] > 0.0) s += 0.5 * p[k] * std::log(p[k] / m);
    if (q[k] > 0.0) s += 0.5 * q[k] * std::log(q[k] / m);
  }
  return std::clamp(s, 0.0, std::log(2.0));
}

inline double jsd_2d(const Matrix& a, const Matrix& b, const HistogramSpec2D& spec, double pseudo_count = 1e-10) {
  return jsd_counts(histogram_2d(a, spec), histogram_2d(b, spec), pseudo_count);
}

/// Mixture weights induced by averaging posteriors over the samples.
inline Vector induced_weights(const GaussianMixture& g, const Matrix& samples) {
  detail::require(samples.rows() >= 1, "cluster_kl: no samples");
  const Matrix r = g.posterior(samples);
  Vector w(g.components());
  for (int k = 0; k < g.components(); ++k) w[k] = detail::ordered_mean(r.col(k));
  return w;
}

/// KL(induced weights || component weights of g).
inline double cluster_kl(const GaussianMixture& g, const Matrix& samples) {
  const Vector m = induced_weights(g, samples);
  double s = 0.0;
  for (int k = 0; k < g.components(); ++k) {
    if (m[k] > 0.0) s += m[k] * std::log(m[k] / g.weights()[k]);
  }
  return std::max(s, 0.0);
}

enum class EnergyDistance { w1, w2 };

/// Distance between the energy (-log g) histograms of two sample sets.
inline double energy_metric(const GaussianMixture& g, const Matrix& a, const Matrix& b,
                            EnergyDistance kind = EnergyDistance::w1) {
  detail::require(a.rows() >= 1 && b.rows() >= 1, "energy_metric: empty sample set");
  const Vector ea = g.energy(a), eb = g.energy(b);
  return kind == EnergyDistance::w1 ? w1_empirical(ea, eb) : w2_empirical(ea, eb);
}

/// RMSD after the optimal proper rotation and translation of p onto q.
inline double kabsch_rmsd(const Matrix& p, const Matrix& q) {
  detail::require(p.cols() == 3 && q.cols() == 3, "kabsch_rmsd: configurations must be N x 3");
  detail::require(p.rows() == q.rows(), detail::concat("kabsch_rmsd: atom counts differ (", p.rows(), " vs ", q.rows(), ")"));
  detail::require(p.rows() >= 1, "kabsch_rmsd: empty configuration");
  const Eigen::RowVector3d cp = p.colwise().mean(), cq = q.colwise().mean();
  const Eigen::MatrixXd a = (p.rowwise() - cp);
  const Eigen::MatrixXd b = (q.rowwise() - cq);
  const Eigen::Matrix3d h = a.transpose() * b;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Eigen::Matrix3d rot = svd.matrixV() * d * svd.matrixU().transpose();
  const Eigen::MatrixXd moved = a * rot.transpose();
  return std::sqrt((moved - b).rowwise().squaredNorm().mean());
}

/// Largest distance from a generated configuration to its closest reference.
inline double max_rmsd_to_set(const std::vector<Matrix>& generated, const std::vector<Matrix>& references) {
  detail::require(!generated.empty() && !references.empty(), "max_rmsd_to_set: empty set");
  double worst = 0.0;
  for (const auto& g : generated) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& r : references) best = std::min(best, kabsch_rmsd(g, r));
    worst = std::max(worst, best);
  }
  return worst;
}

/// Named metric values; absent entries are simply not reported.
struct MetricBlock {
  std::map<std::string, double> observable_w1;
  std::optional<double> energy_w1;
  std::optional<double> energy_w2;
  std::optional<double> cluster_kl;
  std::map<std::string, double> fes_jsd;
  std::optional<double> max_rmsd;
  std::map<std::string, double> extra;
  long samples = 0;
  int jsd_bins = 50;

  std::vector<std::pair<std::string, double>> entries() const {
    std::vector<std::pair<std::string, double>> out;
    for (const auto& [k, v] : observable_w1) out.emplace_back("w1." + k, v);
    if (energy_w1) out.emplace_back("energy_w1", *energy_w1);
    if (energy_w2) out.emplace_back("energy_w2", *energy_w2);
    if (cluster_kl) out.emplace_back("cluster_kl", *cluster_kl);
    for (const auto& [k, v] : fes_jsd) out.emplace_back("jsd." + k, v);
    if (max_rmsd) out.emplace_back("max_rmsd", *max_rmsd);
    for (const auto& [k, v] : extra) out.emplace_back(k, v);
    return out;
  }
};

/// Energy distances and cluster KL of `generated` against `reference`, both scored under `target`.
inline MetricBlock mixture_metrics(const GaussianMixture& target, const Matrix& generated, const Matrix& reference) {
  MetricBlock m;
  m.energy_w1 = energy_metric(target, generated, reference, EnergyDistance::w1);
  m.energy_w2 = energy_metric(target, generated, reference, EnergyDistance::w2);
  m.cluster_kl = cluster_kl(target, generated);
  m.samples = static_cast<long>(generated.rows());
  return m;
}

}  // namespace ada
