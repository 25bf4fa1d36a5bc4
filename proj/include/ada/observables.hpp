#pragma once

// Differentiable observables of states. A batch of states is an n x d
// matrix; particle configurations are flattened as (x0, y0, z0, x1, ...).

#include <array>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <numeric>
#include <optional>

#include "ada/core.hpp"

namespace ada {

class Observable {
 public:
  virtual ~Observable() = default;

  virtual std::string name() const = 0;
  virtual int input_dim() const = 0;
  virtual int output_dim() const = 0;

  /// Row i: o(states.row(i)). `noise` feeds stochastic observables; others ignore it.
  virtual Matrix evaluate(const Matrix& states, Rng* noise = nullptr) const = 0;

  /// Row i: J(states.row(i))^T d_out.row(i). Additive noise has no state dependence.
  virtual Matrix pullback(const Matrix& states, const Matrix& d_out) const = 0;

 protected:
  void check_batch(const Matrix& states) const {
    if (states.cols() != input_dim()) {
      throw InputError(detail::concat(name(), ": state width ", states.cols(), ", expected ", input_dim()));
    }
  }
  void check_adjoint(const Matrix& states, const Matrix& d_out) const {
    check_batch(states);
    detail::require(d_out.rows() == states.rows() && d_out.cols() == output_dim(),
                    name() + ": output adjoint shape mismatch");
  }
};

using ObservablePtr = std::shared_ptr<const Observable>;

/// Selects a fixed list of coordinates.
class CoordinateProjection final : public Observable {
 public:
  CoordinateProjection(int input_dim, std::vector<int> axes) : dim_(input_dim), axes_(std::move(axes)) {
    detail::require(!axes_.empty(), "CoordinateProjection: no axes");
    for (std::size_t a = 0; a < axes_.size(); ++a) {
      detail::require(axes_[a] >= 0 && axes_[a] < dim_,
                      detail::concat("CoordinateProjection: axis ", axes_[a], " out of range"));
      for (std::size_t b = 0; b < a; ++b) {
        detail::require(axes_[a] != axes_[b], "CoordinateProjection: repeated axis");
      }
    }
  }

  std::string name() const override {
    std::string s = "proj";
    for (int a : axes_) s += detail::concat('_', a);
    return s;
  }
  int input_dim() const override { return dim_; }
  int output_dim() const override { return static_cast<int>(axes_.size()); }
  const std::vector<int>& axes() const { return axes_; }

  Matrix evaluate(const Matrix& states, Rng* = nullptr) const override {
    check_batch(states);
    Matrix out(states.rows(), output_dim());
    for (int j = 0; j < output_dim(); ++j) out.col(j) = states.col(axes_[j]);
    return out;
  }

  Matrix pullback(const Matrix& states, const Matrix& d_out) const override {
    check_adjoint(states, d_out);
    Matrix g = Matrix::Zero(states.rows(), dim_);
    for (int j = 0; j < output_dim(); ++j) g.col(axes_[j]) += d_out.col(j);
    return g;
  }

 private:
  int dim_;
  std::vector<int> axes_;
};

/// |x_axis|; the pullback uses sign(0) = 0.
class AbsoluteValue final : public Observable {
 public:
  AbsoluteValue(int input_dim, int axis) : dim_(input_dim), axis_(axis) {
    detail::require(axis_ >= 0 && axis_ < dim_, detail::concat("AbsoluteValue: axis ", axis_, " out of range"));
  }

  std::string name() const override { return detail::concat("abs_", axis_); }
  int input_dim() const override { return dim_; }
  int output_dim() const override { return 1; }

  Matrix evaluate(const Matrix& states, Rng* = nullptr) const override {
    check_batch(states);
    return states.col(axis_).cwiseAbs();
  }

  Matrix pullback(const Matrix& states, const Matrix& d_out) const override {
    check_adjoint(states, d_out);
    Matrix g = Matrix::Zero(states.rows(), dim_);
    for (Eigen::Index r = 0; r < states.rows(); ++r) {
      const double x = states(r, axis_);
      g(r, axis_) = x > 0.0 ? d_out(r, 0) : (x < 0.0 ? -d_out(r, 0) : 0.0);
    }
    return g;
  }

 private:
  int dim_;
  int axis_;
};

/// (x_i, x_j) of a 3-D point.
inline std::array<double, 2> project_pair(const std::array<double, 3>& p, int i, int j) {
  detail::require(i >= 0 && i < 3 && j >= 0 && j < 3 && i != j, "project_pair: axes must be distinct in {0,1,2}");
  return {p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]};
}

/// The three pairwise projections (0,1), (0,2), (1,2) of 3-D states.
inline std::vector<ObservablePtr> pairwise_projections() {
  return {std::make_shared<CoordinateProjection>(3, std::vector<int>{0, 1}),
          std::make_shared<CoordinateProjection>(3, std::vector<int>{0, 2}),
          std::make_shared<CoordinateProjection>(3, std::vector<int>{1, 2})};
}

struct Configuration {
  Matrix positions;  // N x 3, Angstrom
  std::vector<double> masses;
  std::vector<std::pair<int, int>> bonds;

  Configuration() = default;
  Configuration(Matrix pos, std::vector<double> m) : positions(std::move(pos)), masses(std::move(m)) {
    validate();
  }

  int atoms() const { return static_cast<int>(positions.rows()); }

  void validate() const {
    detail::require(positions.rows() >= 1 && positions.cols() == 3, "Configuration: positions must be N x 3 with N >= 1");
    detail::require(static_cast<Eigen::Index>(masses.size()) == positions.rows(),
                    "Configuration: one mass per atom required");
    for (double m : masses) detail::require(m > 0.0, "Configuration: masses must be positive");
    for (const auto& [a, b] : bonds) {
      detail::require(a >= 0 && a < atoms() && b >= 0 && b < atoms() && a != b, "Configuration: bad bond");
    }
  }

  /// Flattened row (x0, y0, z0, x1, ...).
  Matrix flat() const {
    return Eigen::Map<const Matrix>(positions.data(), 1, positions.size());
  }

  static Configuration from_flat(const double* row, const std::vector<double>& masses) {
    const auto n = static_cast<Eigen::Index>(masses.size());
    return {Eigen::Map<const Matrix>(row, n, 3), masses};
  }
};

/// Reads "N" then N lines of "mass x y z".
inline Configuration read_xyz(std::istream& is) {
  long n = 0;
  if (!(is >> n) || n < 1) throw IoError("xyz: missing or invalid atom count");
  Matrix pos(n, 3);
  std::vector<double> masses(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    if (!(is >> masses[static_cast<std::size_t>(i)] >> pos(i, 0) >> pos(i, 1) >> pos(i, 2))) {
      throw IoError(detail::concat("xyz: truncated at atom ", i));
    }
  }
  try {
    return {std::move(pos), std::move(masses)};
  } catch (const InputError& e) {
    throw IoError(std::string("xyz: ") + e.what());
  }
}

inline Configuration read_xyz(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  return read_xyz(is);
}

inline void write_xyz(std::ostream& os, const Configuration& c) {
  os << c.atoms() << '\n' << std::setprecision(17);
  for (int i = 0; i < c.atoms(); ++i) {
    os << c.masses[i] << ' ' << c.positions(i, 0) << ' ' << c.positions(i, 1) << ' ' << c.positions(i, 2) << '\n';
  }
}

namespace detail {

inline Eigen::RowVector3d center_of_mass(const Matrix& pos, const std::vector<double>& masses,
                                         const std::vector<int>& atoms, double* total = nullptr) {
  Eigen::RowVector3d com = Eigen::RowVector3d::Zero();
  double m = 0.0;
  for (int a : atoms) {
    com += masses[a] * pos.row(a);
    m += masses[a];
  }
  if (total != nullptr) *total = m;
  return com / m;
}

inline std::vector<int> all_atoms(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace detail

/// Mass-weighted radius of gyration. `grad` (N x 3) receives dRg/dr when given.
inline double radius_of_gyration(const Configuration& c, Matrix* grad = nullptr) {
  c.validate();
  double total = 0.0;
  const Eigen::RowVector3d com = detail::center_of_mass(c.positions, c.masses, detail::all_atoms(c.atoms()), &total);
  double s = 0.0;
  for (int i = 0; i < c.atoms(); ++i) s += c.masses[i] * (c.positions.row(i) - com).squaredNorm();
  const double rg = std::sqrt(s / total);
  if (grad != nullptr) {
    // d(Rg^2)/dr_i = 2 m_i (r_i - com) / M; the com terms cancel.
    grad->setZero(c.atoms(), 3);
    if (rg > 0.0) {
      for (int i = 0; i < c.atoms(); ++i) grad->row(i) = c.masses[i] * (c.positions.row(i) - com) / (total * rg);
    }
  }
  return rg;
}

inline double mean_interatomic_distance(const Configuration& c, Matrix* grad = nullptr) {
  c.validate();
  const int n = c.atoms();
  detail::require(n >= 2, "mean_interatomic_distance: need at least two atoms");
  const double norm = 2.0 / (static_cast<double>(n) * (n - 1));
  if (grad != nullptr) grad->setZero(n, 3);
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const Eigen::RowVector3d d = c.positions.row(i) - c.positions.row(j);
      const double r = d.norm();
      s += r;
      if (grad != nullptr && r > 0.0) {
        grad->row(i) += norm * d / r;
        grad->row(j) -= norm * d / r;
      }
    }
  }
  return norm * s;
}

/// Distance between atoms i and j; the gradient is zero where they coincide.
inline double pair_distance(const Configuration& c, int i, int j, Matrix* grad = nullptr) {
  c.validate();
  detail::require(i >= 0 && i < c.atoms() && j >= 0 && j < c.atoms(),
                  detail::concat("pair_distance: index out of range (", i, ", ", j, ")"));
  detail::require(i != j, "pair_distance: indices must differ");
  const Eigen::RowVector3d d = c.positions.row(i) - c.positions.row(j);
  const double r = d.norm();
  if (grad != nullptr) {
    grad->setZero(c.atoms(), 3);
    if (r > 0.0) {
      grad->row(i) = d / r;
      grad->row(j) = -d / r;
    }
  }
  return r;
}

inline double group_com_distance(const Configuration& c, const std::vector<int>& group_a,
                                 const std::vector<int>& group_b, Matrix* grad = nullptr) {
  c.validate();
  detail::require(!group_a.empty() && !group_b.empty(), "group_com_distance: groups must be nonempty");
  std::vector<int> seen(c.atoms(), 0);
  for (int a : group_a) {
    detail::require(a >= 0 && a < c.atoms(), "group_com_distance: index out of range");
    seen[a] = 1;
  }
  for (int b : group_b) {
    detail::require(b >= 0 && b < c.atoms(), "group_com_distance: index out of range");
    detail::require(!seen[b], "group_com_distance: groups must be disjoint");
  }
  double ma = 0.0, mb = 0.0;
  const Eigen::RowVector3d ca = detail::center_of_mass(c.positions, c.masses, group_a, &ma);
  const Eigen::RowVector3d cb = detail::center_of_mass(c.positions, c.masses, group_b, &mb);
  const Eigen::RowVector3d d = ca - cb;
  const double r = d.norm();
  if (grad != nullptr) {
    grad->setZero(c.atoms(), 3);
    if (r > 0.0) {
      for (int a : group_a) grad->row(a) = (c.masses[a] / ma) * d / r;
      for (int b : group_b) grad->row(b) = -(c.masses[b] / mb) * d / r;
    }
  }
  return r;
}

/// Scalar observable of configurations defined by a function with gradient.
class ConfigurationObservable final : public Observable {
 public:
  using Fn = std::function<double(const Configuration&, Matrix*)>;

  ConfigurationObservable(std::string name, std::vector<double> masses, Fn fn)
      : name_(std::move(name)), masses_(std::move(masses)), fn_(std::move(fn)) {
    detail::require(!masses_.empty(), "ConfigurationObservable: no atoms");
  }

  std::string name() const override { return name_; }
  int input_dim() const override { return 3 * static_cast<int>(masses_.size()); }
  int output_dim() const override { return 1; }

  Matrix evaluate(const Matrix& states, Rng* = nullptr) const override {
    check_batch(states);
    Matrix out(states.rows(), 1);
    for (Eigen::Index i = 0; i < states.rows(); ++i) {
      out(i, 0) = fn_(Configuration::from_flat(states.row(i).data(), masses_), nullptr);
    }
    return out;
  }

  Matrix pullback(const Matrix& states, const Matrix& d_out) const override {
    check_adjoint(states, d_out);
    Matrix g(states.rows(), input_dim());
    Matrix gi;
    for (Eigen::Index i = 0; i < states.rows(); ++i) {
      fn_(Configuration::from_flat(states.row(i).data(), masses_), &gi);
      g.row(i) = d_out(i, 0) * Eigen::Map<const Matrix>(gi.data(), 1, gi.size());
    }
    return g;
  }

 private:
  std::string name_;
  std::vector<double> masses_;
  Fn fn_;
};

inline ObservablePtr make_radius_of_gyration(std::vector<double> masses) {
  return std::make_shared<ConfigurationObservable>("radius_of_gyration", std::move(masses),
                                                   [](const Configuration& c, Matrix* g) { return radius_of_gyration(c, g); });
}

inline ObservablePtr make_mean_interatomic_distance(std::vector<double> masses) {
  detail::require(masses.size() >= 2, "mean_interatomic_distance: need at least two atoms");
  return std::make_shared<ConfigurationObservable>(
      "mean_interatomic_distance", std::move(masses),
      [](const Configuration& c, Matrix* g) { return mean_interatomic_distance(c, g); });
}

inline ObservablePtr make_pair_distance(std::vector<double> masses, int i, int j) {
  const int n = static_cast<int>(masses.size());
  detail::require(i >= 0 && i < n && j >= 0 && j < n && i != j, "pair_distance: bad atom indices");
  return std::make_shared<ConfigurationObservable>(
      detail::concat("pair_distance_", i, "_", j), std::move(masses),
      [i, j](const Configuration& c, Matrix* g) { return pair_distance(c, i, j, g); });
}

inline ObservablePtr make_group_com_distance(std::vector<double> masses, std::vector<int> a, std::vector<int> b) {
  Configuration probe(Matrix::Zero(static_cast<Eigen::Index>(masses.size()), 3), masses);
  Matrix scratch;
  group_com_distance(probe, a, b, &scratch);  // validates the groups once
  return std::make_shared<ConfigurationObservable>(
      "group_com_distance", std::move(masses),
      [a = std::move(a), b = std::move(b)](const Configuration& c, Matrix* g) { return group_com_distance(c, a, b, g); });
}

struct ImageSpec {
  int side = 16;              // pixels per edge
  double sigma_pixels = 2.5;  // Gaussian kernel width
  double pixel_size = 1.0;    // Angstrom per pixel
  double snr = 1.0;           // clean pixel variance / noise variance
  bool noiseless = false;
};

/// Orthographic projection onto the x-y plane, one unnormalized Gaussian per
/// atom. Pixel (r, c) is centered at ((c - P/2) * size, (r - P/2) * size), so
/// the origin falls on pixel (P/2, P/2).
class SplatImage final : public Observable {
 public:
  SplatImage(int atoms, ImageSpec spec) : atoms_(atoms), spec_(spec) {
    detail::require(atoms >= 1, "splat_image: need at least one atom");
    detail::require(spec.side >= 4, "splat_image: side must be at least 4 pixels");
    detail::require(spec.sigma_pixels > 0.0 && spec.pixel_size > 0.0, "splat_image: kernel width and pixel size must be positive");
    detail::require(spec.noiseless || spec.snr > 0.0, "splat_image: SNR must be positive");
    centers_.resize(spec.side);
    for (int i = 0; i < spec.side; ++i) centers_[i] = (i - spec.side / 2) * spec.pixel_size;
  }

  std::string name() const override { return "splat_image"; }
  int input_dim() const override { return 3 * atoms_; }
  int output_dim() const override { return spec_.side * spec_.side; }
  const ImageSpec& spec() const { return spec_; }

  Matrix clean(const Matrix& states) const {
    check_batch(states);
    const int p = spec_.side;
    const double inv2s2 = 0.5 / (sigma() * sigma());
    Matrix out = Matrix::Zero(states.rows(), output_dim());
    std::vector<double> gx(p), gy(p);
    for (Eigen::Index s = 0; s < states.rows(); ++s) {
      for (int a = 0; a < atoms_; ++a) {
        const double x = states(s, 3 * a), y = states(s, 3 * a + 1);
        for (int i = 0; i < p; ++i) {
          gx[i] = std::exp(-(centers_[i] - x) * (centers_[i] - x) * inv2s2);
          gy[i] = std::exp(-(centers_[i] - y) * (centers_[i] - y) * inv2s2);
        }
        for (int r = 0; r < p; ++r) {
          for (int c = 0; c < p; ++c) out(s, r * p + c) += gy[r] * gx[c];
        }
      }
    }
    return out;
  }

  Matrix evaluate(const Matrix& states, Rng* noise = nullptr) const override {
    Matrix img = clean(states);
    if (spec_.noiseless || noise == nullptr) return img;
    const double n = static_cast<double>(img.cols());
    for (Eigen::Index s = 0; s < img.rows(); ++s) {
      const double mean = detail::ordered_mean(img.row(s));
      double var = 0.0;
      for (Eigen::Index k = 0; k < img.cols(); ++k) var += (img(s, k) - mean) * (img(s, k) - mean);
      const double sd = std::sqrt(var / n / spec_.snr);
      for (Eigen::Index k = 0; k < img.cols(); ++k) img(s, k) += sd * detail::normal(*noise);
    }
    return img;
  }

  Matrix pullback(const Matrix& states, const Matrix& d_out) const override {
    check_adjoint(states, d_out);
    const int p = spec_.side;
    const double s2 = sigma() * sigma();
    const double inv2s2 = 0.5 / s2;
    Matrix g = Matrix::Zero(states.rows(), input_dim());
    std::vector<double> gx(p), gy(p);
    for (Eigen::Index s = 0; s < states.rows(); ++s) {
      for (int a = 0; a < atoms_; ++a) {
        const double x = states(s, 3 * a), y = states(s, 3 * a + 1);
        for (int i = 0; i < p; ++i) {
          gx[i] = std::exp(-(centers_[i] - x) * (centers_[i] - x) * inv2s2);
          gy[i] = std::exp(-(centers_[i] - y) * (centers_[i] - y) * inv2s2);
        }
        double dx = 0.0, dy = 0.0;
        for (int r = 0; r < p; ++r) {
          for (int c = 0; c < p; ++c) {
            const double w = d_out(s, r * p + c) * gy[r] * gx[c];
            dx += w * (centers_[c] - x);
            dy += w * (centers_[r] - y);
          }
        }
        g(s, 3 * a) = dx / s2;
        g(s, 3 * a + 1) = dy / s2;
      }
    }
    return g;
  }

 private:
  double sigma() const { return spec_.sigma_pixels * spec_.pixel_size; }

  int atoms_;
  ImageSpec spec_;
  std::vector<double> centers_;
};

/// One image per configuration; `noise` may be null for clean images.
inline Vector splat_image(const Configuration& c, const ImageSpec& spec, Rng* noise) {
  SplatImage obs(c.atoms(), spec);
  return obs.evaluate(c.flat(), noise).row(0).transpose();
}

}  // namespace ada
