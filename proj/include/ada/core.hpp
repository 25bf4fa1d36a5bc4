#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <iomanip>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ada {

/// Batches are stored one sample per row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Rng = std::mt19937_64;

/// Rejected input: shape mismatches, out-of-range indices, invalid parameters.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values met during a numerical routine.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename... Args>
std::string concat(const Args&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InputError(what);
}

inline double normal(Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

inline double uniform01(Rng& rng) {
  // 53 random mantissa bits, half-open [0, 1)
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix m(rows, cols);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

/// Index of the first non-finite entry, or -1.
template <typename Derived>
Eigen::Index first_non_finite(const Eigen::DenseBase<Derived>& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double x = v.derived().data()[i];
    if (!std::isfinite(x)) return i;
  }
  return -1;
}

/// Left-to-right mean; Eigen's reductions may reorder under vectorization.
template <typename Derived>
double ordered_mean(const Eigen::DenseBase<Derived>& v) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += v.derived().coeff(i);
  return s / static_cast<double>(v.size());
}


// Parameter checkpoints (text):
//   ada-checkpoint 1 <kind>
//   params <count>
//   <one value per line, %.17g>
inline void write_checkpoint(std::ostream& os, const std::string& kind, const Eigen::VectorXd& p) {
  os << "ada-checkpoint 1 " << kind << "\nparams " << p.size() << '\n' << std::setprecision(17);
  for (Eigen::Index i = 0; i < p.size(); ++i) os << p[i] << '\n';
  if (!os) throw IoError("checkpoint: write failed");
}

inline Eigen::VectorXd read_checkpoint(std::istream& is, const std::string& kind, Eigen::Index expected) {
  std::string magic, got_kind, key;
  int version = 0;
  Eigen::Index count = 0;
  if (!(is >> magic >> version >> got_kind) || magic != "ada-checkpoint") throw IoError("checkpoint: missing header");
  if (version != 1) throw IoError(concat("checkpoint: unsupported version ", version));
  if (got_kind != kind) throw IoError(concat("checkpoint: holds '", got_kind, "', expected '", kind, "'"));
  if (!(is >> key >> count) || key != "params" || count != expected) {
    throw IoError(concat("checkpoint: expected ", expected, " parameters"));
  }
  Eigen::VectorXd p(count);
  for (Eigen::Index i = 0; i < count; ++i) {
    std::string tok;
    if (!(is >> tok)) throw IoError("checkpoint: truncated parameter list");
    char* end = nullptr;
    p[i] = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0') throw IoError("checkpoint: bad value '" + tok + "'");
  }
  return p;
}

}  // namespace detail
}  // namespace ada
