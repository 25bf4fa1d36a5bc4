#pragma once

// Run artifacts: key/value reports, delimited trace tables and histogram dumps.
// Every file starts with a line naming its format and version.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "ada/align.hpp"

namespace ada {

inline constexpr int kReportVersion = 1;
inline constexpr int kTraceVersion = 1;
inline constexpr int kHistogramVersion = 1;

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw IoError("not a number: '" + s + "'");
  return v;
}

/// Ordered key/value document.
//
//   # ada-report <version>
//   key = value
//
// Keys contain no '=' or whitespace; values run to the end of the line and
// must not contain newlines.
class KeyValueReport {
 public:
  void set(const std::string& key, const std::string& value) {
    if (key.empty() || key.find_first_of("= \t\n#") != std::string::npos) {
      throw InputError("report key '" + key + "' contains reserved characters");
    }
    if (value.find('\n') != std::string::npos) throw InputError("report value for '" + key + "' contains a newline");
    auto it = index_.find(key);
    if (it != index_.end()) {
      entries_[it->second].second = value;
    } else {
      index_[key] = entries_.size();
      entries_.emplace_back(key, value);
    }
  }
  void set(const std::string& key, double v) { set(key, format_double(v)); }
  void set(const std::string& key, long v) { set(key, std::to_string(v)); }
  void set(const std::string& key, int v) { set(key, std::to_string(v)); }

  bool has(const std::string& key) const { return index_.count(key) != 0; }
  const std::string& get(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) throw IoError("report has no key '" + key + "'");
    return entries_[it->second].second;
  }
  double number(const std::string& key) const { return parse_double(get(key)); }
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  int version() const { return version_; }

  void write(std::ostream& os) const {
    os << "# ada-report " << kReportVersion << '\n';
    for (const auto& [k, v] : entries_) os << k << " = " << v << '\n';
    if (!os) throw IoError("report: write failed");
  }

  static KeyValueReport parse(std::istream& is) {
    KeyValueReport r;
    std::string line;
    if (!std::getline(is, line) || line.rfind("# ada-report ", 0) != 0) throw IoError("report: missing header line");
    r.version_ = std::atoi(line.c_str() + 13);
    if (r.version_ != kReportVersion) throw IoError(detail::concat("report: unsupported version ", r.version_));
    int lineno = 1;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find(" = ");
      if (eq == std::string::npos) throw IoError(detail::concat("report: line ", lineno, " is not 'key = value'"));
      r.set(line.substr(0, eq), line.substr(eq + 3));
    }
    return r;
  }

  bool operator==(const KeyValueReport& o) const { return entries_ == o.entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
  int version_ = kReportVersion;
};

inline std::string penalty_name(PenaltyKind k) { return k == PenaltyKind::one_sided ? "one_sided" : "two_sided"; }
inline std::string kl_gradient_name(KlGradient k) { return k == KlGradient::path ? "path" : "pathwise"; }

template <typename T>
std::string join(const std::vector<T>& v, char sep = ',') {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += sep;
    if constexpr (std::is_floating_point_v<T>) {
      s += format_double(v[i]);
    } else if constexpr (std::is_arithmetic_v<T>) {
      s += std::to_string(v[i]);
    } else {
      s += v[i];
    }
  }
  return s;
}

inline void echo_config(KeyValueReport& r, const AlignConfig& c) {
  r.set("config.beta", c.beta);
  r.set("config.observable_weights", join(c.observable_weights));
  r.set("config.steps", c.steps);
  r.set("config.critic_steps", c.critic_steps);
  r.set("config.batch", c.batch);
  r.set("config.generator_lr", c.generator_lr);
  r.set("config.generator_beta1", c.generator_beta1);
  r.set("config.generator_beta2", c.generator_beta2);
  r.set("config.critic_lr", c.critic_lr);
  r.set("config.critic_beta1", c.critic_beta1);
  r.set("config.critic_beta2", c.critic_beta2);
  r.set("config.lambda_gp", c.lambda_gp);
  r.set("config.penalty", penalty_name(c.penalty));
  r.set("config.critic_hidden", join(c.critic_hidden));
  r.set("config.kl_gradient", kl_gradient_name(c.kl_gradient));
  r.set("config.kl_samples", c.kl_samples);
  r.set("config.seed", std::to_string(c.seed));
  r.set("config.ea_order", c.ea_order);
}

inline void add_metrics(KeyValueReport& r, const MetricBlock& m) {
  r.set("metrics.samples", m.samples);
  for (const auto& [k, v] : m.entries()) r.set("metrics." + k, v);
}

/// Report of one alignment run; `extra` carries caller context (preset, resolved config text).
inline KeyValueReport make_report(const AlignReport& rep, const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  KeyValueReport r;
  r.set("format", std::string("ada-report"));
  r.set("format_version", kReportVersion);
  r.set("method", rep.method);
  r.set("seed", std::to_string(rep.config.seed));
  for (const auto& [k, v] : extra) r.set(k, v);
  echo_config(r, rep.config);
  r.set("observables", join(rep.observables));
  r.set("steps_completed", static_cast<long>(rep.kl_trace.size()));
  if (!rep.kl_trace.empty()) {
    r.set("final.step_kl", rep.kl_trace.back());
    r.set("final.lagrangian", rep.lagrangian_trace.back());
    for (std::size_t i = 0; i < rep.observables.size(); ++i) {
      r.set("final.gap." + rep.observables[i], rep.gap_trace.back()[i]);
    }
  }
  r.set("final.kl", rep.final_kl);
  r.set("final.kl_std_error", rep.final_kl_std_error);
  add_metrics(r, rep.metrics);
  r.set("wall_seconds", rep.wall_seconds);
  return r;
}

inline void write_report(const KeyValueReport& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  r.write(os);
}

inline KeyValueReport read_report(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  return KeyValueReport::parse(is);
}

/// Trace table, comma separated:
///   # ada-trace <version>
///   step,kl,gap.<obs>...,lagrangian
inline void write_trace(std::ostream& os, const AlignReport& rep) {
  os << "# ada-trace " << kTraceVersion << '\n' << "step,kl";
  const std::string prefix = rep.method == "ea" ? "moment_residual." : "gap.";
  for (const auto& o : rep.observables) os << ',' << prefix << o;
  os << ",lagrangian\n";
  for (std::size_t s = 0; s < rep.kl_trace.size(); ++s) {
    os << s + 1 << ',' << format_double(rep.kl_trace[s]);
    for (double g : rep.gap_trace[s]) os << ',' << format_double(g);
    os << ',' << format_double(rep.lagrangian_trace[s]) << '\n';
  }
  if (!os) throw IoError("trace: write failed");
}

struct TraceTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
};

inline TraceTable read_trace(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("# ada-trace ", 0) != 0) throw IoError("trace: missing header line");
  if (std::atoi(line.c_str() + 12) != kTraceVersion) throw IoError("trace: unsupported version");
  TraceTable t;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  if (!std::getline(is, line)) throw IoError("trace: missing column line");
  t.columns = split(line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != t.columns.size()) throw IoError("trace: ragged row");
    std::vector<double> row;
    for (const auto& c : cells) row.push_back(parse_double(c));
    t.rows.push_back(std::move(row));
  }
  return t;
}

/// 1-D histogram over shared edges of model and reference values.
struct Histogram1D {
  std::string name;
  std::vector<double> edges;  // bins + 1
  std::vector<long> model;
  std::vector<long> reference;
};

inline Histogram1D histogram_1d(const std::string& name, const Vector& model, const Vector& reference, int bins) {
  detail::require(bins >= 1 && model.size() >= 1 && reference.size() >= 1, "histogram_1d: empty input");
  double lo = std::min(model.minCoeff(), reference.minCoeff());
  double hi = std::max(model.maxCoeff(), reference.maxCoeff());
  if (!(hi > lo)) hi = lo + 1.0;
  Histogram1D h{name, {}, std::vector<long>(bins, 0), std::vector<long>(bins, 0)};
  for (int k = 0; k <= bins; ++k) h.edges.push_back(lo + (hi - lo) * k / bins);
  auto idx = [&](double v) { return std::clamp(static_cast<int>((v - lo) / (hi - lo) * bins), 0, bins - 1); };
  for (Eigen::Index i = 0; i < model.size(); ++i) ++h.model[idx(model[i])];
  for (Eigen::Index i = 0; i < reference.size(); ++i) ++h.reference[idx(reference[i])];
  return h;
}

/// Histogram dump, comma separated:
///   # ada-histogram <version>
///   name,<name>
///   lo,hi,model,reference
inline void write_histogram(std::ostream& os, const Histogram1D& h) {
  os << "# ada-histogram " << kHistogramVersion << '\n' << "name," << h.name << '\n' << "lo,hi,model,reference\n";
  for (std::size_t k = 0; k < h.model.size(); ++k) {
    os << format_double(h.edges[k]) << ',' << format_double(h.edges[k + 1]) << ',' << h.model[k] << ','
       << h.reference[k] << '\n';
  }
  if (!os) throw IoError("histogram: write failed");
}

inline Histogram1D read_histogram(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("# ada-histogram ", 0) != 0) throw IoError("histogram: missing header line");
  if (std::atoi(line.c_str() + 16) != kHistogramVersion) throw IoError("histogram: unsupported version");
  Histogram1D h;
  if (!std::getline(is, line) || line.rfind("name,", 0) != 0) throw IoError("histogram: missing name line");
  h.name = line.substr(5);
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string lo, hi, m, r;
    if (!std::getline(ss, lo, ',') || !std::getline(ss, hi, ',') || !std::getline(ss, m, ',') || !std::getline(ss, r)) {
      throw IoError("histogram: malformed row");
    }
    if (h.edges.empty()) h.edges.push_back(parse_double(lo));
    h.edges.push_back(parse_double(hi));
    h.model.push_back(std::stol(m));
    h.reference.push_back(std::stol(r));
  }
  return h;
}

}  // namespace ada
