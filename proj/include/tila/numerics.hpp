#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tila {

// Raised when an operation receives input outside its mathematical domain.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Raised for malformed or inconsistent run configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

template <typename... Args>
[[noreturn]] void fail_domain(Args&&... args) {
  throw DomainError(detail::concat(std::forward<Args>(args)...));
}

template <typename... Args>
[[noreturn]] void fail_config(Args&&... args) {
  throw ConfigError(detail::concat(std::forward<Args>(args)...));
}

// ---------------------------------------------------------------------------
// Elementary functions

inline double stable_sigmoid(double x) {
  if (!std::isfinite(x)) fail_domain("stable_sigmoid: non-finite input ", x);
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) = -softplus(-x), evaluated without forming sigmoid(x).
inline double log_sigmoid(double x) {
  if (!std::isfinite(x)) fail_domain("log_sigmoid: non-finite input ", x);
  return -(std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x))));
}

inline std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) fail_domain("softmax: empty input");
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) fail_domain("softmax: non-finite input");
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - m);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

inline constexpr double kProbabilityFloor = 1e-12;

inline double cross_entropy(std::span<const double> p, std::size_t y) {
  if (y >= p.size()) fail_domain("cross_entropy: class index ", y, " out of range for ", p.size(), " classes");
  return -std::log(std::max(p[y], kProbabilityFloor));
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// Returns x/|x|; zero vectors are rejected since the direction is undefined.
inline std::vector<double> l2_normalize(std::span<const double> x) {
  const double n = l2_norm(x);
  if (!(n > 0.0) || !std::isfinite(n)) fail_domain("l2_normalize: zero or non-finite vector");
  std::vector<double> out(x.begin(), x.end());
  for (double& v : out) v /= n;
  return out;
}

// Backward of y = x/|x| given y, |x| and dL/dy.
inline std::vector<double> l2_normalize_backward(std::span<const double> y, double norm,
                                                 std::span<const double> dy) {
  const double proj = dot(y, dy);
  std::vector<double> dx(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = (dy[i] - y[i] * proj) / norm;
  return dx;
}

// ---------------------------------------------------------------------------
// Dense row-major matrix

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return {};
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != m.cols_) fail_domain("Matrix::from_rows: ragged rows");
      std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// C = A * B^T, the batch similarity grid when rows are embeddings.
inline Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) fail_domain("matmul_transposed: inner dimension mismatch");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j));
  return c;
}

// y += W x, W stored row-major (out x in).
inline void gemv_add(std::span<const double> w, std::size_t out, std::size_t in,
                     std::span<const double> x, std::span<double> y) {
  for (std::size_t o = 0; o < out; ++o) {
    const double* row = w.data() + o * in;
    double s = 0.0;
    for (std::size_t i = 0; i < in; ++i) s += row[i] * x[i];
    y[o] += s;
  }
}

// x_grad += W^T dy
inline void gemv_transposed_add(std::span<const double> w, std::size_t out, std::size_t in,
                                std::span<const double> dy, std::span<double> dx) {
  for (std::size_t o = 0; o < out; ++o) {
    const double* row = w.data() + o * in;
    const double g = dy[o];
    if (g == 0.0) continue;
    for (std::size_t i = 0; i < in; ++i) dx[i] += row[i] * g;
  }
}

// dW += dy x^T
inline void outer_add(std::span<double> dw, std::size_t out, std::size_t in,
                      std::span<const double> dy, std::span<const double> x) {
  for (std::size_t o = 0; o < out; ++o) {
    double* row = dw.data() + o * in;
    const double g = dy[o];
    if (g == 0.0) continue;
    for (std::size_t i = 0; i < in; ++i) row[i] += g * x[i];
  }
}

// ---------------------------------------------------------------------------
// Randomness. All draws go through a 64-bit Mersenne Twister; the
// floating-point conversions are spelled out so streams are identical on any
// standard library.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based child seed: independent of generation order.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t index) {
  return splitmix64(splitmix64(base) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Parameter store: named flat segments with a gradient buffer of the same
// layout.

struct Segment {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return rows * cols; }
  friend bool operator==(const Segment&, const Segment&) = default;
};

class ParamStore {
 public:
  std::size_t add(const std::string& name, std::size_t rows, std::size_t cols, double fill = 0.0) {
    if (index_.count(name)) fail_domain("ParamStore: duplicate segment '", name, "'");
    Segment seg{name, rows, cols, values_.size()};
    segments_.push_back(seg);
    index_[name] = segments_.size() - 1;
    values_.resize(values_.size() + seg.size(), fill);
    grads_.resize(values_.size(), 0.0);
    return segments_.size() - 1;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Segment& segment(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail_domain("ParamStore: unknown segment '", name, "'");
    return segments_[it->second];
  }

  std::span<double> values(const std::string& name) {
    const auto& s = segment(name);
    return {values_.data() + s.offset, s.size()};
  }
  std::span<const double> values(const std::string& name) const {
    const auto& s = segment(name);
    return {values_.data() + s.offset, s.size()};
  }
  std::span<double> grads(const std::string& name) {
    const auto& s = segment(name);
    return {grads_.data() + s.offset, s.size()};
  }
  std::span<const double> grads(const std::string& name) const {
    const auto& s = segment(name);
    return {grads_.data() + s.offset, s.size()};
  }

  double scalar(const std::string& name) const { return values(name)[0]; }
  double& scalar(const std::string& name) { return values(name)[0]; }

  std::span<double> all_values() { return values_; }
  std::span<const double> all_values() const { return values_; }
  std::span<double> all_grads() { return grads_; }
  std::span<const double> all_grads() const { return grads_; }

  const std::vector<Segment>& segments() const { return segments_; }
  std::size_t size() const { return values_.size(); }

  void zero_grad() { std::fill(grads_.begin(), grads_.end(), 0.0); }

  // Same segment layout (names, shapes, order).
  bool same_layout(const ParamStore& other) const { return segments_ == other.segments_; }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    return a.segments_ == b.segments_ && a.values_ == b.values_;
  }

 private:
  std::vector<Segment> segments_;
  std::map<std::string, std::size_t> index_;
  std::vector<double> values_;
  std::vector<double> grads_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checker

struct FdEntry {
  std::size_t index = 0;  // flat index into the store
  std::string segment;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool flagged = false;
};

struct FdReport {
  std::vector<FdEntry> entries;
  double step = 0.0;
  double tol = 0.0;
  double max_rel_error = 0.0;
  std::size_t flagged = 0;
  std::size_t total_coordinates = 0;
  // Empty when every coordinate was checked; otherwise describes the sample.
  std::string sampling;
  bool passed() const { return flagged == 0; }
};

inline double fd_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

struct FdOptions {
  // 0 checks every coordinate; otherwise a seeded uniform sample of this size.
  std::size_t max_coordinates = 0;
  std::uint64_t sample_seed = 0;
};

// Compares the gradient already accumulated in `params` against central
// differences of `loss_fn`. `params` is restored before returning.
inline FdReport fd_check(const std::function<double(const ParamStore&)>& loss_fn, ParamStore& params,
                         double step, double tol, FdOptions options = {}) {
  if (!(step > 0.0)) fail_domain("fd_check: step must be positive");
  const double f0 = loss_fn(params);
  const double f0_again = loss_fn(params);
  if (f0 != f0_again) {
    fail_domain("fd_check: loss function is not deterministic (", f0, " vs ", f0_again, ")");
  }

  FdReport report;
  report.step = step;
  report.tol = tol;
  report.total_coordinates = params.size();

  std::vector<std::size_t> coords(params.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  if (options.max_coordinates != 0 && options.max_coordinates < coords.size()) {
    Rng rng(options.sample_seed);
    rng.shuffle(coords);
    coords.resize(options.max_coordinates);
    std::sort(coords.begin(), coords.end());
    report.sampling = detail::concat("uniform sample of ", options.max_coordinates, " of ", params.size(),
                                     " coordinates, seed ", options.sample_seed);
  }

  auto segment_of = [&](std::size_t flat) -> const std::string& {
    for (const auto& s : params.segments())
      if (flat >= s.offset && flat < s.offset + s.size()) return s.name;
    fail_domain("fd_check: index outside store");
  };

  auto values = params.all_values();
  for (std::size_t idx : coords) {
    const double saved = values[idx];
    values[idx] = saved + step;
    const double fp = loss_fn(params);
    values[idx] = saved - step;
    const double fm = loss_fn(params);
    values[idx] = saved;

    FdEntry e;
    e.index = idx;
    e.segment = segment_of(idx);
    e.analytic = params.all_grads()[idx];
    e.numeric = (fp - fm) / (2.0 * step);
    e.rel_error = fd_relative_error(e.analytic, e.numeric);
    e.flagged = e.rel_error > tol;
    report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
    report.flagged += e.flagged ? 1 : 0;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace tila
