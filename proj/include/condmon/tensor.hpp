#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "condmon/rng.hpp"

namespace condmon {

using Vec = std::vector<double>;

// Dense row-major matrix of doubles. Everything in the model path is double
// precision so gradient checks can run at tight tolerances.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Vec d;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), d(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return d[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return d[r * cols + c]; }
  double* row(std::size_t r) { return d.data() + r * cols; }
  const double* row(std::size_t r) const { return d.data() + r * cols; }
  std::size_t size() const { return d.size(); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

  static Mat randn(std::size_t r, std::size_t c, double stddev, Rng& rng) {
    Mat m(r, c);
    for (auto& x : m.d) x = rng.normal(0.0, stddev);
    return m;
  }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
  }
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void check_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

// C = A * B
inline Mat mat_mul(const Mat& a, const Mat& b) {
  check_shape(a.cols == b.rows, "mat_mul: inner dimensions differ (" + std::to_string(a.cols) +
                                    " vs " + std::to_string(b.rows) + ")");
  Mat c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.row(i);
    double* ci = c.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

// C = A^T * B  (A: k x m, B: k x n -> C: m x n); the usual weight-gradient shape.
inline Mat mat_mul_at(const Mat& a, const Mat& b) {
  check_shape(a.rows == b.rows, "mat_mul_at: row counts differ");
  Mat c(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) {
    const double* ak = a.row(k);
    const double* bk = b.row(k);
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = ak[i];
      if (aki == 0.0) continue;
      double* ci = c.row(i);
      for (std::size_t j = 0; j < b.cols; ++j) ci[j] += aki * bk[j];
    }
  }
  return c;
}

// C = A * B^T  (A: m x k, B: n x k -> C: m x n); the input-gradient shape.
inline Mat mat_mul_bt(const Mat& a, const Mat& b) {
  check_shape(a.cols == b.cols, "mat_mul_bt: column counts differ");
  Mat c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.row(i);
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* bj = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) acc += ai[k] * bj[k];
      c.at(i, j) = acc;
    }
  }
  return c;
}

inline void add_inplace(Mat& a, const Mat& b) {
  check_shape(a.same_shape(b), "add_inplace: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a.d[i] += b.d[i];
}

inline void scale_inplace(Mat& a, double s) {
  for (auto& x : a.d) x *= s;
}

inline double dot(const Vec& a, const Vec& b) {
  assert(a.size() == b.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

inline bool all_finite(const Mat& m) {
  for (double x : m.d)
    if (!std::isfinite(x)) return false;
  return true;
}

inline bool all_finite(const Vec& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// Numerically stable log(sum(exp(x_i))) over a masked subset.
inline double logsumexp(const double* x, std::size_t n, const bool* mask = nullptr) {
  double mx = -HUGE_VAL;
  for (std::size_t i = 0; i < n; ++i)
    if (!mask || mask[i]) mx = std::max(mx, x[i]);
  if (mx == -HUGE_VAL) return -HUGE_VAL;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (!mask || mask[i]) acc += std::exp(x[i] - mx);
  return mx + std::log(acc);
}

}  // namespace condmon
