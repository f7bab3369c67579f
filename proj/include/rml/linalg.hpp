#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "rml/error.hpp"

namespace rml {

using Vec = std::vector<double>;

/// Norms are clamped below at this value before dividing.
inline constexpr double kNormEps = 1e-12;

/// Dense row-major matrix.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c, double fill = 0.0)
      : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, fill) {}

  double& operator()(int i, int j) {
    return a[static_cast<std::size_t>(i) * cols + j];
  }
  double operator()(int i, int j) const {
    return a[static_cast<std::size_t>(i) * cols + j];
  }
  std::span<double> row(int i) {
    return {a.data() + static_cast<std::size_t>(i) * cols,
            static_cast<std::size_t>(cols)};
  }
  std::span<const double> row(int i) const {
    return {a.data() + static_cast<std::size_t>(i) * cols,
            static_cast<std::size_t>(cols)};
  }
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> a) {
  return std::sqrt(dot(a, a));
}

inline Vec normalized(std::span<const double> a, double eps = kNormEps) {
  const double inv = 1.0 / std::max(l2_norm(a), eps);
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * inv;
  return out;
}

/// y += c * x
inline void add_scaled(Vec& y, std::span<const double> x, double c) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += c * x[i];
}

inline Vec matvec(const Mat& m, std::span<const double> x) {
  Vec out(static_cast<std::size_t>(m.rows), 0.0);
  for (int i = 0; i < m.rows; ++i) out[i] = dot(m.row(i), x);
  return out;
}

/// out = m^T x
inline Vec matvec_t(const Mat& m, std::span<const double> x) {
  Vec out(static_cast<std::size_t>(m.cols), 0.0);
  for (int i = 0; i < m.rows; ++i) {
    const auto r = m.row(i);
    for (int j = 0; j < m.cols; ++j) out[j] += r[j] * x[i];
  }
  return out;
}

/// m += u v^T
inline void add_outer(Mat& m, std::span<const double> u,
                      std::span<const double> v) {
  for (int i = 0; i < m.rows; ++i) {
    auto r = m.row(i);
    for (int j = 0; j < m.cols; ++j) r[j] += u[i] * v[j];
  }
}

/// Max-subtracted softmax.
inline void softmax_inplace(Vec& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double z = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    z += x;
  }
  for (double& x : v) x /= z;
}

/// Max-subtracted log(sum(exp(v))).
inline double logsumexp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double z = 0.0;
  for (double x : v) z += std::exp(x - mx);
  return mx + std::log(z);
}

inline double cosine(std::span<const double> a, std::span<const double> b,
                     double eps = kNormEps) {
  if (a.size() != b.size()) throw shape_error("cosine: size mismatch");
  return dot(a, b) / (std::max(l2_norm(a), eps) * std::max(l2_norm(b), eps));
}

/// Population standard deviation over all entries.
inline double population_std(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

}  // namespace rml
