#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "rml/error.hpp"
#include "rml/linalg.hpp"

namespace rml {

/// Two-component 1-D Gaussian mixture; component 0 is the lower-mean one.
struct GmmParams {
  double w0 = 0.5, w1 = 0.5;
  double mu0 = 0.0, mu1 = 1.0;
  double var0 = 1.0, var1 = 1.0;
};

struct GmmFit {
  GmmParams params;
  Vec log_likelihoods;  // one entry per EM iteration, after the M-step
  int iterations = 0;
  bool converged = false;
};

namespace detail {

inline double log_normal_pdf(double x, double mu, double var) {
  const double diff = x - mu;
  return -0.5 * (std::log(2.0 * 3.14159265358979323846 * var) +
                 diff * diff / var);
}

/// Type-7 quantile of already-sorted data.
inline double sorted_quantile(std::span<const double> sorted, double p) {
  const double h = p * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  const double frac = h - static_cast<double>(lo);
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace detail

inline constexpr double kGmmVarianceFloor = 1e-6;

/// EM fit from a deterministic start (means at the 10th/90th percentiles,
/// equal weights, shared sample variance). Stops when the log-likelihood
/// improves by less than 1e-6 or after 200 iterations.
inline GmmFit fit_gmm(std::span<const double> x) {
  const std::size_t n = x.size();
  {
    bool two_distinct = false;
    for (std::size_t i = 1; i < n; ++i)
      if (x[i] != x[0]) {
        two_distinct = true;
        break;
      }
    if (!two_distinct)
      throw config_error("fit_gmm: needs at least 2 distinct values");
  }

  Vec sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  GmmParams p;
  p.mu0 = detail::sorted_quantile(sorted, 0.10);
  p.mu1 = detail::sorted_quantile(sorted, 0.90);
  if (p.mu1 - p.mu0 < 1e-9) {
    p.mu0 = sorted.front();
    p.mu1 = sorted.back();
  }
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var = std::max(var / static_cast<double>(n), kGmmVarianceFloor);
  p.var0 = p.var1 = var;
  p.w0 = p.w1 = 0.5;

  GmmFit fit;
  Vec r0(n);
  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < 200; ++it) {
    // E-step in log space.
    for (std::size_t i = 0; i < n; ++i) {
      const double l0 = std::log(p.w0) + detail::log_normal_pdf(x[i], p.mu0, p.var0);
      const double l1 = std::log(p.w1) + detail::log_normal_pdf(x[i], p.mu1, p.var1);
      r0[i] = 1.0 / (1.0 + std::exp(l1 - l0));
    }
    // M-step.
    double n0 = 0.0, n1 = 0.0, s0 = 0.0, s1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      n0 += r0[i];
      n1 += 1.0 - r0[i];
      s0 += r0[i] * x[i];
      s1 += (1.0 - r0[i]) * x[i];
    }
    if (n0 > 1e-12) p.mu0 = s0 / n0;
    if (n1 > 1e-12) p.mu1 = s1 / n1;
    double v0 = 0.0, v1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      v0 += r0[i] * (x[i] - p.mu0) * (x[i] - p.mu0);
      v1 += (1.0 - r0[i]) * (x[i] - p.mu1) * (x[i] - p.mu1);
    }
    if (n0 > 1e-12) p.var0 = std::max(v0 / n0, kGmmVarianceFloor);
    if (n1 > 1e-12) p.var1 = std::max(v1 / n1, kGmmVarianceFloor);
    p.w0 = n0 / static_cast<double>(n);
    p.w1 = n1 / static_cast<double>(n);

    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double l0 = std::log(p.w0) + detail::log_normal_pdf(x[i], p.mu0, p.var0);
      const double l1 = std::log(p.w1) + detail::log_normal_pdf(x[i], p.mu1, p.var1);
      const double mx = std::max(l0, l1);
      ll += mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
    }
    fit.log_likelihoods.push_back(ll);
    fit.iterations = it + 1;
    if (ll - prev_ll < 1e-6 && it > 0) {
      fit.converged = true;
      break;
    }
    prev_ll = ll;
  }
  if (p.mu0 > p.mu1) {
    std::swap(p.mu0, p.mu1);
    std::swap(p.var0, p.var1);
    std::swap(p.w0, p.w1);
  }
  fit.params = p;
  return fit;
}

/// Posterior probability that a loss value belongs to the low-mean (clean)
/// component; evaluated in log space, never NaN.
inline double posterior_clean(const GmmParams& p, double x) {
  const double l0 = std::log(p.w0) + detail::log_normal_pdf(x, p.mu0, p.var0);
  const double l1 = std::log(p.w1) + detail::log_normal_pdf(x, p.mu1, p.var1);
  if (!std::isfinite(l0) && !std::isfinite(l1)) return 0.5;
  return 1.0 / (1.0 + std::exp(l1 - l0));
}

}  // namespace rml
