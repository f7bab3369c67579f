#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rml/error.hpp"
#include "rml/linalg.hpp"

namespace rml {

struct LossConfig {
  double margin = 0.1;
  double temperature = 0.015;

  void validate() const {
    if (margin < 0.0) throw config_error("margin must be >= 0");
    if (!(temperature > 0.0)) throw config_error("temperature must be > 0");
  }
};

enum class LossVariant { tal, trl, trls };

inline const char* to_string(LossVariant v) {
  switch (v) {
    case LossVariant::tal: return "tal";
    case LossVariant::trl: return "trl";
    case LossVariant::trls: return "trls";
  }
  return "?";
}

inline LossVariant loss_variant_from_string(const std::string& s) {
  if (s == "tal") return LossVariant::tal;
  if (s == "trl") return LossVariant::trl;
  if (s == "trls") return LossVariant::trls;
  throw config_error("unknown loss variant: " + s);
}

/// K x K binary label matrix; entry (i, j) = 1 means image i and text j
/// count as a positive pair.
struct BatchLabels {
  int k = 0;
  std::vector<std::uint8_t> m;

  BatchLabels() = default;
  explicit BatchLabels(int n) : k(n), m(static_cast<std::size_t>(n) * n, 0) {}
  std::uint8_t at(int i, int j) const {
    return m[static_cast<std::size_t>(i) * k + j];
  }
  void set(int i, int j, std::uint8_t v) {
    m[static_cast<std::size_t>(i) * k + j] = v;
  }
  static BatchLabels diagonal(int n) {
    BatchLabels l(n);
    for (int i = 0; i < n; ++i) l.set(i, i, 1);
    return l;
  }
};

struct LossValue {
  double total = 0.0;
  Vec per_pair;  // per_pair[i] = i2t[i] + t2i[i]
  Vec i2t;
  Vec t2i;
};

/// Softmax-weighted average similarity over the positives of one anchor,
/// computed with max subtraction. Throws if the anchor has no positive.
inline double weighted_positive(std::span<const double> sims,
                                std::span<const std::uint8_t> positives,
                                double tau) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < sims.size(); ++j)
    if (positives[j] && sims[j] > mx) mx = sims[j];
  if (mx == -std::numeric_limits<double>::infinity())
    throw contract_error("weighted_positive: anchor has no positive pair");
  double z = 0.0, acc = 0.0;
  for (std::size_t j = 0; j < sims.size(); ++j) {
    if (!positives[j]) continue;
    const double w = std::exp((sims[j] - mx) / tau);
    z += w;
    acc += w * sims[j];
  }
  return acc / z;
}

namespace detail {

/// One anchor direction, strided over a row or column of S.
struct AnchorView {
  const double* sims;
  const std::uint8_t* labels;
  std::size_t stride;
  int k;

  double sim(int j) const { return sims[static_cast<std::size_t>(j) * stride]; }
  std::uint8_t label(int j) const {
    return labels[static_cast<std::size_t>(j) * stride];
  }
};

inline AnchorView row_view(const Mat& s, const BatchLabels& l, int i) {
  return {s.a.data() + static_cast<std::size_t>(i) * s.cols,
          l.m.data() + static_cast<std::size_t>(i) * l.k, 1, s.cols};
}

inline AnchorView col_view(const Mat& s, const BatchLabels& l, int i) {
  return {s.a.data() + i, l.m.data() + i, static_cast<std::size_t>(s.cols),
          s.rows};
}

inline double anchor_positive(const AnchorView& a, double tau) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < a.k; ++j)
    if (a.label(j) && a.sim(j) > mx) mx = a.sim(j);
  if (mx == -std::numeric_limits<double>::infinity())
    throw contract_error("loss: anchor has no positive pair");
  double z = 0.0, acc = 0.0;
  for (int j = 0; j < a.k; ++j) {
    if (!a.label(j)) continue;
    const double w = std::exp((a.sim(j) - mx) / tau);
    z += w;
    acc += w * a.sim(j);
  }
  return acc / z;
}

/// log-sum-exp of sims/tau over negatives, scaled back by tau.
/// Returns false when the anchor has no negative.
inline bool anchor_negative_lse(const AnchorView& a, double tau, double* out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < a.k; ++j)
    if (!a.label(j) && a.sim(j) > mx) mx = a.sim(j);
  if (mx == -std::numeric_limits<double>::infinity()) return false;
  double z = 0.0;
  for (int j = 0; j < a.k; ++j)
    if (!a.label(j)) z += std::exp((a.sim(j) - mx) / tau);
  *out = mx + tau * std::log(z);
  return true;
}

inline bool anchor_negative_max(const AnchorView& a, double* out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < a.k; ++j)
    if (!a.label(j) && a.sim(j) > mx) mx = a.sim(j);
  if (mx == -std::numeric_limits<double>::infinity()) return false;
  *out = mx;
  return true;
}

inline double hinge(double x) { return x > 0.0 ? x : 0.0; }

/// Per-direction loss term for one anchor. A direction with no negatives
/// contributes zero.
inline double direction_term(LossVariant v, const AnchorView& a,
                             const LossConfig& cfg) {
  const double pos = anchor_positive(a, cfg.temperature);
  switch (v) {
    case LossVariant::tal: {
      double lse;
      if (!anchor_negative_lse(a, cfg.temperature, &lse)) return 0.0;
      return hinge(cfg.margin - pos + lse);
    }
    case LossVariant::trl: {
      double mx;
      if (!anchor_negative_max(a, &mx)) return 0.0;
      return hinge(cfg.margin - pos + mx);
    }
    case LossVariant::trls: {
      double acc = 0.0;
      for (int j = 0; j < a.k; ++j)
        if (!a.label(j)) acc += hinge(cfg.margin - pos + a.sim(j));
      return acc;
    }
  }
  return 0.0;
}

inline void check_finite(const Mat& s) {
  for (double x : s.a)
    if (!std::isfinite(x)) throw numeric_error("loss: non-finite similarity");
}

}  // namespace detail

/// Batch loss. anchor_weights (optional) multiplies pair i's contribution;
/// pairs with weight zero are skipped entirely, so their anchors need no
/// positive entry.
inline LossValue batch_loss(LossVariant v, const Mat& s, const BatchLabels& l,
                            const LossConfig& cfg,
                            std::span<const double> anchor_weights = {}) {
  cfg.validate();
  if (s.rows != s.cols || s.rows != l.k)
    throw shape_error("batch_loss: similarity/label shape mismatch");
  detail::check_finite(s);
  const int k = s.rows;
  LossValue out;
  out.per_pair.assign(k, 0.0);
  out.i2t.assign(k, 0.0);
  out.t2i.assign(k, 0.0);
  for (int i = 0; i < k; ++i) {
    const double w = anchor_weights.empty() ? 1.0 : anchor_weights[i];
    if (w == 0.0) continue;
    out.i2t[i] = detail::direction_term(v, detail::row_view(s, l, i), cfg);
    out.t2i[i] = detail::direction_term(v, detail::col_view(s, l, i), cfg);
    out.per_pair[i] = w * (out.i2t[i] + out.t2i[i]);
    out.total += out.per_pair[i];
  }
  return out;
}

inline LossValue tal_loss(const Mat& s, const BatchLabels& l,
                          const LossConfig& cfg,
                          std::span<const double> w = {}) {
  return batch_loss(LossVariant::tal, s, l, cfg, w);
}
inline LossValue trl_loss(const Mat& s, const BatchLabels& l,
                          const LossConfig& cfg,
                          std::span<const double> w = {}) {
  return batch_loss(LossVariant::trl, s, l, cfg, w);
}
inline LossValue trls_loss(const Mat& s, const BatchLabels& l,
                           const LossConfig& cfg,
                           std::span<const double> w = {}) {
  return batch_loss(LossVariant::trls, s, l, cfg, w);
}

// ---------------------------------------------------------------------------
// Gradients w.r.t. the similarity matrix (general setting, chain rule on the
// batch loss above). Feeding these through S_ij = v_i . t_j gives the
// embedding gradients.
// ---------------------------------------------------------------------------

namespace detail {

/// Adds d(direction term)/dS entries for one active anchor direction.
template <typename Accum>
void direction_grad(LossVariant v, const AnchorView& a, const LossConfig& cfg,
                    double w, Accum&& add) {
  const double tau = cfg.temperature;
  const double mx_pos = [&] {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < a.k; ++j)
      if (a.label(j) && a.sim(j) > mx) mx = a.sim(j);
    return mx;
  }();
  if (mx_pos == -std::numeric_limits<double>::infinity())
    throw contract_error("loss: anchor has no positive pair");
  double zp = 0.0, acc = 0.0;
  for (int j = 0; j < a.k; ++j) {
    if (!a.label(j)) continue;
    const double e = std::exp((a.sim(j) - mx_pos) / tau);
    zp += e;
    acc += e * a.sim(j);
  }
  const double pos = acc / zp;

  // Negative-side bookkeeping.
  double mx_neg = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < a.k; ++j)
    if (!a.label(j) && a.sim(j) > mx_neg) mx_neg = a.sim(j);
  if (mx_neg == -std::numeric_limits<double>::infinity()) return;

  double active_scale = 0.0;  // multiplier on the d(pos)/dS part
  switch (v) {
    case LossVariant::tal: {
      double zn = 0.0;
      for (int j = 0; j < a.k; ++j)
        if (!a.label(j)) zn += std::exp((a.sim(j) - mx_neg) / tau);
      const double lse = mx_neg + tau * std::log(zn);
      if (cfg.margin - pos + lse <= 0.0) return;
      active_scale = 1.0;
      for (int j = 0; j < a.k; ++j)
        if (!a.label(j))
          add(j, w * std::exp((a.sim(j) - mx_neg) / tau) / zn);
      break;
    }
    case LossVariant::trl: {
      if (cfg.margin - pos + mx_neg <= 0.0) return;
      active_scale = 1.0;
      for (int j = 0; j < a.k; ++j)
        if (!a.label(j) && a.sim(j) == mx_neg) {
          add(j, w);  // ties resolved to the lowest index
          break;
        }
      break;
    }
    case LossVariant::trls: {
      int active = 0;
      for (int j = 0; j < a.k; ++j)
        if (!a.label(j) && cfg.margin - pos + a.sim(j) > 0.0) {
          add(j, w);
          ++active;
        }
      if (active == 0) return;
      active_scale = static_cast<double>(active);
      break;
    }
  }

  // d(weighted positive)/dS_j = alpha_j (1 + (S_j - pos)/tau).
  for (int j = 0; j < a.k; ++j) {
    if (!a.label(j)) continue;
    const double alpha = std::exp((a.sim(j) - mx_pos) / tau) / zp;
    add(j, -w * active_scale * alpha * (1.0 + (a.sim(j) - pos) / tau));
  }
}

}  // namespace detail

/// dL/dS for the batch loss, honoring anchor weights.
inline Mat loss_similarity_grad(LossVariant v, const Mat& s,
                                const BatchLabels& l, const LossConfig& cfg,
                                std::span<const double> anchor_weights = {}) {
  cfg.validate();
  if (s.rows != s.cols || s.rows != l.k)
    throw shape_error("loss_similarity_grad: shape mismatch");
  detail::check_finite(s);
  const int k = s.rows;
  Mat g(k, k);
  for (int i = 0; i < k; ++i) {
    const double w = anchor_weights.empty() ? 1.0 : anchor_weights[i];
    if (w == 0.0) continue;
    detail::direction_grad(v, detail::row_view(s, l, i), cfg, w,
                           [&](int j, double val) { g(i, j) += val; });
    detail::direction_grad(v, detail::col_view(s, l, i), cfg, w,
                           [&](int j, double val) { g(j, i) += val; });
  }
  return g;
}

/// Gradients w.r.t. unit embeddings when S_ij = v_i . t_j.
struct EmbedGrads {
  std::vector<Vec> d_images;
  std::vector<Vec> d_texts;
};

inline Mat similarity_matrix(std::span<const Vec> images,
                             std::span<const Vec> texts) {
  Mat s(static_cast<int>(images.size()), static_cast<int>(texts.size()));
  for (int i = 0; i < s.rows; ++i)
    for (int j = 0; j < s.cols; ++j) s(i, j) = dot(images[i], texts[j]);
  return s;
}

inline EmbedGrads loss_embedding_grad(LossVariant v,
                                      std::span<const Vec> images,
                                      std::span<const Vec> texts,
                                      const BatchLabels& l,
                                      const LossConfig& cfg,
                                      std::span<const double> weights = {}) {
  const Mat s = similarity_matrix(images, texts);
  const Mat g = loss_similarity_grad(v, s, l, cfg, weights);
  const std::size_t d = images.empty() ? 0 : images[0].size();
  EmbedGrads out;
  out.d_images.assign(images.size(), Vec(d, 0.0));
  out.d_texts.assign(texts.size(), Vec(d, 0.0));
  for (int i = 0; i < g.rows; ++i)
    for (int j = 0; j < g.cols; ++j) {
      const double c = g(i, j);
      if (c == 0.0) continue;
      add_scaled(out.d_images[i], texts[j], c);
      add_scaled(out.d_texts[j], images[i], c);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Single-anchor, image-to-text direction with one positive: the simplified
// setting whose closed-form gradients the trainer's losses reduce to. Used
// directly by the gradient test-suites.
// ---------------------------------------------------------------------------

struct AnchorGrads {
  Vec d_anchor;
  std::vector<Vec> d_texts;  // aligned with the texts argument
  Vec betas;                 // tal only; softmax over negatives
};

inline double tal_anchor_loss(const Vec& v, std::span<const Vec> texts,
                              int pos, const LossConfig& cfg) {
  Vec negs;
  for (int j = 0; j < static_cast<int>(texts.size()); ++j)
    if (j != pos) negs.push_back(dot(v, texts[j]) / cfg.temperature);
  if (negs.empty()) return 0.0;
  const double lse = cfg.temperature * logsumexp(negs);
  return detail::hinge(cfg.margin - dot(v, texts[pos]) + lse);
}

inline double trl_anchor_loss(const Vec& v, std::span<const Vec> texts,
                              int pos, const LossConfig& cfg) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < static_cast<int>(texts.size()); ++j)
    if (j != pos) mx = std::max(mx, dot(v, texts[j]));
  if (mx == -std::numeric_limits<double>::infinity()) return 0.0;
  return detail::hinge(cfg.margin - dot(v, texts[pos]) + mx);
}

inline double trls_anchor_loss(const Vec& v, std::span<const Vec> texts,
                               int pos, const LossConfig& cfg) {
  double acc = 0.0;
  const double sp = dot(v, texts[pos]);
  for (int j = 0; j < static_cast<int>(texts.size()); ++j)
    if (j != pos) acc += detail::hinge(cfg.margin - sp + dot(v, texts[j]));
  return acc;
}

/// Zero gradients when the hinge is inactive.
inline AnchorGrads tal_anchor_grad(const Vec& v, std::span<const Vec> texts,
                                   int pos, const LossConfig& cfg) {
  const int n = static_cast<int>(texts.size());
  AnchorGrads g;
  g.d_anchor.assign(v.size(), 0.0);
  g.d_texts.assign(n, Vec(v.size(), 0.0));
  g.betas.assign(n, 0.0);
  Vec scaled;
  std::vector<int> neg_idx;
  for (int j = 0; j < n; ++j)
    if (j != pos) {
      scaled.push_back(dot(v, texts[j]) / cfg.temperature);
      neg_idx.push_back(j);
    }
  if (neg_idx.empty()) return g;
  const double mx = *std::max_element(scaled.begin(), scaled.end());
  double z = 0.0;
  for (double x : scaled) z += std::exp(x - mx);
  // betas stay the plain negative softmax even when the hinge is inactive;
  // only the gradient vectors vanish then
  for (std::size_t t = 0; t < neg_idx.size(); ++t)
    g.betas[neg_idx[t]] = std::exp(scaled[t] - mx) / z;
  if (tal_anchor_loss(v, texts, pos, cfg) <= 0.0) return g;
  for (int j : neg_idx) {
    const double b = g.betas[j];
    for (std::size_t k = 0; k < v.size(); ++k) {
      g.d_anchor[k] += b * (texts[j][k] - texts[pos][k]);
      g.d_texts[j][k] = b * v[k];
    }
  }
  for (std::size_t k = 0; k < v.size(); ++k) g.d_texts[pos][k] = -v[k];
  return g;
}

inline AnchorGrads trl_anchor_grad(const Vec& v, std::span<const Vec> texts,
                                   int pos, const LossConfig& cfg) {
  const int n = static_cast<int>(texts.size());
  AnchorGrads g;
  g.d_anchor.assign(v.size(), 0.0);
  g.d_texts.assign(n, Vec(v.size(), 0.0));
  if (trl_anchor_loss(v, texts, pos, cfg) <= 0.0) return g;
  int hardest = -1;
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < n; ++j) {
    if (j == pos) continue;
    const double s = dot(v, texts[j]);
    if (s > mx) {
      mx = s;
      hardest = j;
    }
  }
  for (std::size_t k = 0; k < v.size(); ++k) {
    g.d_anchor[k] = texts[hardest][k] - texts[pos][k];
    g.d_texts[pos][k] = -v[k];
    g.d_texts[hardest][k] = v[k];
  }
  return g;
}

inline AnchorGrads trls_anchor_grad(const Vec& v, std::span<const Vec> texts,
                                    int pos, const LossConfig& cfg) {
  const int n = static_cast<int>(texts.size());
  AnchorGrads g;
  g.d_anchor.assign(v.size(), 0.0);
  g.d_texts.assign(n, Vec(v.size(), 0.0));
  const double sp = dot(v, texts[pos]);
  int active = 0;
  for (int j = 0; j < n; ++j) {
    if (j == pos) continue;
    if (cfg.margin - sp + dot(v, texts[j]) <= 0.0) continue;
    ++active;
    for (std::size_t k = 0; k < v.size(); ++k) {
      g.d_anchor[k] += texts[j][k] - texts[pos][k];
      g.d_texts[j][k] = v[k];
    }
  }
  for (std::size_t k = 0; k < v.size(); ++k)
    g.d_texts[pos][k] = -static_cast<double>(active) * v[k];
  return g;
}

}  // namespace rml
