#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "rml/dataset.hpp"
#include "rml/encoder.hpp"
#include "rml/error.hpp"
#include "rml/gmm.hpp"
#include "rml/loss.hpp"
#include "rml/rng.hpp"

namespace rml {

/// Per-pair losses for both embedding branches, raw and min-max normalized.
/// degenerate_* flags a constant raw vector (normalized falls back to 0.5).
struct PerSampleLosses {
  Vec raw_bge, raw_tse;
  Vec norm_bge, norm_tse;
  bool degenerate_bge = false;
  bool degenerate_tse = false;
};

inline Vec min_max_normalize(std::span<const double> v, bool* degenerate) {
  double lo = v[0], hi = v[0];
  for (double x : v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  Vec out(v.size());
  if (hi == lo) {
    std::fill(out.begin(), out.end(), 0.5);
    if (degenerate) *degenerate = true;
    return out;
  }
  if (degenerate) *degenerate = false;
  const double inv = 1.0 / (hi - lo);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - lo) * inv;
  return out;
}

/// One no-gradient pass over the dataset in seeded shuffled batches. The
/// per-pair loss is the tal value under the original labels: the diagonal
/// counts every pair as its own positive (no recalibration applied) and
/// off-diagonal entries are positive for recorded-identity matches.
inline PerSampleLosses per_sample_losses(const EncoderParams& params,
                                         SelectRatio ratio,
                                         const PairDataset& data,
                                         const LossConfig& loss_cfg,
                                         int batch_size, std::uint64_t seed) {
  if (data.empty()) throw config_error("per_sample_losses: empty dataset");
  if (batch_size < 1) throw config_error("per_sample_losses: bad batch size");
  const std::size_t n = data.size();
  PerSampleLosses out;
  out.raw_bge.assign(n, 0.0);
  out.raw_tse.assign(n, 0.0);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  SplitMix64 rng(seed);
  rng.shuffle(order);

  for (std::size_t start = 0; start < n; start += batch_size) {
    const int k = static_cast<int>(std::min<std::size_t>(batch_size, n - start));
    std::vector<Encoding> img(k), txt(k);
    for (int b = 0; b < k; ++b) {
      const PairItem& it = data.items[order[start + b]];
      img[b] = encode_full(params.image, params.cfg, it.image_raw, ratio);
      txt[b] = encode_full(params.text, params.cfg, it.text_raw, ratio);
    }
    Mat sb(k, k), st(k, k);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) {
        sb(i, j) = dot(img[i].bge, txt[j].bge);
        st(i, j) = dot(img[i].tse, txt[j].tse);
      }
    BatchLabels labels(k);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j)
        labels.set(i, j, data.items[order[start + i]].identity ==
                             data.items[order[start + j]].identity);
    const LossValue lb = tal_loss(sb, labels, loss_cfg);
    const LossValue lt = tal_loss(st, labels, loss_cfg);
    for (int b = 0; b < k; ++b) {
      out.raw_bge[order[start + b]] = lb.per_pair[b];
      out.raw_tse[order[start + b]] = lt.per_pair[b];
    }
  }
  out.norm_bge = min_max_normalize(out.raw_bge, &out.degenerate_bge);
  out.norm_tse = min_max_normalize(out.raw_tse, &out.degenerate_tse);
  return out;
}

/// One branch's clean/noisy split.
struct BranchDivision {
  std::vector<std::uint8_t> is_clean;

  std::vector<int> clean_indices() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(is_clean.size()); ++i)
      if (is_clean[i]) out.push_back(i);
    return out;
  }
  std::vector<int> noisy_indices() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(is_clean.size()); ++i)
      if (!is_clean[i]) out.push_back(i);
    return out;
  }
};

/// clean iff posterior > delta (boundary goes to noisy).
inline BranchDivision divide(std::span<const double> posteriors,
                             double delta = 0.5) {
  BranchDivision d;
  d.is_clean.resize(posteriors.size());
  for (std::size_t i = 0; i < posteriors.size(); ++i)
    d.is_clean[i] = posteriors[i] > delta ? 1 : 0;
  return d;
}

struct DivisionResult {
  std::vector<int> clean, noisy, uncertain;
  Vec post_bge, post_tse;
  std::vector<std::uint8_t> recalibrated;
};

/// Intersects the two branch divisions: confidently clean/noisy where they
/// agree, uncertain otherwise. Uncertain labels are drawn Bernoulli(0.5)
/// from the supplied generator, in ascending index order.
inline DivisionResult consensus(const BranchDivision& bge,
                                const BranchDivision& tse, const Vec& post_bge,
                                const Vec& post_tse, SplitMix64& rng) {
  const std::size_t n = bge.is_clean.size();
  if (tse.is_clean.size() != n || post_bge.size() != n || post_tse.size() != n)
    throw contract_error("consensus: divisions cover different index sets");
  DivisionResult r;
  r.post_bge = post_bge;
  r.post_tse = post_tse;
  r.recalibrated.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int idx = static_cast<int>(i);
    if (bge.is_clean[i] && tse.is_clean[i]) {
      r.clean.push_back(idx);
      r.recalibrated[i] = 1;
    } else if (!bge.is_clean[i] && !tse.is_clean[i]) {
      r.noisy.push_back(idx);
      r.recalibrated[i] = 0;
    } else {
      r.uncertain.push_back(idx);
      r.recalibrated[i] = rng.next_bernoulli(0.5) ? 1 : 0;
    }
  }
  return r;
}

/// Full division step: per-sample losses, per-branch GMM fits, posterior
/// thresholding, consensus. usable is false when either branch's loss vector
/// is constant (callers should then treat every pair as clean).
struct CcdOutcome {
  PerSampleLosses losses;
  GmmFit fit_bge, fit_tse;
  DivisionResult division;
  bool usable = false;
};

inline CcdOutcome run_ccd(const EncoderParams& params, SelectRatio ratio,
                          const PairDataset& data, const LossConfig& loss_cfg,
                          int batch_size, std::uint64_t loss_seed,
                          std::uint64_t rand_seed, double delta = 0.5) {
  CcdOutcome out;
  out.losses = per_sample_losses(params, ratio, data, loss_cfg, batch_size,
                                 loss_seed);
  if (out.losses.degenerate_bge || out.losses.degenerate_tse) return out;
  out.fit_bge = fit_gmm(out.losses.norm_bge);
  out.fit_tse = fit_gmm(out.losses.norm_tse);
  const std::size_t n = data.size();
  Vec pb(n), pt(n);
  for (std::size_t i = 0; i < n; ++i) {
    pb[i] = posterior_clean(out.fit_bge.params, out.losses.norm_bge[i]);
    pt[i] = posterior_clean(out.fit_tse.params, out.losses.norm_tse[i]);
  }
  SplitMix64 rng(rand_seed);
  out.division = consensus(divide(pb, delta), divide(pt, delta), pb, pt, rng);
  out.usable = true;
  return out;
}

}  // namespace rml
