#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rml/dataset.hpp"
#include "rml/division.hpp"
#include "rml/encoder.hpp"
#include "rml/error.hpp"
#include "rml/eval.hpp"
#include "rml/loss.hpp"
#include "rml/rng.hpp"

namespace rml {

enum class LrSchedule { constant, cosine_warmup };

enum class Reduction { sum, mean };

struct TrainConfig {
  int epochs = 30;
  int batch_size = 64;
  double learning_rate = 2e-3;
  LrSchedule schedule = LrSchedule::cosine_warmup;
  int lr_warmup_epochs = 1;
  /// Division warmup: epochs during which every pair is treated as clean.
  int warmup_epochs = 1;
  bool use_ccd = true;
  LossConfig loss;
  LossVariant variant = LossVariant::tal;
  SelectRatio select_ratio{0.3};
  double delta = 0.5;
  std::uint64_t seed = 1;
  EncoderConfig encoder;
  Reduction reduction = Reduction::sum;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate(int data_raw_dim) const {
    if (epochs < 1) throw config_error("epochs must be >= 1");
    if (batch_size < 2) throw config_error("batch_size must be >= 2");
    if (!(learning_rate > 0.0)) throw config_error("learning_rate must be > 0");
    if (warmup_epochs < 0) throw config_error("warmup_epochs must be >= 0");
    if (lr_warmup_epochs < 0)
      throw config_error("lr_warmup_epochs must be >= 0");
    encoder.validate();
    loss.validate();
    select_ratio.validate(encoder.n_tokens);
    if (encoder.raw_dim != data_raw_dim)
      throw shape_error("encoder raw_dim does not match dataset dimension");
  }
};

/// l_ij = 1 iff identities match and neither pair is flagged noisy; the
/// diagonal therefore carries the recalibrated label itself, and a noisy
/// pair's whole row and column become negatives.
inline BatchLabels batch_labels(std::span<const int> identities,
                                std::span<const std::uint8_t> recalibrated) {
  const int k = static_cast<int>(identities.size());
  if (static_cast<int>(recalibrated.size()) != k)
    throw shape_error("batch_labels: size mismatch");
  BatchLabels l(k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j)
      l.set(i, j,
            identities[i] == identities[j] && recalibrated[i] &&
                    recalibrated[j]
                ? 1
                : 0);
  return l;
}

struct AdamState {
  Vec m, v;
  std::int64_t t = 0;
};

namespace detail {

inline double scheduled_lr(const TrainConfig& cfg, std::int64_t step,
                           std::int64_t warmup_steps,
                           std::int64_t total_steps) {
  if (cfg.schedule == LrSchedule::constant) return cfg.learning_rate;
  if (warmup_steps > 0 && step < warmup_steps)
    return cfg.learning_rate * static_cast<double>(step + 1) /
           static_cast<double>(warmup_steps);
  const double span =
      static_cast<double>(std::max<std::int64_t>(total_steps - warmup_steps, 1));
  const double progress = static_cast<double>(step - warmup_steps) / span;
  return cfg.learning_rate * 0.5 *
         (1.0 + std::cos(3.14159265358979323846 * std::min(progress, 1.0)));
}

inline void adam_step(Vec& params, std::span<const double> grad,
                      AdamState& st, const TrainConfig& cfg, double lr) {
  if (st.m.empty()) {
    st.m.assign(params.size(), 0.0);
    st.v.assign(params.size(), 0.0);
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, double(st.t));
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, double(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = cfg.adam_beta1 * st.m[i] + (1.0 - cfg.adam_beta1) * grad[i];
    st.v[i] = cfg.adam_beta2 * st.v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
    params[i] -= lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + cfg.adam_eps);
  }
}

}  // namespace detail

/// Audit trail of one pair in one epoch's division.
struct AuditRow {
  int epoch = 0;
  std::int64_t pair_id = 0;
  double loss_bge = 0.0, loss_tse = 0.0;
  double post_bge = 0.0, post_tse = 0.0;
  char set_label = 'C';  // C / N / U
  int recalibrated = 1;
  int true_clean_flag = 1;
};

struct EpochStats {
  double mean_loss = 0.0;  // per active anchor
  double division_precision = 1.0;
  double division_recall = 1.0;
  bool has_val = false;
  RetrievalResult val;
};

struct TrainState {
  EncoderParams params;
  AdamState opt;
  int completed_epochs = 0;
  std::vector<EpochStats> history;
  std::vector<AuditRow> audit;
  EncoderParams best_params;
  int best_epoch = 0;
  double best_val_rank1 = -1.0;
};

/// One gradient step on one mini-batch. Returns the batch loss total and the
/// number of active anchors; performs no update when every anchor weight is
/// zero. Exposed separately so the epoch loop stays testable.
inline std::pair<double, int> train_batch_update(
    EncoderParams& params, AdamState& opt, const TrainConfig& cfg,
    std::span<const PairItem* const> batch,
    std::span<const std::uint8_t> recalibrated, double lr, int epoch,
    int batch_index) {
  const int k = static_cast<int>(batch.size());
  std::vector<Encoding> img(k), txt(k);
  for (int b = 0; b < k; ++b) {
    img[b] = encode_full(params.image, params.cfg, batch[b]->image_raw,
                         cfg.select_ratio);
    txt[b] = encode_full(params.text, params.cfg, batch[b]->text_raw,
                         cfg.select_ratio);
  }
  Mat sb(k, k), st(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      sb(i, j) = dot(img[i].bge, txt[j].bge);
      st(i, j) = dot(img[i].tse, txt[j].tse);
    }
  std::vector<int> ids(k);
  for (int b = 0; b < k; ++b) ids[b] = batch[b]->identity;
  const BatchLabels labels = batch_labels(ids, recalibrated);
  Vec weights(k);
  int active = 0;
  for (int b = 0; b < k; ++b) {
    weights[b] = recalibrated[b] ? 1.0 : 0.0;
    active += recalibrated[b];
  }

  const LossValue lb = batch_loss(cfg.variant, sb, labels, cfg.loss, weights);
  const LossValue lt = batch_loss(cfg.variant, st, labels, cfg.loss, weights);
  const double total = lb.total + lt.total;
  if (!std::isfinite(total)) {
    std::string ids_str;
    for (int b = 0; b < std::min(k, 8); ++b)
      ids_str += (b ? "," : "") + std::to_string(batch[b]->pair_id);
    throw numeric_error("non-finite loss at epoch " + std::to_string(epoch) +
                        ", batch " + std::to_string(batch_index) +
                        ", pair ids [" + ids_str + "]");
  }
  if (active == 0 || total == 0.0) return {total, active};

  const double scale =
      cfg.reduction == Reduction::mean ? 1.0 / static_cast<double>(active) : 1.0;
  Mat gb = loss_similarity_grad(cfg.variant, sb, labels, cfg.loss, weights);
  Mat gt = loss_similarity_grad(cfg.variant, st, labels, cfg.loss, weights);

  EncoderParams grads = zero_like(params);
  Vec d_bge(params.cfg.embed_dim), d_tse(params.cfg.embed_dim);
  const Vec zero(params.cfg.embed_dim, 0.0);
  for (int i = 0; i < k; ++i) {
    std::fill(d_bge.begin(), d_bge.end(), 0.0);
    std::fill(d_tse.begin(), d_tse.end(), 0.0);
    for (int j = 0; j < k; ++j) {
      add_scaled(d_bge, txt[j].bge, scale * gb(i, j));
      add_scaled(d_tse, txt[j].tse, scale * gt(i, j));
    }
    encode_backward(params.image, params.cfg, batch[i]->image_raw, img[i],
                    d_bge, d_tse, grads.image);
  }
  for (int j = 0; j < k; ++j) {
    std::fill(d_bge.begin(), d_bge.end(), 0.0);
    std::fill(d_tse.begin(), d_tse.end(), 0.0);
    for (int i = 0; i < k; ++i) {
      add_scaled(d_bge, img[i].bge, scale * gb(i, j));
      add_scaled(d_tse, img[i].tse, scale * gt(i, j));
    }
    encode_backward(params.text, params.cfg, batch[j]->text_raw, txt[j],
                    d_bge, d_tse, grads.text);
  }

  Vec flat = pack_params(params);
  const Vec gflat = pack_params(grads);
  detail::adam_step(flat, gflat, opt, cfg, lr);
  unpack_params(flat, params);
  return {total, active};
}

/// Epoch loop: divide (or treat all pairs clean during warmup), shuffle into
/// batches, optimize the recalibrated matching loss over both branches.
/// Deterministic for a fixed config and dataset.
inline TrainState train(const PairDataset& data, const PairDataset* val_data,
                        const TrainConfig& cfg) {
  if (data.empty()) throw config_error("train: empty dataset");
  cfg.validate(data.raw_dim);
  const std::size_t n = data.size();

  TrainState st;
  st.params = init_params(cfg.encoder, derive_seed(cfg.seed, 0xD0));
  const std::int64_t steps_per_epoch =
      static_cast<std::int64_t>((n + cfg.batch_size - 1) / cfg.batch_size);
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  const std::int64_t lr_warmup_steps = steps_per_epoch * cfg.lr_warmup_epochs;
  std::int64_t step = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Division (always computed for the audit trail; applied when past
    // warmup, CCD is enabled, and the loss vectors carry information).
    CcdOutcome ccd =
        run_ccd(st.params, cfg.select_ratio, data, cfg.loss, cfg.batch_size,
                derive_seed(cfg.seed, 0xA000 + epoch),
                derive_seed(cfg.seed, 0xB000 + epoch), cfg.delta);
    const bool apply_division =
        cfg.use_ccd && epoch > cfg.warmup_epochs && ccd.usable;
    std::vector<std::uint8_t> recal(n, 1);
    if (apply_division) recal = ccd.division.recalibrated;

    for (std::size_t i = 0; i < n; ++i) {
      AuditRow row;
      row.epoch = epoch;
      row.pair_id = data.items[i].pair_id;
      row.loss_bge = ccd.losses.norm_bge[i];
      row.loss_tse = ccd.losses.norm_tse[i];
      row.post_bge = ccd.usable ? ccd.division.post_bge[i] : 0.5;
      row.post_tse = ccd.usable ? ccd.division.post_tse[i] : 0.5;
      if (ccd.usable) {
        const int idx = static_cast<int>(i);
        row.set_label = std::binary_search(ccd.division.clean.begin(),
                                           ccd.division.clean.end(), idx)
                            ? 'C'
                            : (std::binary_search(ccd.division.noisy.begin(),
                                                  ccd.division.noisy.end(), idx)
                                   ? 'N'
                                   : 'U');
      } else {
        row.set_label = 'C';
      }
      row.recalibrated = recal[i];
      row.true_clean_flag = data.items[i].true_clean_flag;
      st.audit.push_back(row);
    }

    EpochStats es;
    {
      // Precision/recall of the confident clean set against hidden flags;
      // the all-clean fallback scores the full dataset.
      std::vector<int> predicted;
      if (apply_division) {
        predicted = ccd.division.clean;
      } else {
        predicted.resize(n);
        for (std::size_t i = 0; i < n; ++i) predicted[i] = static_cast<int>(i);
      }
      int tp = 0, truly_clean = 0;
      for (std::size_t i = 0; i < n; ++i)
        truly_clean += data.items[i].true_clean_flag == 1;
      for (int i : predicted) tp += data.items[i].true_clean_flag == 1;
      es.division_precision =
          predicted.empty() ? 0.0 : static_cast<double>(tp) / predicted.size();
      es.division_recall =
          truly_clean == 0 ? 1.0 : static_cast<double>(tp) / truly_clean;
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    SplitMix64 shuffle_rng(derive_seed(cfg.seed, 0xC000 + epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::int64_t anchor_sum = 0;
    int batch_index = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const int k =
          static_cast<int>(std::min<std::size_t>(cfg.batch_size, n - start));
      std::vector<const PairItem*> batch(k);
      std::vector<std::uint8_t> brecal(k);
      for (int b = 0; b < k; ++b) {
        batch[b] = &data.items[order[start + b]];
        brecal[b] = recal[order[start + b]];
      }
      const double lr =
          detail::scheduled_lr(cfg, step, lr_warmup_steps, total_steps);
      auto [loss, active] = train_batch_update(st.params, st.opt, cfg, batch,
                                               brecal, lr, epoch, batch_index);
      loss_sum += loss;
      anchor_sum += active;
      ++step;
      ++batch_index;
    }
    es.mean_loss = anchor_sum > 0 ? loss_sum / double(anchor_sum) : 0.0;

    if (val_data != nullptr && !val_data->empty()) {
      es.has_val = true;
      es.val = evaluate_dataset(st.params, cfg.select_ratio, *val_data);
      if (es.val.rank1 > st.best_val_rank1) {
        st.best_val_rank1 = es.val.rank1;
        st.best_epoch = epoch;
        st.best_params = st.params;
      }
    }
    st.history.push_back(std::move(es));
    st.completed_epochs = epoch;
  }
  if (st.best_val_rank1 < 0.0) {
    st.best_params = st.params;
    st.best_epoch = cfg.epochs;
  }
  return st;
}

}  // namespace rml
