#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "rml/trainer.hpp"

using namespace rml;

namespace {

DatasetConfig tiny_data_cfg() {
  DatasetConfig dc;
  dc.num_identities = 12;
  dc.images_per_identity = 2;
  dc.captions_per_image = 2;
  dc.raw_dim = 10;
  dc.intra_identity_noise_std = 0.3;
  dc.seed = 5;
  return dc;
}

TrainConfig tiny_train_cfg() {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.learning_rate = 5e-3;
  cfg.encoder = {10, 6, 4, 12};
  cfg.select_ratio = {0.5};
  cfg.seed = 77;
  return cfg;
}

}  // namespace

TEST_CASE("batch labels follow identity structure") {
  const std::vector<int> ids{1, 2, 3};
  const std::vector<std::uint8_t> all_clean{1, 1, 1};
  const BatchLabels l = batch_labels(ids, all_clean);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(l.at(i, j) == (i == j ? 1 : 0));
}

TEST_CASE("same-identity clean items form an all-ones block") {
  const std::vector<int> ids{7, 7};
  const std::vector<std::uint8_t> clean{1, 1};
  const BatchLabels l = batch_labels(ids, clean);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(l.at(i, j) == 1);
}

TEST_CASE("a noisy-flagged item zeroes its whole row and column") {
  const std::vector<int> ids{7, 7, 7, 3};
  const std::vector<std::uint8_t> recal{1, 0, 1, 1};
  const BatchLabels l = batch_labels(ids, recal);
  for (int j = 0; j < 4; ++j) {
    CHECK(l.at(1, j) == 0);
    CHECK(l.at(j, 1) == 0);
  }
  CHECK(l.at(0, 2) == 1);
  CHECK(l.at(2, 0) == 1);
  CHECK(l.at(3, 3) == 1);
  CHECK(l.at(0, 3) == 0);
}

TEST_CASE("training gradients match finite differences end to end") {
  // Full chain: raw -> tokens -> attention -> bge plus selection head -> tse,
  // cosine similarity matrices on both branches, masked batch loss.
  const EncoderConfig ec{5, 4, 3, 6};
  const SelectRatio ratio{0.67};  // two of three tokens
  EncoderParams params = init_params(ec, 3);
  SplitMix64 rng(9);

  const int k = 4;
  std::vector<PairItem> items(k);
  std::vector<const PairItem*> batch(k);
  std::vector<int> ids{1, 2, 2, 3};
  for (int b = 0; b < k; ++b) {
    items[b].identity = ids[b];
    items[b].image_raw.resize(ec.raw_dim);
    items[b].text_raw.resize(ec.raw_dim);
    for (double& x : items[b].image_raw) x = rng.next_gaussian();
    for (double& x : items[b].text_raw) x = rng.next_gaussian();
    batch[b] = &items[b];
  }
  const std::vector<std::uint8_t> recal{1, 1, 0, 1};
  const LossConfig loss_cfg{2.1, 0.05};  // hinges active, far from kinks

  for (LossVariant variant :
       {LossVariant::tal, LossVariant::trl, LossVariant::trls}) {
    auto loss_of = [&](const EncoderParams& p) {
      std::vector<Encoding> img(k), txt(k);
      for (int b = 0; b < k; ++b) {
        img[b] = encode_full(p.image, ec, batch[b]->image_raw, ratio);
        txt[b] = encode_full(p.text, ec, batch[b]->text_raw, ratio);
      }
      Mat sb(k, k), st(k, k);
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          sb(i, j) = dot(img[i].bge, txt[j].bge);
          st(i, j) = dot(img[i].tse, txt[j].tse);
        }
      const BatchLabels labels = batch_labels(ids, recal);
      Vec w(k);
      for (int b = 0; b < k; ++b) w[b] = recal[b];
      return batch_loss(variant, sb, labels, loss_cfg, w).total +
             batch_loss(variant, st, labels, loss_cfg, w).total;
    };

    // analytic: reuse the trainer's backward path
    std::vector<Encoding> img(k), txt(k);
    for (int b = 0; b < k; ++b) {
      img[b] = encode_full(params.image, ec, batch[b]->image_raw, ratio);
      txt[b] = encode_full(params.text, ec, batch[b]->text_raw, ratio);
    }
    Mat sb(k, k), st(k, k);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) {
        sb(i, j) = dot(img[i].bge, txt[j].bge);
        st(i, j) = dot(img[i].tse, txt[j].tse);
      }
    const BatchLabels labels = batch_labels(ids, recal);
    Vec w(k);
    for (int b = 0; b < k; ++b) w[b] = recal[b];
    const Mat gb = loss_similarity_grad(variant, sb, labels, loss_cfg, w);
    const Mat gt = loss_similarity_grad(variant, st, labels, loss_cfg, w);
    EncoderParams grads = zero_like(params);
    Vec d_bge(ec.embed_dim), d_tse(ec.embed_dim);
    for (int i = 0; i < k; ++i) {
      std::fill(d_bge.begin(), d_bge.end(), 0.0);
      std::fill(d_tse.begin(), d_tse.end(), 0.0);
      for (int j = 0; j < k; ++j) {
        add_scaled(d_bge, txt[j].bge, gb(i, j));
        add_scaled(d_tse, txt[j].tse, gt(i, j));
      }
      encode_backward(params.image, ec, batch[i]->image_raw, img[i], d_bge,
                      d_tse, grads.image);
    }
    for (int j = 0; j < k; ++j) {
      std::fill(d_bge.begin(), d_bge.end(), 0.0);
      std::fill(d_tse.begin(), d_tse.end(), 0.0);
      for (int i = 0; i < k; ++i) {
        add_scaled(d_bge, img[i].bge, gb(i, j));
        add_scaled(d_tse, img[i].tse, gt(i, j));
      }
      encode_backward(params.text, ec, batch[j]->text_raw, txt[j], d_bge,
                      d_tse, grads.text);
    }
    const Vec analytic = pack_params(grads);

    EncoderParams scratch = params;
    const Vec fd = oracle::fd_gradient(
        [&](const Vec& flat) {
          unpack_params(flat, scratch);
          return loss_of(scratch);
        },
        pack_params(params), 1e-6);
    CHECK(oracle::rel_error(fd, analytic) < 2e-4);
  }
}

TEST_CASE("training is deterministic") {
  const PairDataset data = inject_noise(generate(tiny_data_cfg()), {0.25, 9});
  const TrainConfig cfg = tiny_train_cfg();
  const TrainState a = train(data, nullptr, cfg);
  const TrainState b = train(data, nullptr, cfg);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e)
    CHECK(a.history[e].mean_loss == b.history[e].mean_loss);
  CHECK(pack_params(a.params) == pack_params(b.params));
}

TEST_CASE("zero-weight batches leave parameters bitwise unchanged") {
  const PairDataset data = generate(tiny_data_cfg());
  TrainConfig cfg = tiny_train_cfg();
  EncoderParams params = init_params(cfg.encoder, 1);
  const Vec before = pack_params(params);
  AdamState opt;
  std::vector<const PairItem*> batch;
  for (int b = 0; b < 6; ++b) batch.push_back(&data.items[b]);
  const std::vector<std::uint8_t> recal(6, 0);
  auto [loss, active] =
      train_batch_update(params, opt, cfg, batch, recal, 1e-3, 1, 0);
  CHECK(loss == 0.0);
  CHECK(active == 0);
  CHECK(pack_params(params) == before);
  CHECK(opt.t == 0);
}

TEST_CASE("clean data with warmup-only division trains like plain supervision") {
  const PairDataset data = generate(tiny_data_cfg());
  TrainConfig cfg = tiny_train_cfg();
  cfg.epochs = 4;
  cfg.warmup_epochs = cfg.epochs;  // division never applied

  const TrainState st = train(data, nullptr, cfg);

  // division-free reference loop: same schedule, same updates, no ccd code
  EncoderParams params = init_params(cfg.encoder, derive_seed(cfg.seed, 0xD0));
  AdamState opt;
  const std::size_t n = data.size();
  const std::int64_t spe = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total = spe * cfg.epochs;
  std::int64_t step = 0;
  std::vector<double> epoch_losses;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    SplitMix64 rng(derive_seed(cfg.seed, 0xC000 + epoch));
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::int64_t anchors = 0;
    int bi = 0;
    for (std::size_t s0 = 0; s0 < n; s0 += cfg.batch_size) {
      const int k = static_cast<int>(std::min<std::size_t>(cfg.batch_size, n - s0));
      std::vector<const PairItem*> batch(k);
      const std::vector<std::uint8_t> recal(k, 1);
      for (int b = 0; b < k; ++b) batch[b] = &data.items[order[s0 + b]];
      const double lr = detail::scheduled_lr(cfg, step, spe * cfg.lr_warmup_epochs, total);
      auto [l, a] = train_batch_update(params, opt, cfg, batch, recal, lr, epoch, bi++);
      loss_sum += l;
      anchors += a;
      ++step;
    }
    epoch_losses.push_back(anchors ? loss_sum / double(anchors) : 0.0);
  }
  REQUIRE(epoch_losses.size() == st.history.size());
  for (std::size_t e = 0; e < epoch_losses.size(); ++e)
    CHECK(st.history[e].mean_loss == epoch_losses[e]);
  CHECK(pack_params(st.params) == pack_params(params));
}

TEST_CASE("loss is nonincreasing on clean data within slack") {
  DatasetConfig dc = tiny_data_cfg();
  dc.num_identities = 20;
  const PairDataset data = generate(dc);
  TrainConfig cfg = tiny_train_cfg();
  cfg.epochs = 8;
  cfg.warmup_epochs = cfg.epochs;
  const TrainState st = train(data, nullptr, cfg);
  for (std::size_t e = 1; e < st.history.size(); ++e)
    CHECK(st.history[e].mean_loss <= st.history[e - 1].mean_loss * 1.05);
}

TEST_CASE("validation tracking selects the best epoch") {
  DatasetConfig dc = tiny_data_cfg();
  const PairDataset full = generate(dc);
  const SplitIndices split = split_indices(full.size(), 0.25, 0.0, 3);
  const PairDataset train_set = subset(full, split.train);
  const PairDataset val_set = subset(full, split.val);
  TrainConfig cfg = tiny_train_cfg();
  cfg.epochs = 4;
  const TrainState st = train(train_set, &val_set, cfg);
  REQUIRE(st.best_epoch >= 1);
  REQUIRE(st.best_epoch <= cfg.epochs);
  double best = -1.0;
  for (const EpochStats& e : st.history) {
    REQUIRE(e.has_val);
    best = std::max(best, e.val.rank1);
  }
  CHECK(st.best_val_rank1 == best);
  CHECK(st.history[st.best_epoch - 1].val.rank1 == best);
}

TEST_CASE("audit rows cover every pair every epoch") {
  const PairDataset data = inject_noise(generate(tiny_data_cfg()), {0.25, 4});
  TrainConfig cfg = tiny_train_cfg();
  cfg.epochs = 2;
  const TrainState st = train(data, nullptr, cfg);
  CHECK(st.audit.size() == data.size() * 2);
  for (const AuditRow& r : st.audit) {
    CHECK(r.epoch >= 1);
    CHECK(r.epoch <= 2);
    CHECK((r.set_label == 'C' || r.set_label == 'N' || r.set_label == 'U'));
    CHECK((r.recalibrated == 0 || r.recalibrated == 1));
  }
}

TEST_CASE("mean reduction trains deterministically and scales updates") {
  const PairDataset data = generate(tiny_data_cfg());
  TrainConfig cfg = tiny_train_cfg();
  cfg.reduction = Reduction::mean;
  const TrainState a = train(data, nullptr, cfg);
  const TrainState b = train(data, nullptr, cfg);
  CHECK(pack_params(a.params) == pack_params(b.params));
  for (const EpochStats& e : a.history) CHECK(std::isfinite(e.mean_loss));
  // a different reduction changes the update trajectory
  cfg.reduction = Reduction::sum;
  const TrainState c = train(data, nullptr, cfg);
  CHECK(pack_params(a.params) != pack_params(c.params));
}

TEST_CASE("learning-rate schedule ramps linearly then decays to zero") {
  TrainConfig cfg = tiny_train_cfg();
  cfg.learning_rate = 1.0;
  cfg.schedule = LrSchedule::cosine_warmup;
  const std::int64_t warmup = 10, total = 110;
  CHECK(detail::scheduled_lr(cfg, 0, warmup, total) == doctest::Approx(0.1));
  CHECK(detail::scheduled_lr(cfg, 9, warmup, total) == doctest::Approx(1.0));
  CHECK(detail::scheduled_lr(cfg, 10, warmup, total) == doctest::Approx(1.0));
  const double mid = detail::scheduled_lr(cfg, 60, warmup, total);
  CHECK(mid == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(detail::scheduled_lr(cfg, total - 1, warmup, total) <
        detail::scheduled_lr(cfg, total - 2, warmup, total));
  cfg.schedule = LrSchedule::constant;
  CHECK(detail::scheduled_lr(cfg, 0, warmup, total) == 1.0);
  CHECK(detail::scheduled_lr(cfg, total - 1, warmup, total) == 1.0);
}

TEST_CASE("config validation rejects bad setups") {
  const PairDataset data = generate(tiny_data_cfg());
  TrainConfig cfg = tiny_train_cfg();
  cfg.batch_size = 1;
  CHECK_THROWS_AS(train(data, nullptr, cfg), config_error);
  cfg = tiny_train_cfg();
  cfg.encoder.raw_dim = 99;
  CHECK_THROWS_AS(train(data, nullptr, cfg), shape_error);
  cfg = tiny_train_cfg();
  cfg.epochs = 0;
  CHECK_THROWS_AS(train(data, nullptr, cfg), config_error);
}
