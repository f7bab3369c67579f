#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>

#include "rml/division.hpp"
#include "rml/trainer.hpp"

using namespace rml;

namespace {

/// Hand-built encoder that reproduces its one-hot input exactly on both
/// branches: token projections are scaled identities, the selection head is
/// a pure identity fc. Matched pairs then score 1, mismatched pairs 0.
EncoderParams identity_encoder(int dim) {
  EncoderConfig cfg;
  cfg.raw_dim = dim;
  cfg.embed_dim = dim;
  cfg.n_tokens = 2;
  cfg.hidden_dim = 4;
  EncoderParams p = init_params(cfg, 1);
  for (auto* mp : {&p.image, &p.text}) {
    for (Mat& proj : mp->token_proj) {
      std::fill(proj.a.begin(), proj.a.end(), 0.0);
      for (int i = 0; i < dim; ++i) proj(i, i) = 0.1;
    }
    std::fill(mp->mlp_w1.a.begin(), mp->mlp_w1.a.end(), 0.0);
    std::fill(mp->mlp_b1.begin(), mp->mlp_b1.end(), 0.0);
    std::fill(mp->mlp_w2.a.begin(), mp->mlp_w2.a.end(), 0.0);
    std::fill(mp->mlp_b2.begin(), mp->mlp_b2.end(), 0.0);
    std::fill(mp->fc_w.a.begin(), mp->fc_w.a.end(), 0.0);
    for (int i = 0; i < dim; ++i) mp->fc_w(i, i) = 1.0;
    std::fill(mp->fc_b.begin(), mp->fc_b.end(), 0.0);
  }
  return p;
}

PairDataset one_hot_dataset(int n) {
  PairDataset ds;
  ds.raw_dim = n;
  for (int i = 0; i < n; ++i) {
    PairItem it;
    it.pair_id = i;
    it.identity = i + 1;
    it.image_label = i + 1;
    it.image_raw.assign(n, 0.0);
    it.image_raw[i] = 1.0;
    it.text_raw = it.image_raw;
    ds.items.push_back(std::move(it));
  }
  return ds;
}

}  // namespace

TEST_CASE("a perfectly separable model yields zero raw losses") {
  const int n = 4;
  const PairDataset ds = one_hot_dataset(n);
  const EncoderParams p = identity_encoder(n);
  const PerSampleLosses losses =
      per_sample_losses(p, {0.5}, ds, {0.1, 0.015}, n, 7);
  for (double v : losses.raw_bge) CHECK(v == 0.0);
  for (double v : losses.raw_tse) CHECK(v == 0.0);
  // all-zero raw vectors normalize to the degenerate 0.5 fallback
  CHECK(losses.degenerate_bge);
  CHECK(losses.degenerate_tse);
  for (double v : losses.norm_bge) CHECK(v == 0.5);
}

TEST_CASE("min-max normalization maps the extremes to 0 and 1") {
  bool degenerate = true;
  const Vec out = min_max_normalize(Vec{0.2, 0.8}, &degenerate);
  CHECK_FALSE(degenerate);
  CHECK(out[0] == 0.0);
  CHECK(out[1] == 1.0);
}

TEST_CASE("per-sample losses are deterministic in the seed") {
  const PairDataset ds = one_hot_dataset(6);
  EncoderParams p = init_params({6, 4, 2, 8}, 3);
  const PerSampleLosses a = per_sample_losses(p, {0.5}, ds, {0.1, 0.015}, 4, 9);
  const PerSampleLosses b = per_sample_losses(p, {0.5}, ds, {0.1, 0.015}, 4, 9);
  CHECK(a.raw_bge == b.raw_bge);
  CHECK(a.raw_tse == b.raw_tse);
}

TEST_CASE("divide applies a strict threshold") {
  const Vec p{0.9, 0.5, 0.1};
  const BranchDivision d = divide(p, 0.5);
  CHECK(d.clean_indices() == std::vector<int>{0});
  CHECK(d.noisy_indices() == std::vector<int>{1, 2});

  const BranchDivision all_clean = divide(Vec{1.0, 1.0}, 0.5);
  CHECK(all_clean.noisy_indices().empty());
  const BranchDivision all_noisy = divide(Vec{0.0, 0.0}, 0.5);
  CHECK(all_noisy.clean_indices().empty());
}

TEST_CASE("divide is monotone in the posterior") {
  SplitMix64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    Vec p(20);
    for (double& x : p) x = rng.next_double();
    const BranchDivision before = divide(p, 0.5);
    const std::size_t i = rng.next_below(p.size());
    p[i] = std::min(1.0, p[i] + rng.next_double());
    const BranchDivision after = divide(p, 0.5);
    if (before.is_clean[i]) CHECK(after.is_clean[i]);
  }
}

TEST_CASE("consensus set arithmetic on the worked example") {
  // bge: clean {1,2}, noisy {3}; tse: clean {1}, noisy {2,3} (indices 1..3)
  BranchDivision bge{{0, 1, 1, 0}};
  BranchDivision tse{{0, 1, 0, 0}};
  const Vec posts(4, 0.5);
  SplitMix64 rng(5);
  const DivisionResult r = consensus(bge, tse, posts, posts, rng);
  CHECK(r.clean == std::vector<int>{1});
  CHECK(r.noisy == std::vector<int>{0, 3});
  CHECK(r.uncertain == std::vector<int>{2});
  for (int i : r.clean) CHECK(r.recalibrated[i] == 1);
  for (int i : r.noisy) CHECK(r.recalibrated[i] == 0);
}

TEST_CASE("identical divisions leave nothing uncertain") {
  BranchDivision d{{1, 0, 1, 0, 1}};
  const Vec posts(5, 0.5);
  SplitMix64 rng(6);
  const DivisionResult r = consensus(d, d, posts, posts, rng);
  CHECK(r.uncertain.empty());
  CHECK(r.clean == std::vector<int>{0, 2, 4});
  CHECK(r.noisy == std::vector<int>{1, 3});
}

TEST_CASE("consensus rejects mismatched index sets") {
  BranchDivision a{{1, 0}};
  BranchDivision b{{1, 0, 1}};
  const Vec pa(2, 0.5), pb(3, 0.5);
  SplitMix64 rng(8);
  CHECK_THROWS_AS(consensus(a, b, pa, pa, rng), contract_error);
}

TEST_CASE("consensus partitions every index exactly once") {
  SplitMix64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 30;
    BranchDivision a, b;
    a.is_clean.resize(n);
    b.is_clean.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      a.is_clean[i] = rng.next_below(2);
      b.is_clean[i] = rng.next_below(2);
    }
    const Vec posts(n, 0.5);
    SplitMix64 draw(trial);
    const DivisionResult r = consensus(a, b, posts, posts, draw);
    std::set<int> seen;
    for (const auto* v : {&r.clean, &r.noisy, &r.uncertain})
      for (int i : *v) CHECK(seen.insert(i).second);
    CHECK(seen.size() == n);
    for (int i : r.uncertain) CHECK((r.recalibrated[i] == 0 || r.recalibrated[i] == 1));
  }
}

TEST_CASE("the same seed reproduces identical recalibrated labels") {
  BranchDivision a{{1, 0, 1, 0, 1, 0, 1, 0}};
  BranchDivision b{{1, 1, 0, 0, 1, 1, 0, 0}};
  const Vec posts(8, 0.5);
  SplitMix64 r1(99), r2(99);
  const DivisionResult x = consensus(a, b, posts, posts, r1);
  const DivisionResult y = consensus(a, b, posts, posts, r2);
  CHECK(x.recalibrated == y.recalibrated);
}

TEST_CASE("after a short warmup, noisy pairs carry larger losses than clean") {
  DatasetConfig dc;
  dc.num_identities = 40;
  dc.images_per_identity = 2;
  dc.captions_per_image = 1;
  dc.raw_dim = 16;
  dc.intra_identity_noise_std = 0.2;
  dc.seed = 5;
  const PairDataset clean = generate(dc);
  const PairDataset noisy = inject_noise(clean, {0.5, 6});

  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-2;
  cfg.warmup_epochs = 8;  // plain training only
  cfg.use_ccd = false;
  cfg.encoder = {16, 8, 4, 16};
  cfg.select_ratio = {0.5};
  cfg.seed = 11;
  const TrainState st = train(noisy, nullptr, cfg);

  const PerSampleLosses losses = per_sample_losses(
      st.params, cfg.select_ratio, noisy, cfg.loss, cfg.batch_size, 13);
  double clean_sum = 0.0, noisy_sum = 0.0;
  int clean_n = 0, noisy_n = 0;
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    if (noisy.items[i].true_clean_flag) {
      clean_sum += losses.raw_bge[i];
      ++clean_n;
    } else {
      noisy_sum += losses.raw_bge[i];
      ++noisy_n;
    }
  }
  CHECK(noisy_sum / noisy_n > clean_sum / clean_n);
}

TEST_CASE("run_ccd flags exactly the corrupted pairs of a separable model") {
  // One-hot pairs through the identity encoder: matched pairs score 1,
  // mismatched 0, so loss-based division must recover the hidden flags.
  const int n = 32;
  const PairDataset clean = one_hot_dataset(n);
  const PairDataset noisy = inject_noise(clean, {0.5, 3});
  const EncoderParams p = identity_encoder(n);

  // one full batch: every corrupted pair sees its stolen text among the
  // negatives, so the two loss clusters are far apart
  const CcdOutcome ccd = run_ccd(p, {0.5}, noisy, {0.1, 0.015}, n, 31, 32);
  REQUIRE(ccd.usable);
  REQUIRE(ccd.division.clean.size() == 16);
  REQUIRE(ccd.division.noisy.size() == 16);
  for (int i : ccd.division.clean) CHECK(noisy.items[i].true_clean_flag == 1);
  for (int i : ccd.division.noisy) CHECK(noisy.items[i].true_clean_flag == 0);
}
