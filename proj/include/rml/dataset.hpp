#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rml/error.hpp"
#include "rml/linalg.hpp"
#include "rml/rng.hpp"

namespace rml {

struct DatasetConfig {
  int num_identities = 100;
  int images_per_identity = 4;
  int captions_per_image = 2;
  int raw_dim = 64;
  double intra_identity_noise_std = 0.25;
  /// Scale of a base direction shared by every identity prototype. Zero
  /// gives independent prototypes; larger values crowd the identities the
  /// way person photos crowd a feature space (high mutual similarity).
  double prototype_shared_scale = 0.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_identities < 2) throw config_error("num_identities must be >= 2");
    if (raw_dim < 2) throw config_error("raw_dim must be >= 2");
    if (images_per_identity < 1)
      throw config_error("images_per_identity must be >= 1");
    if (captions_per_image < 1)
      throw config_error("captions_per_image must be >= 1");
    if (intra_identity_noise_std < 0.0)
      throw config_error("intra_identity_noise_std must be >= 0");
    if (prototype_shared_scale < 0.0)
      throw config_error("prototype_shared_scale must be >= 0");
  }
};

/// One image/text pair. correspondence_label is what training sees;
/// true_clean_flag is hidden ground truth used only for scoring.
struct PairItem {
  std::int64_t pair_id = 0;
  int identity = 0;
  int image_label = 0;
  int correspondence_label = 1;
  int true_clean_flag = 1;
  Vec image_raw;
  Vec text_raw;
};

struct PairDataset {
  int raw_dim = 0;
  std::vector<PairItem> items;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
};

struct NoiseSpec {
  double noise_rate = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(noise_rate >= 0.0 && noise_rate < 1.0))
      throw config_error("noise_rate must lie in [0, 1)");
  }
};

/// Prototype-plus-Gaussian synthetic pairs: every identity gets a fixed
/// prototype vector, every image/text draws independent noise around it.
inline PairDataset generate(const DatasetConfig& cfg) {
  cfg.validate();
  SplitMix64 rng(cfg.seed);
  PairDataset ds;
  ds.raw_dim = cfg.raw_dim;
  ds.items.reserve(static_cast<std::size_t>(cfg.num_identities) *
                   cfg.images_per_identity * cfg.captions_per_image);
  Vec shared_base(static_cast<std::size_t>(cfg.raw_dim));
  for (double& x : shared_base) x = rng.next_gaussian();
  std::int64_t pair_id = 0;
  for (int c = 0; c < cfg.num_identities; ++c) {
    Vec proto(static_cast<std::size_t>(cfg.raw_dim));
    for (std::size_t k = 0; k < proto.size(); ++k)
      proto[k] = cfg.prototype_shared_scale * shared_base[k] +
                 rng.next_gaussian();
    for (int im = 0; im < cfg.images_per_identity; ++im) {
      Vec image(proto);
      for (double& x : image)
        x += cfg.intra_identity_noise_std * rng.next_gaussian();
      const int image_label = c * cfg.images_per_identity + im + 1;
      for (int cp = 0; cp < cfg.captions_per_image; ++cp) {
        PairItem it;
        it.pair_id = pair_id++;
        it.identity = c + 1;
        it.image_label = image_label;
        it.image_raw = image;
        it.text_raw = proto;
        for (double& x : it.text_raw)
          x += cfg.intra_identity_noise_std * rng.next_gaussian();
        ds.items.push_back(std::move(it));
      }
    }
  }
  return ds;
}

/// Corrupts floor(rate*N) pairs by permuting their texts so that no text
/// lands on an item of its own identity; flags them via true_clean_flag = 0
/// while correspondence_label stays 1. Requires an all-clean input when
/// rate > 0 (shuffled texts would otherwise have unknowable identity).
inline PairDataset inject_noise(const PairDataset& ds, const NoiseSpec& spec) {
  spec.validate();
  if (ds.empty()) throw config_error("inject_noise: dataset is empty");
  PairDataset out = ds;
  const std::size_t n = out.items.size();
  const std::size_t m = static_cast<std::size_t>(
      std::floor(spec.noise_rate * static_cast<double>(n)));
  if (m == 0) return out;
  for (const PairItem& it : out.items)
    if (it.true_clean_flag != 1)
      throw noise_error("inject_noise: dataset already contains noise");

  SplitMix64 rng(spec.seed);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  rng.shuffle(idx);
  idx.resize(m);

  // Group the selected items by identity, largest group first, then assign
  // each item the text of the item k places ahead. A cyclic shift of
  // k in [g1, m-g1] can never stay inside one identity block.
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i : idx) groups[out.items[i].identity].push_back(i);
  std::vector<std::pair<int, std::vector<std::size_t>>> blocks(groups.begin(),
                                                               groups.end());
  std::stable_sort(blocks.begin(), blocks.end(),
                   [](const auto& a, const auto& b) {
                     if (a.second.size() != b.second.size())
                       return a.second.size() > b.second.size();
                     return a.first < b.first;
                   });
  const std::size_t g1 = blocks.front().second.size();
  if (2 * g1 > m)
    throw noise_error(
        "inject_noise: same-identity-avoiding shuffle infeasible (one "
        "identity covers more than half of the corrupted items)");
  std::vector<std::size_t> order;
  order.reserve(m);
  for (auto& b : blocks)
    for (std::size_t i : b.second) order.push_back(i);
  const std::size_t k = g1 + rng.next_below(m - 2 * g1 + 1);

  std::vector<Vec> texts(m);
  for (std::size_t p = 0; p < m; ++p)
    texts[p] = out.items[order[(p + k) % m]].text_raw;
  for (std::size_t p = 0; p < m; ++p) {
    out.items[order[p]].text_raw = std::move(texts[p]);
    out.items[order[p]].true_clean_flag = 0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text serialization. Doubles are printed with std::to_chars (shortest form
// that round-trips exactly) so save -> load is bit-identical.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, std::size_t line_no) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw io_error("parse error: bad number '" + std::string(s) + "' at line " +
                   std::to_string(line_no));
  return v;
}

inline long long parse_int(std::string_view s, std::size_t line_no) {
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw io_error("parse error: bad integer '" + std::string(s) +
                   "' at line " + std::to_string(line_no));
  return v;
}

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

}  // namespace detail

inline void save_dataset(const PairDataset& ds, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw io_error("cannot open for writing: " + path);
  f << "rml_dataset_v1 dim=" << ds.raw_dim << " pairs=" << ds.items.size()
    << "\n";
  f << "pair_id,identity,image_label,correspondence_label,true_clean_flag,"
       "image_raw...,text_raw...\n";
  for (const PairItem& it : ds.items) {
    f << it.pair_id << ',' << it.identity << ',' << it.image_label << ','
      << it.correspondence_label << ',' << it.true_clean_flag;
    for (double v : it.image_raw) f << ',' << detail::format_double(v);
    for (double v : it.text_raw) f << ',' << detail::format_double(v);
    f << '\n';
  }
  if (!f) throw io_error("write failed: " + path);
}

inline PairDataset load_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open: " + path);
  std::string line;
  if (!std::getline(f, line)) throw io_error("empty dataset file: " + path);
  int dim = 0;
  std::size_t pairs = 0;
  {
    auto fields = detail::split(line, ' ');
    if (fields.size() != 3 || fields[0] != "rml_dataset_v1" ||
        fields[1].substr(0, 4) != "dim=" || fields[2].substr(0, 6) != "pairs=")
      throw io_error("bad dataset header at line 1: " + path);
    dim = static_cast<int>(detail::parse_int(fields[1].substr(4), 1));
    pairs =
        static_cast<std::size_t>(detail::parse_int(fields[2].substr(6), 1));
  }
  if (!std::getline(f, line) || line.rfind("pair_id,identity,", 0) != 0)
    throw io_error("missing column header at line 2: " + path);

  PairDataset ds;
  ds.raw_dim = dim;
  ds.items.reserve(pairs);
  std::size_t line_no = 2;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = detail::split(line, ',');
    const std::size_t expect = 5 + 2 * static_cast<std::size_t>(dim);
    if (fields.size() != expect)
      throw io_error("parse error: expected " + std::to_string(expect) +
                     " fields, got " + std::to_string(fields.size()) +
                     " at line " + std::to_string(line_no));
    PairItem it;
    it.pair_id = detail::parse_int(fields[0], line_no);
    it.identity = static_cast<int>(detail::parse_int(fields[1], line_no));
    it.image_label = static_cast<int>(detail::parse_int(fields[2], line_no));
    it.correspondence_label =
        static_cast<int>(detail::parse_int(fields[3], line_no));
    it.true_clean_flag = static_cast<int>(detail::parse_int(fields[4], line_no));
    it.image_raw.resize(dim);
    it.text_raw.resize(dim);
    for (int d = 0; d < dim; ++d)
      it.image_raw[d] = detail::parse_double(fields[5 + d], line_no);
    for (int d = 0; d < dim; ++d)
      it.text_raw[d] = detail::parse_double(fields[5 + dim + d], line_no);
    ds.items.push_back(std::move(it));
  }
  if (ds.items.size() != pairs)
    throw io_error("dataset record count mismatch: header says " +
                   std::to_string(pairs) + ", file has " +
                   std::to_string(ds.items.size()));
  return ds;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

/// Seeded pair-level split; indices within each part are sorted ascending.
inline SplitIndices split_indices(std::size_t n, double val_fraction,
                                  double test_fraction, std::uint64_t seed) {
  if (val_fraction < 0 || test_fraction < 0 ||
      val_fraction + test_fraction >= 1.0)
    throw config_error("split fractions must be >= 0 and sum below 1");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  SplitMix64 rng(seed);
  rng.shuffle(idx);
  const std::size_t n_test =
      static_cast<std::size_t>(std::floor(test_fraction * double(n)));
  const std::size_t n_val =
      static_cast<std::size_t>(std::floor(val_fraction * double(n)));
  SplitIndices s;
  s.test.assign(idx.begin(), idx.begin() + n_test);
  s.val.assign(idx.begin() + n_test, idx.begin() + n_test + n_val);
  s.train.assign(idx.begin() + n_test + n_val, idx.end());
  std::sort(s.test.begin(), s.test.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

inline PairDataset subset(const PairDataset& ds,
                          std::span<const std::size_t> indices) {
  PairDataset out;
  out.raw_dim = ds.raw_dim;
  out.items.reserve(indices.size());
  for (std::size_t i : indices) out.items.push_back(ds.items[i]);
  return out;
}

}  // namespace rml
