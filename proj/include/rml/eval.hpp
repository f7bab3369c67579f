#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "rml/dataset.hpp"
#include "rml/encoder.hpp"
#include "rml/error.hpp"
#include "rml/linalg.hpp"

namespace rml {

struct RetrievalResult {
  double rank1 = 0.0, rank5 = 0.0, rank10 = 0.0;
  double map = 0.0;
  double minp = 0.0;
  std::vector<int> per_query_first_rank;  // 1-based rank of the first match
  int num_queries = 0;
  int num_gallery = 0;
};

/// Elementwise average of the two branch similarity matrices.
inline Mat joint_similarity(const Mat& sb, const Mat& st) {
  if (sb.rows != st.rows || sb.cols != st.cols)
    throw shape_error("joint_similarity: shape mismatch");
  Mat out(sb.rows, sb.cols);
  for (std::size_t i = 0; i < out.a.size(); ++i)
    out.a[i] = 0.5 * (sb.a[i] + st.a[i]);
  return out;
}

/// Rank-K / mAP / mINP over a query-by-gallery similarity matrix. The
/// gallery is sorted by descending similarity with ties going to the lower
/// gallery index; INP per query is (#relevant) / (rank of the last-retrieved
/// relevant item). Every query must have at least one relevant item.
inline RetrievalResult evaluate(const Mat& sims,
                                const std::vector<std::uint8_t>& relevance) {
  const int q = sims.rows, g = sims.cols;
  if (static_cast<std::size_t>(q) * g != relevance.size())
    throw shape_error("evaluate: relevance matrix shape mismatch");
  RetrievalResult r;
  r.num_queries = q;
  r.num_gallery = g;
  r.per_query_first_rank.reserve(q);
  double sum_ap = 0.0, sum_inp = 0.0;
  int hit1 = 0, hit5 = 0, hit10 = 0;
  std::vector<int> order(g);
  for (int qi = 0; qi < q; ++qi) {
    const auto row = sims.row(qi);
    const std::uint8_t* rel = relevance.data() + static_cast<std::size_t>(qi) * g;
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (row[a] != row[b]) return row[a] > row[b];
      return a < b;
    });
    int n_rel = 0;
    for (int gi = 0; gi < g; ++gi) n_rel += rel[gi];
    if (n_rel == 0)
      throw eval_error("evaluate: query " + std::to_string(qi) +
                       " has no relevant gallery item");
    int found = 0, first = 0, last = 0;
    double ap = 0.0;
    for (int pos = 0; pos < g; ++pos) {
      if (!rel[order[pos]]) continue;
      ++found;
      if (found == 1) first = pos + 1;
      last = pos + 1;
      ap += static_cast<double>(found) / static_cast<double>(pos + 1);
    }
    ap /= static_cast<double>(n_rel);
    sum_ap += ap;
    sum_inp += static_cast<double>(n_rel) / static_cast<double>(last);
    r.per_query_first_rank.push_back(first);
    hit1 += first <= 1;
    hit5 += first <= 5;
    hit10 += first <= 10;
  }
  r.rank1 = static_cast<double>(hit1) / q;
  r.rank5 = static_cast<double>(hit5) / q;
  r.rank10 = static_cast<double>(hit10) / q;
  r.map = sum_ap / q;
  r.minp = sum_inp / q;
  return r;
}

// ---------------------------------------------------------------------------
// Protocol assembly: text queries against an image gallery over the clean
// held-out pairs. Gallery images are deduplicated by image_label.
// ---------------------------------------------------------------------------

struct RetrievalTask {
  Mat sims_bge;
  Mat sims_tse;
  Mat joint;
  std::vector<std::uint8_t> relevance;  // num_queries x num_gallery
  int num_queries = 0;
  int num_gallery = 0;
  /// Expected rank-1 of a uniformly random ranking: mean over queries of
  /// (#relevant / gallery size).
  double random_rank1_baseline = 0.0;
};

inline RetrievalTask build_retrieval_task(const EncoderParams& params,
                                          SelectRatio ratio,
                                          const PairDataset& data) {
  std::vector<const PairItem*> clean;
  for (const PairItem& it : data.items)
    if (it.true_clean_flag == 1) clean.push_back(&it);
  if (clean.empty())
    throw eval_error("build_retrieval_task: no clean pairs to evaluate");

  // Gallery: unique images in ascending image_label order.
  std::map<int, const PairItem*> gallery_map;
  for (const PairItem* it : clean) gallery_map.emplace(it->image_label, it);
  std::vector<const PairItem*> gallery;
  gallery.reserve(gallery_map.size());
  for (auto& [label, it] : gallery_map) gallery.push_back(it);

  const int q = static_cast<int>(clean.size());
  const int g = static_cast<int>(gallery.size());
  std::vector<Encoding> genc(g), qenc(q);
  for (int i = 0; i < g; ++i)
    genc[i] = encode_full(params.image, params.cfg, gallery[i]->image_raw, ratio);
  for (int i = 0; i < q; ++i)
    qenc[i] = encode_full(params.text, params.cfg, clean[i]->text_raw, ratio);

  RetrievalTask task;
  task.num_queries = q;
  task.num_gallery = g;
  task.sims_bge = Mat(q, g);
  task.sims_tse = Mat(q, g);
  task.relevance.assign(static_cast<std::size_t>(q) * g, 0);
  for (int i = 0; i < q; ++i) {
    int n_rel = 0;
    for (int j = 0; j < g; ++j) {
      task.sims_bge(i, j) = dot(qenc[i].bge, genc[j].bge);
      task.sims_tse(i, j) = dot(qenc[i].tse, genc[j].tse);
      const bool rel = clean[i]->identity == gallery[j]->identity;
      task.relevance[static_cast<std::size_t>(i) * g + j] = rel;
      n_rel += rel;
    }
    task.random_rank1_baseline += static_cast<double>(n_rel) / g;
  }
  task.random_rank1_baseline /= q;
  task.joint = joint_similarity(task.sims_bge, task.sims_tse);
  return task;
}

inline RetrievalResult evaluate_dataset(const EncoderParams& params,
                                        SelectRatio ratio,
                                        const PairDataset& data,
                                        double* similarity_std_out = nullptr) {
  const RetrievalTask task = build_retrieval_task(params, ratio, data);
  if (similarity_std_out) *similarity_std_out = population_std(task.joint.a);
  return evaluate(task.joint, task.relevance);
}

inline void write_metrics_json(const std::string& path,
                               const RetrievalResult& r,
                               double similarity_std) {
  std::ofstream f(path);
  if (!f) throw io_error("cannot open for writing: " + path);
  f << "{\n"
    << "  \"rank1\": " << detail::format_double(r.rank1) << ",\n"
    << "  \"rank5\": " << detail::format_double(r.rank5) << ",\n"
    << "  \"rank10\": " << detail::format_double(r.rank10) << ",\n"
    << "  \"mAP\": " << detail::format_double(r.map) << ",\n"
    << "  \"mINP\": " << detail::format_double(r.minp) << ",\n"
    << "  \"num_queries\": " << r.num_queries << ",\n"
    << "  \"num_gallery\": " << r.num_gallery << ",\n"
    << "  \"similarity_std\": " << detail::format_double(similarity_std)
    << "\n}\n";
  if (!f) throw io_error("write failed: " + path);
}

}  // namespace rml
