#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "rml/csv.hpp"
#include "rml/dataset.hpp"
#include "rml/error.hpp"
#include "rml/eval.hpp"
#include "rml/trainer.hpp"

namespace rml {

/// Grid experiment: every combination of noise rate, loss variant, CCD mode,
/// margin, temperature and selection ratio, repeated with derived seeds.
/// Seeds depend only on (base seed, repetition), so variants within a
/// repetition see identical data, noise and initialization.
struct ExperimentSpec {
  std::string name = "experiment";
  DatasetConfig data;
  std::vector<double> noise_rates{0.0};
  std::vector<LossVariant> variants{LossVariant::tal};
  std::vector<std::uint8_t> ccd_modes{1};
  std::vector<double> margins{0.1};
  std::vector<double> taus{0.015};
  std::vector<double> ratios{0.3};
  int repetitions = 1;
  std::uint64_t seed = 1;
  std::string out_dir = "experiment_out";
  double val_fraction = 0.2;
  double test_fraction = 0.2;
  TrainConfig base;

  void validate() const {
    data.validate();
    if (noise_rates.empty() || variants.empty() || ccd_modes.empty() ||
        margins.empty() || taus.empty() || ratios.empty() || repetitions < 1)
      throw config_error("experiment grid is empty");
    for (double r : noise_rates)
      if (!(r >= 0.0 && r < 1.0))
        throw config_error("noise rates must lie in [0, 1)");
    if (out_dir.empty()) throw config_error("out_dir must be set");
  }
};

struct CellSpec {
  int index = 0;
  double rate = 0.0;
  LossVariant variant = LossVariant::tal;
  bool ccd = true;
  double margin = 0.1;
  double tau = 0.015;
  double ratio = 0.3;
  int rep = 0;
};

struct CellResult {
  CellSpec cell;
  std::string status = "ok";
  RetrievalResult final_metrics, best_metrics;
  double final_similarity_std = 0.0;
  double division_precision = 0.0, division_recall = 0.0;
  std::uint64_t cell_seed = 0;
};

namespace detail {

inline std::vector<CellSpec> enumerate_cells(const ExperimentSpec& spec) {
  std::vector<CellSpec> cells;
  int index = 0;
  for (double rate : spec.noise_rates)
    for (LossVariant v : spec.variants)
      for (std::uint8_t ccd : spec.ccd_modes)
        for (double m : spec.margins)
          for (double tau : spec.taus)
            for (double ratio : spec.ratios)
              for (int rep = 0; rep < spec.repetitions; ++rep)
                cells.push_back(
                    {index++, rate, v, ccd != 0, m, tau, ratio, rep});
  return cells;
}

inline std::string cell_dir_name(const CellSpec& c) {
  return "cell_" + std::to_string(c.index) + "_r" + format_double(c.rate) +
         "_" + to_string(c.variant) + "_ccd" + (c.ccd ? "1" : "0") + "_m" +
         format_double(c.margin) + "_t" + format_double(c.tau) + "_R" +
         format_double(c.ratio) + "_rep" + std::to_string(c.rep);
}

inline void write_history_csv(const std::string& path,
                              const std::vector<EpochStats>& history) {
  std::ofstream f(path);
  if (!f) throw io_error("cannot open for writing: " + path);
  f << "epoch,L_m,rank1,mAP,mINP,division_precision,division_recall\n";
  for (std::size_t e = 0; e < history.size(); ++e) {
    const EpochStats& s = history[e];
    f << (e + 1) << ',' << format_double(s.mean_loss) << ','
      << format_double(s.has_val ? s.val.rank1 : 0.0) << ','
      << format_double(s.has_val ? s.val.map : 0.0) << ','
      << format_double(s.has_val ? s.val.minp : 0.0) << ','
      << format_double(s.division_precision) << ','
      << format_double(s.division_recall) << '\n';
  }
}

inline void write_audit_csv(const std::string& path,
                            const std::vector<AuditRow>& audit) {
  std::ofstream f(path);
  if (!f) throw io_error("cannot open for writing: " + path);
  f << "epoch,pair_id,loss_bge,loss_tse,post_bge,post_tse,set,recalibrated,"
       "true_clean_flag\n";
  for (const AuditRow& r : audit)
    f << r.epoch << ',' << r.pair_id << ',' << format_double(r.loss_bge) << ','
      << format_double(r.loss_tse) << ',' << format_double(r.post_bge) << ','
      << format_double(r.post_tse) << ',' << r.set_label << ','
      << r.recalibrated << ',' << r.true_clean_flag << '\n';
}

}  // namespace detail

/// Runs one grid cell: generate, split, corrupt the training split, train,
/// evaluate the final and best checkpoints on the clean test split, and
/// leave every artifact in the cell directory.
inline CellResult run_cell(const ExperimentSpec& spec, const CellSpec& cell) {
  CellResult res;
  res.cell = cell;
  res.cell_seed = derive_seed(spec.seed, 0x7000 + cell.rep);

  DatasetConfig dc = spec.data;
  dc.seed = derive_seed(res.cell_seed, 1);
  const PairDataset full = generate(dc);
  const SplitIndices split = split_indices(
      full.size(), spec.val_fraction, spec.test_fraction,
      derive_seed(res.cell_seed, 2));
  PairDataset train_set = subset(full, split.train);
  const PairDataset val_set = subset(full, split.val);
  const PairDataset test_set = subset(full, split.test);
  if (cell.rate > 0.0)
    train_set = inject_noise(train_set, {cell.rate, derive_seed(res.cell_seed, 3)});

  TrainConfig cfg = spec.base;
  cfg.variant = cell.variant;
  cfg.use_ccd = cell.ccd;
  cfg.loss.margin = cell.margin;
  cfg.loss.temperature = cell.tau;
  cfg.select_ratio.value = cell.ratio;
  cfg.encoder.raw_dim = dc.raw_dim;
  cfg.seed = derive_seed(res.cell_seed, 4);

  const std::filesystem::path dir =
      std::filesystem::path(spec.out_dir) / "cells" / detail::cell_dir_name(cell);
  std::filesystem::create_directories(dir);
  save_dataset(train_set, (dir / "train_data.txt").string());
  save_dataset(val_set, (dir / "val_data.txt").string());
  save_dataset(test_set, (dir / "test_data.txt").string());

  const TrainState state = train(train_set, &val_set, cfg);
  save_checkpoint(state.params, cfg.select_ratio,
                  (dir / "checkpoint_final.txt").string());
  save_checkpoint(state.best_params, cfg.select_ratio,
                  (dir / "checkpoint_best.txt").string());
  detail::write_history_csv((dir / "history.csv").string(), state.history);
  detail::write_audit_csv((dir / "audit.csv").string(), state.audit);

  res.final_metrics = evaluate_dataset(state.params, cfg.select_ratio,
                                       test_set, &res.final_similarity_std);
  res.best_metrics =
      evaluate_dataset(state.best_params, cfg.select_ratio, test_set);
  write_metrics_json((dir / "metrics.json").string(), res.final_metrics,
                     res.final_similarity_std);
  res.division_precision = state.history.back().division_precision;
  res.division_recall = state.history.back().division_recall;
  return res;
}

inline const char* kSummaryHeader =
    "status,rate,variant,ccd,m,tau,R,seed,rank1,rank5,rank10,mAP,mINP,"
    "best_rank1,best_rank5,best_rank10,best_mAP,best_mINP,"
    "division_precision,division_recall,final_similarity_std";

inline std::vector<std::string> summary_row(const CellResult& r) {
  using detail::format_double;
  const RetrievalResult& f = r.final_metrics;
  const RetrievalResult& b = r.best_metrics;
  return {r.status,
          format_double(r.cell.rate),
          to_string(r.cell.variant),
          r.cell.ccd ? "on" : "off",
          format_double(r.cell.margin),
          format_double(r.cell.tau),
          format_double(r.cell.ratio),
          std::to_string(r.cell_seed),
          format_double(f.rank1),
          format_double(f.rank5),
          format_double(f.rank10),
          format_double(f.map),
          format_double(f.minp),
          format_double(b.rank1),
          format_double(b.rank5),
          format_double(b.rank10),
          format_double(b.map),
          format_double(b.minp),
          format_double(r.division_precision),
          format_double(r.division_recall),
          format_double(r.final_similarity_std)};
}

struct ExperimentResult {
  std::vector<CellResult> cells;
  std::string summary_path;
  bool all_ok = true;
};

inline int experiment_thread_cap() {
  const char* env = std::getenv("RML_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  const int v = std::atoi(env);
  return v > 0 ? v : 1;
}

/// Runs every cell (optionally in parallel, capped by RML_THREADS) and
/// assembles summary.csv in grid order. Cell failures are recorded in the
/// status column; remaining cells still run.
inline ExperimentResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  std::filesystem::create_directories(spec.out_dir);
  const std::vector<CellSpec> cells = detail::enumerate_cells(spec);
  std::vector<CellResult> results(cells.size());

  const int threads =
      std::min<int>(experiment_thread_cap(), static_cast<int>(cells.size()));
  auto work = [&](const CellSpec& c) {
    try {
      results[c.index] = run_cell(spec, c);
    } catch (const std::exception& e) {
      results[c.index].cell = c;
      results[c.index].status = std::string("error:") + e.what();
    }
  };
  if (threads <= 1) {
    for (const CellSpec& c : cells) work(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < cells.size();
             i = next.fetch_add(1))
          work(cells[i]);
      });
    for (std::thread& t : pool) t.join();
  }

  ExperimentResult out;
  out.cells = std::move(results);
  out.summary_path =
      (std::filesystem::path(spec.out_dir) / "summary.csv").string();
  CsvTable table;
  table.header = [] {
    auto f = detail::split(kSummaryHeader, ',');
    return std::vector<std::string>(f.begin(), f.end());
  }();
  for (const CellResult& r : out.cells) {
    table.rows.push_back(summary_row(r));
    out.all_ok = out.all_ok && r.status == "ok";
  }
  write_csv(out.summary_path, table);
  return out;
}

// ---------------------------------------------------------------------------
// Sweep report: pivots a summary table into plot-ready (x, series, value)
// rows for one swept hyperparameter. Every column after `seed` counts as a
// metric; series names are "<variant>[+noccd]/<metric>".
// ---------------------------------------------------------------------------

struct LongRow {
  double x = 0.0;
  std::string series;
  std::string value;
};

inline std::vector<LongRow> sweep_report(const CsvTable& summary,
                                         const std::string& sweep_param) {
  static const std::map<std::string, std::string> param_col = {
      {"m", "m"}, {"tau", "tau"}, {"ratio", "R"}, {"R", "R"}};
  const auto it = param_col.find(sweep_param);
  if (it == param_col.end())
    throw config_error("unknown sweep parameter: " + sweep_param +
                       " (expected m, tau or ratio)");
  const int xcol = summary.column(it->second);
  const int variant_col = summary.column("variant");
  const int ccd_col = summary.column("ccd");
  const int seed_col = summary.column("seed");

  std::vector<LongRow> rows;
  for (const auto& row : summary.rows) {
    const double x = detail::parse_double(row[xcol], 0);
    std::string prefix = row[variant_col];
    if (row[ccd_col] == "off") prefix += "+noccd";
    for (std::size_t c = seed_col + 1; c < summary.header.size(); ++c)
      rows.push_back({x, prefix + "/" + summary.header[c], row[c]});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const LongRow& a, const LongRow& b) {
                     if (a.x != b.x) return a.x < b.x;
                     return a.series < b.series;
                   });
  return rows;
}

inline void write_long_csv(const std::string& path,
                           const std::vector<LongRow>& rows) {
  std::ofstream f(path);
  if (!f) throw io_error("cannot open for writing: " + path);
  f << "x,series,value\n";
  for (const LongRow& r : rows)
    f << detail::format_double(r.x) << ',' << r.series << ',' << r.value
      << '\n';
}

/// Inverse of sweep_report for tables whose (x, series) keys are unique;
/// exists so the pivot can be checked lossless.
inline std::map<std::pair<double, std::string>, std::string> sweep_unpivot(
    const std::vector<LongRow>& rows) {
  std::map<std::pair<double, std::string>, std::string> out;
  for (const LongRow& r : rows) {
    auto [pos, inserted] = out.emplace(std::make_pair(r.x, r.series), r.value);
    if (!inserted)
      throw contract_error("sweep_unpivot: duplicate (x, series) key");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Spec files: flat key=value lines, '#' comments. CLI flags override.
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> parse_spec_file(
    const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\r'))
      line.pop_back();
    std::size_t start = 0;
    while (start < line.size() && line[start] == ' ') ++start;
    if (start == line.size()) continue;
    const auto eq = line.find('=', start);
    if (eq == std::string::npos)
      throw io_error("spec parse error: missing '=' at line " +
                     std::to_string(line_no));
    kv[line.substr(start, eq - start)] = line.substr(eq + 1);
  }
  return kv;
}

namespace detail {

inline std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  for (auto part : split(s, ','))
    if (!part.empty()) out.push_back(parse_double(part, 0));
  return out;
}

}  // namespace detail

/// Builds an ExperimentSpec from key=value settings; unknown keys error.
inline ExperimentSpec make_experiment_spec(
    const std::map<std::string, std::string>& kv) {
  ExperimentSpec spec;
  bool hidden_set = false;
  for (const auto& [key, value] : kv) {
    if (key == "name") spec.name = value;
    else if (key == "identities")
      spec.data.num_identities = static_cast<int>(detail::parse_int(value, 0));
    else if (key == "images_per_id")
      spec.data.images_per_identity =
          static_cast<int>(detail::parse_int(value, 0));
    else if (key == "captions_per_image")
      spec.data.captions_per_image =
          static_cast<int>(detail::parse_int(value, 0));
    else if (key == "dim")
      spec.data.raw_dim = static_cast<int>(detail::parse_int(value, 0));
    else if (key == "noise_std")
      spec.data.intra_identity_noise_std = detail::parse_double(value, 0);
    else if (key == "shared_scale")
      spec.data.prototype_shared_scale = detail::parse_double(value, 0);
    else if (key == "noise_rates")
      spec.noise_rates = detail::parse_double_list(value);
    else if (key == "variants") {
      spec.variants.clear();
      for (auto part : detail::split(value, ','))
        spec.variants.push_back(loss_variant_from_string(std::string(part)));
    } else if (key == "ccd") {
      spec.ccd_modes.clear();
      for (auto part : detail::split(value, ',')) {
        if (part == "on") spec.ccd_modes.push_back(1);
        else if (part == "off") spec.ccd_modes.push_back(0);
        else throw config_error("ccd must be on/off");
      }
    } else if (key == "margins")
      spec.margins = detail::parse_double_list(value);
    else if (key == "taus")
      spec.taus = detail::parse_double_list(value);
    else if (key == "ratios")
      spec.ratios = detail::parse_double_list(value);
    else if (key == "repetitions")
      spec.repetitions = static_cast<int>(detail::parse_int(value, 0));
    else if (key == "seed")
      spec.seed = static_cast<std::uint64_t>(detail::parse_int(value, 0));
    else if (key == "out_dir")
      spec.out_dir = value;
    else if (key == "val_fraction")
      spec.val_fraction = detail::parse_double(value, 0);
    else if (key == "test_fraction")
      spec.test_fraction = detail::parse_double(value, 0);
    else if (key == "epochs")
      spec.base.epochs = static_cast<int>(detail::parse_int(value, 0));
    else if (key == "batch_size")
      spec.base.batch_size = static_cast<int>(detail::parse_int(value, 0));
    else if (key == "lr")
      spec.base.learning_rate = detail::parse_double(value, 0);
    else if (key == "lr_schedule") {
      if (value == "constant") spec.base.schedule = LrSchedule::constant;
      else if (value == "cosine") spec.base.schedule = LrSchedule::cosine_warmup;
      else throw config_error("lr_schedule must be constant or cosine");
    } else if (key == "lr_warmup_epochs")
      spec.base.lr_warmup_epochs =
          static_cast<int>(detail::parse_int(value, 0));
    else if (key == "warmup_epochs")
      spec.base.warmup_epochs = static_cast<int>(detail::parse_int(value, 0));
    else if (key == "embed_dim")
      spec.base.encoder.embed_dim =
          static_cast<int>(detail::parse_int(value, 0));
    else if (key == "tokens")
      spec.base.encoder.n_tokens = static_cast<int>(detail::parse_int(value, 0));
    else if (key == "hidden_dim") {
      spec.base.encoder.hidden_dim =
          static_cast<int>(detail::parse_int(value, 0));
      hidden_set = true;
    } else if (key == "reduction") {
      if (value == "sum") spec.base.reduction = Reduction::sum;
      else if (value == "mean") spec.base.reduction = Reduction::mean;
      else throw config_error("reduction must be sum or mean");
    } else
      throw config_error("unknown spec key: " + key);
  }
  spec.base.encoder.raw_dim = spec.data.raw_dim;
  if (!hidden_set) spec.base.encoder.hidden_dim = 2 * spec.base.encoder.embed_dim;
  return spec;
}

}  // namespace rml
