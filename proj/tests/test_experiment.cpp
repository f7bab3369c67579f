#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "rml/experiment.hpp"

using namespace rml;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

ExperimentSpec small_spec(const std::string& out_dir) {
  ExperimentSpec spec;
  spec.name = "unit";
  spec.data.num_identities = 10;
  spec.data.images_per_identity = 2;
  spec.data.captions_per_image = 1;
  spec.data.raw_dim = 10;
  spec.data.intra_identity_noise_std = 0.3;
  spec.noise_rates = {0.25};
  spec.variants = {LossVariant::tal};
  spec.repetitions = 1;
  spec.seed = 42;
  spec.out_dir = out_dir;
  spec.base.epochs = 2;
  spec.base.batch_size = 4;
  spec.base.learning_rate = 5e-3;
  spec.base.encoder = {10, 6, 4, 12};
  spec.base.select_ratio = {0.5};
  return spec;
}

}  // namespace

TEST_CASE("spec files parse key=value lines with comments") {
  const auto dir = temp_dir("rml_spec_test");
  const std::string path = (dir / "exp.cfg").string();
  {
    std::ofstream f(path);
    f << "# comment line\n"
      << "name=sweep1\n"
      << "identities=20\n"
      << "noise_rates=0.2,0.5\n"
      << "variants=tal,trls\n"
      << "taus=0.015,0.03  # trailing comment\n"
      << "seed=7\n";
  }
  const auto kv = parse_spec_file(path);
  ExperimentSpec spec = make_experiment_spec(kv);
  CHECK(spec.name == "sweep1");
  CHECK(spec.data.num_identities == 20);
  CHECK(spec.noise_rates == std::vector<double>{0.2, 0.5});
  CHECK(spec.variants.size() == 2);
  CHECK(spec.taus == std::vector<double>{0.015, 0.03});
  CHECK(spec.seed == 7);
  std::filesystem::remove_all(dir);
}

TEST_CASE("unknown spec keys and malformed lines are rejected") {
  const auto dir = temp_dir("rml_spec_bad");
  const std::string path = (dir / "bad.cfg").string();
  {
    std::ofstream f(path);
    f << "no_equals_sign_here\n";
  }
  CHECK_THROWS_AS(parse_spec_file(path), io_error);
  CHECK_THROWS_AS(make_experiment_spec({{"bogus_key", "1"}}), config_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("empty grids fail validation") {
  ExperimentSpec spec = small_spec("unused");
  spec.noise_rates.clear();
  CHECK_THROWS_AS(spec.validate(), config_error);
  spec = small_spec("unused");
  spec.repetitions = 0;
  CHECK_THROWS_AS(spec.validate(), config_error);
  spec = small_spec("unused");
  spec.noise_rates = {1.0};
  CHECK_THROWS_AS(spec.validate(), config_error);
}

TEST_CASE("a one-cell experiment writes one data row and its artifacts") {
  const auto dir = temp_dir("rml_exp_one");
  const ExperimentSpec spec = small_spec(dir.string());
  const ExperimentResult res = run_experiment(spec);
  CHECK(res.all_ok);
  REQUIRE(res.cells.size() == 1);
  CHECK(res.cells[0].status == "ok");

  const CsvTable summary = read_csv(res.summary_path);
  REQUIRE(summary.rows.size() == 1);
  CHECK(summary.header.front() == "status");
  CHECK(summary.rows[0][summary.column("status")] == "ok");
  CHECK(summary.rows[0][summary.column("variant")] == "tal");

  const auto cell_dir = dir / "cells" /
                        detail::cell_dir_name(res.cells[0].cell);
  for (const char* f :
       {"train_data.txt", "val_data.txt", "test_data.txt", "history.csv",
        "audit.csv", "checkpoint_final.txt", "checkpoint_best.txt",
        "metrics.json"})
    CHECK(std::filesystem::exists(cell_dir / f));
  std::filesystem::remove_all(dir);
}

TEST_CASE("summary metrics are re-derivable from checkpoint plus data") {
  const auto dir = temp_dir("rml_exp_rederive");
  const ExperimentSpec spec = small_spec(dir.string());
  const ExperimentResult res = run_experiment(spec);
  REQUIRE(res.all_ok);
  const auto cell_dir =
      dir / "cells" / detail::cell_dir_name(res.cells[0].cell);
  const Checkpoint ck =
      load_checkpoint((cell_dir / "checkpoint_final.txt").string());
  const PairDataset test_set =
      load_dataset((cell_dir / "test_data.txt").string());
  double sim_std = 0.0;
  const RetrievalResult m =
      evaluate_dataset(ck.params, ck.ratio, test_set, &sim_std);
  CHECK(m.rank1 == res.cells[0].final_metrics.rank1);
  CHECK(m.map == res.cells[0].final_metrics.map);
  CHECK(sim_std == res.cells[0].final_similarity_std);
  std::filesystem::remove_all(dir);
}

TEST_CASE("identical seeds give byte-identical summaries") {
  const auto dir_a = temp_dir("rml_exp_rerun_a");
  const auto dir_b = temp_dir("rml_exp_rerun_b");
  ExperimentSpec spec = small_spec(dir_a.string());
  spec.variants = {LossVariant::tal, LossVariant::trl};
  const ExperimentResult a = run_experiment(spec);
  spec.out_dir = dir_b.string();
  const ExperimentResult b = run_experiment(spec);
  CHECK(slurp(a.summary_path) == slurp(b.summary_path));
  std::filesystem::remove_all(dir_a);
  std::filesystem::remove_all(dir_b);
}

TEST_CASE("cell failures are preserved in the status column") {
  const auto dir = temp_dir("rml_exp_fail");
  ExperimentSpec spec = small_spec(dir.string());
  // a ratio keeping zero tokens fails inside the cell, not up front
  spec.ratios = {0.3, 0.05};
  const ExperimentResult res = run_experiment(spec);
  CHECK_FALSE(res.all_ok);
  REQUIRE(res.cells.size() == 2);
  CHECK(res.cells[0].status == "ok");
  CHECK(res.cells[1].status.rfind("error:", 0) == 0);
  const CsvTable summary = read_csv(res.summary_path);
  CHECK(summary.rows.size() == 2);
  std::filesystem::remove_all(dir);
}

TEST_CASE("sweep report pivots one row per metric, sorted by x") {
  CsvTable summary;
  summary.header = [] {
    auto f = detail::split(kSummaryHeader, ',');
    return std::vector<std::string>(f.begin(), f.end());
  }();
  const std::size_t metrics = summary.header.size() - 8;  // after seed column
  auto row = [&](const char* tau, const char* variant) {
    std::vector<std::string> r{"ok", "0.5", variant, "on", "0.1",
                               tau,  "0.3", "123"};
    for (std::size_t i = 0; i < metrics; ++i)
      r.push_back(std::to_string(0.01 * double(i)) );
    return r;
  };
  summary.rows.push_back(row("0.03", "tal"));
  summary.rows.push_back(row("0.015", "tal"));

  const auto rows = sweep_report(summary, "tau");
  CHECK(rows.size() == 2 * metrics);
  // ascending in x
  for (std::size_t i = 1; i < rows.size(); ++i)
    CHECK(rows[i - 1].x <= rows[i].x);
  CHECK(rows.front().x == 0.015);
  CHECK(rows.back().x == 0.03);

  // single-row summary gives exactly one long row per metric column
  CsvTable one;
  one.header = summary.header;
  one.rows.push_back(row("0.015", "trls"));
  CHECK(sweep_report(one, "tau").size() == metrics);
  CHECK(sweep_report(one, "m").size() == metrics);
  CHECK(sweep_report(one, "ratio").size() == metrics);
  CHECK_THROWS_AS(sweep_report(one, "bogus"), config_error);
}

TEST_CASE("pivot then unpivot is lossless") {
  CsvTable summary;
  summary.header = [] {
    auto f = detail::split(kSummaryHeader, ',');
    return std::vector<std::string>(f.begin(), f.end());
  }();
  SplitMix64 rng(11);
  const std::size_t metrics = summary.header.size() - 8;
  const char* taus[] = {"0.01", "0.02", "0.05"};
  const char* variants[] = {"tal", "trl"};
  for (const char* tau : taus)
    for (const char* variant : variants) {
      std::vector<std::string> r{"ok", "0.5", variant, "on", "0.1",
                                 tau,  "0.3", "9"};
      for (std::size_t i = 0; i < metrics; ++i)
        r.push_back(detail::format_double(rng.next_double()));
      summary.rows.push_back(std::move(r));
    }

  const auto rows = sweep_report(summary, "tau");
  const auto back = sweep_unpivot(rows);
  CHECK(back.size() == rows.size());
  for (const auto& r : summary.rows) {
    const double x = detail::parse_double(r[5], 0);
    for (std::size_t c = 8; c < summary.header.size(); ++c) {
      const std::string series = r[2] + "/" + summary.header[c];
      const auto it = back.find({x, series});
      REQUIRE(it != back.end());
      CHECK(it->second == r[c]);
    }
  }
}

TEST_CASE("csv parse errors carry line numbers") {
  const auto dir = temp_dir("rml_csv_bad");
  const std::string path = (dir / "bad.csv").string();
  {
    std::ofstream f(path);
    f << "a,b,c\n1,2,3\n4,5\n";
  }
  try {
    read_csv(path);
    FAIL("expected io_error");
  } catch (const io_error& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("thread cap comes from the environment") {
  // only checks the parse contract; the pool itself is exercised via
  // run_experiment in the acceptance suite
  CHECK(experiment_thread_cap() >= 1);
}

TEST_CASE("half-noise loss ablation ranks the alignment bound first") {
  // Crowded identities at 50% noise: the hardest-negative variant degrades
  // hard, the summed variant holds up, the log-sum-exp bound wins.
  const auto dir = temp_dir("rml_exp_ablation");
  ExperimentSpec spec;
  spec.name = "ablation";
  spec.data.num_identities = 100;
  spec.data.images_per_identity = 4;
  spec.data.captions_per_image = 2;
  spec.data.raw_dim = 64;
  spec.data.intra_identity_noise_std = 0.25;
  spec.data.prototype_shared_scale = 2.0;
  spec.noise_rates = {0.5};
  spec.variants = {LossVariant::tal, LossVariant::trl, LossVariant::trls};
  spec.seed = 42;
  spec.out_dir = dir.string();
  spec.base.epochs = 30;
  spec.base.batch_size = 64;
  spec.base.learning_rate = 2e-3;
  spec.base.encoder = {64, 32, 8, 64};
  spec.base.select_ratio = {0.3};
  const ExperimentResult res = run_experiment(spec);
  REQUIRE(res.all_ok);
  REQUIRE(res.cells.size() == 3);
  const CsvTable summary = read_csv(res.summary_path);
  REQUIRE(summary.rows.size() == 3);
  double tal = 0, trl = 0, trls = 0;
  const int vcol = summary.column("variant");
  const int rcol = summary.column("rank1");
  for (const auto& row : summary.rows) {
    const double r1 = detail::parse_double(row[rcol], 0);
    if (row[vcol] == "tal") tal = r1;
    else if (row[vcol] == "trl") trl = r1;
    else trls = r1;
  }
  CHECK(tal > trls);
  CHECK(tal > trl);
  std::filesystem::remove_all(dir);
}
