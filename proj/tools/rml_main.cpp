// Command-line front end: dataset generation, training, evaluation, grid
// experiments and sweep reports. See README.md for the file formats.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rml/csv.hpp"
#include "rml/dataset.hpp"
#include "rml/eval.hpp"
#include "rml/experiment.hpp"
#include "rml/trainer.hpp"

namespace {

struct TrainArgs {
  std::string data_path;
  std::string out_dir = "train_out";
  double noise_rate = 0.0;
  double val_fraction = 0.2;
  std::string loss = "tal";
  std::string ccd = "on";
  std::string schedule = "cosine";
  std::string reduction = "sum";
  rml::TrainConfig cfg;
};

rml::TrainConfig finalize_train_config(TrainArgs& a, int raw_dim) {
  if (a.cfg.encoder.hidden_dim == 0)
    a.cfg.encoder.hidden_dim = 2 * a.cfg.encoder.embed_dim;
  a.cfg.variant = rml::loss_variant_from_string(a.loss);
  if (a.ccd == "on") a.cfg.use_ccd = true;
  else if (a.ccd == "off") a.cfg.use_ccd = false;
  else throw rml::config_error("--ccd must be on or off");
  if (a.schedule == "cosine") a.cfg.schedule = rml::LrSchedule::cosine_warmup;
  else if (a.schedule == "constant") a.cfg.schedule = rml::LrSchedule::constant;
  else throw rml::config_error("--lr-schedule must be cosine or constant");
  if (a.reduction == "sum") a.cfg.reduction = rml::Reduction::sum;
  else if (a.reduction == "mean") a.cfg.reduction = rml::Reduction::mean;
  else throw rml::config_error("--reduction must be sum or mean");
  a.cfg.encoder.raw_dim = raw_dim;
  return a.cfg;
}

int cmd_train(TrainArgs& a) {
  const rml::PairDataset full = rml::load_dataset(a.data_path);
  const rml::SplitIndices split = rml::split_indices(
      full.size(), a.val_fraction, 0.0, rml::derive_seed(a.cfg.seed, 0x51));
  rml::PairDataset train_set = rml::subset(full, split.train);
  const rml::PairDataset val_set = rml::subset(full, split.val);
  if (a.noise_rate > 0.0)
    train_set = rml::inject_noise(
        train_set, {a.noise_rate, rml::derive_seed(a.cfg.seed, 0x52)});

  const rml::TrainConfig cfg = finalize_train_config(a, full.raw_dim);
  const rml::TrainState state =
      rml::train(train_set, val_set.empty() ? nullptr : &val_set, cfg);

  std::filesystem::create_directories(a.out_dir);
  const std::filesystem::path dir(a.out_dir);
  rml::save_dataset(train_set, (dir / "train_data.txt").string());
  if (!val_set.empty())
    rml::save_dataset(val_set, (dir / "val_data.txt").string());
  rml::save_checkpoint(state.params, cfg.select_ratio,
                       (dir / "checkpoint_final.txt").string());
  rml::save_checkpoint(state.best_params, cfg.select_ratio,
                       (dir / "checkpoint_best.txt").string());
  rml::detail::write_history_csv((dir / "history.csv").string(), state.history);
  rml::detail::write_audit_csv((dir / "audit.csv").string(), state.audit);

  const rml::EpochStats& last = state.history.back();
  std::cout << "trained " << state.completed_epochs << " epochs; final loss "
            << last.mean_loss;
  if (last.has_val)
    std::cout << "; val rank1 " << last.val.rank1 << " (best epoch "
              << state.best_epoch << ": " << state.best_val_rank1 << ")";
  std::cout << "\nartifacts in " << a.out_dir << std::endl;
  return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& data,
                 const std::string& out) {
  const rml::Checkpoint ck = rml::load_checkpoint(checkpoint);
  const rml::PairDataset ds = rml::load_dataset(data);
  double sim_std = 0.0;
  const rml::RetrievalResult r =
      rml::evaluate_dataset(ck.params, ck.ratio, ds, &sim_std);
  rml::write_metrics_json(out, r, sim_std);
  std::cout << "rank1 " << r.rank1 << "  rank5 " << r.rank5 << "  rank10 "
            << r.rank10 << "  mAP " << r.map << "  mINP " << r.minp
            << "  (queries " << r.num_queries << ", gallery " << r.num_gallery
            << ", similarity std " << sim_std << ")\n"
            << "metrics written to " << out << std::endl;
  return 0;
}

int cmd_experiment(const std::string& spec_path,
                   const std::vector<std::string>& overrides,
                   const std::string& out_dir_override) {
  std::map<std::string, std::string> kv;
  if (!spec_path.empty()) kv = rml::parse_spec_file(spec_path);
  for (const std::string& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos)
      throw rml::config_error("--set expects key=value, got: " + ov);
    kv[ov.substr(0, eq)] = ov.substr(eq + 1);
  }
  rml::ExperimentSpec spec = rml::make_experiment_spec(kv);
  if (!out_dir_override.empty()) spec.out_dir = out_dir_override;
  const rml::ExperimentResult res = rml::run_experiment(spec);
  int failures = 0;
  for (const rml::CellResult& c : res.cells) {
    std::cout << rml::detail::cell_dir_name(c.cell) << ": " << c.status;
    if (c.status == "ok")
      std::cout << "  rank1 " << c.final_metrics.rank1 << "  mAP "
                << c.final_metrics.map << "  sim_std "
                << c.final_similarity_std;
    std::cout << '\n';
    failures += c.status != "ok";
  }
  std::cout << "summary: " << res.summary_path << std::endl;
  return failures == 0 ? 0 : 1;
}

int cmd_report(const std::string& summary, const std::string& sweep,
               const std::string& out) {
  const rml::CsvTable table = rml::read_csv(summary);
  const std::vector<rml::LongRow> rows = rml::sweep_report(table, sweep);
  rml::write_long_csv(out, rows);
  std::cout << rows.size() << " rows written to " << out << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rml: robust cross-modal metric learning on synthetic data"};
  app.require_subcommand(1);

  // gen-data
  rml::DatasetConfig gen_cfg;
  double gen_noise_rate = 0.0;
  std::string gen_out = "data.txt";
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--identities", gen_cfg.num_identities, "number of identities");
  gen->add_option("--images-per-id", gen_cfg.images_per_identity,
                  "images per identity");
  gen->add_option("--captions-per-image", gen_cfg.captions_per_image,
                  "captions per image");
  gen->add_option("--dim", gen_cfg.raw_dim, "raw feature dimension");
  gen->add_option("--noise-std", gen_cfg.intra_identity_noise_std,
                  "within-identity feature noise");
  gen->add_option("--shared-scale", gen_cfg.prototype_shared_scale,
                  "crowding: scale of the base direction shared by all "
                  "identity prototypes");
  gen->add_option("--noise-rate", gen_noise_rate,
                  "fraction of pairs to corrupt");
  gen->add_option("--seed", gen_cfg.seed, "seed");
  gen->add_option("--out", gen_out, "output file")->required();

  // train
  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train on a dataset file");
  tr->add_option("--data", ta.data_path, "dataset file")->required();
  tr->add_option("--noise-rate", ta.noise_rate,
                 "corrupt this fraction of the training split");
  tr->add_option("--epochs", ta.cfg.epochs, "epochs");
  tr->add_option("--batch-size", ta.cfg.batch_size, "batch size");
  tr->add_option("--margin", ta.cfg.loss.margin, "loss margin");
  tr->add_option("--tau", ta.cfg.loss.temperature, "loss temperature");
  tr->add_option("--select-ratio", ta.cfg.select_ratio.value,
                 "token selection ratio");
  tr->add_option("--loss", ta.loss, "tal | trl | trls");
  tr->add_option("--seed", ta.cfg.seed, "seed");
  tr->add_option("--out-dir", ta.out_dir, "output directory");
  tr->add_option("--lr", ta.cfg.learning_rate, "learning rate");
  tr->add_option("--lr-schedule", ta.schedule, "cosine | constant");
  tr->add_option("--lr-warmup-epochs", ta.cfg.lr_warmup_epochs,
                 "linear lr warmup epochs");
  tr->add_option("--warmup-epochs", ta.cfg.warmup_epochs,
                 "epochs before division starts");
  tr->add_option("--ccd", ta.ccd, "on | off");
  tr->add_option("--val-fraction", ta.val_fraction, "held-out fraction");
  tr->add_option("--embed-dim", ta.cfg.encoder.embed_dim, "embedding dim");
  tr->add_option("--tokens", ta.cfg.encoder.n_tokens, "tokens per item");
  ta.cfg.encoder.hidden_dim = 0;  // 0 = derive as 2 * embed_dim
  tr->add_option("--hidden-dim", ta.cfg.encoder.hidden_dim,
                 "selection-head hidden dim (default: 2 * embed-dim)");
  tr->add_option("--reduction", ta.reduction, "sum | mean");

  // evaluate
  std::string ev_checkpoint, ev_data, ev_out = "metrics.json";
  auto* ev = app.add_subcommand("evaluate", "retrieval metrics on clean pairs");
  ev->add_option("--checkpoint", ev_checkpoint, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "dataset file")->required();
  ev->add_option("--out", ev_out, "metrics json path");

  // experiment
  std::string ex_spec, ex_out_dir;
  std::vector<std::string> ex_sets;
  auto* ex = app.add_subcommand("experiment", "run a seeded experiment grid");
  ex->add_option("--spec", ex_spec, "key=value spec file");
  ex->add_option("--set", ex_sets, "override spec entries (key=value)");
  ex->add_option("--out-dir", ex_out_dir, "override output directory");

  // report
  std::string rp_summary, rp_sweep = "tau", rp_out = "report.csv";
  auto* rp = app.add_subcommand("report", "pivot a summary into sweep curves");
  rp->add_option("--summary", rp_summary, "summary.csv path")->required();
  rp->add_option("--sweep", rp_sweep, "m | tau | ratio");
  rp->add_option("--out", rp_out, "long-format csv path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      rml::PairDataset ds = rml::generate(gen_cfg);
      if (gen_noise_rate > 0.0)
        ds = rml::inject_noise(ds, {gen_noise_rate, rml::derive_seed(gen_cfg.seed, 0x4E)});
      rml::save_dataset(ds, gen_out);
      std::cout << ds.size() << " pairs written to " << gen_out << std::endl;
      return 0;
    }
    if (tr->parsed()) return cmd_train(ta);
    if (ev->parsed()) return cmd_evaluate(ev_checkpoint, ev_data, ev_out);
    if (ex->parsed()) return cmd_experiment(ex_spec, ex_sets, ex_out_dir);
    if (rp->parsed()) return cmd_report(rp_summary, rp_sweep, rp_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
