#include "dpe/cli.hpp"

#include <cmath>
#include <filesystem>
#include <iostream>
#include <limits>
#include <sstream>

#include "CLI11.hpp"
#include "dpe/active_learning.hpp"
#include "dpe/checkpoint.hpp"
#include "dpe/data.hpp"
#include "dpe/error.hpp"
#include "dpe/io.hpp"
#include "dpe/random.hpp"

namespace dpe {

namespace {

namespace fs = std::filesystem;

struct DataOptions {
  std::string kind = "blobs";
  std::size_t n = 3000;
  std::size_t classes = 4;
  std::size_t dim = 2;
  double spread = 3.4;
  double noise = 0.1;
  std::uint64_t data_seed = 9;
  std::string csv;
  std::string label_column = "label";
  std::string idx_images;
  std::string idx_labels;
  double val_fraction = 1.0 / 3.0;
};

struct ModelOptions {
  std::string layers = "dense:32,relu,dense:32,relu";
  std::size_t ensemble_size = 8;
  std::string beta = "auto";
  double beta_scale = 1.0;
};

struct RunConfig {
  DataOptions data;
  ModelOptions model;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::string out = "out";
  // active-learn
  std::vector<std::string> strategies{"random", "ensemble", "dpe"};
  std::size_t n_seeds = 3;
  double seed_fraction = 0.04;
  std::vector<double> fractions{0.08, 0.16, 0.32};
  double ensemble_weight_decay = 5e-4;
  unsigned threads = 1;
  // evaluate
  std::string checkpoint;
  std::string split_name = "val";
};

const std::vector<std::string> kGenerators{"blobs", "moons", "spirals"};

Dataset generate(const DataOptions& d) {
  if (d.kind == "blobs") return gen_blobs(d.n, d.classes, d.dim, d.spread, d.data_seed);
  if (d.kind == "moons") return gen_moons(d.n, d.noise, d.data_seed);
  if (d.kind == "spirals") return gen_spirals(d.n, d.noise, d.data_seed);
  throw ConfigError("unknown generator '" + d.kind +
                    "' (valid: blobs, moons, spirals)");
}

Dataset load_data(const DataOptions& d) {
  Dataset data;
  if (d.kind == "csv") {
    if (d.csv.empty()) throw ConfigError("--csv is required for --data csv");
    data = load_csv(d.csv, d.label_column);
  } else if (d.kind == "idx") {
    if (d.idx_images.empty() || d.idx_labels.empty()) {
      throw ConfigError("--idx-images and --idx-labels are required for --data idx");
    }
    data = load_idx_images(d.idx_images, d.idx_labels);
  } else if (d.kind == "blobs" || d.kind == "moons" || d.kind == "spirals") {
    data = generate(d);
  } else {
    throw ConfigError("unknown data kind '" + d.kind +
                      "' (valid: blobs, moons, spirals, csv, idx)");
  }
  return split(std::move(data), d.val_fraction, mix_seed(d.data_seed, 99));
}

Architecture build_architecture(const ModelOptions& m, const Dataset& data) {
  std::string text = m.layers;
  if (!text.empty()) text += ',';
  text += "dense:" + std::to_string(data.n_classes) + ",softmax";
  return parse_architecture(text, data.sample_shape());
}

std::optional<double> fixed_beta(const ModelOptions& m) {
  if (m.beta == "auto") return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(m.beta, &used);
    if (used != m.beta.size() || !(v >= 0.0)) throw std::invalid_argument("");
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError("--beta must be 'auto' or a number >= 0, got '" + m.beta + "'");
  }
}

double resolve_beta(const ModelOptions& m, std::size_t n_labeled) {
  if (auto b = fixed_beta(m)) return *b;
  if (m.ensemble_size < 2) return 0.0;
  return m.beta_scale / static_cast<double>(n_labeled);
}

std::string format_optional(std::optional<double> v) {
  return v ? format_double(*v) : "";
}

// Resolved settings of the command that ran, re-loadable with --config.
void write_run_config(const CLI::App& app, const std::string& command,
                      const fs::path& out) {
  std::istringstream all(app.config_to_str(true, false));
  std::string kept, line;
  const std::string prefix = command + ".";
  while (std::getline(all, line)) {
    if (line.starts_with(prefix)) kept += line + "\n";
  }
  write_file_atomic(out / "config.toml", kept);
}

int cmd_train(const RunConfig& cfg, const CLI::App& app) {
  const Dataset data = load_data(cfg.data);
  const Architecture arch = build_architecture(cfg.model, data);
  const Standardizer st = Standardizer::fit(data.features, data.train_idx);
  Samples train_set = data.subset(data.train_idx);
  train_set.x = st.apply(train_set.x);
  Samples val_set = data.subset(data.val_idx);
  val_set.x = st.apply(val_set.x);

  const double beta = resolve_beta(cfg.model, train_set.size());
  EnsembleModel model = init_ensemble(arch, cfg.model.ensemble_size, beta, cfg.seed);
  TrainConfig tc = cfg.train;
  tc.seed = mix_seed(cfg.seed, 1);
  tc.beta = beta;
  const TrainReport report = train(model, train_set, tc, &val_set);

  CsvWriter csv({"epoch", "sum_ce", "omega", "beta_omega", "train_acc", "val_acc"});
  const bool has_omega = model.size() >= 2;
  for (const EpochRecord& r : report.epochs) {
    csv.row({std::to_string(r.epoch), format_double(r.sum_ce),
             has_omega ? format_double(r.omega) : "nan",
             has_omega ? format_double(r.beta_omega) : "nan",
             format_double(r.train_accuracy), format_optional(r.val_accuracy)});
  }
  const fs::path out(cfg.out);
  fs::create_directories(out);
  save_checkpoint({model, st}, out / "model.dpe");
  write_file_atomic(out / "train.csv", csv.str());
  write_run_config(app, "train", out);
  const EpochRecord& last = report.epochs.back();
  std::cout << "trained " << model.size() << " members, beta="
            << format_double(beta) << ", train_acc="
            << format_double(last.train_accuracy)
            << ", val_acc=" << format_optional(last.val_accuracy) << "\n";
  return kExitOk;
}

int cmd_active_learn(const RunConfig& cfg, const CLI::App& app) {
  const Dataset data = load_data(cfg.data);
  ExperimentConfig ex;
  ex.arch = build_architecture(cfg.model, data);
  ex.ensemble_size = cfg.model.ensemble_size;
  ex.train = cfg.train;
  ex.beta_scale = cfg.model.beta_scale;
  ex.fixed_beta = fixed_beta(cfg.model);
  ex.ensemble_weight_decay = cfg.ensemble_weight_decay;
  ex.schedule = {cfg.seed_fraction, cfg.fractions};
  ex.threads = cfg.threads;
  ex.schedule.validate();

  std::vector<Strategy> strategies;
  for (const auto& s : cfg.strategies) strategies.push_back(parse_strategy(s));
  if (strategies.empty()) {
    strategies = {Strategy::Random, Strategy::EntropyEnsemble, Strategy::EntropyDPE};
  }
  const Comparison cmp = compare_strategies(data, ex, strategies, cfg.n_seeds, cfg.seed);

  CsvWriter rounds({"strategy", "seed", "round", "labeled_fraction", "labeled_count",
                    "val_accuracy", "val_nll", "mean_acquired_entropy"});
  for (const RoundReport& r : cmp.rounds) {
    rounds.row({std::string(to_string(r.strategy)), std::to_string(r.seed),
                std::to_string(r.round), format_double(r.labeled_fraction),
                std::to_string(r.labeled_count), format_double(r.val_accuracy),
                format_double(r.val_nll),
                std::isnan(r.mean_acquired_entropy)
                    ? std::string()
                    : format_double(r.mean_acquired_entropy)});
  }
  CsvWriter summary({"strategy", "round", "labeled_fraction", "labeled_count",
                     "mean_accuracy", "std_accuracy", "n_seeds", "upper_bound",
                     "relative_pct", "cell"});
  for (const SummaryRow& s : cmp.summary) {
    char cell[64];
    std::snprintf(cell, sizeof cell, "%.2f (%.2f)", 100.0 * s.mean_accuracy, s.relative);
    summary.row({std::string(to_string(s.strategy)), std::to_string(s.round),
                 format_double(s.labeled_fraction), std::to_string(s.labeled_count),
                 format_double(s.mean_accuracy), format_double(s.std_accuracy),
                 std::to_string(cfg.n_seeds), format_double(s.upper_bound),
                 format_double(s.relative), cell});
  }
  const fs::path out(cfg.out);
  fs::create_directories(out);
  write_file_atomic(out / "rounds.csv", rounds.str());
  write_file_atomic(out / "summary.csv", summary.str());
  write_run_config(app, "active-learn", out);
  for (const SummaryRow& s : cmp.summary) {
    char line[128];
    std::snprintf(line, sizeof line, "%-9s round %zu  %5.1f%%  acc %.4f +- %.4f  rel %.2f\n",
                  std::string(to_string(s.strategy)).c_str(), s.round,
                  100.0 * s.labeled_fraction, s.mean_accuracy, s.std_accuracy,
                  s.relative);
    std::cout << line;
  }
  return kExitOk;
}

int cmd_evaluate(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const Checkpoint ckpt = load_checkpoint(cfg.checkpoint);
  const Dataset data = load_data(cfg.data);
  std::vector<std::size_t> rows;
  if (cfg.split_name == "val") {
    rows = data.val_idx;
  } else if (cfg.split_name == "train") {
    rows = data.train_idx;
  } else if (cfg.split_name == "all") {
    rows.resize(data.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
  } else {
    throw ConfigError("--split must be val, train or all");
  }
  Samples s = data.subset(rows);
  if (ckpt.standardizer) s.x = ckpt.standardizer->apply(s.x);
  const Tensor probs = predict_mean(ckpt.model, s.x);
  const double acc = accuracy(probs, s.y);
  const double nll = mean_nll(probs, s.y);
  double entropy = 0.0;
  const std::size_t k = probs.dim(1);
  for (std::size_t i = 0; i < s.size(); ++i) {
    entropy += prediction_entropy(
        std::span<const double>(probs.data().data() + i * k, k));
  }
  entropy /= static_cast<double>(s.size());

  CsvWriter csv({"split", "count", "accuracy", "nll", "mean_entropy"});
  csv.row({cfg.split_name, std::to_string(s.size()), format_double(acc),
           format_double(nll), format_double(entropy)});
  write_file_atomic(fs::path(cfg.out) / "eval.csv", csv.str());
  std::cout << "accuracy=" << format_double(acc) << " nll=" << format_double(nll)
            << " mean_entropy=" << format_double(entropy) << "\n";
  return kExitOk;
}

int cmd_gen_data(const RunConfig& cfg) {
  const Dataset data = generate(cfg.data);
  write_file_atomic(cfg.out, to_csv(data));
  std::cout << "wrote " << data.size() << " rows to " << cfg.out << "\n";
  return kExitOk;
}

void add_data_options(CLI::App& cmd, DataOptions& d, bool files) {
  if (files) {
    cmd.add_option("--data", d.kind, "blobs, moons, spirals, csv or idx")
        ->capture_default_str();
  }
  cmd.add_option("--n", d.n, "Generated sample count")->capture_default_str();
  cmd.add_option("--classes", d.classes, "Blob classes")->capture_default_str();
  cmd.add_option("--dim", d.dim, "Blob dimension")->capture_default_str();
  cmd.add_option("--spread", d.spread, "Blob standard deviation")->capture_default_str();
  cmd.add_option("--noise", d.noise, "Moons/spirals noise")->capture_default_str();
  cmd.add_option("--data-seed", d.data_seed, "Generator and split seed")
      ->capture_default_str();
  if (!files) return;
  cmd.add_option("--csv", d.csv, "CSV dataset path");
  cmd.add_option("--label-column", d.label_column)->capture_default_str();
  cmd.add_option("--idx-images", d.idx_images, "IDX image file");
  cmd.add_option("--idx-labels", d.idx_labels, "IDX label file");
  cmd.add_option("--val-fraction", d.val_fraction)
      ->default_str(format_double(d.val_fraction));
}

void add_model_options(CLI::App& cmd, RunConfig& c) {
  cmd.add_option("--layers", c.model.layers,
                 "Hidden layers; an output dense layer is appended")
      ->capture_default_str();
  cmd.add_option("--ensemble-size,-E", c.model.ensemble_size)->capture_default_str();
  cmd.add_option("--beta", c.model.beta, "'auto' (= beta-scale / labeled count) or a value")
      ->capture_default_str();
  cmd.add_option("--beta-scale", c.model.beta_scale)->capture_default_str();
  cmd.add_option("--lr", c.train.lr)->capture_default_str();
  cmd.add_option("--momentum", c.train.momentum)->capture_default_str();
  cmd.add_option("--batch-size", c.train.batch_size)->capture_default_str();
  cmd.add_option("--epochs", c.train.epochs)->capture_default_str();
  cmd.add_option("--clip-norm", c.train.clip_norm, "Per-member gradient norm cap, 0 = off")
      ->capture_default_str();
  cmd.add_option("--seed", c.seed)->capture_default_str();
  cmd.add_option("--out", c.out, "Output directory")->capture_default_str();
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  RunConfig cfg;
  cfg.train.lr = 0.02;
  cfg.train.momentum = 0.9;
  cfg.train.batch_size = 32;
  cfg.train.epochs = 60;

  CLI::App app{"Deep probabilistic ensembles: training and active learning", "dpe"};
  app.set_config("--config", "", "TOML/INI file with command sections");
  app.require_subcommand(1);
  // Lets --config follow the subcommand name.
  app.fallthrough();

  auto* train_cmd = app.add_subcommand("train", "Train one ensemble");
  add_data_options(*train_cmd, cfg.data, true);
  add_model_options(*train_cmd, cfg);
  train_cmd->add_option("--weight-decay", cfg.train.weight_decay)->capture_default_str();

  auto* al_cmd = app.add_subcommand("active-learn", "Compare acquisition strategies");
  add_data_options(*al_cmd, cfg.data, true);
  add_model_options(*al_cmd, cfg);
  al_cmd->add_option("--strategy", cfg.strategies, "random, ensemble or dpe (repeatable)")
      ->capture_default_str();
  al_cmd->add_option("--n-seeds", cfg.n_seeds)->capture_default_str();
  al_cmd->add_option("--seed-fraction", cfg.seed_fraction)->capture_default_str();
  al_cmd->add_option("--fractions", cfg.fractions)->delimiter(',')->capture_default_str();
  al_cmd->add_option("--ensemble-weight-decay", cfg.ensemble_weight_decay)
      ->capture_default_str();
  al_cmd->add_option("--threads", cfg.threads)->capture_default_str();

  auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  add_data_options(*eval_cmd, cfg.data, true);
  eval_cmd->add_option("--checkpoint", cfg.checkpoint)->required();
  eval_cmd->add_option("--split", cfg.split_name, "val, train or all")->capture_default_str();
  eval_cmd->add_option("--out", cfg.out)->capture_default_str();

  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic dataset as CSV");
  add_data_options(*gen_cmd, cfg.data, false);
  gen_cmd->add_option("--kind", cfg.data.kind, "blobs, moons or spirals")
      ->capture_default_str();
  gen_cmd->add_option("--out", cfg.out, "Output CSV path")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(cfg, app);
    if (al_cmd->parsed()) return cmd_active_learn(cfg, app);
    if (eval_cmd->parsed()) return cmd_evaluate(cfg);
    if (gen_cmd->parsed()) return cmd_gen_data(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace dpe
