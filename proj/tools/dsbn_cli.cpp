// dsbn: experiment runner for domain-specific batch normalization.
//
//   dsbn train             --config exp.toml --out runs/e1
//   dsbn ablate            --config exp.toml --out runs/grid
//   dsbn multisource       --config exp.toml --out runs/ms
//   dsbn export-embeddings --checkpoint runs/e1/checkpoint.bin --config exp.toml --out emb.csv
//   dsbn eval              --checkpoint runs/e1/checkpoint.bin --config exp.toml
//
// Exit codes: 0 success, 1 other error, 2 usage or config error, 3 training failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dsbn/checkpoint.hpp"
#include "dsbn/config.hpp"
#include "dsbn/errors.hpp"
#include "dsbn/harness.hpp"

namespace fs = std::filesystem;
using namespace dsbn;

namespace {

constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitTraining = 3;

struct Options {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::string data;
  std::vector<std::uint64_t> seeds;
  std::int64_t iters = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> baselines;
};

ExperimentConfig load(const Options& o) {
  ExperimentConfig c = load_experiment_config(o.config);
  if (!o.seeds.empty()) c.seeds = o.seeds;
  if (o.iters > 0) c.iters_stage1 = c.iters_stage2 = o.iters;
  validate(c);
  return c;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

void prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
}

int cmd_train(const Options& o) {
  const ExperimentConfig c = load(o);
  const fs::path dir = o.out;
  prepare_dir(dir);
  open_out(dir / "config.resolved") << to_config_text(c);

  std::vector<RunResult> runs(c.seeds.size());
  const std::string cell = std::string(to_string(c.norm_stage1)) + "/" +
                           (c.norm_stage2 ? std::string(to_string(*c.norm_stage2)) : "none");
  parallel_for(runs.size(), [&](std::size_t i) {
    runs[i] = run_experiment(c, c.seeds[i], c.norm_stage1, c.norm_stage2, c.multi_source_mode,
                             cell);
  });

  auto metrics = open_out(dir / "metrics.jsonl");
  write_metrics_jsonl(metrics, runs);
  auto report = open_out(dir / "report.csv");
  write_report_csv(report, runs, c.data.classes);
  save_checkpoint(dir / "checkpoint.bin", runs.front().checkpoint);
  for (std::size_t i = 1; i < runs.size(); ++i)
    save_checkpoint(dir / ("checkpoint_seed" + std::to_string(runs[i].seed) + ".bin"),
                    runs[i].checkpoint);
  {
    std::mt19937_64 rng(c.seeds.front());
    const RunData data = make_run_data(c, c.multi_source_mode, rng());
    std::vector<LabeledDataset> all = data.sources;
    all.push_back(data.target);
    auto csv = open_out(dir / "data.csv");
    write_dataset_csv(csv, all);
  }
  write_report_csv(std::cout, runs, c.data.classes);
  return 0;
}

int cmd_ablate(const Options& o) {
  const ExperimentConfig c = load(o);
  std::vector<Baseline> baselines;
  for (const auto& b : o.baselines) baselines.push_back(b == "cpua" ? Baseline::kCpua : Baseline::kMstn);
  if (baselines.empty()) baselines.push_back(c.baseline);
  const fs::path dir = o.out;
  prepare_dir(dir);
  open_out(dir / "config.resolved") << to_config_text(c);
  const auto cells = run_ablation(c, baselines);
  std::vector<RunResult> runs;
  for (const auto& cell : cells) runs.insert(runs.end(), cell.runs.begin(), cell.runs.end());
  auto metrics = open_out(dir / "metrics.jsonl");
  write_metrics_jsonl(metrics, runs);
  auto table = open_out(dir / "ablation.csv");
  write_ablation_csv(table, cells);
  write_ablation_csv(std::cout, cells);
  return 0;
}

int cmd_multisource(const Options& o) {
  const ExperimentConfig c = load(o);
  const fs::path dir = o.out;
  prepare_dir(dir);
  open_out(dir / "config.resolved") << to_config_text(c);
  const auto cells = run_multisource(c);
  std::vector<RunResult> runs;
  for (const auto& cell : cells) runs.insert(runs.end(), cell.runs.begin(), cell.runs.end());
  auto metrics = open_out(dir / "metrics.jsonl");
  write_metrics_jsonl(metrics, runs);
  auto table = open_out(dir / "multisource.csv");
  write_multisource_csv(table, cells);
  write_multisource_csv(std::cout, cells);
  return 0;
}

// Datasets from --data (CSV) or regenerated from --config and --seed.
RunData dataset_for(const Options& o) {
  if (!o.data.empty()) {
    std::ifstream in(o.data);
    if (!in) throw ConfigError("cannot read " + o.data);
    auto sets = read_dataset_csv(in);
    RunData d;
    d.target = sets.back();
    sets.pop_back();
    d.sources = std::move(sets);
    return d;
  }
  if (o.config.empty()) throw ConfigError("need --config or --data");
  const ExperimentConfig c = load(o);
  std::mt19937_64 rng(o.seed);
  return make_run_data(c, c.multi_source_mode, rng());
}

int cmd_export_embeddings(const Options& o) {
  const Checkpoint ckpt = load_checkpoint(fs::path(o.checkpoint));
  const RunData data = dataset_for(o);
  if (o.out.empty() || o.out == "-") {
    write_embeddings_csv(std::cout, ckpt.model, data);
  } else {
    auto out = open_out(o.out);
    write_embeddings_csv(out, ckpt.model, data);
  }
  return 0;
}

int cmd_eval(const Options& o) {
  const Checkpoint ckpt = load_checkpoint(fs::path(o.checkpoint));
  const RunData data = dataset_for(o);
  EvalRecord rec;
  rec.seed = o.seed;
  rec.cell = ckpt.tag;
  rec.stage = "eval";
  rec.final = true;
  rec.metrics = evaluate_transductive(ckpt.model, data.target);
  std::cout << to_json_line(rec) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-specific batch normalization experiments"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* cmd, bool out_required) {
    cmd->add_option("--config", o.config, "experiment config file")->required();
    auto* out = cmd->add_option("--out", o.out, "output directory");
    if (out_required) out->required();
    cmd->add_option("--seeds", o.seeds, "override seeds (comma separated)")->delimiter(',');
    cmd->add_option("--iters", o.iters, "override iterations of both stages");
  };
  auto* train = app.add_subcommand("train", "run the configured pipeline");
  add_common(train, true);
  auto* ablate = app.add_subcommand("ablate", "BN/DSBN grid over both stages");
  add_common(ablate, true);
  ablate->add_option("--baselines", o.baselines, "mstn,cpua (default: config baseline)")
      ->delimiter(',')
      ->check(CLI::IsMember({"mstn", "cpua"}));
  auto* multi = app.add_subcommand("multisource", "single/merged/separate x BN/DSBN");
  add_common(multi, true);

  auto add_model_io = [&](CLI::App* cmd) {
    cmd->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
    cmd->add_option("--config", o.config, "config used to regenerate the data");
    cmd->add_option("--data", o.data, "dataset CSV instead of regenerated data");
    cmd->add_option("--seed", o.seed, "run seed whose data to regenerate");
    cmd->add_option("--seeds", o.seeds)->delimiter(',')->group("");
    cmd->add_option("--iters", o.iters)->group("");
  };
  auto* emb = app.add_subcommand("export-embeddings", "penultimate-layer features as CSV");
  add_model_io(emb);
  emb->add_option("--out", o.out, "output CSV (default stdout)");
  auto* eval = app.add_subcommand("eval", "target metrics of a checkpoint");
  add_model_io(eval);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*train) return cmd_train(o);
    if (*ablate) return cmd_ablate(o);
    if (*multi) return cmd_multisource(o);
    if (*emb) return cmd_export_embeddings(o);
    if (*eval) return cmd_eval(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const TrainingFailure& e) {
    std::cerr << "training failed at iteration " << e.iteration() << ": " << e.what() << "\n";
    return kExitTraining;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
