#pragma once

// Seeded experiment runs on top of the two-stage pipeline, plus the report
// writers used by the command-line tool.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dsbn/checkpoint.hpp"
#include "dsbn/config.hpp"
#include "dsbn/data.hpp"
#include "dsbn/pipeline.hpp"

namespace dsbn {

struct RunData {
  std::vector<LabeledDataset> sources;
  LabeledDataset target;
  DomainData view() const { return {sources, target}; }
};

// Datasets for one run. `single` keeps source 0, `merged` concatenates all
// sources into one domain, `separate` keeps one domain per source.
RunData make_run_data(const ExperimentConfig& config, MultiSourceMode mode,
                      std::uint64_t data_seed);

// One evaluation of the target set, as logged to metrics.jsonl.
struct EvalRecord {
  std::uint64_t seed = 0;
  std::string cell;   // e.g. "dsbn/dsbn" or "separate/bn"
  std::string stage;  // "stage1" or "stage2"
  std::size_t round = 0;  // stage-2 round, 1-based; 0 for stage 1
  std::int64_t step = 0;
  bool final = false;
  Metrics metrics;
};

std::string to_json_line(const EvalRecord& record);

struct RunResult {
  std::uint64_t seed = 0;
  std::string cell;
  Metrics stage1;
  std::vector<Metrics> stage2;  // one per round
  std::vector<EvalRecord> log;
  Checkpoint checkpoint;  // last trained model
};

// The run's generator is seeded with `seed`; its first draw seeds the data,
// later draws drive stage 1 and then stage 2.
RunResult run_experiment(const ExperimentConfig& config, std::uint64_t seed, NormMode stage1,
                         std::optional<NormMode> stage2, MultiSourceMode mode,
                         const std::string& cell);

// Stage 1 once per seed and stage-1 norm, then every stage-2 norm from the
// same stage-1 network.
struct AblationCell {
  Baseline baseline;
  NormMode stage1;
  NormMode stage2;
  std::vector<RunResult> runs;  // one per seed
};
std::vector<AblationCell> run_ablation(const ExperimentConfig& config,
                                       const std::vector<Baseline>& baselines);

struct MultiSourceCell {
  MultiSourceMode mode;
  NormMode norm;  // used for both stages
  std::vector<RunResult> runs;
};
std::vector<MultiSourceCell> run_multisource(const ExperimentConfig& config);

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for one value
};
Summary summarize(const std::vector<double>& values);

// Final mean per-class accuracy of stage 1 and of each stage-2 round.
double stage1_avg(const RunResult& run);
double stage2_avg(const RunResult& run, std::size_t round = 1);

// Percent with one decimal; "nan" for NaN.
std::string percent(double value);

void write_metrics_jsonl(std::ostream& out, const std::vector<RunResult>& runs);
// Header: seed,stage,class_0..class_{C-1},Avg
void write_report_csv(std::ostream& out, const std::vector<RunResult>& runs,
                      std::size_t classes);
void write_ablation_csv(std::ostream& out, const std::vector<AblationCell>& cells);
void write_multisource_csv(std::ostream& out, const std::vector<MultiSourceCell>& cells);
// Columns id,domain,class,f_1..f_k; eval mode, each dataset through its own branch.
void write_embeddings_csv(std::ostream& out, const Network& model, const RunData& data);

// Worker count from DSBN_THREADS, else the hardware concurrency.
std::size_t worker_count();
// Runs task(0..n-1) on up to worker_count() threads. Rethrows the exception
// of the lowest failing index after all tasks finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& task);

}  // namespace dsbn
