#include "dsbn/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <mutex>
#include <ostream>
#include <thread>

#include <json.hpp>

#include "dsbn/errors.hpp"

namespace dsbn {

RunData make_run_data(const ExperimentConfig& config, MultiSourceMode mode,
                      std::uint64_t data_seed) {
  MultiSourceData md = make_multi_source_blobs(make_data_spec(config), data_seed);
  switch (mode) {
    case MultiSourceMode::kSingle:
      return {{md.sources.front()}, md.target.with_domain(DomainId::target(1), true)};
    case MultiSourceMode::kMerged:
      return {{merge_sources(md.sources)}, md.target.with_domain(DomainId::target(1), true)};
    case MultiSourceMode::kSeparate:
      break;
  }
  return {std::move(md.sources), std::move(md.target)};
}

std::string to_json_line(const EvalRecord& r) {
  nlohmann::ordered_json j;
  j["seed"] = r.seed;
  j["cell"] = r.cell;
  j["stage"] = r.stage;
  j["round"] = r.round;
  j["step"] = r.step;
  j["final"] = r.final;
  j["per_class"] = r.metrics.per_class;
  j["avg"] = r.metrics.mean_per_class;
  j["overall"] = r.metrics.overall;
  return j.dump();
}

// ---- runs ----------------------------------------------------------------------

namespace {

TrainObserver logging_observer(const ExperimentConfig& config, const RunData& data,
                               RunResult& run, const char* stage, std::size_t round) {
  if (config.eval_every <= 0) return {};
  TrainObserver obs;
  obs.every = config.eval_every;
  obs.on_eval = [&data, &run, stage, round](const Network& model, std::int64_t step) {
    run.log.push_back({run.seed, run.cell, stage, round, step, false,
                       evaluate_transductive(model, data.target)});
  };
  return obs;
}

Stage1Result stage1_part(const ExperimentConfig& config, const RunData& data, NormMode norm,
                         std::mt19937_64& rng, RunResult& run) {
  Stage1Result s1 = train_stage1(make_stage1_config(config, norm), data.view(), rng,
                                 logging_observer(config, data, run, "stage1", 0));
  run.stage1 = evaluate_transductive(s1.classifier, data.target);
  run.log.push_back(
      {run.seed, run.cell, "stage1", 0, config.iters_stage1, true, run.stage1});
  run.checkpoint = {"seed" + std::to_string(run.seed) + "/stage1", s1.classifier.clone(),
                    s1.optimizer, rng};
  return s1;
}

void stage2_part(const ExperimentConfig& config, const RunData& data, NormMode norm,
                 const Stage1Result& s1, std::mt19937_64& rng, RunResult& run) {
  auto rounds = iterate_stage2(
      config.stage2_iterations, s1.classifier, s1.bank, data.view(),
      make_stage2_config(config, norm), rng, [&](std::size_t r) {
        return logging_observer(config, data, run, "stage2", r + 1);
      });
  for (std::size_t r = 0; r < rounds.size(); ++r) {
    run.stage2.push_back(rounds[r].metrics);
    run.log.push_back(
        {run.seed, run.cell, "stage2", r + 1, config.iters_stage2, true, rounds[r].metrics});
  }
  run.checkpoint = {"seed" + std::to_string(run.seed) + "/stage2_iter" +
                        std::to_string(rounds.size()),
                    std::move(rounds.back().model), std::move(rounds.back().optimizer), rng};
}

std::string cell_name(NormMode a, std::optional<NormMode> b) {
  return std::string(to_string(a)) + "/" + (b ? std::string(to_string(*b)) : "none");
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& config, std::uint64_t seed, NormMode stage1,
                         std::optional<NormMode> stage2, MultiSourceMode mode,
                         const std::string& cell) {
  validate(config);
  std::mt19937_64 rng(seed);
  const RunData data = make_run_data(config, mode, rng());
  RunResult run;
  run.seed = seed;
  run.cell = cell;
  const Stage1Result s1 = stage1_part(config, data, stage1, rng, run);
  if (stage2) stage2_part(config, data, *stage2, s1, rng, run);
  return run;
}

std::vector<AblationCell> run_ablation(const ExperimentConfig& base,
                                       const std::vector<Baseline>& baselines) {
  validate(base);
  constexpr NormMode kNorms[] = {NormMode::kBn, NormMode::kDsbn};
  std::vector<AblationCell> cells;
  for (Baseline b : baselines)
    for (NormMode n1 : kNorms)
      for (NormMode n2 : kNorms) cells.push_back({b, n1, n2, std::vector<RunResult>(base.seeds.size())});

  // One task per (baseline, stage-1 norm, seed); it fills both stage-2 cells.
  const std::size_t seeds = base.seeds.size();
  parallel_for(baselines.size() * 2 * seeds, [&](std::size_t task) {
    const std::size_t si = task % seeds;
    const std::size_t n1i = (task / seeds) % 2;
    const std::size_t bi = task / seeds / 2;
    ExperimentConfig config = base;
    config.baseline = baselines[bi];
    const std::uint64_t seed = base.seeds[si];

    std::mt19937_64 rng(seed);
    const RunData data = make_run_data(config, config.multi_source_mode, rng());
    RunResult stage1_run;
    stage1_run.seed = seed;
    const Stage1Result s1 = stage1_part(config, data, kNorms[n1i], rng, stage1_run);
    for (std::size_t n2i = 0; n2i < 2; ++n2i) {
      AblationCell& cell = cells[bi * 4 + n1i * 2 + n2i];
      RunResult run = stage1_run;
      run.cell = cell_name(cell.stage1, cell.stage2);
      for (auto& rec : run.log) rec.cell = run.cell;
      std::mt19937_64 branch_rng = rng;
      stage2_part(config, data, cell.stage2, s1, branch_rng, run);
      cell.runs[si] = std::move(run);
    }
  });
  return cells;
}

std::vector<MultiSourceCell> run_multisource(const ExperimentConfig& config) {
  validate(config);
  constexpr MultiSourceMode kModes[] = {MultiSourceMode::kSingle, MultiSourceMode::kMerged,
                                        MultiSourceMode::kSeparate};
  constexpr NormMode kNorms[] = {NormMode::kBn, NormMode::kDsbn};
  std::vector<MultiSourceCell> cells;
  for (auto m : kModes)
    for (auto n : kNorms) cells.push_back({m, n, std::vector<RunResult>(config.seeds.size())});
  const std::size_t seeds = config.seeds.size();
  parallel_for(cells.size() * seeds, [&](std::size_t task) {
    MultiSourceCell& cell = cells[task / seeds];
    const std::size_t si = task % seeds;
    const std::optional<NormMode> stage2 =
        config.norm_stage2 ? std::optional<NormMode>(cell.norm) : std::nullopt;
    cell.runs[si] =
        run_experiment(config, config.seeds[si], cell.norm, stage2, cell.mode,
                       std::string(to_string(cell.mode)) + "/" + std::string(to_string(cell.norm)));
  });
  return cells;
}

// ---- summaries and reports -------------------------------------------------------

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

double stage1_avg(const RunResult& run) { return run.stage1.mean_per_class; }

double stage2_avg(const RunResult& run, std::size_t round) {
  if (round < 1 || round > run.stage2.size())
    throw ContractError("run has no stage-2 round " + std::to_string(round));
  return run.stage2[round - 1].mean_per_class;
}

std::string percent(double value) {
  if (std::isnan(value)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", value);
  return buf;
}

void write_metrics_jsonl(std::ostream& out, const std::vector<RunResult>& runs) {
  for (const auto& run : runs)
    for (const auto& rec : run.log) out << to_json_line(rec) << '\n';
}

void write_report_csv(std::ostream& out, const std::vector<RunResult>& runs,
                      std::size_t classes) {
  out << "seed,stage";
  for (std::size_t c = 0; c < classes; ++c) out << ",class_" << c;
  out << ",Avg\n";
  auto row = [&](std::uint64_t seed, const std::string& stage, const Metrics& m) {
    out << seed << ',' << stage;
    for (std::size_t c = 0; c < classes; ++c)
      out << ',' << percent(c < m.per_class.size() ? m.per_class[c] : std::nan(""));
    out << ',' << percent(m.mean_per_class) << '\n';
  };
  for (const auto& run : runs) {
    row(run.seed, "stage1", run.stage1);
    for (std::size_t r = 0; r < run.stage2.size(); ++r)
      row(run.seed, "stage2_iter" + std::to_string(r + 1), run.stage2[r]);
  }
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationCell>& cells) {
  std::size_t rounds = 0;
  for (const auto& cell : cells)
    for (const auto& run : cell.runs) rounds = std::max(rounds, run.stage2.size());
  out << "baseline,stage1,stage2,seeds,stage1_avg,stage1_std,stage2_avg,stage2_std,delta,"
         "delta_std";
  for (std::size_t r = 2; r <= rounds; ++r) out << ",stage2_iter" << r << "_avg";
  out << '\n';
  for (const auto& cell : cells) {
    std::vector<double> s1, s2, delta;
    for (const auto& run : cell.runs) {
      s1.push_back(stage1_avg(run));
      s2.push_back(stage2_avg(run));
      delta.push_back(s2.back() - s1.back());
    }
    const auto a = summarize(s1), b = summarize(s2), d = summarize(delta);
    out << to_string(cell.baseline) << ',' << to_string(cell.stage1) << ','
        << to_string(cell.stage2) << ',' << cell.runs.size() << ',' << percent(a.mean) << ','
        << percent(a.stddev) << ',' << percent(b.mean) << ',' << percent(b.stddev) << ','
        << percent(d.mean) << ',' << percent(d.stddev);
    for (std::size_t r = 2; r <= rounds; ++r) {
      std::vector<double> v;
      for (const auto& run : cell.runs) v.push_back(stage2_avg(run, r));
      out << ',' << percent(summarize(v).mean);
    }
    out << '\n';
  }
}

void write_multisource_csv(std::ostream& out, const std::vector<MultiSourceCell>& cells) {
  out << "mode,bn_avg,bn_std,dsbn_avg,dsbn_std\n";
  for (std::size_t i = 0; i + 1 < cells.size(); i += 2) {
    out << to_string(cells[i].mode);
    for (std::size_t k = i; k < i + 2; ++k) {
      std::vector<double> v;
      for (const auto& run : cells[k].runs)
        v.push_back(run.stage2.empty() ? stage1_avg(run) : stage2_avg(run, run.stage2.size()));
      const auto s = summarize(v);
      out << ',' << percent(s.mean) << ',' << percent(s.stddev);
    }
    out << '\n';
  }
}

void write_embeddings_csv(std::ostream& out, const Network& model, const RunData& data) {
  const std::size_t k = model.feature_dim();
  out << "id,domain,class";
  for (std::size_t j = 1; j <= k; ++j) out << ",f_" << j;
  out << '\n';
  std::size_t id = 0;
  char buf[32];
  auto dump = [&](const LabeledDataset& ds) {
    const Tensor features = model.evaluate(ds.as_tensor(), ds.domain()).features;
    const auto values = features.values();
    const auto labels = ds.evaluation_labels();
    const std::string domain = ds.domain().to_string();
    for (std::size_t i = 0; i < ds.size(); ++i) {
      out << id++ << ',' << domain << ',' << labels[i];
      for (std::size_t j = 0; j < k; ++j) {
        const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, values[i * k + j]);
        out << ',' << std::string_view(buf, static_cast<std::size_t>(ptr - buf));
      }
      out << '\n';
    }
  };
  for (const auto& s : data.sources) dump(s);
  dump(data.target);
}

// ---- concurrency ---------------------------------------------------------------

std::size_t worker_count() {
  if (const char* env = std::getenv("DSBN_THREADS"); env && *env) {
    std::size_t n = 0;
    const auto [ptr, ec] = std::from_chars(env, env + std::char_traits<char>::length(env), n);
    if (ec == std::errc() && *ptr == '\0' && n > 0) return n;
    std::cerr << "warning: ignoring DSBN_THREADS=" << env << "\n";
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& task) {
  std::vector<std::exception_ptr> errors(n);
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        task(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::mutex mu;
    std::size_t next = 0;
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard lock(mu);
            if (next == n) return;
            i = next++;
          }
          try {
            task(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace dsbn
