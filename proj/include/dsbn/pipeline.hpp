#pragma once

// Two-stage adaptation:
//   stage 1 trains a baseline adaptation network (MSTN or CPUA objective) and
//           stores its target class probabilities as initial pseudo-labels;
//   stage 2 trains a network with plain cross-entropy on source labels and on
//           target pseudo-labels that blend stage-1 and current predictions
//           with a weight ramping from 0 to 1.
// Stage 2 can be repeated, each round seeded by the previous round's scores.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "dsbn/data.hpp"
#include "dsbn/network.hpp"
#include "dsbn/optimizer.hpp"
#include "dsbn/schedule.hpp"

namespace dsbn {

enum class Baseline { kMstn, kCpua };
enum class NormMode { kBn, kDsbn };

std::string_view to_string(Baseline b);
std::string_view to_string(NormMode m);

// Labeled sources (DomainId::source(i)) and the unlabeled target
// (DomainId::target(sources.size())).
struct DomainData {
  std::span<const LabeledDataset> sources;
  const LabeledDataset& target;
};

// Called every `every` optimizer steps (and after the last one) with the
// model being trained.
struct TrainObserver {
  std::int64_t every = 0;
  std::function<void(const Network& model, std::int64_t step)> on_eval;
};

struct Stage1Config {
  Baseline baseline = Baseline::kMstn;
  NormMode norm = NormMode::kDsbn;
  ScheduleParams schedule{10.0, 1e-4, 10.0, 0.75, 3000};
  std::size_t batch_size = 40;
  MlpSpec model;
  std::size_t discriminator_width = 64;
  double centroid_theta = 0.7;
  // Adaptation weight; follows lambda_schedule when unset.
  std::optional<double> fixed_lambda;
  double grl_scale = 1.0;
};

struct Stage2Config {
  NormMode norm = NormMode::kDsbn;
  ScheduleParams schedule{10.0, 5e-5, 10.0, 0.75, 3000};
  std::size_t batch_size = 40;
  MlpSpec model;
  // Start from a copy of the stage-1 network instead of a fresh one.
  bool warm_start = false;
  // Pseudo-label blend weight; follows lambda_schedule when unset.
  std::optional<double> fixed_pseudo_lambda;
};

// Stage-1 class probabilities for every target example.
class PseudoLabelBank {
 public:
  PseudoLabelBank() = default;
  PseudoLabelBank(std::vector<double> scores, std::size_t classes);

  // Eval-mode softmax of `network` on every target example (target branch).
  static PseudoLabelBank from_network(const Network& network, const LabeledDataset& target);

  std::size_t size() const { return classes_ == 0 ? 0 : scores_.size() / classes_; }
  std::size_t classes() const { return classes_; }
  std::span<const double> row(std::size_t example_id) const;
  std::span<const double> scores() const { return scores_; }
  std::vector<int> hard_labels() const;

 private:
  std::vector<double> scores_;
  std::size_t classes_ = 0;
};

// argmax_c (1 - lambda) * stage1[c] + lambda * current[c]; ties go to the
// lowest class index.
std::size_t refine_pseudo_label(std::span<const double> stage1_scores,
                                std::span<const double> current_scores, double lambda);
std::size_t refine_pseudo_label(const PseudoLabelBank& bank,
                                std::span<const double> current_scores,
                                std::size_t example_id, double lambda);

struct Stage1Result {
  Network classifier;
  Network discriminator;
  PseudoLabelBank bank;
  OptimizerState optimizer;
};

// Builds the classifier (BN, converted to DSBN when config.norm says so),
// trains it with the baseline objective on per-domain mini-batches and fills
// the pseudo-label bank. Throws TrainingFailure after 10 consecutive
// non-finite losses.
Stage1Result train_stage1(const Stage1Config& config, const DomainData& data,
                          std::mt19937_64& rng, const TrainObserver& observer = {});

struct Stage2Result {
  Network model;
  OptimizerState optimizer;
};

// `stage1_model` is only read when config.warm_start is set.
Stage2Result train_stage2(const Network& stage1_model, const PseudoLabelBank& bank,
                          const DomainData& data, const Stage2Config& config,
                          std::mt19937_64& rng, const TrainObserver& observer = {});

struct Stage2Round {
  Network model;
  OptimizerState optimizer;
  PseudoLabelBank bank_used;
  Metrics metrics;
};

// Runs stage 2 `rounds` times. Round j > 1 replaces the bank with the
// previous round's target predictions.
std::vector<Stage2Round> iterate_stage2(std::size_t rounds, const Network& stage1_model,
                                        const PseudoLabelBank& bank, const DomainData& data,
                                        const Stage2Config& config, std::mt19937_64& rng,
                                        const std::function<TrainObserver(std::size_t round)>&
                                            observer_for = {});

// Number of consecutive non-finite losses that aborts training.
inline constexpr int kDivergencePatience = 10;

}  // namespace dsbn
