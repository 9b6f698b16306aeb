#pragma once

// Experiment configuration. The file format is a small TOML subset:
//   # comment
//   [section]
//   key = "string" | 1.5 | 3 | true | [1, 2] | [[0.0, 0.0], [0.5, 0.0]]
// Every key must be known; errors name the offending field.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "dsbn/data.hpp"
#include "dsbn/pipeline.hpp"

namespace dsbn {

struct ConfigValue {
  using Array = std::vector<ConfigValue>;
  std::variant<bool, double, std::string, Array> value;
  int line = 0;
};

// "section.key" -> value, in file order of first appearance.
using ConfigTable = std::map<std::string, ConfigValue>;

// Throws ConfigError with the line number on malformed input or duplicate keys.
ConfigTable parse_config_text(std::string_view text);

enum class MultiSourceMode { kSingle, kMerged, kSeparate };
std::string_view to_string(MultiSourceMode m);

struct DataParams {
  std::size_t classes = 3;
  std::size_t dims = 2;
  std::size_t n_per_class = 500;
  double noise = 0.35;
  double radius = 1.0;
  std::vector<double> target_shift{1.5, 0.0};
  double target_rotation_deg = 50.0;
  // One entry per source domain; an empty shift means no translation.
  std::vector<std::vector<double>> source_shifts{{}};
  std::vector<double> source_rotations_deg{0.0};
};

struct ExperimentConfig {
  Baseline baseline = Baseline::kMstn;
  NormMode norm_stage1 = NormMode::kDsbn;
  std::optional<NormMode> norm_stage2 = NormMode::kDsbn;  // nullopt skips stage 2
  MultiSourceMode multi_source_mode = MultiSourceMode::kSingle;
  std::size_t stage2_iterations = 1;
  std::vector<std::uint64_t> seeds{0};
  std::size_t batch_size = 40;
  std::int64_t eval_every = 500;  // 0 logs final metrics only

  DataParams data;

  double gamma_adapt = 10.0;
  double alpha_lr = 10.0;
  double beta_lr = 0.75;
  double eta0_stage1 = 1e-4;
  double eta0_stage2 = 5e-5;
  std::int64_t iters_stage1 = 3000;
  std::int64_t iters_stage2 = 3000;

  std::vector<std::size_t> hidden{64, 64};
  std::size_t discriminator_width = 64;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  double centroid_theta = 0.7;
  std::optional<double> adaptation_lambda;  // nullopt follows the schedule
  double grl_scale = 1.0;

  bool warm_start = false;
  std::optional<double> pseudo_lambda;  // nullopt follows the schedule
};

// Throws ConfigError("section.key: reason") on unknown keys or bad values.
ExperimentConfig experiment_config_from_table(const ConfigTable& table);
ExperimentConfig parse_experiment_config(std::string_view text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
// Checks cross-field invariants; throws ConfigError.
void validate(const ExperimentConfig& config);

// Complete config in the same format; parses back to an equal config.
std::string to_config_text(const ExperimentConfig& config);

Stage1Config make_stage1_config(const ExperimentConfig& config, NormMode norm);
Stage2Config make_stage2_config(const ExperimentConfig& config, NormMode norm);
MultiSourceSpec make_data_spec(const ExperimentConfig& config);

}  // namespace dsbn
