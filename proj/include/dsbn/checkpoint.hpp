#pragma once

// Versioned little-endian binary snapshot of a trained network, its Adam
// state and the run's RNG. Loading restores every double bit for bit.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <string>

#include "dsbn/network.hpp"
#include "dsbn/optimizer.hpp"

namespace dsbn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string tag;  // free-form, e.g. "stage2/round3"
  Network model;
  OptimizerState optimizer;
  std::mt19937_64 rng;
};

void save_checkpoint(std::ostream& out, const Checkpoint& ckpt);
// Throws FormatError on a bad magic, unknown version or truncated stream.
Checkpoint load_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dsbn
