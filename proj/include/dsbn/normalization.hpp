#pragma once

// Batch normalization and domain-specific batch normalization.
//
// A BN branch whitens each channel with mini-batch statistics during training
// and with exponential-moving-average estimates at evaluation time. A DSBN
// layer holds one independent branch per domain; a mini-batch is routed to
// exactly one branch.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dsbn/tensor.hpp"

namespace dsbn {

enum class Mode { kTrain, kEval };

enum class DomainRole : std::uint8_t { kSource, kTarget };

struct DomainId {
  std::uint32_t index = 0;
  DomainRole role = DomainRole::kSource;

  static DomainId source(std::uint32_t i) { return {i, DomainRole::kSource}; }
  // The target follows the sources, so its index equals the source count.
  static DomainId target(std::uint32_t num_sources) {
    return {num_sources, DomainRole::kTarget};
  }

  bool is_target() const { return role == DomainRole::kTarget; }
  std::string to_string() const;

  friend auto operator<=>(const DomainId&, const DomainId&) = default;
};

// Source ids 0..num_sources-1 followed by the target id.
std::vector<DomainId> domain_set(std::uint32_t num_sources);

struct BnState {
  Parameter gamma;
  Parameter beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  // gamma = 1, beta = 0, running mean 0, running variance 1.
  static BnState identity(std::size_t channels, double eps = 1e-5,
                          double momentum = 0.1);

  std::size_t channels() const { return running_mean.size(); }
  // Deep copy; the result shares no storage with *this.
  BnState clone() const;
  // Throws ConfigError when an invariant does not hold.
  void validate() const;
};

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased, divisor N
};

struct BnTrainOutput {
  Tensor output;
  BatchStats stats;
};

// gamma * (x - mu) / sqrt(var + eps) + beta with mu, var from the batch.
// Gradients flow through the batch statistics. Requires N >= 2.
BnTrainOutput bn_forward_train(const Tensor& x, const BnState& state);

// running <- (1 - momentum) * running + momentum * batch
void bn_update_running(BnState& state, std::span<const double> batch_mean,
                       std::span<const double> batch_var);

// Normalizes with the running estimates; pure in (x, state).
Tensor bn_forward_eval(const Tensor& x, const BnState& state);

// bn_forward_train + bn_update_running in train mode, bn_forward_eval in eval.
Tensor bn_forward(const Tensor& x, BnState& state, Mode mode);

class DsbnLayer {
 public:
  explicit DsbnLayer(std::size_t channels) : channels_(channels) {}

  // Registers a branch initialized as a deep copy of `init`. Only allowed
  // before the first forward pass.
  void add_domain_branch(DomainId domain, const BnState& init);

  bool contains(DomainId domain) const { return branches_.contains(domain); }
  const BnState& branch(DomainId domain) const;
  BnState& branch(DomainId domain);
  const std::map<DomainId, BnState>& branches() const { return branches_; }
  std::size_t channel_count() const { return channels_; }
  std::size_t branch_count() const { return branches_.size(); }

  // Routes the whole batch through the branch of `domain`.
  Tensor forward(const Tensor& x, DomainId domain, Mode mode);
  Tensor forward_eval(const Tensor& x, DomainId domain) const;

  DsbnLayer clone() const;

 private:
  std::size_t channels_;
  std::map<DomainId, BnState> branches_;
  bool sealed_ = false;
};

inline Tensor dsbn_forward(const Tensor& x, DomainId domain, DsbnLayer& layer,
                           Mode mode) {
  return layer.forward(x, domain, mode);
}

}  // namespace dsbn
