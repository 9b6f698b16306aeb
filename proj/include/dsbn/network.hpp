#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <variant>
#include <vector>

#include "dsbn/normalization.hpp"
#include "dsbn/tensor.hpp"

namespace dsbn {

struct Linear {
  Parameter weight;  // [d_in x d_out]
  Parameter bias;    // [d_out]
};

struct Relu {};

struct BatchNorm {
  BnState state;
};

struct DomainBatchNorm {
  DsbnLayer layer;
};

using Layer = std::variant<Linear, Relu, BatchNorm, DomainBatchNorm>;

struct ForwardResult {
  Tensor features;  // output of the first feature_layer() layers
  Tensor output;    // output of the full stack
};

// A sequential stack of layers. The first `feature_layer` layers form the
// feature extractor; the rest is the head. Plain BN layers ignore the domain.
class Network {
 public:
  Network() = default;
  Network(std::vector<Layer> layers, std::size_t feature_layer);

  // Train mode updates running statistics of the BN branch in use.
  ForwardResult forward(const Tensor& x, DomainId domain, Mode mode);
  // Eval-mode forward; never mutates the network.
  ForwardResult evaluate(const Tensor& x, DomainId domain) const;

  // Handles to every parameter, in a fixed order: per layer, Linear weight
  // then bias, BN gamma then beta, DSBN branches in domain order.
  std::vector<Parameter> parameters() const;
  // Parameters outside any normalization layer.
  std::vector<Parameter> shared_parameters() const;
  void zero_grad();

  std::size_t batch_norm_count() const;
  std::size_t dsbn_count() const;
  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t feature_dim() const;
  std::size_t feature_layer() const { return feature_layer_; }

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  // Deep copy: shares no parameters or statistics.
  Network clone() const;

 private:
  std::vector<Layer> layers_;
  std::size_t feature_layer_ = 0;
};

struct MlpSpec {
  std::size_t input_dim = 2;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t output_dim = 3;
  bool batch_norm = true;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
};

// [Linear -> (BN) -> ReLU] per hidden width, then Linear to output_dim.
// Features are the activations after the last hidden ReLU. Weights are drawn
// He-normal, biases start at zero.
Network make_mlp(const MlpSpec& spec, std::mt19937_64& rng);

// Replaces every BatchNorm with a DSBN layer whose branches are copies of the
// original state. All other parameters are aliased, not copied.
Network convert_bn_to_dsbn(const Network& network,
                           std::span<const DomainId> domains);

}  // namespace dsbn
