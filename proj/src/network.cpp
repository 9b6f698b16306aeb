#include "dsbn/network.hpp"

#include <cmath>

#include "dsbn/errors.hpp"

namespace dsbn {
namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

}  // namespace

Network::Network(std::vector<Layer> layers, std::size_t feature_layer)
    : layers_(std::move(layers)), feature_layer_(feature_layer) {
  if (feature_layer_ > layers_.size())
    throw ConfigError("feature layer index past the end of the network");
}

ForwardResult Network::forward(const Tensor& x, DomainId domain, Mode mode) {
  ForwardResult result;
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (i == feature_layer_) result.features = h;
    h = std::visit(
        Overloaded{
            [&](const Linear& l) {
              return affine_transform(h, l.weight.tensor, l.bias.tensor);
            },
            [&](const Relu&) { return relu(h); },
            [&](BatchNorm& bn) { return bn_forward(h, bn.state, mode); },
            [&](DomainBatchNorm& dbn) { return dbn.layer.forward(h, domain, mode); },
        },
        layers_[i]);
  }
  if (feature_layer_ == layers_.size()) result.features = h;
  result.output = h;
  return result;
}

ForwardResult Network::evaluate(const Tensor& x, DomainId domain) const {
  ForwardResult result;
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (i == feature_layer_) result.features = h;
    h = std::visit(
        Overloaded{
            [&](const Linear& l) {
              return affine_transform(h, l.weight.tensor, l.bias.tensor);
            },
            [&](const Relu&) { return relu(h); },
            [&](const BatchNorm& bn) { return bn_forward_eval(h, bn.state); },
            [&](const DomainBatchNorm& dbn) {
              return dbn.layer.forward_eval(h, domain);
            },
        },
        layers_[i]);
  }
  if (feature_layer_ == layers_.size()) result.features = h;
  result.output = h;
  return result;
}

std::vector<Parameter> Network::parameters() const {
  std::vector<Parameter> params;
  for (const auto& layer : layers_) {
    std::visit(Overloaded{
                   [&](const Linear& l) {
                     params.push_back(l.weight);
                     params.push_back(l.bias);
                   },
                   [](const Relu&) {},
                   [&](const BatchNorm& bn) {
                     params.push_back(bn.state.gamma);
                     params.push_back(bn.state.beta);
                   },
                   [&](const DomainBatchNorm& dbn) {
                     for (const auto& [d, s] : dbn.layer.branches()) {
                       params.push_back(s.gamma);
                       params.push_back(s.beta);
                     }
                   },
               },
               layer);
  }
  return params;
}

std::vector<Parameter> Network::shared_parameters() const {
  std::vector<Parameter> params;
  for (const auto& layer : layers_)
    if (const auto* l = std::get_if<Linear>(&layer)) {
      params.push_back(l->weight);
      params.push_back(l->bias);
    }
  return params;
}

void Network::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

std::size_t Network::batch_norm_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers_) n += std::holds_alternative<BatchNorm>(layer);
  return n;
}

std::size_t Network::dsbn_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers_)
    n += std::holds_alternative<DomainBatchNorm>(layer);
  return n;
}

std::size_t Network::input_dim() const {
  for (const auto& layer : layers_)
    if (const auto* l = std::get_if<Linear>(&layer)) return l->weight.tensor.shape()[0];
  return 0;
}

std::size_t Network::output_dim() const {
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
    if (const auto* l = std::get_if<Linear>(&*it)) return l->weight.tensor.shape()[1];
  return 0;
}

std::size_t Network::feature_dim() const {
  for (std::size_t i = feature_layer_; i-- > 0;)
    if (const auto* l = std::get_if<Linear>(&layers_[i]))
      return l->weight.tensor.shape()[1];
  return input_dim();
}

Network Network::clone() const {
  std::vector<Layer> copy;
  copy.reserve(layers_.size());
  for (const auto& layer : layers_) {
    copy.push_back(std::visit(
        Overloaded{
            [](const Linear& l) -> Layer {
              return Linear{{l.weight.tensor.clone(), l.weight.trainable},
                            {l.bias.tensor.clone(), l.bias.trainable}};
            },
            [](const Relu&) -> Layer { return Relu{}; },
            [](const BatchNorm& bn) -> Layer { return BatchNorm{bn.state.clone()}; },
            [](const DomainBatchNorm& dbn) -> Layer {
              return DomainBatchNorm{dbn.layer.clone()};
            },
        },
        layer));
  }
  return Network(std::move(copy), feature_layer_);
}

Network make_mlp(const MlpSpec& spec, std::mt19937_64& rng) {
  if (spec.input_dim == 0 || spec.output_dim == 0)
    throw ConfigError("MLP input and output widths must be positive");
  std::vector<Layer> layers;
  auto linear = [&rng](std::size_t d_in, std::size_t d_out) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(d_in)));
    std::vector<double> w(d_in * d_out);
    for (double& v : w) v = dist(rng);
    return Linear{{Tensor::parameter({d_in, d_out}, std::move(w)), true},
                  {Tensor::parameter({d_out}, std::vector<double>(d_out, 0.0)), true}};
  };
  std::size_t width = spec.input_dim;
  for (std::size_t h : spec.hidden) {
    if (h == 0) throw ConfigError("MLP hidden widths must be positive");
    layers.emplace_back(linear(width, h));
    if (spec.batch_norm)
      layers.emplace_back(BatchNorm{BnState::identity(h, spec.bn_eps, spec.bn_momentum)});
    layers.emplace_back(Relu{});
    width = h;
  }
  const std::size_t feature_layer = layers.size();
  layers.emplace_back(linear(width, spec.output_dim));
  return Network(std::move(layers), feature_layer);
}

Network convert_bn_to_dsbn(const Network& network,
                           std::span<const DomainId> domains) {
  std::vector<Layer> layers;
  layers.reserve(network.layers().size());
  for (const auto& layer : network.layers()) {
    if (const auto* bn = std::get_if<BatchNorm>(&layer)) {
      DsbnLayer dsbn(bn->state.channels());
      for (DomainId d : domains) dsbn.add_domain_branch(d, bn->state);
      layers.emplace_back(DomainBatchNorm{std::move(dsbn)});
    } else {
      layers.push_back(layer);  // Linear handles alias the original storage
    }
  }
  return Network(std::move(layers), network.feature_layer());
}

}  // namespace dsbn
