#include "dsbn/normalization.hpp"

#include <cmath>
#include <utility>

#include "dsbn/errors.hpp"
#include "dsbn/kernels.hpp"

namespace dsbn {

std::string DomainId::to_string() const {
  return is_target() ? "target" : "source" + std::to_string(index);
}

std::vector<DomainId> domain_set(std::uint32_t num_sources) {
  std::vector<DomainId> ids;
  ids.reserve(num_sources + 1);
  for (std::uint32_t i = 0; i < num_sources; ++i) ids.push_back(DomainId::source(i));
  ids.push_back(DomainId::target(num_sources));
  return ids;
}

BnState BnState::identity(std::size_t channels, double eps, double momentum) {
  BnState s;
  s.gamma.tensor = Tensor::parameter({channels}, std::vector<double>(channels, 1.0));
  s.beta.tensor = Tensor::parameter({channels}, std::vector<double>(channels, 0.0));
  s.running_mean.assign(channels, 0.0);
  s.running_var.assign(channels, 1.0);
  s.eps = eps;
  s.momentum = momentum;
  s.validate();
  return s;
}

BnState BnState::clone() const {
  BnState s = *this;
  s.gamma.tensor = gamma.tensor.clone();
  s.beta.tensor = beta.tensor.clone();
  return s;
}

void BnState::validate() const {
  const std::size_t c = running_mean.size();
  if (c == 0 || gamma.tensor.size() != c || beta.tensor.size() != c ||
      running_var.size() != c)
    throw ConfigError("BN state vectors must share one positive length");
  for (double v : running_var)
    if (!(v >= 0.0)) throw ConfigError("BN running variance must be nonnegative");
  if (!(eps > 0.0)) throw ConfigError("BN eps must be positive");
  if (!(momentum > 0.0 && momentum <= 1.0))
    throw ConfigError("BN momentum must lie in (0, 1]");
}

namespace {

void check_channels(const Tensor& x, const BnState& state) {
  if (x.rank() != 2 || x.cols() != state.channels())
    throw DimensionError("batch norm over " + std::to_string(state.channels()) +
                         " channels given input " + shape_to_string(x.shape()));
}

}  // namespace

BnTrainOutput bn_forward_train(const Tensor& x, const BnState& state) {
  check_channels(x, state);
  const std::size_t n = x.rows();
  const std::size_t c = x.cols();
  if (n < 2)
    throw BatchSizeError("train-mode batch norm needs at least 2 examples, got " +
                         std::to_string(n));
  const auto& k = kernels::active();

  BatchStats stats{std::vector<double>(c), std::vector<double>(c)};
  k.col_moments(n, c, x.values(), stats.mean, stats.var);

  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j)
    inv_std[j] = 1.0 / std::sqrt(stats.var[j] + state.eps);

  std::vector<double> xhat(n * c);
  std::vector<double> y(n * c);
  k.bn_apply(n, c, x.values(), stats.mean, inv_std, state.gamma.tensor.values(),
             state.beta.tensor.values(), xhat, y);

  Tensor out = Tensor::from_op(
      {n, c}, std::move(y), {x, state.gamma.tensor, state.beta.tensor},
      [n, c, xhat = std::move(xhat), inv_std](detail::Node& self) {
        detail::Node& xn = *self.parents[0];
        detail::Node& gn = *self.parents[1];
        detail::Node& bn = *self.parents[2];
        std::vector<double> dx(xn.requires_grad ? n * c : 0);
        std::vector<double> dgamma(c, 0.0);
        std::vector<double> dbeta(c, 0.0);
        if (xn.requires_grad) {
          kernels::active().bn_backward(n, c, self.grad, xhat, inv_std, gn.value,
                                        dx, dgamma, dbeta);
          kernels::active().axpy(1.0, dx, xn.ensure_grad());
        } else {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              dgamma[j] += self.grad[i * c + j] * xhat[i * c + j];
              dbeta[j] += self.grad[i * c + j];
            }
        }
        if (gn.requires_grad) kernels::active().axpy(1.0, dgamma, gn.ensure_grad());
        if (bn.requires_grad) kernels::active().axpy(1.0, dbeta, bn.ensure_grad());
      });
  return {std::move(out), std::move(stats)};
}

void bn_update_running(BnState& state, std::span<const double> batch_mean,
                       std::span<const double> batch_var) {
  const std::size_t c = state.channels();
  if (batch_mean.size() != c || batch_var.size() != c)
    throw DimensionError("running-stat update over " + std::to_string(c) +
                         " channels given " + std::to_string(batch_mean.size()) +
                         " means");
  const double a = state.momentum;
  for (std::size_t j = 0; j < c; ++j) {
    state.running_mean[j] = (1.0 - a) * state.running_mean[j] + a * batch_mean[j];
    state.running_var[j] = (1.0 - a) * state.running_var[j] + a * batch_var[j];
  }
}

Tensor bn_forward_eval(const Tensor& x, const BnState& state) {
  check_channels(x, state);
  const std::size_t n = x.rows();
  const std::size_t c = x.cols();
  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j)
    inv_std[j] = 1.0 / std::sqrt(state.running_var[j] + state.eps);
  std::vector<double> xhat(n * c);
  std::vector<double> y(n * c);
  kernels::active().bn_apply(n, c, x.values(), state.running_mean, inv_std,
                             state.gamma.tensor.values(),
                             state.beta.tensor.values(), xhat, y);
  return Tensor::from_op(
      {n, c}, std::move(y), {x, state.gamma.tensor, state.beta.tensor},
      [n, c, xhat = std::move(xhat), inv_std](detail::Node& self) {
        detail::Node& xn = *self.parents[0];
        detail::Node& gn = *self.parents[1];
        detail::Node& bn = *self.parents[2];
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double g = self.grad[i * c + j];
            if (xn.requires_grad) xn.ensure_grad()[i * c + j] += g * gn.value[j] * inv_std[j];
            if (gn.requires_grad) gn.ensure_grad()[j] += g * xhat[i * c + j];
            if (bn.requires_grad) bn.ensure_grad()[j] += g;
          }
      });
}

Tensor bn_forward(const Tensor& x, BnState& state, Mode mode) {
  if (mode == Mode::kEval) return bn_forward_eval(x, state);
  auto [out, stats] = bn_forward_train(x, state);
  bn_update_running(state, stats.mean, stats.var);
  return out;
}

// ---- DsbnLayer ---------------------------------------------------------------

void DsbnLayer::add_domain_branch(DomainId domain, const BnState& init) {
  if (sealed_)
    throw ConfigError("cannot add domain branch " + domain.to_string() +
                      " after the layer has been used");
  if (branches_.contains(domain))
    throw ConfigError("duplicate domain branch " + domain.to_string());
  init.validate();
  if (init.channels() != channels_)
    throw DimensionError("branch for " + domain.to_string() + " has " +
                         std::to_string(init.channels()) + " channels, layer has " +
                         std::to_string(channels_));
  branches_.emplace(domain, init.clone());
}

const BnState& DsbnLayer::branch(DomainId domain) const {
  const auto it = branches_.find(domain);
  if (it == branches_.end())
    throw DomainLookupError("no normalization branch for domain " +
                            domain.to_string());
  return it->second;
}

BnState& DsbnLayer::branch(DomainId domain) {
  return const_cast<BnState&>(std::as_const(*this).branch(domain));
}

Tensor DsbnLayer::forward(const Tensor& x, DomainId domain, Mode mode) {
  BnState& state = branch(domain);
  sealed_ = true;
  return bn_forward(x, state, mode);
}

Tensor DsbnLayer::forward_eval(const Tensor& x, DomainId domain) const {
  return bn_forward_eval(x, branch(domain));
}

DsbnLayer DsbnLayer::clone() const {
  DsbnLayer copy(channels_);
  for (const auto& [domain, state] : branches_)
    copy.branches_.emplace(domain, state.clone());
  copy.sealed_ = sealed_;
  return copy;
}

}  // namespace dsbn
