#include "dsbn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "dsbn/errors.hpp"
#include "dsbn/kernels.hpp"

namespace dsbn {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::span<double> detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

namespace {

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> values,
                                        bool requires_grad) {
  for (std::size_t extent : shape)
    if (extent == 0)
      throw DimensionError("tensor extents must be positive, got " +
                           shape_to_string(shape));
  if (shape_size(shape) != values.size())
    throw DimensionError("tensor of shape " + shape_to_string(shape) +
                         " given " + std::to_string(values.size()) + " values");
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2)
    throw DimensionError(std::string(what) + " must be rank 2, got " +
                         shape_to_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
}

// Stable log(1 + exp(x)).
double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  return Tensor(make_node(std::move(shape), std::move(values), true));
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  return Tensor(make_node(std::move(shape), std::move(values), false));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_size(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0),
                          requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_node({1}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }

std::size_t Tensor::rows() const {
  return rank() == 2 ? shape()[0] : 1;
}

std::size_t Tensor::cols() const { return shape().back(); }

std::span<const double> Tensor::values() const { return node_->value; }
std::span<double> Tensor::mutable_values() { return node_->value; }

double Tensor::item() const {
  if (size() != 1)
    throw ContractError("item() on tensor of shape " +
                        shape_to_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  auto node = make_node(shape(), node_->value, node_->requires_grad);
  node->grad = node_->grad;
  return Tensor(std::move(node));
}

Tensor Tensor::detach() const {
  return Tensor(make_node(shape(), node_->value, false));
}

Tensor Tensor::from_op(Shape shape, std::vector<double> values,
                       std::vector<Tensor> parents,
                       std::function<void(detail::Node& self)> backward) {
  const bool needs = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.requires_grad(); });
  auto node = make_node(std::move(shape), std::move(values), needs);
  if (needs) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss, BackwardOptions options) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_to_string(loss.shape())
                                        : std::string("<undefined>")));
  detail::Node* root = &loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS; `order` ends up topologically sorted with every
  // node after all of its parents.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second)
        stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* node : order)
    if (!node->is_leaf()) node->grad.assign(node->value.size(), 0.0);
  root->ensure_grad()[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->backward(**it);

  if (!options.retain_graph) {
    for (detail::Node* node : order) {
      if (node->is_leaf()) continue;
      node->parents.clear();
      node->backward = nullptr;
      node->requires_grad = false;
    }
  }
}

// ---- ops -------------------------------------------------------------------

Tensor affine_transform(const Tensor& x, const Tensor& weight,
                        const Tensor& bias) {
  require_matrix(x, "affine input");
  require_matrix(weight, "affine weight");
  const std::size_t n = x.shape()[0];
  const std::size_t d_in = x.shape()[1];
  const std::size_t d_out = weight.shape()[1];
  if (weight.shape()[0] != d_in || bias.size() != d_out)
    throw DimensionError("affine_transform: x " + shape_to_string(x.shape()) +
                         " incompatible with W " +
                         shape_to_string(weight.shape()) + " and b " +
                         shape_to_string(bias.shape()));
  const auto& k = kernels::active();
  std::vector<double> out(n * d_out);
  for (std::size_t i = 0; i < n; ++i)
    std::copy(bias.values().begin(), bias.values().end(),
              out.begin() + static_cast<std::ptrdiff_t>(i * d_out));
  k.gemm_nn(n, d_in, d_out, x.values(), weight.values(), out);

  return Tensor::from_op(
      {n, d_out}, std::move(out), {x, weight, bias},
      [n, d_in, d_out](detail::Node& self) {
        const auto& k = kernels::active();
        detail::Node& xn = *self.parents[0];
        detail::Node& wn = *self.parents[1];
        detail::Node& bn = *self.parents[2];
        if (xn.requires_grad)
          k.gemm_nt(n, d_out, d_in, self.grad, wn.value, xn.ensure_grad());
        if (wn.requires_grad)
          k.gemm_tn(n, d_in, d_out, xn.value, self.grad, wn.ensure_grad());
        if (bn.requires_grad) k.col_sum(n, d_out, self.grad, bn.ensure_grad());
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  const std::size_t m = a.shape()[0];
  const std::size_t k = a.shape()[1];
  const std::size_t n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  std::vector<double> out(m * n, 0.0);
  kernels::active().gemm_nn(m, k, n, a.values(), b.values(), out);
  return Tensor::from_op({m, n}, std::move(out), {a, b},
                         [m, k, n](detail::Node& self) {
                           const auto& kt = kernels::active();
                           detail::Node& an = *self.parents[0];
                           detail::Node& bn = *self.parents[1];
                           if (an.requires_grad)
                             kt.gemm_nt(m, n, k, self.grad, bn.value,
                                        an.ensure_grad());
                           if (bn.requires_grad)
                             kt.gemm_tn(m, k, n, an.value, self.grad,
                                        bn.ensure_grad());
                         });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  kernels::active().axpy(1.0, b.values(), out);
  return Tensor::from_op(a.shape(), std::move(out), {a, b},
                         [](detail::Node& self) {
                           const auto& k = kernels::active();
                           for (auto& p : self.parents)
                             if (p->requires_grad)
                               k.axpy(1.0, self.grad, p->ensure_grad());
                         });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.values().begin(), a.values().end());
  kernels::active().axpy(-1.0, b.values(), out);
  return Tensor::from_op(a.shape(), std::move(out), {a, b},
                         [](detail::Node& self) {
                           const auto& k = kernels::active();
                           if (self.parents[0]->requires_grad)
                             k.axpy(1.0, self.grad, self.parents[0]->ensure_grad());
                           if (self.parents[1]->requires_grad)
                             k.axpy(-1.0, self.grad, self.parents[1]->ensure_grad());
                         });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.size());
  std::transform(x.values().begin(), x.values().end(), out.begin(),
                 [factor](double v) { return factor * v; });
  return Tensor::from_op(x.shape(), std::move(out), {x},
                         [factor](detail::Node& self) {
                           kernels::active().axpy(factor, self.grad,
                                                  self.parents[0]->ensure_grad());
                         });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return Tensor::from_op({1}, {total}, {x}, [](detail::Node& self) {
    const double g = self.grad[0];
    for (double& v : self.parents[0]->ensure_grad()) v += g;
  });
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor square_sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v * v;
  return Tensor::from_op({1}, {total}, {x}, [](detail::Node& self) {
    detail::Node& xn = *self.parents[0];
    kernels::active().axpy(2.0 * self.grad[0], xn.value, xn.ensure_grad());
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  std::transform(x.values().begin(), x.values().end(), out.begin(),
                 [](double v) { return v < 0.0 ? 0.0 : v; });
  return Tensor::from_op(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    detail::Node& xn = *self.parents[0];
    auto g = xn.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xn.value[i] > 0.0) g[i] += self.grad[i];
  });
}

std::vector<double> softmax_rows(std::span<const double> x, std::size_t cols) {
  std::vector<double> out(x.size());
  const std::size_t rows = x.size() / cols;
  for (std::size_t i = 0; i < rows; ++i) {
    const auto row = x.subspan(i * cols, cols);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      out[i * cols + j] = std::exp(row[j] - mx);
      z += out[i * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] /= z;
  }
  return out;
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

Tensor softmax(const Tensor& x) {
  require_matrix(x, "softmax input");
  const std::size_t c = x.cols();
  auto probs = softmax_rows(x.values(), c);
  std::vector<double> saved = probs;
  return Tensor::from_op(
      x.shape(), std::move(probs), {x},
      [c, saved = std::move(saved)](detail::Node& self) {
        auto g = self.parents[0]->ensure_grad();
        const std::size_t rows = saved.size() / c;
        for (std::size_t i = 0; i < rows; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j)
            dot += self.grad[i * c + j] * saved[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            g[i * c + j] += saved[i * c + j] * (self.grad[i * c + j] - dot);
        }
      });
}

Tensor grad_reverse(const Tensor& x, double scale_factor) {
  if (!(scale_factor >= 0.0))
    throw ContractError("grad_reverse scale must be nonnegative");
  std::vector<double> out(x.values().begin(), x.values().end());
  return Tensor::from_op(x.shape(), std::move(out), {x},
                         [scale_factor](detail::Node& self) {
                           if (scale_factor == 0.0) return;
                           kernels::active().axpy(-scale_factor, self.grad,
                                                  self.parents[0]->ensure_grad());
                         });
}

Tensor weighted_softmax_cross_entropy(const Tensor& logits,
                                      std::span<const int> labels,
                                      std::span<const double> weights) {
  require_matrix(logits, "cross-entropy logits");
  const std::size_t n = logits.rows();
  const std::size_t c = logits.cols();
  if (labels.size() != n || weights.size() != n)
    throw DimensionError("cross-entropy: " + std::to_string(n) +
                         " rows but " + std::to_string(labels.size()) +
                         " labels and " + std::to_string(weights.size()) +
                         " weights");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw LabelRangeError("label " + std::to_string(y) +
                            " outside [0, " + std::to_string(c) + ")");

  const auto x = logits.values();
  auto probs = softmax_rows(x, c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = x.subspan(i * c, c);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    total += weights[i] * (std::log(z) + mx - row[static_cast<std::size_t>(labels[i])]);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<int> ys(labels.begin(), labels.end());
  std::vector<double> ws(weights.begin(), weights.end());
  return Tensor::from_op(
      {1}, {total * inv_n}, {logits},
      [n, c, inv_n, probs = std::move(probs), ys = std::move(ys),
       ws = std::move(ws)](detail::Node& self) {
        const double g = self.grad[0] * inv_n;
        auto dx = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const double gi = g * ws[i];
          for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += gi * probs[i * c + j];
          dx[i * c + static_cast<std::size_t>(ys[i])] -= gi;
        }
      });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::vector<double> ones(labels.size(), 1.0);
  return weighted_softmax_cross_entropy(logits, labels, ones);
}

Tensor weighted_sigmoid_bce(const Tensor& score, std::span<const int> targets,
                            std::span<const double> weights) {
  const std::size_t n = score.size();
  if (!(score.rank() == 1 || (score.rank() == 2 && score.cols() == 1)))
    throw DimensionError("sigmoid_bce expects [N] or [N x 1] scores, got " +
                         shape_to_string(score.shape()));
  if (targets.size() != n || weights.size() != n)
    throw DimensionError("sigmoid_bce: " + std::to_string(n) + " scores but " +
                         std::to_string(targets.size()) + " targets");
  const auto s = score.values();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] != 0 && targets[i] != 1)
      throw LabelRangeError("binary target must be 0 or 1");
    // -[t log sig(s) + (1-t) log(1-sig(s))] = softplus(s) - t*s
    total += weights[i] * (softplus(s[i]) - targets[i] * s[i]);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<int> ts(targets.begin(), targets.end());
  std::vector<double> ws(weights.begin(), weights.end());
  return Tensor::from_op(
      {1}, {total * inv_n}, {score},
      [inv_n, ts = std::move(ts), ws = std::move(ws)](detail::Node& self) {
        detail::Node& sn = *self.parents[0];
        auto g = sn.ensure_grad();
        const double up = self.grad[0] * inv_n;
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] += up * ws[i] * (sigmoid(sn.value[i]) - ts[i]);
      });
}

Tensor sigmoid_bce(const Tensor& score, std::span<const int> targets) {
  const std::vector<double> ones(targets.size(), 1.0);
  return weighted_sigmoid_bce(score, targets, ones);
}

}  // namespace dsbn
