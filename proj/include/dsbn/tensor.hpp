#pragma once

// Dense f64 tensors with a dynamically built reverse-mode graph.
//
// A Tensor is a cheap handle; copies alias the same storage (use clone() for a
// deep copy). Ops on tensors that require gradients record a backward closure
// and keep their inputs alive until backward() releases the graph.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dsbn {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node& self)> backward;

  bool is_leaf() const { return !backward; }
  std::span<double> ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  // Leaf that receives gradients.
  static Tensor parameter(Shape shape, std::vector<double> values);
  // Leaf that never receives gradients.
  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rank() const { return shape().size(); }
  // Extents of a rank-2 tensor. Rank-1 tensors are treated as one row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double item() const;

  bool requires_grad() const;
  bool has_grad() const;
  // Empty span if no gradient was accumulated yet.
  std::span<const double> grad() const;
  void zero_grad();

  // Deep copy as a leaf with the same requires_grad flag.
  Tensor clone() const;
  // Constant leaf sharing nothing with this tensor.
  Tensor detach() const;

  // Identity of the underlying storage.
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  // Builds a graph node. If no parent requires a gradient the closure is
  // dropped and the result is a constant.
  static Tensor from_op(Shape shape, std::vector<double> values,
                        std::vector<Tensor> parents,
                        std::function<void(detail::Node& self)> backward);

  // Internal access for op implementations.
  detail::Node& node() const { return *node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

struct Parameter {
  Tensor tensor;
  bool trainable = true;
};

struct BackwardOptions {
  // Keep the graph so backward() can be called again on the same loss.
  bool retain_graph = false;
};

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires a
// gradient. Repeated calls add up until zero_grad(). Throws ContractError if
// loss is not a single-element tensor.
void backward(const Tensor& loss, BackwardOptions options = {});

// ---- differentiable ops ----------------------------------------------------

// y = x W + b with x[N x d_in], W[d_in x d_out], b[d_out].
Tensor affine_transform(const Tensor& x, const Tensor& weight,
                        const Tensor& bias);
// a[m x k] b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Sum of squared elements.
Tensor square_sum(const Tensor& x);
Tensor relu(const Tensor& x);
// Row-wise softmax of x[N x C].
Tensor softmax(const Tensor& x);

// Forward identity; backward multiplies the incoming gradient by -scale.
Tensor grad_reverse(const Tensor& x, double scale);

// mean_i -log softmax(logits_i)[labels_i]
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
// (1/N) sum_i w_i * -log softmax(logits_i)[labels_i]
Tensor weighted_softmax_cross_entropy(const Tensor& logits,
                                      std::span<const int> labels,
                                      std::span<const double> weights);

// mean_i BCE(sigmoid(score_i), target_i); score is [N] or [N x 1].
Tensor sigmoid_bce(const Tensor& score, std::span<const int> targets);
// (1/N) sum_i w_i * BCE(sigmoid(score_i), target_i)
Tensor weighted_sigmoid_bce(const Tensor& score, std::span<const int> targets,
                            std::span<const double> weights);

// ---- non-differentiable helpers -------------------------------------------

// Row-wise softmax probabilities of x[N x C] (no graph).
std::vector<double> softmax_rows(std::span<const double> x, std::size_t cols);
// Index of the largest element; ties go to the lowest index.
std::size_t argmax(std::span<const double> row);

}  // namespace dsbn
