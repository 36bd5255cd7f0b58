#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "msdcda/matrix.hpp"

namespace msdcda {

// Reverse-mode autodiff over dense matrices. A Tensor is a handle to a graph
// node; ops build the graph, backward() walks it in reverse topological
// order. Leaf gradients accumulate across backward() calls; intermediate
// gradients are reset per call.
class Tensor {
 public:
  struct Node {
    Matrix value;
    Matrix grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Consumes this node's grad and pushes contributions into parents.
    std::function<void(Node&)> backward_fn;
  };

  Tensor() = default;

  // Leaf node. Parameters and differentiable inputs set requires_grad.
  static Tensor leaf(Matrix value, bool requires_grad = false);
  // Non-differentiable constant (masks, data batches).
  static Tensor constant(Matrix value);
  static Tensor scalar(double v) { return constant(Matrix::scalar(v)); }

  bool valid() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Matrix& value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  bool is_scalar() const { return rows() == 1 && cols() == 1; }
  double scalar_value() const;

  void zero_grad();
  void accumulate_grad(const Matrix& g);

  std::shared_ptr<Node> node() const { return node_; }

  // Backpropagate from a scalar loss. Repeated calls accumulate into leaves.
  friend void backward(const Tensor& loss);

  static Tensor from_node(std::shared_ptr<Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<Node> node_;
};

void backward(const Tensor& loss);

// --- ops ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor sub(const Tensor& a, const Tensor& b);        // same shape
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise
Tensor divide(const Tensor& a, const Tensor& b);     // elementwise
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);
// y = x * W^T + b with W out-by-in and b 1-by-out
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor sum(const Tensor& a);                         // 1x1
Tensor mean(const Tensor& a);                        // 1x1
Tensor abs(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log_floor(const Tensor& a, double floor);     // ln(max(a, floor))
Tensor leaky_relu(const Tensor& a, double slope);
Tensor clamp_min0(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
// D[u, v] = squared Euclidean distance between row u of a and row v of b
Tensor pairwise_sqdist(const Tensor& a, const Tensor& b);

}  // namespace msdcda
