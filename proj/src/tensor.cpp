#include "msdcda/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace msdcda {

namespace {

using Node = Tensor::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr make_op(Matrix value, std::vector<NodePtr> parents, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  n->requires_grad = needs;
  if (needs) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

void accumulate(Node& n, const Matrix& g) {
  if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Tensor Tensor::leaf(Matrix value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return from_node(std::move(n));
}

Tensor Tensor::constant(Matrix value) { return leaf(std::move(value), false); }

double Tensor::scalar_value() const {
  if (!is_scalar()) throw std::invalid_argument("scalar_value: tensor is not 1x1");
  return node_->value[0];
}

void Tensor::zero_grad() {
  if (node_->grad.empty())
    node_->grad = Matrix(rows(), cols(), 0.0);
  else
    node_->grad.fill(0.0);
}

void Tensor::accumulate_grad(const Matrix& g) { accumulate(*node_, g); }

void backward(const Tensor& loss) {
  if (!loss.is_scalar()) throw std::invalid_argument("backward: loss must be a scalar");

  // Topological order over nodes that require grad.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  Node* root = loss.node().get();
  if (!root->requires_grad) return;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx].get();
      ++idx;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior grads are per-call scratch; leaf grads persist and accumulate.
  for (Node* n : order) {
    if (n->backward_fn) {
      if (n->grad.empty())
        n->grad = Matrix(n->value.rows(), n->value.cols(), 0.0);
      else
        n->grad.fill(0.0);
    }
  }

  accumulate(*root, Matrix::scalar(1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// --- ops ---------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Matrix v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += b.value()[i];
  auto pa = a.node(), pb = b.node();
  return Tensor::from_node(make_op(std::move(v), {pa, pb}, [pa, pb](Node& n) {
    if (pa->requires_grad) accumulate(*pa, n.grad);
    if (pb->requires_grad) accumulate(*pb, n.grad);
  }));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Matrix v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return Tensor::from_node(make_op(std::move(v), {pa, pb}, [pa, pb](Node& n) {
    if (pa->requires_grad) accumulate(*pa, n.grad);
    if (pb->requires_grad) {
      Matrix g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = -g[i];
      accumulate(*pb, g);
    }
  }));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Matrix v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return Tensor::from_node(make_op(std::move(v), {pa, pb}, [pa, pb](Node& n) {
    if (pa->requires_grad) {
      Matrix g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= pb->value[i];
      accumulate(*pa, g);
    }
    if (pb->requires_grad) {
      Matrix g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= pa->value[i];
      accumulate(*pb, g);
    }
  }));
}

Tensor divide(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "divide");
  Matrix v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] /= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return Tensor::from_node(make_op(std::move(v), {pa, pb}, [pa, pb](Node& n) {
    if (pa->requires_grad) {
      Matrix g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] /= pb->value[i];
      accumulate(*pa, g);
    }
    if (pb->requires_grad) {
      Matrix g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double bv = pb->value[i];
        g[i] *= -pa->value[i] / (bv * bv);
      }
      accumulate(*pb, g);
    }
  }));
}

Tensor scale(const Tensor& a, double c) {
  Matrix v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= c;
  auto pa = a.node();
  return Tensor::from_node(make_op(std::move(v), {pa}, [pa, c](Node& n) {
    Matrix g = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= c;
    accumulate(*pa, g);
  }));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Matrix v = matmul(a.value(), b.value());
  auto pa = a.node(), pb = b.node();
  return Tensor::from_node(make_op(std::move(v), {pa, pb}, [pa, pb](Node& n) {
    if (pa->requires_grad) accumulate(*pa, matmul_bt(n.grad, pb->value));
    if (pb->requires_grad) accumulate(*pb, matmul_at(pa->value, n.grad));
  }));
}

Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.cols() != weight.cols()) throw std::invalid_argument("affine: input width does not match weight");
  if (bias.rows() != 1 || bias.cols() != weight.rows()) throw std::invalid_argument("affine: bias shape mismatch");
  Matrix v = matmul_bt(x.value(), weight.value());
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < v.cols(); ++c) v(r, c) += bias.value()(0, c);
  auto px = x.node(), pw = weight.node(), pb = bias.node();
  return Tensor::from_node(make_op(std::move(v), {px, pw, pb}, [px, pw, pb](Node& n) {
    if (px->requires_grad) accumulate(*px, matmul(n.grad, pw->value));
    if (pw->requires_grad) accumulate(*pw, matmul_at(n.grad, px->value));
    if (pb->requires_grad) {
      Matrix g(1, n.grad.cols(), 0.0);
      for (std::size_t r = 0; r < n.grad.rows(); ++r)
        for (std::size_t c = 0; c < n.grad.cols(); ++c) g(0, c) += n.grad(r, c);
      accumulate(*pb, g);
    }
  }));
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) s += a.value()[i];
  auto pa = a.node();
  return Tensor::from_node(make_op(Matrix::scalar(s), {pa}, [pa](Node& n) {
    accumulate(*pa, Matrix(pa->value.rows(), pa->value.cols(), n.grad[0]));
  }));
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.value().size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) s += a.value()[i];
  auto pa = a.node();
  return Tensor::from_node(make_op(Matrix::scalar(s * inv), {pa}, [pa, inv](Node& n) {
    accumulate(*pa, Matrix(pa->value.rows(), pa->value.cols(), n.grad[0] * inv));
  }));
}

Tensor abs(const Tensor& a) {
  Matrix v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::fabs(v[i]);
  auto pa = a.node();
  return Tensor::from_node(make_op(std::move(v), {pa}, [pa](Node& n) {
    Matrix g = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = pa->value[i];
      g[i] *= (x > 0.0) ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
    }
    accumulate(*pa, g);
  }));
}

Tensor exp(const Tensor& a) {
  Matrix v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(v[i]);
  auto pa = a.node();
  Matrix out = v;
  return Tensor::from_node(make_op(std::move(v), {pa}, [pa, out](Node& n) {
    Matrix g = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= out[i];
    accumulate(*pa, g);
  }));
}

Tensor log_floor(const Tensor& a, double floor) {
  Matrix v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(std::max(v[i], floor));
  auto pa = a.node();
  return Tensor::from_node(make_op(std::move(v), {pa}, [pa, floor](Node& n) {
    Matrix g = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = pa->value[i];
      g[i] = (x > floor) ? g[i] / x : 0.0;
    }
    accumulate(*pa, g);
  }));
}

Tensor leaky_relu(const Tensor& a, double slope) {
  Matrix v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] > 0.0) ? v[i] : slope * v[i];
  auto pa = a.node();
  return Tensor::from_node(make_op(std::move(v), {pa}, [pa, slope](Node& n) {
    Matrix g = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= (pa->value[i] > 0.0) ? 1.0 : slope;
    accumulate(*pa, g);
  }));
}

Tensor clamp_min0(const Tensor& a) {
  Matrix v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(v[i], 0.0);
  auto pa = a.node();
  return Tensor::from_node(make_op(std::move(v), {pa}, [pa](Node& n) {
    Matrix g = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= (pa->value[i] > 0.0) ? 1.0 : 0.0;
    accumulate(*pa, g);
  }));
}

Tensor softmax_rows(const Tensor& a) {
  Matrix v = a.value();
  for (std::size_t r = 0; r < v.rows(); ++r) {
    double* row = v.row(r);
    double mx = row[0];
    for (std::size_t c = 1; c < v.cols(); ++c) mx = std::max(mx, row[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < v.cols(); ++c) {
      row[c] = std::exp(row[c] - mx);
      s += row[c];
    }
    for (std::size_t c = 0; c < v.cols(); ++c) row[c] /= s;
  }
  auto pa = a.node();
  Matrix probs = v;
  return Tensor::from_node(make_op(std::move(v), {pa}, [pa, probs](Node& n) {
    Matrix g(probs.rows(), probs.cols());
    for (std::size_t r = 0; r < probs.rows(); ++r) {
      const double* p = probs.row(r);
      const double* go = n.grad.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < probs.cols(); ++c) dot += go[c] * p[c];
      double* gi = g.row(r);
      for (std::size_t c = 0; c < probs.cols(); ++c) gi[c] = p[c] * (go[c] - dot);
    }
    accumulate(*pa, g);
  }));
}

Tensor pairwise_sqdist(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("pairwise_sqdist: widths differ");
  const std::size_t n = a.rows(), m = b.rows(), k = a.cols();
  Matrix v(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a.value().row(i);
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = b.value().row(j);
      double d = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        const double t = ai[c] - bj[c];
        d += t * t;
      }
      v(i, j) = d;
    }
  }
  auto pa = a.node(), pb = b.node();
  return Tensor::from_node(make_op(std::move(v), {pa, pb}, [pa, pb, n, m, k](Node& nd) {
    // dA[i,:] += 2 * sum_j g[i,j] * (a_i - b_j); dB symmetric with opposite sign
    if (pa->requires_grad) {
      Matrix ga(n, k, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double* ai = pa->value.row(i);
        double* gi = ga.row(i);
        for (std::size_t j = 0; j < m; ++j) {
          const double g2 = 2.0 * nd.grad(i, j);
          if (g2 == 0.0) continue;
          const double* bj = pb->value.row(j);
          for (std::size_t c = 0; c < k; ++c) gi[c] += g2 * (ai[c] - bj[c]);
        }
      }
      accumulate(*pa, ga);
    }
    if (pb->requires_grad) {
      Matrix gb(m, k, 0.0);
      for (std::size_t j = 0; j < m; ++j) {
        const double* bj = pb->value.row(j);
        double* gj = gb.row(j);
        for (std::size_t i = 0; i < n; ++i) {
          const double g2 = 2.0 * nd.grad(i, j);
          if (g2 == 0.0) continue;
          const double* ai = pa->value.row(i);
          for (std::size_t c = 0; c < k; ++c) gj[c] += g2 * (bj[c] - ai[c]);
        }
      }
      accumulate(*pb, gb);
    }
  }));
}

}  // namespace msdcda
