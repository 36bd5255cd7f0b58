#include "msdcda/layers.hpp"

#include <cmath>
#include <stdexcept>

#include "msdcda/errors.hpp"

namespace msdcda {

namespace {

void accumulate_into(Tensor::Node& n, const Matrix& g) {
  if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

}  // namespace

AffineLayer::AffineLayer(std::size_t in, std::size_t out, Rng& rng) {
  // Glorot uniform, biases zero.
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  Matrix w(out, in);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
  weight = Tensor::leaf(std::move(w), true);
  bias = Tensor::leaf(Matrix(1, out, 0.0), true);
}

BatchNormLayer::BatchNormLayer(std::size_t features)
    : gamma(Tensor::leaf(Matrix(1, features, 1.0), true)),
      beta(Tensor::leaf(Matrix(1, features, 0.0), true)),
      running_mean(1, features, 0.0),
      running_var(1, features, 1.0) {}

Tensor BatchNormLayer::forward(const Tensor& x, Mode mode) {
  const std::size_t n = x.rows(), f = x.cols();
  if (f != gamma.cols()) throw std::invalid_argument("batchnorm: feature width mismatch");

  if (mode == Mode::kTrain) {
    if (n < 2) throw std::invalid_argument("batchnorm: train mode needs batch of at least 2");

    Matrix mu(1, f, 0.0), var(1, f, 0.0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < f; ++c) mu(0, c) += x.value()(r, c);
    for (std::size_t c = 0; c < f; ++c) mu(0, c) /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < f; ++c) {
        const double d = x.value()(r, c) - mu(0, c);
        var(0, c) += d * d;
      }
    for (std::size_t c = 0; c < f; ++c) var(0, c) /= static_cast<double>(n);

    // Running buffers track the unbiased batch variance.
    const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
    for (std::size_t c = 0; c < f; ++c) {
      running_mean(0, c) = (1.0 - momentum) * running_mean(0, c) + momentum * mu(0, c);
      running_var(0, c) = (1.0 - momentum) * running_var(0, c) + momentum * var(0, c) * unbias;
    }

    Matrix inv_std(1, f);
    for (std::size_t c = 0; c < f; ++c) inv_std(0, c) = 1.0 / std::sqrt(var(0, c) + eps);
    Matrix xhat(n, f);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < f; ++c) xhat(r, c) = (x.value()(r, c) - mu(0, c)) * inv_std(0, c);

    Matrix out(n, f);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < f; ++c) out(r, c) = gamma.value()(0, c) * xhat(r, c) + beta.value()(0, c);

    auto px = x.node();
    auto pg = gamma.node();
    auto pb = beta.node();
    auto node = std::make_shared<Tensor::Node>();
    node->value = std::move(out);
    node->requires_grad = px->requires_grad || pg->requires_grad || pb->requires_grad;
    if (node->requires_grad) {
      node->parents = {px, pg, pb};
      node->backward_fn = [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), n, f](Tensor::Node& nd) {
        const Matrix& g = nd.grad;
        Matrix sum_g(1, f, 0.0), sum_gx(1, f, 0.0);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < f; ++c) {
            sum_g(0, c) += g(r, c);
            sum_gx(0, c) += g(r, c) * xhat(r, c);
          }
        if (pb->requires_grad) accumulate_into(*pb, sum_g);
        if (pg->requires_grad) accumulate_into(*pg, sum_gx);
        if (px->requires_grad) {
          Matrix gx(n, f);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < f; ++c) {
              const double t = g(r, c) - inv_n * sum_g(0, c) - xhat(r, c) * inv_n * sum_gx(0, c);
              gx(r, c) = pg->value(0, c) * inv_std(0, c) * t;
            }
          accumulate_into(*px, gx);
        }
      };
    }
    return Tensor::from_node(std::move(node));
  }

  // Eval: deterministic function of input and running statistics.
  Matrix shift(1, f), sc(1, f);
  for (std::size_t c = 0; c < f; ++c) {
    sc(0, c) = 1.0 / std::sqrt(running_var(0, c) + eps);
    shift(0, c) = running_mean(0, c);
  }
  Matrix out(n, f);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < f; ++c)
      out(r, c) = gamma.value()(0, c) * (x.value()(r, c) - shift(0, c)) * sc(0, c) + beta.value()(0, c);

  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  auto node = std::make_shared<Tensor::Node>();
  node->value = std::move(out);
  node->requires_grad = px->requires_grad || pg->requires_grad || pb->requires_grad;
  if (node->requires_grad) {
    node->parents = {px, pg, pb};
    node->backward_fn = [px, pg, pb, sc = std::move(sc), shift = std::move(shift), n, f](Tensor::Node& nd) {
      const Matrix& g = nd.grad;
      if (px->requires_grad) {
        Matrix gx(n, f);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < f; ++c) gx(r, c) = g(r, c) * pg->value(0, c) * sc(0, c);
        accumulate_into(*px, gx);
      }
      if (pg->requires_grad) {
        Matrix gg(1, f, 0.0);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < f; ++c) gg(0, c) += g(r, c) * (px->value(r, c) - shift(0, c)) * sc(0, c);
        accumulate_into(*pg, gg);
      }
      if (pb->requires_grad) {
        Matrix gb(1, f, 0.0);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < f; ++c) gb(0, c) += g(r, c);
        accumulate_into(*pb, gb);
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

void AdamState::init(const std::vector<Tensor>& params) {
  step = 0;
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(p.rows(), p.cols(), 0.0);
    v.emplace_back(p.rows(), p.cols(), 0.0);
  }
}

void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state not initialized for parameters");
  for (const auto& p : params)
    if (!p.has_grad()) throw NumericError("adam_step: parameter has no gradient");

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& val = params[i].value();
    const Matrix& g = params[i].grad();
    Matrix& mi = state.m[i];
    Matrix& vi = state.v[i];
    for (std::size_t j = 0; j < val.size(); ++j) {
      mi[j] = state.beta1 * mi[j] + (1.0 - state.beta1) * g[j];
      vi[j] = state.beta2 * vi[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = mi[j] / bc1;
      const double vhat = vi[j] / bc2;
      val[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

void zero_grads(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace msdcda
