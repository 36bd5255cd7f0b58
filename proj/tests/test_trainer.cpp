#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "msdcda/errors.hpp"
#include "msdcda/evalkit.hpp"
#include "msdcda/rng.hpp"
#include "msdcda/trainer.hpp"

using namespace msdcda;

namespace {

SyntheticSpec bench_spec(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n_sources = 4;
  spec.n_classes = 3;
  spec.feature_dim = 8;
  spec.samples_per_class = 25;
  spec.class_separation = 3.0;
  spec.domain_shift_scale = 1.5;
  spec.rng_seed = seed;
  return spec;
}

ModelDims tiny_dims(std::size_t input, std::size_t classes = 3) {
  ModelDims d;
  d.input = input;
  d.cfe = {10, 8, 6};
  d.branch = 6;
  d.head = 4;
  d.classes = classes;
  return d;
}

TrainConfig quick_cfg(std::size_t epochs = 3, std::uint64_t seed = 5) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.rng_seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("pseudo labels take the row argmax with its probability") {
  Matrix probs(3, 3, 0.0);
  probs(0, 0) = 0.7; probs(0, 1) = 0.2; probs(0, 2) = 0.1;
  probs(1, 0) = 1.0 / 3; probs(1, 1) = 1.0 / 3; probs(1, 2) = 1.0 / 3;
  probs(2, 2) = 1.0;
  auto [labels, conf] = pseudo_label(probs);
  CHECK(labels == std::vector<int>{0, 0, 2});
  CHECK(conf[0] == doctest::Approx(0.7));
  CHECK(conf[1] == doctest::Approx(1.0 / 3));
  CHECK(conf[2] == doctest::Approx(1.0));
}

TEST_CASE("training is bit-for-bit deterministic in the seed") {
  auto [bundle, target] = generate_synthetic(bench_spec(3));
  const TrainConfig cfg = quick_cfg(2, 3);

  MsDcdaModel m1(tiny_dims(8), bundle.n_domains(), 17);
  TrainReport r1 = train(m1, bundle, target, cfg);
  MsDcdaModel m2(tiny_dims(8), bundle.n_domains(), 17);
  TrainReport r2 = train(m2, bundle, target, cfg);

  REQUIRE(r1.loss_log.size() == r2.loss_log.size());
  for (std::size_t i = 0; i < r1.loss_log.size(); ++i) {
    CHECK(r1.loss_log[i].losses.total == r2.loss_log[i].losses.total);
    CHECK(r1.loss_log[i].losses.ce == r2.loss_log[i].losses.ce);
    CHECK(r1.loss_log[i].losses.mmd == r2.loss_log[i].losses.mmd);
    CHECK(r1.loss_log[i].losses.scd == r2.loss_log[i].losses.scd);
    CHECK(r1.loss_log[i].losses.tau == r2.loss_log[i].losses.tau);
  }

  Prediction p1 = m1.predict(target);
  Prediction p2 = m2.predict(target);
  CHECK(p1.labels == p2.labels);
}

TEST_CASE("iteration count follows the largest domain") {
  auto [bundle, target] = generate_synthetic(bench_spec(4));
  // largest domain is the ensemble: 4 sources x 75 rows = 300 rows
  TrainConfig cfg = quick_cfg(2, 1);
  cfg.batch_size = 32;
  MsDcdaModel model(tiny_dims(8), bundle.n_domains(), 1);
  TrainReport r = train(model, bundle, target, cfg);
  const std::size_t per_epoch = (300 + 31) / 32;
  CHECK(r.iterations == per_epoch * 2);
  CHECK(r.loss_log.size() == r.iterations);
}

TEST_CASE("disabling every auxiliary loss reduces the objective to cross entropy") {
  auto [bundle, target] = generate_synthetic(bench_spec(5));
  TrainConfig cfg = quick_cfg(2, 9);
  cfg.disabled_losses = {LossTerm::kMmd, LossTerm::kScd, LossTerm::kDisc};
  MsDcdaModel model(tiny_dims(8), bundle.n_domains(), 2);
  TrainReport r = train(model, bundle, target, cfg);
  for (const auto& row : r.loss_log) {
    CHECK(row.losses.total == row.losses.ce);
    CHECK(row.losses.mmd == 0.0);
    CHECK(row.losses.scd == 0.0);
    CHECK(row.losses.disc == 0.0);
  }
}

TEST_CASE("tau is logged inside the unit interval and static ratios pin it") {
  auto [bundle, target] = generate_synthetic(bench_spec(6));
  SUBCASE("dynamic") {
    TrainConfig cfg = quick_cfg(2, 11);
    MsDcdaModel model(tiny_dims(8), bundle.n_domains(), 3);
    TrainReport r = train(model, bundle, target, cfg);
    for (const auto& row : r.loss_log) {
      CHECK(row.losses.tau >= 0.0);
      CHECK(row.losses.tau <= 1.0);
    }
  }
  SUBCASE("static 7:3") {
    TrainConfig cfg = quick_cfg(2, 11);
    cfg.static_ratio = std::make_pair(7.0, 3.0);
    MsDcdaModel model(tiny_dims(8), bundle.n_domains(), 3);
    TrainReport r = train(model, bundle, target, cfg);
    for (const auto& row : r.loss_log) CHECK(row.losses.tau == doctest::Approx(0.3).epsilon(1e-15));
  }
}

TEST_CASE("per-iteration breakdown satisfies the weighting identity") {
  auto [bundle, target] = generate_synthetic(bench_spec(7));
  TrainConfig cfg = quick_cfg(2, 13);
  MsDcdaModel model(tiny_dims(8), bundle.n_domains(), 4);
  TrainReport r = train(model, bundle, target, cfg);
  for (const auto& row : r.loss_log) {
    const auto& l = row.losses;
    const double want = l.ce + l.alpha * ((1.0 - l.tau) * l.disc + l.tau * l.mmd) + l.beta * l.scd;
    CHECK(std::fabs(l.total - want) <= 1e-12);
  }
}

TEST_CASE("optimization drives the classification loss down") {
  // several seeds, 50 epochs on a small task
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto [bundle, target] = generate_synthetic(bench_spec(100 + seed));
    TrainConfig cfg = quick_cfg(50, seed);
    MsDcdaModel model(tiny_dims(8), bundle.n_domains(), seed);
    TrainReport r = train(model, bundle, target, cfg);
    const double first = r.loss_log.front().losses.ce;
    const double last = r.loss_log.back().losses.ce;
    CHECK(last < first);
  }
}

// Minimal plain-matrix reimplementation of the CE-only path: same
// initialization stream, same batching, same operation order, library Adam.
// Validates the graph-built trainer end to end.
namespace ce_oracle {

struct Layer {
  Matrix w, b;
};

struct Net {
  std::vector<Layer> cfe;
  std::vector<Layer> branches;
  std::vector<Layer> head_hidden;
  std::vector<Layer> head_out;
};

Matrix glorot(std::size_t out, std::size_t in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  Matrix w(out, in);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
  return w;
}

Net build(const ModelDims& dims, std::size_t branches, std::uint64_t seed) {
  Rng rng(seed);
  Net net;
  std::size_t in = dims.input;
  for (std::size_t i = 0; i < dims.cfe.size(); ++i) {
    net.cfe.push_back({glorot(dims.cfe[i], in, rng), Matrix(1, dims.cfe[i], 0.0)});
    in = dims.cfe[i];
  }
  for (std::size_t i = 0; i < branches; ++i) {
    net.branches.push_back({glorot(dims.branch, dims.cfe.back(), rng), Matrix(1, dims.branch, 0.0)});
    net.head_hidden.push_back({glorot(dims.head, dims.branch, rng), Matrix(1, dims.head, 0.0)});
    net.head_out.push_back({glorot(dims.classes, dims.head, rng), Matrix(1, dims.classes, 0.0)});
  }
  return net;
}

Matrix affine_fwd(const Matrix& x, const Layer& l) {
  Matrix y = matmul_bt(x, l.w);
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t c = 0; c < y.cols(); ++c) y(r, c) += l.b(0, c);
  return y;
}

Matrix leaky_fwd(const Matrix& x) {
  Matrix y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] > 0.0 ? y[i] : 0.01 * y[i];
  return y;
}

Matrix softmax_fwd(const Matrix& z) {
  Matrix p = z;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double mx = p(r, 0);
    for (std::size_t c = 1; c < p.cols(); ++c) mx = std::max(mx, p(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < p.cols(); ++c) {
      p(r, c) = std::exp(p(r, c) - mx);
      s += p(r, c);
    }
    for (std::size_t c = 0; c < p.cols(); ++c) p(r, c) /= s;
  }
  return p;
}

// Mirrors the trainer's sampler: shuffled cursor, reshuffle on wrap.
class Sampler {
 public:
  Sampler(std::size_t rows, Rng rng) : rng_(std::move(rng)), order_(rows) {
    std::iota(order_.begin(), order_.end(), 0);
    rng_.shuffle(order_);
  }
  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> idx;
    if (order_.size() >= batch && cursor_ + batch > order_.size()) reshuffle();
    while (idx.size() < batch) {
      if (cursor_ == order_.size()) reshuffle();
      idx.push_back(order_[cursor_++]);
    }
    return idx;
  }

 private:
  void reshuffle() {
    rng_.shuffle(order_);
    cursor_ = 0;
  }
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace ce_oracle

TEST_CASE("ce-only training matches a hand-built multi-branch classifier") {
  auto [bundle, target] = generate_synthetic(bench_spec(8));
  ModelDims dims = tiny_dims(8);
  dims.bn_cfe = false;
  dims.bn_mbc = false;
  const std::uint64_t model_seed = 21;

  TrainConfig cfg = quick_cfg(3, 33);
  cfg.disabled_losses = {LossTerm::kMmd, LossTerm::kScd, LossTerm::kDisc};

  MsDcdaModel model(dims, bundle.n_domains(), model_seed);
  TrainReport report = train(model, bundle, target, cfg);

  // --- replay with the oracle ---
  using namespace ce_oracle;
  Net net = build(dims, bundle.n_domains(), model_seed);
  const std::size_t n_domains = bundle.n_domains();

  Rng root(cfg.rng_seed);
  std::vector<Sampler> samplers;
  std::size_t max_rows = target.rows();
  for (std::size_t i = 0; i < n_domains; ++i) {
    samplers.emplace_back(bundle.domain(i).rows(), root.child(10 + i));
    max_rows = std::max(max_rows, bundle.domain(i).rows());
  }
  Sampler target_sampler(target.rows(), root.child(9));
  const std::size_t iters = ((max_rows + cfg.batch_size - 1) / cfg.batch_size) * cfg.epochs;
  REQUIRE(iters == report.iterations);

  // flatten parameters in the same order as MsDcdaModel::parameters()
  std::vector<Tensor> params;
  for (auto& l : net.cfe) {
    params.push_back(Tensor::leaf(l.w, true));
    params.push_back(Tensor::leaf(l.b, true));
  }
  for (auto& l : net.branches) {
    params.push_back(Tensor::leaf(l.w, true));
    params.push_back(Tensor::leaf(l.b, true));
  }
  for (std::size_t i = 0; i < n_domains; ++i) {
    params.push_back(Tensor::leaf(net.head_hidden[i].w, true));
    params.push_back(Tensor::leaf(net.head_hidden[i].b, true));
    params.push_back(Tensor::leaf(net.head_out[i].w, true));
    params.push_back(Tensor::leaf(net.head_out[i].b, true));
  }
  auto layer_at = [&](std::size_t index) {
    return ce_oracle::Layer{params[index].value(), params[index + 1].value()};
  };

  AdamState adam;
  adam.lr = cfg.lr;
  adam.init(params);

  const std::size_t batch = cfg.batch_size;
  for (std::size_t iter = 0; iter < iters; ++iter) {
    for (auto& p : params) p.zero_grad();

    double ce_acc = 0.0;
    for (std::size_t i = 0; i < n_domains; ++i) {
      const auto idx = samplers[i].next(batch);
      Matrix x(batch, 8);
      std::vector<int> y(batch);
      for (std::size_t r = 0; r < batch; ++r) {
        std::copy(bundle.domain(i).values.row(idx[r]), bundle.domain(i).values.row(idx[r]) + 8, x.row(r));
        y[r] = bundle.domain(i).labels[idx[r]];
      }

      // forward, keeping every intermediate for the backward pass
      std::vector<Matrix> acts{x};
      Matrix h = x;
      for (std::size_t b = 0; b < 3; ++b) {
        h = affine_fwd(h, layer_at(b * 2));
        acts.push_back(h);  // pre-activation
        h = leaky_fwd(h);
        acts.push_back(h);
      }
      const std::size_t branch_at = 6 + i * 2;
      Matrix z_br = affine_fwd(h, layer_at(branch_at));
      Matrix a_br = leaky_fwd(z_br);
      const std::size_t head_at = 6 + n_domains * 2 + i * 4;
      Matrix z_hid = affine_fwd(a_br, layer_at(head_at));
      Matrix z_out = affine_fwd(z_hid, layer_at(head_at + 2));
      Matrix probs = softmax_fwd(z_out);

      double branch_ce = 0.0;
      for (std::size_t r = 0; r < batch; ++r)
        branch_ce -= std::log(std::max(probs(r, static_cast<std::size_t>(y[r])), 1e-12));
      ce_acc += branch_ce / static_cast<double>(batch);

      // backward in the same decomposition the graph uses:
      // d logp = onehot * (-1/batch) * (1/branches); dp = dlogp / p; then softmax
      const double coeff = (1.0 / static_cast<double>(n_domains)) * (-1.0 / static_cast<double>(batch));
      Matrix dp(batch, probs.cols(), 0.0);
      for (std::size_t r = 0; r < batch; ++r) {
        const auto c = static_cast<std::size_t>(y[r]);
        dp(r, c) = coeff / probs(r, c);
      }
      Matrix dz(batch, probs.cols());
      for (std::size_t r = 0; r < batch; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < probs.cols(); ++c) dot += dp(r, c) * probs(r, c);
        for (std::size_t c = 0; c < probs.cols(); ++c) dz(r, c) = probs(r, c) * (dp(r, c) - dot);
      }

      auto affine_bwd = [&](const Matrix& g, const Matrix& input, std::size_t at) {
        params[at].accumulate_grad(matmul_at(g, input));
        Matrix gb(1, g.cols(), 0.0);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
        params[at + 1].accumulate_grad(gb);
        return matmul(g, params[at].value());
      };

      Matrix g = affine_bwd(dz, z_hid, head_at + 2);
      g = affine_bwd(g, a_br, head_at);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] *= z_br[j] > 0.0 ? 1.0 : 0.01;
      g = affine_bwd(g, acts[6], branch_at);
      for (int b = 2; b >= 0; --b) {
        const Matrix& pre = acts[static_cast<std::size_t>(b) * 2 + 1];
        for (std::size_t j = 0; j < g.size(); ++j) g[j] *= pre[j] > 0.0 ? 1.0 : 0.01;
        g = affine_bwd(g, acts[static_cast<std::size_t>(b) * 2], static_cast<std::size_t>(b) * 2);
      }
    }
    target_sampler.next(batch);  // keep the target stream aligned even though CE ignores it
    const double ce_value = ce_acc / static_cast<double>(n_domains);
    CHECK(std::fabs(ce_value - report.loss_log[iter].losses.ce) <= 1e-10 * std::max(1.0, std::fabs(ce_value)));

    adam_step(params, adam);
  }

  // trajectories agree: final parameters of both paths coincide
  auto model_params = model.parameters();
  REQUIRE(model_params.size() == params.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    REQUIRE(model_params[i].value().size() == params[i].value().size());
    for (std::size_t j = 0; j < params[i].value().size(); ++j) {
      const double a = model_params[i].value()[j], b = params[i].value()[j];
      worst = std::max(worst, std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-8}));
    }
  }
  CHECK(worst <= 1e-8);
}

TEST_CASE("config validation rejects bad settings") {
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.static_ratio = std::make_pair(0.0, 0.0);
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
