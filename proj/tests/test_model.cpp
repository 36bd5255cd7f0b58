#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "msdcda/errors.hpp"
#include "msdcda/losses.hpp"
#include "msdcda/model.hpp"
#include "msdcda/rng.hpp"

using namespace msdcda;

namespace {

ModelDims small_dims(std::size_t input = 6, std::size_t classes = 3) {
  ModelDims d;
  d.input = input;
  d.cfe = {8, 8, 6};
  d.branch = 6;
  d.head = 4;
  d.classes = classes;
  return d;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = scale * rng.normal();
  return m;
}

FeatureMatrix random_features(std::size_t rows, std::size_t dim, Rng& rng) {
  FeatureMatrix fm;
  fm.values = random_matrix(rows, dim, rng);
  return fm;
}

double grad_norm(const Tensor& t) {
  if (!t.has_grad()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < t.grad().size(); ++i) s += t.grad()[i] * t.grad()[i];
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("forward produces one probability matrix per branch") {
  const std::size_t n_branches = 15;  // 14 sources plus the ensemble
  MsDcdaModel model(small_dims(), n_branches, 99);
  Rng rng(1);
  std::vector<Tensor> sources;
  for (std::size_t i = 0; i < n_branches; ++i) sources.push_back(Tensor::constant(random_matrix(32, 6, rng)));
  Tensor target = Tensor::constant(random_matrix(32, 6, rng));

  BranchOutputs out = model.forward(sources, target, Mode::kTrain);
  REQUIRE(out.probs_source.size() == 15);
  REQUIRE(out.probs_target.size() == 15);
  for (std::size_t i = 0; i < n_branches; ++i) {
    CHECK(out.probs_source[i].rows() == 32);
    CHECK(out.probs_source[i].cols() == 3);
    CHECK(out.probs_target[i].rows() == 32);
    CHECK(out.probs_target[i].cols() == 3);
    for (std::size_t r = 0; r < 32; ++r) {
      double s = 0.0, st = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        s += out.probs_source[i].value()(r, c);
        st += out.probs_target[i].value()(r, c);
      }
      CHECK(std::fabs(s - 1.0) <= 1e-10);
      CHECK(std::fabs(st - 1.0) <= 1e-10);
    }
  }

  CHECK_THROWS_AS(model.forward({sources[0]}, target, Mode::kTrain), DataError);
}

TEST_CASE("branches with identical weights and inputs produce identical outputs") {
  MsDcdaModel model(small_dims(), 2, 7);
  auto params = model.parameters();
  // layout: 3 cfe blocks of 4 params, then per-branch blocks of 4, then heads of 4
  const std::size_t cfe_end = 12;
  for (std::size_t k = 0; k < 4; ++k) params[cfe_end + 4 + k].value() = params[cfe_end + k].value();
  const std::size_t heads_at = cfe_end + 8;
  for (std::size_t k = 0; k < 4; ++k) params[heads_at + 4 + k].value() = params[heads_at + k].value();

  Rng rng(2);
  Matrix batch = random_matrix(8, 6, rng);
  BranchOutputs out = model.forward({Tensor::constant(batch), Tensor::constant(batch)},
                                    Tensor::constant(random_matrix(8, 6, rng)), Mode::kEval);
  for (std::size_t i = 0; i < out.probs_source[0].value().size(); ++i)
    CHECK(out.probs_source[0].value()[i] == out.probs_source[1].value()[i]);
  for (std::size_t i = 0; i < out.branch_target[0].value().size(); ++i)
    CHECK(out.branch_target[0].value()[i] == out.branch_target[1].value()[i]);
}

TEST_CASE("eval mode forward is bit identical across calls") {
  MsDcdaModel model(small_dims(), 3, 5);
  Rng rng(3);
  std::vector<Tensor> sources;
  for (int i = 0; i < 3; ++i) sources.push_back(Tensor::constant(random_matrix(4, 6, rng)));
  Tensor target = Tensor::constant(random_matrix(4, 6, rng));

  BranchOutputs a = model.forward(sources, target, Mode::kEval);
  BranchOutputs b = model.forward(sources, target, Mode::kEval);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < a.probs_target[i].value().size(); ++j)
      CHECK(a.probs_target[i].value()[j] == b.probs_target[i].value()[j]);
}

TEST_CASE("prediction averages branches and breaks ties toward the lowest class") {
  // force two heads to emit one-hot opposites by rigging the output biases
  ModelDims dims = small_dims();
  MsDcdaModel model(dims, 2, 11);
  auto params = model.parameters();
  // final head params are out weight and bias per head
  // zero all head output weights, bias picks the class
  const std::size_t heads_at = 12 + 2 * 4;
  for (std::size_t h = 0; h < 2; ++h) {
    Matrix& w = params[heads_at + h * 4 + 2].value();
    w.fill(0.0);
    Matrix& b = params[heads_at + h * 4 + 3].value();
    b.fill(0.0);
    b(0, h == 0 ? 0 : 1) = 60.0;  // softmax saturates to one-hot
  }

  Rng rng(4);
  FeatureMatrix target = random_features(5, 6, rng);
  Prediction pred = model.predict(target);
  for (std::size_t r = 0; r < 5; ++r) {
    CHECK(pred.mean_probs(r, 0) == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(pred.mean_probs(r, 1) == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(pred.labels[r] == 0);  // tie toward class 0
  }
}

TEST_CASE("all branches agreeing yields that class with probability one") {
  MsDcdaModel model(small_dims(), 3, 12);
  auto params = model.parameters();
  const std::size_t heads_at = 12 + 3 * 4;
  for (std::size_t h = 0; h < 3; ++h) {
    params[heads_at + h * 4 + 2].value().fill(0.0);
    Matrix& b = params[heads_at + h * 4 + 3].value();
    b.fill(0.0);
    b(0, 2) = 60.0;
  }
  Rng rng(5);
  Prediction pred = model.predict(random_features(4, 6, rng));
  for (std::size_t r = 0; r < 4; ++r) {
    CHECK(pred.labels[r] == 2);
    CHECK(pred.mean_probs(r, 2) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("prediction is invariant under branch permutation") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    MsDcdaModel model(small_dims(), 4, 100 + seed);
    Rng rng(6 + seed);
    FeatureMatrix target = random_features(10, 6, rng);
    Prediction before = model.predict(target);

    // swap branches 0 and 3 (branch block plus head parameters)
    auto params = model.parameters();
    const std::size_t branch_at = 12, heads_at = 12 + 4 * 4;
    for (std::size_t k = 0; k < 4; ++k) {
      std::swap(params[branch_at + k].value(), params[branch_at + 3 * 4 + k].value());
      std::swap(params[heads_at + k].value(), params[heads_at + 3 * 4 + k].value());
    }
    Prediction after = model.predict(target);
    for (std::size_t i = 0; i < before.mean_probs.size(); ++i)
      CHECK(after.mean_probs[i] == doctest::Approx(before.mean_probs[i]).epsilon(1e-12));
    CHECK(after.labels == before.labels);
  }
}

TEST_CASE("every loss term sends gradient to the shared extractor") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    MsDcdaModel model(small_dims(), 3, 200 + seed);
    Rng rng(50 + seed);
    std::vector<Tensor> sources;
    std::vector<std::vector<int>> labels;
    for (int i = 0; i < 3; ++i) {
      sources.push_back(Tensor::constant(random_matrix(6, 6, rng)));
      std::vector<int> y(6);
      for (auto& v : y) v = static_cast<int>(rng.below(3));
      y[0] = 0; y[1] = 1; y[2] = 2;
      labels.push_back(y);
    }
    Tensor target = Tensor::constant(random_matrix(6, 6, rng));

    KernelConfig kcfg;
    kcfg.mode = KernelConfig::Bandwidth::kFixed;
    kcfg.fixed_sigma = 1.0;

    auto cfe_weight = model.parameters()[0];

    auto check_loss = [&](const char* name, const std::function<Tensor(const BranchOutputs&)>& make) {
      model.zero_grads();
      BranchOutputs out = model.forward(sources, target, Mode::kTrain);
      backward(make(out));
      INFO(name);
      CHECK(grad_norm(cfe_weight) > 0.0);
    };

    check_loss("ce", [&](const BranchOutputs& out) { return cross_entropy(out.probs_source, labels); });
    check_loss("mmd", [&](const BranchOutputs& out) {
      return mmd_multisource(out.branch_source, out.branch_target, kcfg);
    });
    check_loss("disc", [&](const BranchOutputs& out) { return disc(out.probs_target); });
    check_loss("scd", [&](const BranchOutputs& out) {
      std::vector<std::vector<int>> pseudo;
      std::vector<std::vector<double>> conf;
      for (int i = 0; i < 3; ++i) {
        pseudo.push_back(labels[i]);
        conf.push_back(std::vector<double>(6, 1.0));
      }
      return scd(out.branch_source, out.branch_target, labels, pseudo, conf, 3, kcfg, 0.0);
    });
  }
}

TEST_CASE("checkpoint round trip preserves predictions") {
  MsDcdaModel model(small_dims(), 3, 77);
  Rng rng(8);
  // move the running statistics off their defaults
  std::vector<Tensor> sources;
  for (int i = 0; i < 3; ++i) sources.push_back(Tensor::constant(random_matrix(8, 6, rng, 2.0)));
  Tensor target = Tensor::constant(random_matrix(8, 6, rng, 2.0));
  model.forward(sources, target, Mode::kTrain);

  FeatureMatrix probe = random_features(7, 6, rng);
  Prediction want = model.predict(probe);

  const auto path = std::filesystem::temp_directory_path() / "msdcda_ckpt_test.json";
  model.save_checkpoint(path);
  MsDcdaModel loaded = MsDcdaModel::load_checkpoint(path);
  std::filesystem::remove(path);

  CHECK(loaded.n_branches() == 3);
  Prediction got = loaded.predict(probe);
  REQUIRE(got.mean_probs.size() == want.mean_probs.size());
  for (std::size_t i = 0; i < want.mean_probs.size(); ++i) CHECK(got.mean_probs[i] == want.mean_probs[i]);
  CHECK(got.labels == want.labels);
}

TEST_CASE("parameters stay finite after updates") {
  MsDcdaModel model(small_dims(), 2, 3);
  CHECK(model.parameters_finite());
  auto params = model.parameters();
  AdamState adam;
  adam.init(params);
  Rng rng(9);
  for (int step = 0; step < 3; ++step) {
    std::vector<Tensor> sources{Tensor::constant(random_matrix(4, 6, rng)), Tensor::constant(random_matrix(4, 6, rng))};
    BranchOutputs out = model.forward(sources, Tensor::constant(random_matrix(4, 6, rng)), Mode::kTrain);
    model.zero_grads();
    backward(cross_entropy(out.probs_source, {{0, 1, 2, 0}, {1, 2, 0, 1}}));
    adam_step(params, adam);
  }
  CHECK(model.parameters_finite());
}
