#include "msdcda/model.hpp"

#include <fstream>

#include <json.hpp>

#include "msdcda/errors.hpp"
#include "msdcda/rng.hpp"

namespace msdcda {

namespace {
constexpr double kLeakySlope = 0.01;
}

MsDcdaModel::MsDcdaModel(const ModelDims& dims, std::size_t n_branches, std::uint64_t seed) : dims_(dims) {
  if (n_branches == 0) throw ConfigError("model: need at least one branch");
  if (dims.classes < 2) throw ConfigError("model: need at least two classes");
  Rng rng(seed);

  std::size_t in = dims.input;
  for (std::size_t i = 0; i < dims.cfe.size(); ++i) {
    Block b;
    b.affine = AffineLayer(in, dims.cfe[i], rng);
    b.bn = BatchNormLayer(dims.cfe[i]);
    b.use_bn = dims.bn_cfe;
    cfe_.push_back(std::move(b));
    in = dims.cfe[i];
  }
  for (std::size_t i = 0; i < n_branches; ++i) {
    Block b;
    b.affine = AffineLayer(dims.cfe.back(), dims.branch, rng);
    b.bn = BatchNormLayer(dims.branch);
    b.use_bn = dims.bn_mbc;
    branches_.push_back(std::move(b));

    Head h;
    h.hidden = AffineLayer(dims.branch, dims.head, rng);
    h.out = AffineLayer(dims.head, dims.classes, rng);
    heads_.push_back(std::move(h));
  }
}

Tensor MsDcdaModel::run_block(Block& b, const Tensor& x, Mode mode, double slope) {
  Tensor h = b.affine.forward(x);
  if (b.use_bn) h = b.bn.forward(h, mode);
  return leaky_relu(h, slope);
}

Tensor MsDcdaModel::common_features(const Tensor& x, Mode mode) {
  if (x.cols() != dims_.input) throw DataError("model: input width mismatch");
  Tensor h = x;
  for (auto& b : cfe_) h = run_block(b, h, mode, kLeakySlope);
  return h;
}

Tensor MsDcdaModel::branch_features(std::size_t branch, const Tensor& common, Mode mode) {
  return run_block(branches_.at(branch), common, mode, kLeakySlope);
}

Tensor MsDcdaModel::head_probs(std::size_t branch, const Tensor& branch_feats) const {
  const Head& h = heads_.at(branch);
  return softmax_rows(h.out.forward(h.hidden.forward(branch_feats)));
}

BranchOutputs MsDcdaModel::forward(const std::vector<Tensor>& source_batches, const Tensor& target_batch, Mode mode) {
  if (source_batches.size() != branches_.size())
    throw DataError("model: got " + std::to_string(source_batches.size()) + " source batches for " +
                    std::to_string(branches_.size()) + " branches");

  BranchOutputs out;
  out.common_target = common_features(target_batch, mode);
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    out.common_source.push_back(common_features(source_batches[i], mode));
    out.branch_source.push_back(branch_features(i, out.common_source[i], mode));
    out.branch_target.push_back(branch_features(i, out.common_target, mode));
    out.probs_source.push_back(head_probs(i, out.branch_source[i]));
    out.probs_target.push_back(head_probs(i, out.branch_target[i]));
  }
  return out;
}

Prediction MsDcdaModel::predict(const FeatureMatrix& target) {
  Tensor x = Tensor::constant(target.values);
  Tensor common = common_features(x, Mode::kEval);

  Prediction pred;
  const std::size_t rows = target.rows(), classes = dims_.classes;
  pred.mean_probs = Matrix(rows, classes, 0.0);
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    Tensor probs = head_probs(i, branch_features(i, common, Mode::kEval));
    pred.per_branch_probs.push_back(probs.value());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < classes; ++c) pred.mean_probs(r, c) += probs.value()(r, c);
  }
  const double inv = 1.0 / static_cast<double>(branches_.size());
  for (std::size_t i = 0; i < pred.mean_probs.size(); ++i) pred.mean_probs[i] *= inv;

  pred.labels.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (pred.mean_probs(r, c) > pred.mean_probs(r, best)) best = c;  // ties keep the lowest index
    pred.labels[r] = static_cast<int>(best);
  }
  return pred;
}

Prediction predict(MsDcdaModel& model, const FeatureMatrix& target) { return model.predict(target); }

std::vector<Tensor> MsDcdaModel::parameters() {
  std::vector<Tensor> out;
  auto push_block = [&](Block& b) {
    out.push_back(b.affine.weight);
    out.push_back(b.affine.bias);
    if (b.use_bn) {
      out.push_back(b.bn.gamma);
      out.push_back(b.bn.beta);
    }
  };
  for (auto& b : cfe_) push_block(b);
  for (auto& b : branches_) push_block(b);
  for (auto& h : heads_) {
    out.push_back(h.hidden.weight);
    out.push_back(h.hidden.bias);
    out.push_back(h.out.weight);
    out.push_back(h.out.bias);
  }
  return out;
}

void MsDcdaModel::zero_grads() {
  auto params = parameters();
  msdcda::zero_grads(params);
}

bool MsDcdaModel::parameters_finite() const {
  auto& self = const_cast<MsDcdaModel&>(*this);
  for (const auto& p : self.parameters())
    if (!all_finite(p.value())) return false;
  return true;
}

// --- checkpointing -------------------------------------------------------

struct ModelSerde {
  using json = nlohmann::json;

  static json matrix_to_json(const Matrix& m) {
    return json{{"rows", m.rows()}, {"cols", m.cols()}, {"values", m.values()}};
  }

  static Matrix matrix_from_json(const json& j) {
    return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                  j.at("values").get<std::vector<double>>());
  }

  static json block_to_json(const MsDcdaModel::Block& b) {
    json j;
    j["weight"] = matrix_to_json(b.affine.weight.value());
    j["bias"] = matrix_to_json(b.affine.bias.value());
    j["use_bn"] = b.use_bn;
    if (b.use_bn) {
      j["gamma"] = matrix_to_json(b.bn.gamma.value());
      j["beta"] = matrix_to_json(b.bn.beta.value());
      j["running_mean"] = matrix_to_json(b.bn.running_mean);
      j["running_var"] = matrix_to_json(b.bn.running_var);
    }
    return j;
  }

  static void block_from_json(const json& j, MsDcdaModel::Block& b) {
    b.affine.weight = Tensor::leaf(matrix_from_json(j.at("weight")), true);
    b.affine.bias = Tensor::leaf(matrix_from_json(j.at("bias")), true);
    b.use_bn = j.at("use_bn").get<bool>();
    if (b.use_bn) {
      b.bn.gamma = Tensor::leaf(matrix_from_json(j.at("gamma")), true);
      b.bn.beta = Tensor::leaf(matrix_from_json(j.at("beta")), true);
      b.bn.running_mean = matrix_from_json(j.at("running_mean"));
      b.bn.running_var = matrix_from_json(j.at("running_var"));
    }
  }

  static void save(const MsDcdaModel& m, const std::filesystem::path& path) {
    json j;
    j["format_version"] = 1;
    j["dims"] = {{"input", m.dims_.input},
                 {"cfe", m.dims_.cfe},
                 {"branch", m.dims_.branch},
                 {"head", m.dims_.head},
                 {"classes", m.dims_.classes},
                 {"bn_cfe", m.dims_.bn_cfe},
                 {"bn_mbc", m.dims_.bn_mbc}};
    j["n_branches"] = m.branches_.size();
    j["cfe"] = json::array();
    for (const auto& b : m.cfe_) j["cfe"].push_back(block_to_json(b));
    j["branches"] = json::array();
    for (const auto& b : m.branches_) j["branches"].push_back(block_to_json(b));
    j["heads"] = json::array();
    for (const auto& h : m.heads_) {
      json hj;
      hj["hidden_weight"] = matrix_to_json(h.hidden.weight.value());
      hj["hidden_bias"] = matrix_to_json(h.hidden.bias.value());
      hj["out_weight"] = matrix_to_json(h.out.weight.value());
      hj["out_bias"] = matrix_to_json(h.out.bias.value());
      j["heads"].push_back(hj);
    }
    write_file_atomic(path, j.dump());
  }

  static MsDcdaModel load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("checkpoint not found: " + path.string());
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw DataError("checkpoint " + path.string() + ": invalid JSON: " + e.what());
    }
    if (j.at("format_version").get<int>() != 1)
      throw DataError("checkpoint " + path.string() + ": unsupported format version");

    MsDcdaModel m;
    const auto& dj = j.at("dims");
    m.dims_.input = dj.at("input").get<std::size_t>();
    m.dims_.cfe = dj.at("cfe").get<std::array<std::size_t, 3>>();
    m.dims_.branch = dj.at("branch").get<std::size_t>();
    m.dims_.head = dj.at("head").get<std::size_t>();
    m.dims_.classes = dj.at("classes").get<std::size_t>();
    m.dims_.bn_cfe = dj.at("bn_cfe").get<bool>();
    m.dims_.bn_mbc = dj.at("bn_mbc").get<bool>();

    for (const auto& bj : j.at("cfe")) {
      MsDcdaModel::Block b;
      block_from_json(bj, b);
      m.cfe_.push_back(std::move(b));
    }
    for (const auto& bj : j.at("branches")) {
      MsDcdaModel::Block b;
      block_from_json(bj, b);
      m.branches_.push_back(std::move(b));
    }
    for (const auto& hj : j.at("heads")) {
      MsDcdaModel::Head h;
      h.hidden.weight = Tensor::leaf(matrix_from_json(hj.at("hidden_weight")), true);
      h.hidden.bias = Tensor::leaf(matrix_from_json(hj.at("hidden_bias")), true);
      h.out.weight = Tensor::leaf(matrix_from_json(hj.at("out_weight")), true);
      h.out.bias = Tensor::leaf(matrix_from_json(hj.at("out_bias")), true);
      m.heads_.push_back(std::move(h));
    }
    if (m.branches_.size() != j.at("n_branches").get<std::size_t>())
      throw DataError("checkpoint " + path.string() + ": branch count mismatch");
    return m;
  }
};

void MsDcdaModel::save_checkpoint(const std::filesystem::path& path) const { ModelSerde::save(*this, path); }

MsDcdaModel MsDcdaModel::load_checkpoint(const std::filesystem::path& path) { return ModelSerde::load(path); }

}  // namespace msdcda
