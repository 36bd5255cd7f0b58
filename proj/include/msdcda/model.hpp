#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "msdcda/dataio.hpp"
#include "msdcda/layers.hpp"
#include "msdcda/tensor.hpp"

namespace msdcda {

// Layer widths. Defaults follow the published architecture; every width is
// overridable so desk-scale runs stay cheap.
struct ModelDims {
  std::size_t input = 310;
  std::array<std::size_t, 3> cfe = {310, 256, 128};
  std::size_t branch = 64;
  std::size_t head = 32;
  std::size_t classes = 3;
  bool bn_cfe = true;
  bool bn_mbc = true;
};

// Everything the network produces for one training step: common features,
// per-branch projections, and per-branch class probabilities for the sources
// and the target.
struct BranchOutputs {
  std::vector<Tensor> common_source;  // f_s per branch
  Tensor common_target;               // f_t
  std::vector<Tensor> branch_source;  // per-branch source projection
  std::vector<Tensor> branch_target;  // per-branch target projection
  std::vector<Tensor> probs_source;   // per-branch source class probabilities
  std::vector<Tensor> probs_target;   // per-branch target class probabilities
};

struct Prediction {
  std::vector<Matrix> per_branch_probs;
  Matrix mean_probs;
  std::vector<int> labels;
};

// Shared extractor, one contrastive branch and one classifier head per
// source domain plus one pair for the source ensemble.
class MsDcdaModel {
 public:
  MsDcdaModel() = default;
  MsDcdaModel(const ModelDims& dims, std::size_t n_branches, std::uint64_t seed);

  std::size_t n_branches() const { return branches_.size(); }
  std::size_t n_classes() const { return dims_.classes; }
  const ModelDims& dims() const { return dims_; }

  Tensor common_features(const Tensor& x, Mode mode);
  Tensor branch_features(std::size_t branch, const Tensor& common, Mode mode);
  Tensor head_probs(std::size_t branch, const Tensor& branch_feats) const;

  // Sources routed through their own branch, the target through every branch.
  BranchOutputs forward(const std::vector<Tensor>& source_batches, const Tensor& target_batch, Mode mode);

  Prediction predict(const FeatureMatrix& target);

  std::vector<Tensor> parameters();
  void zero_grads();
  bool parameters_finite() const;

  void save_checkpoint(const std::filesystem::path& path) const;
  static MsDcdaModel load_checkpoint(const std::filesystem::path& path);

 private:
  struct Block {
    AffineLayer affine;
    BatchNormLayer bn;
    bool use_bn = true;
  };
  struct Head {
    AffineLayer hidden;  // to head width
    AffineLayer out;     // to class count
  };

  static Tensor run_block(Block& b, const Tensor& x, Mode mode, double slope);

  ModelDims dims_;
  std::vector<Block> cfe_;
  std::vector<Block> branches_;
  std::vector<Head> heads_;

  friend struct ModelSerde;
};

Prediction predict(MsDcdaModel& model, const FeatureMatrix& target);

}  // namespace msdcda
