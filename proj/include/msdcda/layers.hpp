#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "msdcda/rng.hpp"
#include "msdcda/tensor.hpp"

namespace msdcda {

enum class Mode { kTrain, kEval };

// Fully connected layer, weight stored out-by-in.
struct AffineLayer {
  Tensor weight;
  Tensor bias;

  AffineLayer() = default;
  AffineLayer(std::size_t in, std::size_t out, Rng& rng);

  Tensor forward(const Tensor& x) const { return affine(x, weight, bias); }
};

// 1-D batch normalization with running statistics.
// Train mode normalizes by batch moments and updates the running buffers;
// eval mode is a fixed per-feature affine map of the running statistics.
struct BatchNormLayer {
  Tensor gamma;
  Tensor beta;
  Matrix running_mean;
  Matrix running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormLayer() = default;
  explicit BatchNormLayer(std::size_t features);

  Tensor forward(const Tensor& x, Mode mode);
};

// Adam with bias correction.
struct AdamState {
  std::size_t step = 0;
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  void init(const std::vector<Tensor>& params);
};

void adam_step(std::vector<Tensor>& params, AdamState& state);

void zero_grads(std::vector<Tensor>& params);

}  // namespace msdcda
