#pragma once

#include <optional>
#include <vector>

#include "msdcda/tensor.hpp"

namespace msdcda {

struct KernelConfig {
  enum class Bandwidth { kMedianHeuristic, kFixed };
  Bandwidth mode = Bandwidth::kMedianHeuristic;
  std::vector<double> multipliers = {0.25, 0.5, 1.0, 2.0, 4.0};
  double fixed_sigma = 1.0;

  void validate() const;
};

double gaussian_kernel(const std::vector<double>& x, const std::vector<double>& y, double sigma);

// Kernel matrices of one source/target feature pair, averaged over the
// bandwidth multipliers. Shared between the coarse and the class-level
// alignment losses so the quadratic work happens once per branch.
struct BranchKernels {
  Tensor k_ss;
  Tensor k_tt;
  Tensor k_st;
};

BranchKernels make_branch_kernels(const Tensor& source_feats, const Tensor& target_feats, const KernelConfig& kcfg);

// Biased squared-MMD estimate, clamped at zero.
Tensor mmd_from_kernels(const BranchKernels& k);
Tensor mmd_pair(const Tensor& source_feats, const Tensor& target_feats, const KernelConfig& kcfg);

// Mean of per-branch MMD. paper_literal divides by branch count minus one
// instead of the true branch count.
Tensor mmd_multisource(const std::vector<Tensor>& source_feats, const std::vector<Tensor>& target_feats,
                       const KernelConfig& kcfg, bool paper_literal = false);

// Class-level contrastive discrepancy for one branch: intra-class distances
// minus 1/M-scaled inter-class distances, masked by the source labels and the
// confidence-filtered target pseudo-labels. Class pairs whose mask is empty
// are dropped from the sums and the normalizing count.
Tensor scd_branch(const BranchKernels& k, const std::vector<int>& source_labels,
                  const std::vector<int>& target_pseudo, const std::vector<double>& target_confidence,
                  std::size_t n_classes, double confidence_threshold);

Tensor scd(const std::vector<BranchKernels>& kernels, const std::vector<std::vector<int>>& source_labels,
           const std::vector<std::vector<int>>& target_pseudo,
           const std::vector<std::vector<double>>& target_confidence, std::size_t n_classes,
           double confidence_threshold, bool paper_literal = false);

Tensor scd(const std::vector<Tensor>& source_feats, const std::vector<Tensor>& target_feats,
           const std::vector<std::vector<int>>& source_labels, const std::vector<std::vector<int>>& target_pseudo,
           const std::vector<std::vector<double>>& target_confidence, std::size_t n_classes, const KernelConfig& kcfg,
           double confidence_threshold, bool paper_literal = false);

// Mean over branches of the mean negative log probability of the true class.
Tensor cross_entropy(const std::vector<Tensor>& probs, const std::vector<std::vector<int>>& labels);

// Inter-classifier inconsistency: mean L1 distance between the target class
// probabilities of every ordered branch pair, divided by the squared branch
// count.
Tensor disc(const std::vector<Tensor>& target_probs);

// Trace-ratio discriminability of labeled features: Tr(S_b) / (Tr(S_W) + eps).
// Degenerate class structure (fewer than two classes present, or a present
// class with fewer than two samples) scores zero.
Tensor lda_score(const Tensor& features, const std::vector<int>& labels);

struct DiscriminabilityState {
  double j_raw = 0.0;
  double mmd_raw = 0.0;
  double j_min = 0.0, j_max = 0.0;
  double mmd_min = 0.0, mmd_max = 0.0;
  bool initialized = false;

  void update(double mmd_value, double j_value);
  double normalized_mmd() const;
  double normalized_j() const;
};

// tau = m / (m + 1 - j) on the normalized values, 0.5 when the denominator
// degenerates.
double dynamic_tau(const DiscriminabilityState& state);

struct Schedule {
  double alpha = 0.0;
  double beta = 0.0;
};

Schedule schedules(std::size_t iter, std::size_t total_iters);

struct LossBreakdown {
  double ce = 0.0;
  double mmd = 0.0;
  double scd = 0.0;
  double disc = 0.0;
  double tau = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double total = 0.0;
};

struct TotalLoss {
  Tensor value;
  LossBreakdown breakdown;
};

// L_tot = L_CE + alpha * ((1 - tau) * L_DISC + tau * L_MMD) + beta * L_SCD.
// Absent optional terms contribute zero. Non-finite parts raise NumericError
// naming the term.
TotalLoss total_loss(const Tensor& ce, const std::optional<Tensor>& mmd, const std::optional<Tensor>& scd,
                     const std::optional<Tensor>& disc, double alpha, double beta, double tau);

}  // namespace msdcda
