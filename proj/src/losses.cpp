#include "msdcda/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "msdcda/errors.hpp"

namespace msdcda {

namespace {

constexpr double kSigma2Floor = 1e-12;
constexpr double kLdaEps = 1e-12;
constexpr double kProbFloor = 1e-12;
constexpr double kTauDenomGuard = 1e-8;

std::vector<double> sigma2_list(const KernelConfig& kcfg, double base_sigma2) {
  std::vector<double> out;
  out.reserve(kcfg.multipliers.size());
  for (double m : kcfg.multipliers) out.push_back(std::max(base_sigma2 * m, kSigma2Floor));
  return out;
}

// sigma^2 = median of pairwise squared distances over the joint batch / 2.
double median_base_sigma2(const Matrix& d_ss, const Matrix& d_tt, const Matrix& d_st) {
  std::vector<double> dists;
  dists.reserve(d_ss.rows() * (d_ss.rows() - 1) / 2 + d_tt.rows() * (d_tt.rows() - 1) / 2 + d_st.size());
  for (std::size_t i = 0; i < d_ss.rows(); ++i)
    for (std::size_t j = i + 1; j < d_ss.cols(); ++j) dists.push_back(d_ss(i, j));
  for (std::size_t i = 0; i < d_tt.rows(); ++i)
    for (std::size_t j = i + 1; j < d_tt.cols(); ++j) dists.push_back(d_tt(i, j));
  for (std::size_t i = 0; i < d_st.size(); ++i) dists.push_back(d_st[i]);
  if (dists.empty()) return 1.0;

  const std::size_t n = dists.size();
  std::nth_element(dists.begin(), dists.begin() + n / 2, dists.end());
  double med = dists[n / 2];
  if (n % 2 == 0) {
    std::nth_element(dists.begin(), dists.begin() + n / 2 - 1, dists.begin() + n / 2);
    med = 0.5 * (med + dists[n / 2 - 1]);
  }
  return std::max(med / 2.0, kSigma2Floor);
}

Tensor kernel_average(const Tensor& sqdist, const std::vector<double>& sigma2s) {
  Tensor acc;
  for (double s2 : sigma2s) {
    Tensor k = exp(scale(sqdist, -0.5 / s2));
    acc = acc.valid() ? add(acc, k) : k;
  }
  return scale(acc, 1.0 / static_cast<double>(sigma2s.size()));
}

Tensor masked_mean(const Tensor& kernel, const Matrix& mask, double mask_sum) {
  return scale(sum(mul(kernel, Tensor::constant(mask))), 1.0 / mask_sum);
}

void check_finite_part(double v, const char* name) {
  if (!std::isfinite(v)) throw NumericError(std::string("total_loss: non-finite ") + name + " term");
}

}  // namespace

void KernelConfig::validate() const {
  if (multipliers.empty()) throw ConfigError("kernel: need at least one bandwidth multiplier");
  for (double m : multipliers)
    if (!(m > 0.0)) throw ConfigError("kernel: multipliers must be positive");
  if (mode == Bandwidth::kFixed && !(fixed_sigma > 0.0)) throw ConfigError("kernel: fixed sigma must be positive");
}

double gaussian_kernel(const std::vector<double>& x, const std::vector<double>& y, double sigma) {
  if (x.size() != y.size()) throw std::invalid_argument("gaussian_kernel: widths differ");
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel: sigma must be positive");
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double t = x[i] - y[i];
    d += t * t;
  }
  return std::exp(-d / (2.0 * sigma * sigma));
}

BranchKernels make_branch_kernels(const Tensor& source_feats, const Tensor& target_feats, const KernelConfig& kcfg) {
  kcfg.validate();
  if (source_feats.rows() < 2 || target_feats.rows() < 2)
    throw DataError("kernel: batches need at least 2 rows");

  Tensor d_ss = pairwise_sqdist(source_feats, source_feats);
  Tensor d_tt = pairwise_sqdist(target_feats, target_feats);
  Tensor d_st = pairwise_sqdist(source_feats, target_feats);

  double base_sigma2;
  if (kcfg.mode == KernelConfig::Bandwidth::kFixed) {
    base_sigma2 = kcfg.fixed_sigma * kcfg.fixed_sigma;
  } else {
    base_sigma2 = median_base_sigma2(d_ss.value(), d_tt.value(), d_st.value());
  }
  const auto sigma2s = sigma2_list(kcfg, base_sigma2);

  BranchKernels k;
  k.k_ss = kernel_average(d_ss, sigma2s);
  k.k_tt = kernel_average(d_tt, sigma2s);
  k.k_st = kernel_average(d_st, sigma2s);
  return k;
}

Tensor mmd_from_kernels(const BranchKernels& k) {
  const double ns = static_cast<double>(k.k_ss.rows());
  const double nt = static_cast<double>(k.k_tt.rows());
  Tensor est = add(scale(sum(k.k_ss), 1.0 / (ns * ns)),
                   sub(scale(sum(k.k_tt), 1.0 / (nt * nt)), scale(sum(k.k_st), 2.0 / (ns * nt))));
  return clamp_min0(est);
}

Tensor mmd_pair(const Tensor& source_feats, const Tensor& target_feats, const KernelConfig& kcfg) {
  return mmd_from_kernels(make_branch_kernels(source_feats, target_feats, kcfg));
}

Tensor mmd_multisource(const std::vector<Tensor>& source_feats, const std::vector<Tensor>& target_feats,
                       const KernelConfig& kcfg, bool paper_literal) {
  if (source_feats.empty() || source_feats.size() != target_feats.size())
    throw DataError("mmd_multisource: branch lists empty or mismatched");
  Tensor acc;
  for (std::size_t i = 0; i < source_feats.size(); ++i) {
    Tensor m = mmd_pair(source_feats[i], target_feats[i], kcfg);
    acc = acc.valid() ? add(acc, m) : m;
  }
  const double divisor = paper_literal ? std::max<double>(static_cast<double>(source_feats.size()) - 1.0, 1.0)
                                       : static_cast<double>(source_feats.size());
  return scale(acc, 1.0 / divisor);
}

namespace {

struct ScdBranchSum {
  Tensor sum;  // invalid when no class pair was defined
  std::size_t contributing = 0;
};

ScdBranchSum scd_branch_sum(const BranchKernels& k, const std::vector<int>& source_labels,
                            const std::vector<int>& target_pseudo, const std::vector<double>& target_confidence,
                            std::size_t n_classes, double confidence_threshold) {
  const std::size_t ns = k.k_ss.rows(), nt = k.k_tt.rows();
  if (source_labels.size() != ns) throw DataError("scd: source label count does not match batch");
  if (target_pseudo.size() != nt || target_confidence.size() != nt)
    throw DataError("scd: pseudo-label count does not match batch");

  // Confidence gate on target rows; gated rows leave every mask.
  std::vector<char> keep(nt);
  for (std::size_t v = 0; v < nt; ++v) keep[v] = target_confidence[v] >= confidence_threshold ? 1 : 0;

  std::vector<std::size_t> count_s(n_classes, 0), count_t(n_classes, 0);
  for (int y : source_labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) throw DataError("scd: source label out of range");
    ++count_s[static_cast<std::size_t>(y)];
  }
  for (std::size_t v = 0; v < nt; ++v) {
    const int y = target_pseudo[v];
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) throw DataError("scd: pseudo-label out of range");
    if (keep[v]) ++count_t[static_cast<std::size_t>(y)];
  }

  // d1 per source class and d2 per target class are shared across pairs.
  std::vector<Tensor> d1(n_classes), d2(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (count_s[c] > 0) {
      Matrix mask(ns, ns, 0.0);
      for (std::size_t u = 0; u < ns; ++u) {
        if (static_cast<std::size_t>(source_labels[u]) != c) continue;
        for (std::size_t v = 0; v < ns; ++v)
          if (static_cast<std::size_t>(source_labels[v]) == c) mask(u, v) = 1.0;
      }
      d1[c] = masked_mean(k.k_ss, mask, static_cast<double>(count_s[c] * count_s[c]));
    }
    if (count_t[c] > 0) {
      Matrix mask(nt, nt, 0.0);
      for (std::size_t u = 0; u < nt; ++u) {
        if (!keep[u] || static_cast<std::size_t>(target_pseudo[u]) != c) continue;
        for (std::size_t v = 0; v < nt; ++v)
          if (keep[v] && static_cast<std::size_t>(target_pseudo[v]) == c) mask(u, v) = 1.0;
      }
      d2[c] = masked_mean(k.k_tt, mask, static_cast<double>(count_t[c] * count_t[c]));
    }
  }

  auto d3 = [&](std::size_t c1, std::size_t c2) {
    Matrix mask(ns, nt, 0.0);
    for (std::size_t u = 0; u < ns; ++u) {
      if (static_cast<std::size_t>(source_labels[u]) != c1) continue;
      for (std::size_t v = 0; v < nt; ++v)
        if (keep[v] && static_cast<std::size_t>(target_pseudo[v]) == c2) mask(u, v) = 1.0;
    }
    return masked_mean(k.k_st, mask, static_cast<double>(count_s[c1] * count_t[c2]));
  };

  auto class_distance = [&](std::size_t c1, std::size_t c2) {
    return sub(add(d1[c1], d2[c2]), scale(d3(c1, c2), 2.0));
  };

  // A class contributes when its intra-class distance is defined; inter-class
  // terms keep the published 1/M weight with undefined pairs dropped.
  ScdBranchSum out;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (count_s[c] == 0 || count_t[c] == 0) continue;
    ++out.contributing;
    Tensor term = class_distance(c, c);
    Tensor inter;
    for (std::size_t c2 = 0; c2 < n_classes; ++c2) {
      if (c2 == c || count_t[c2] == 0) continue;
      Tensor d = class_distance(c, c2);
      inter = inter.valid() ? add(inter, d) : d;
    }
    if (inter.valid()) term = sub(term, scale(inter, 1.0 / static_cast<double>(n_classes)));
    out.sum = out.sum.valid() ? add(out.sum, term) : term;
  }
  return out;
}

}  // namespace

Tensor scd_branch(const BranchKernels& k, const std::vector<int>& source_labels,
                  const std::vector<int>& target_pseudo, const std::vector<double>& target_confidence,
                  std::size_t n_classes, double confidence_threshold) {
  ScdBranchSum s = scd_branch_sum(k, source_labels, target_pseudo, target_confidence, n_classes, confidence_threshold);
  if (s.contributing == 0) return Tensor::scalar(0.0);
  return scale(s.sum, 1.0 / static_cast<double>(s.contributing));
}

Tensor scd(const std::vector<BranchKernels>& kernels, const std::vector<std::vector<int>>& source_labels,
           const std::vector<std::vector<int>>& target_pseudo,
           const std::vector<std::vector<double>>& target_confidence, std::size_t n_classes,
           double confidence_threshold, bool paper_literal) {
  if (kernels.empty()) throw DataError("scd: no branches");
  const std::size_t branches = kernels.size();
  Tensor acc;
  for (std::size_t i = 0; i < branches; ++i) {
    Tensor t;
    if (paper_literal) {
      // Published form keeps the raw class sum per branch.
      ScdBranchSum s = scd_branch_sum(kernels[i], source_labels[i], target_pseudo[i], target_confidence[i], n_classes,
                                      confidence_threshold);
      t = s.sum.valid() ? s.sum : Tensor::scalar(0.0);
    } else {
      t = scd_branch(kernels[i], source_labels[i], target_pseudo[i], target_confidence[i], n_classes,
                     confidence_threshold);
    }
    acc = acc.valid() ? add(acc, t) : t;
  }
  const double divisor =
      paper_literal
          ? std::max<double>(static_cast<double>(branches) - 1.0, 1.0) * static_cast<double>(n_classes + 1)
          : static_cast<double>(branches);
  return scale(acc, 1.0 / divisor);
}

Tensor scd(const std::vector<Tensor>& source_feats, const std::vector<Tensor>& target_feats,
           const std::vector<std::vector<int>>& source_labels, const std::vector<std::vector<int>>& target_pseudo,
           const std::vector<std::vector<double>>& target_confidence, std::size_t n_classes, const KernelConfig& kcfg,
           double confidence_threshold, bool paper_literal) {
  std::vector<BranchKernels> kernels;
  kernels.reserve(source_feats.size());
  for (std::size_t i = 0; i < source_feats.size(); ++i)
    kernels.push_back(make_branch_kernels(source_feats[i], target_feats[i], kcfg));
  return scd(kernels, source_labels, target_pseudo, target_confidence, n_classes, confidence_threshold, paper_literal);
}

Tensor cross_entropy(const std::vector<Tensor>& probs, const std::vector<std::vector<int>>& labels) {
  if (probs.empty() || probs.size() != labels.size()) throw DataError("cross_entropy: branch lists mismatched");
  Tensor acc;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const std::size_t rows = probs[i].rows(), classes = probs[i].cols();
    if (labels[i].size() != rows) throw DataError("cross_entropy: label count does not match batch");
    Matrix onehot(rows, classes, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const int y = labels[i][r];
      if (y < 0 || static_cast<std::size_t>(y) >= classes) throw DataError("cross_entropy: label out of range");
      onehot(r, static_cast<std::size_t>(y)) = 1.0;
    }
    Tensor branch = scale(sum(mul(log_floor(probs[i], kProbFloor), Tensor::constant(onehot))),
                          -1.0 / static_cast<double>(rows));
    acc = acc.valid() ? add(acc, branch) : branch;
  }
  return scale(acc, 1.0 / static_cast<double>(probs.size()));
}

Tensor disc(const std::vector<Tensor>& target_probs) {
  const std::size_t k = target_probs.size();
  if (k < 2) throw DataError("disc: need at least two branches");
  Tensor acc;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      if (target_probs[i].rows() != target_probs[j].rows() || target_probs[i].cols() != target_probs[j].cols())
        throw DataError("disc: branch probability shapes differ");
      Tensor pair = scale(sum(abs(sub(target_probs[i], target_probs[j]))),
                          1.0 / static_cast<double>(target_probs[i].rows()));
      // ordered pairs: (i, j) and (j, i)
      pair = scale(pair, 2.0);
      acc = acc.valid() ? add(acc, pair) : pair;
    }
  }
  return scale(acc, 1.0 / static_cast<double>(k * k));
}

Tensor lda_score(const Tensor& features, const std::vector<int>& labels) {
  const std::size_t n = features.rows(), dim = features.cols();
  if (labels.size() != n) throw DataError("lda_score: label count does not match rows");

  std::size_t max_class = 0;
  for (int y : labels) {
    if (y < 0) throw DataError("lda_score: negative label");
    max_class = std::max(max_class, static_cast<std::size_t>(y));
  }
  std::vector<std::size_t> counts(max_class + 1, 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];

  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c] > 0) present.push_back(c);
  if (present.size() < 2) return Tensor::scalar(0.0);
  for (std::size_t c : present)
    if (counts[c] < 2) return Tensor::scalar(0.0);

  const std::size_t m = present.size();
  // Row c of class_means is the mean of class present[c].
  Matrix mean_weights(m, n, 0.0);
  Matrix assign(n, m, 0.0);
  Matrix count_weights(m, dim, 0.0);
  for (std::size_t ci = 0; ci < m; ++ci) {
    const std::size_t c = present[ci];
    const double inv = 1.0 / static_cast<double>(counts[c]);
    for (std::size_t r = 0; r < n; ++r) {
      if (static_cast<std::size_t>(labels[r]) == c) {
        mean_weights(ci, r) = inv;
        assign(r, ci) = 1.0;
      }
    }
    for (std::size_t d = 0; d < dim; ++d) count_weights(ci, d) = static_cast<double>(counts[c]);
  }
  Matrix grand_weights(1, n, 1.0 / static_cast<double>(n));

  Tensor class_means = matmul(Tensor::constant(mean_weights), features);
  Tensor grand_mean = matmul(Tensor::constant(grand_weights), features);
  Tensor grand_rep = matmul(Tensor::constant(Matrix(m, 1, 1.0)), grand_mean);
  Tensor between = sub(class_means, grand_rep);
  Tensor tr_sb = sum(mul(mul(between, between), Tensor::constant(count_weights)));

  Tensor centered = sub(features, matmul(Tensor::constant(assign), class_means));
  Tensor tr_sw = sum(mul(centered, centered));

  return divide(tr_sb, add(tr_sw, Tensor::scalar(kLdaEps)));
}

void DiscriminabilityState::update(double mmd_value, double j_value) {
  mmd_raw = mmd_value;
  j_raw = j_value;
  if (!initialized) {
    mmd_min = mmd_max = mmd_value;
    j_min = j_max = j_value;
    initialized = true;
    return;
  }
  mmd_min = std::min(mmd_min, mmd_value);
  mmd_max = std::max(mmd_max, mmd_value);
  j_min = std::min(j_min, j_value);
  j_max = std::max(j_max, j_value);
}

double DiscriminabilityState::normalized_mmd() const {
  if (!(mmd_max > mmd_min)) return 0.0;
  return std::clamp((mmd_raw - mmd_min) / (mmd_max - mmd_min), 0.0, 1.0);
}

double DiscriminabilityState::normalized_j() const {
  if (!(j_max > j_min)) return 0.0;
  return std::clamp((j_raw - j_min) / (j_max - j_min), 0.0, 1.0);
}

double dynamic_tau(const DiscriminabilityState& state) {
  const double m = state.normalized_mmd();
  const double j = state.normalized_j();
  const double denom = m + 1.0 - j;
  if (denom < kTauDenomGuard) return 0.5;
  return std::clamp(m / denom, 0.0, 1.0);
}

Schedule schedules(std::size_t iter, std::size_t total_iters) {
  if (total_iters == 0) throw ConfigError("schedules: total iterations must be positive");
  if (iter > total_iters) throw ConfigError("schedules: iteration beyond total");
  const double p = static_cast<double>(iter) / static_cast<double>(total_iters);
  Schedule s;
  s.alpha = 2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0;
  s.beta = s.alpha / 10.0;
  return s;
}

TotalLoss total_loss(const Tensor& ce, const std::optional<Tensor>& mmd, const std::optional<Tensor>& scd,
                     const std::optional<Tensor>& disc, double alpha, double beta, double tau) {
  TotalLoss out;
  out.breakdown.ce = ce.scalar_value();
  out.breakdown.mmd = mmd ? mmd->scalar_value() : 0.0;
  out.breakdown.scd = scd ? scd->scalar_value() : 0.0;
  out.breakdown.disc = disc ? disc->scalar_value() : 0.0;
  out.breakdown.alpha = alpha;
  out.breakdown.beta = beta;
  out.breakdown.tau = tau;
  check_finite_part(out.breakdown.ce, "cross-entropy");
  check_finite_part(out.breakdown.mmd, "mmd");
  check_finite_part(out.breakdown.scd, "scd");
  check_finite_part(out.breakdown.disc, "disc");
  if (!std::isfinite(alpha) || !std::isfinite(beta) || !std::isfinite(tau))
    throw NumericError("total_loss: non-finite weight");

  Tensor total = ce;
  if (disc) total = add(total, scale(*disc, alpha * (1.0 - tau)));
  if (mmd) total = add(total, scale(*mmd, alpha * tau));
  if (scd) total = add(total, scale(*scd, beta));
  out.breakdown.total = total.scalar_value();
  check_finite_part(out.breakdown.total, "total");
  out.value = total;
  return out;
}

}  // namespace msdcda
