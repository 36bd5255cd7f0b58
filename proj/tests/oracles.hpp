// Naive reference implementations used by the unit and acceptance suites.
// These stay loop-by-loop on purpose: they follow the defining sums directly
// and never share code with the library's vectorized paths.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "msdcda/matrix.hpp"

namespace msdcda::oracles {

inline double kernel_avg(const Matrix& a, std::size_t u, const Matrix& b, std::size_t v,
                         const std::vector<double>& sigma2s) {
  double d = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    const double t = a(u, c) - b(v, c);
    d += t * t;
  }
  double k = 0.0;
  for (double s2 : sigma2s) k += std::exp(-d / (2.0 * s2));
  return k / static_cast<double>(sigma2s.size());
}

inline double mmd_pair_naive(const Matrix& fs, const Matrix& ft, const std::vector<double>& sigma2s) {
  const std::size_t ns = fs.rows(), nt = ft.rows();
  double ss = 0.0, tt = 0.0, st = 0.0;
  for (std::size_t u = 0; u < ns; ++u)
    for (std::size_t v = 0; v < ns; ++v) ss += kernel_avg(fs, u, fs, v, sigma2s);
  for (std::size_t u = 0; u < nt; ++u)
    for (std::size_t v = 0; v < nt; ++v) tt += kernel_avg(ft, u, ft, v, sigma2s);
  for (std::size_t u = 0; u < ns; ++u)
    for (std::size_t v = 0; v < nt; ++v) st += kernel_avg(fs, u, ft, v, sigma2s);
  const double est = ss / static_cast<double>(ns * ns) + tt / static_cast<double>(nt * nt) -
                     2.0 * st / static_cast<double>(ns * nt);
  return std::max(est, 0.0);
}

struct ScdNaiveResult {
  double sum = 0.0;          // raw sum over contributing classes
  std::size_t contributing = 0;
};

// Masked class-distance sums for one branch, quadruple loops throughout.
inline ScdNaiveResult scd_branch_naive(const Matrix& fs, const Matrix& ft, const std::vector<int>& ys,
                                       const std::vector<int>& yt, const std::vector<double>& conf,
                                       std::size_t n_classes, double threshold,
                                       const std::vector<double>& sigma2s) {
  const std::size_t ns = fs.rows(), nt = ft.rows();
  auto g_s = [&](std::size_t u, std::size_t c) { return static_cast<std::size_t>(ys[u]) == c; };
  auto g_t = [&](std::size_t v, std::size_t c) {
    return conf[v] >= threshold && static_cast<std::size_t>(yt[v]) == c;
  };

  auto d1 = [&](std::size_t c1, bool& defined) {
    double num = 0.0, den = 0.0;
    for (std::size_t u = 0; u < ns; ++u)
      for (std::size_t v = 0; v < ns; ++v)
        if (g_s(u, c1) && g_s(v, c1)) {
          num += kernel_avg(fs, u, fs, v, sigma2s);
          den += 1.0;
        }
    defined = den > 0.0;
    return defined ? num / den : 0.0;
  };
  auto d2 = [&](std::size_t c2, bool& defined) {
    double num = 0.0, den = 0.0;
    for (std::size_t u = 0; u < nt; ++u)
      for (std::size_t v = 0; v < nt; ++v)
        if (g_t(u, c2) && g_t(v, c2)) {
          num += kernel_avg(ft, u, ft, v, sigma2s);
          den += 1.0;
        }
    defined = den > 0.0;
    return defined ? num / den : 0.0;
  };
  auto d3 = [&](std::size_t c1, std::size_t c2, bool& defined) {
    double num = 0.0, den = 0.0;
    for (std::size_t u = 0; u < ns; ++u)
      for (std::size_t v = 0; v < nt; ++v)
        if (g_s(u, c1) && g_t(v, c2)) {
          num += kernel_avg(fs, u, ft, v, sigma2s);
          den += 1.0;
        }
    defined = den > 0.0;
    return defined ? num / den : 0.0;
  };

  ScdNaiveResult out;
  for (std::size_t c = 0; c < n_classes; ++c) {
    bool ok1 = false, ok2 = false, ok3 = false;
    const double intra_d1 = d1(c, ok1);
    const double intra_d2 = d2(c, ok2);
    if (!ok1 || !ok2) continue;
    const double intra_d3 = d3(c, c, ok3);
    ++out.contributing;
    double term = intra_d1 + intra_d2 - 2.0 * intra_d3;
    double inter = 0.0;
    for (std::size_t c2 = 0; c2 < n_classes; ++c2) {
      if (c2 == c) continue;
      bool okb = false, okc = false;
      const double db = d2(c2, okb);
      if (!okb) continue;
      const double dc = d3(c, c2, okc);
      inter += intra_d1 + db - 2.0 * dc;
    }
    term -= inter / static_cast<double>(n_classes);
    out.sum += term;
  }
  return out;
}

inline double scd_naive(const std::vector<Matrix>& fs, const std::vector<Matrix>& ft,
                        const std::vector<std::vector<int>>& ys, const std::vector<std::vector<int>>& yt,
                        const std::vector<std::vector<double>>& conf, std::size_t n_classes, double threshold,
                        const std::vector<double>& sigma2s, bool paper_literal = false) {
  double acc = 0.0;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    const ScdNaiveResult r = scd_branch_naive(fs[i], ft[i], ys[i], yt[i], conf[i], n_classes, threshold, sigma2s);
    if (paper_literal) {
      acc += r.sum;
    } else if (r.contributing > 0) {
      acc += r.sum / static_cast<double>(r.contributing);
    }
  }
  const double divisor = paper_literal ? std::max<double>(static_cast<double>(fs.size()) - 1.0, 1.0) *
                                             static_cast<double>(n_classes + 1)
                                       : static_cast<double>(fs.size());
  return acc / divisor;
}

inline double disc_naive(const std::vector<Matrix>& probs) {
  const std::size_t k = probs.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      double pair = 0.0;
      for (std::size_t r = 0; r < probs[i].rows(); ++r)
        for (std::size_t c = 0; c < probs[i].cols(); ++c) pair += std::fabs(probs[i](r, c) - probs[j](r, c));
      acc += pair / static_cast<double>(probs[i].rows());
    }
  return acc / static_cast<double>(k * k);
}

inline double cross_entropy_naive(const std::vector<Matrix>& probs, const std::vector<std::vector<int>>& labels) {
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    double branch = 0.0;
    for (std::size_t r = 0; r < probs[i].rows(); ++r)
      branch -= std::log(std::max(probs[i](r, static_cast<std::size_t>(labels[i][r])), 1e-12));
    acc += branch / static_cast<double>(probs[i].rows());
  }
  return acc / static_cast<double>(probs.size());
}

// Scatter traces computed from explicit per-class sums.
inline double lda_naive(const Matrix& x, const std::vector<int>& labels) {
  const std::size_t n = x.rows(), dim = x.cols();
  int max_c = 0;
  for (int y : labels) max_c = std::max(max_c, y);
  const std::size_t m = static_cast<std::size_t>(max_c) + 1;
  std::vector<std::size_t> counts(m, 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];

  std::size_t present = 0;
  for (std::size_t c = 0; c < m; ++c)
    if (counts[c] > 0) {
      if (counts[c] < 2) return 0.0;
      ++present;
    }
  if (present < 2) return 0.0;

  std::vector<std::vector<double>> mu(m, std::vector<double>(dim, 0.0));
  std::vector<double> grand(dim, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t d = 0; d < dim; ++d) {
      mu[static_cast<std::size_t>(labels[r])][d] += x(r, d);
      grand[d] += x(r, d);
    }
  for (std::size_t c = 0; c < m; ++c)
    if (counts[c] > 0)
      for (std::size_t d = 0; d < dim; ++d) mu[c][d] /= static_cast<double>(counts[c]);
  for (std::size_t d = 0; d < dim; ++d) grand[d] /= static_cast<double>(n);

  double tr_sb = 0.0;
  for (std::size_t c = 0; c < m; ++c)
    if (counts[c] > 0)
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = mu[c][d] - grand[d];
        tr_sb += static_cast<double>(counts[c]) * diff * diff;
      }
  double tr_sw = 0.0;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t d = 0; d < dim; ++d) {
      const double diff = x(r, d) - mu[static_cast<std::size_t>(labels[r])][d];
      tr_sw += diff * diff;
    }
  return tr_sb / (tr_sw + 1e-12);
}

// Per-sample tally metrics, never touching a confusion matrix.
struct MetricsNaive {
  double accuracy = 0.0;
  double f1_macro = 0.0;
  double kappa = 0.0;
};

inline MetricsNaive metrics_naive(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                                  std::size_t n_classes) {
  const double n = static_cast<double>(y_true.size());
  std::vector<double> tp(n_classes, 0.0), fp(n_classes, 0.0), fn(n_classes, 0.0);
  double correct = 0.0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const auto t = static_cast<std::size_t>(y_true[i]);
    const auto p = static_cast<std::size_t>(y_pred[i]);
    if (t == p) {
      correct += 1.0;
      tp[t] += 1.0;
    } else {
      fn[t] += 1.0;
      fp[p] += 1.0;
    }
  }
  MetricsNaive out;
  out.accuracy = correct / n;

  double f1_sum = 0.0;
  std::size_t f1_classes = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (tp[c] == 0.0 && fp[c] == 0.0 && fn[c] == 0.0) continue;
    ++f1_classes;
    const double denom = 2.0 * tp[c] + fp[c] + fn[c];
    f1_sum += denom > 0.0 ? 2.0 * tp[c] / denom : 0.0;
  }
  out.f1_macro = f1_classes > 0 ? f1_sum / static_cast<double>(f1_classes) : 0.0;

  double pe = 0.0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const double truth = tp[c] + fn[c];
    const double pred = tp[c] + fp[c];
    pe += (truth / n) * (pred / n);
  }
  out.kappa = pe >= 1.0 ? 0.0 : (out.accuracy - pe) / (1.0 - pe);
  return out;
}

}  // namespace msdcda::oracles
