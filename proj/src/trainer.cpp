#include "msdcda/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "msdcda/errors.hpp"
#include "msdcda/rng.hpp"

namespace msdcda {

namespace {

// Shuffled cursor over one domain's rows. Reshuffles on wrap so every row of
// the largest domain is visited once per epoch and smaller domains cycle.
class DomainSampler {
 public:
  DomainSampler(std::size_t rows, Rng rng) : rng_(std::move(rng)), order_(rows) {
    std::iota(order_.begin(), order_.end(), 0);
    rng_.shuffle(order_);
  }

  std::vector<std::size_t> next_batch(std::size_t batch) {
    std::vector<std::size_t> idx;
    idx.reserve(batch);
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

Matrix gather_rows(const Matrix& src, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), src.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(src.row(idx[i]), src.row(idx[i]) + src.cols(), out.row(i));
  return out;
}

std::vector<int> gather_labels(const std::vector<int>& labels, const std::vector<std::size_t>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(labels[i]);
  return out;
}

std::string format_log_row(const LogRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n", row.iter, row.losses.ce,
                row.losses.mmd, row.losses.scd, row.losses.disc, row.losses.tau, row.losses.alpha, row.losses.beta,
                row.losses.total);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train: epochs must be at least 1");
  if (batch_size < 2) throw ConfigError("train: batch size must be at least 2");
  if (!(lr > 0.0)) throw ConfigError("train: learning rate must be positive");
  if (confidence_threshold < 0.0 || confidence_threshold > 1.0)
    throw ConfigError("train: confidence threshold must lie in [0, 1]");
  kernel.validate();
  if (static_ratio) {
    const auto [d, m] = *static_ratio;
    if (!(d >= 0.0) || !(m >= 0.0) || d + m <= 0.0) throw ConfigError("train: static ratio must be non-negative with positive sum");
  }
}

double TrainConfig::static_tau() const {
  const auto [d, m] = static_ratio.value();
  return m / (d + m);
}

std::pair<std::vector<int>, std::vector<double>> pseudo_label(const Matrix& probs) {
  std::vector<int> labels(probs.rows());
  std::vector<double> confidence(probs.rows());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.cols(); ++c)
      if (probs(r, c) > probs(r, best)) best = c;
    labels[r] = static_cast<int>(best);
    confidence[r] = probs(r, best);
  }
  return {std::move(labels), std::move(confidence)};
}

TrainReport train(MsDcdaModel& model, const SourceBundle& sources, const FeatureMatrix& target,
                  const TrainConfig& cfg, const std::optional<std::filesystem::path>& log_path) {
  cfg.validate();
  const std::size_t n_domains = sources.n_domains();
  if (model.n_branches() != n_domains)
    throw ConfigError("train: model has " + std::to_string(model.n_branches()) + " branches for " +
                      std::to_string(n_domains) + " source domains");
  for (std::size_t i = 0; i < n_domains; ++i)
    if (!sources.domain(i).labeled()) throw DataError("train: source domain " + std::to_string(i) + " is unlabeled");

  const auto t_start = std::chrono::steady_clock::now();
  const bool use_mmd = !cfg.disabled_losses.count(LossTerm::kMmd);
  const bool use_scd = !cfg.disabled_losses.count(LossTerm::kScd);
  const bool use_disc = !cfg.disabled_losses.count(LossTerm::kDisc);
  const std::size_t n_classes = model.n_classes();

  Rng root(cfg.rng_seed);
  std::vector<DomainSampler> source_samplers;
  std::size_t max_rows = target.rows();
  for (std::size_t i = 0; i < n_domains; ++i) {
    source_samplers.emplace_back(sources.domain(i).rows(), root.child(10 + i));
    max_rows = std::max(max_rows, sources.domain(i).rows());
  }
  DomainSampler target_sampler(target.rows(), root.child(9));

  const std::size_t iters_per_epoch = (max_rows + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_iters = iters_per_epoch * cfg.epochs;

  auto params = model.parameters();
  AdamState adam;
  adam.lr = cfg.lr;
  adam.init(params);

  DiscriminabilityState disc_state;
  // Dynamic weighting needs the alignment signal even when the MMD term is
  // ablated from the objective.
  const bool need_tau = !cfg.static_ratio.has_value() && (use_mmd || use_disc);

  TrainReport report;
  report.loss_log.reserve(total_iters);
  std::ostringstream log_buffer;
  if (log_path) log_buffer << "iter,ce,mmd,scd,disc,tau,alpha,beta,total\n";

  for (std::size_t iter = 0; iter < total_iters; ++iter) {
    const Schedule sched = schedules(iter, total_iters);

    // Batches: one per source domain plus the target.
    std::vector<Tensor> source_batches;
    std::vector<std::vector<int>> source_labels;
    source_batches.reserve(n_domains);
    for (std::size_t i = 0; i < n_domains; ++i) {
      const auto idx = source_samplers[i].next_batch(cfg.batch_size);
      source_batches.push_back(Tensor::constant(gather_rows(sources.domain(i).values, idx)));
      source_labels.push_back(gather_labels(sources.domain(i).labels, idx));
    }
    const auto target_idx = target_sampler.next_batch(cfg.batch_size);
    Tensor target_batch = Tensor::constant(gather_rows(target.values, target_idx));

    BranchOutputs out = model.forward(source_batches, target_batch, Mode::kTrain);

    Tensor ce = cross_entropy(out.probs_source, source_labels);

    std::vector<std::vector<int>> pseudo(n_domains);
    std::vector<std::vector<double>> confidence(n_domains);
    for (std::size_t i = 0; i < n_domains; ++i) {
      auto [labels, conf] = pseudo_label(out.probs_target[i].value());
      pseudo[i] = std::move(labels);
      confidence[i] = std::move(conf);
    }

    std::optional<Tensor> mmd_term, scd_term, disc_term;
    double mmd_value = 0.0;
    if (use_mmd || need_tau || use_scd) {
      std::vector<BranchKernels> kernels;
      kernels.reserve(n_domains);
      for (std::size_t i = 0; i < n_domains; ++i)
        kernels.push_back(make_branch_kernels(out.branch_source[i], out.branch_target[i], cfg.kernel));

      Tensor acc;
      for (const auto& k : kernels) {
        Tensor m = mmd_from_kernels(k);
        acc = acc.valid() ? add(acc, m) : m;
      }
      const double divisor = cfg.paper_literal_constants ? std::max<double>(static_cast<double>(n_domains) - 1.0, 1.0)
                                                         : static_cast<double>(n_domains);
      Tensor mmd_all = scale(acc, 1.0 / divisor);
      mmd_value = mmd_all.scalar_value();
      if (use_mmd) mmd_term = mmd_all;

      if (use_scd)
        scd_term = scd(kernels, source_labels, pseudo, confidence, n_classes, cfg.confidence_threshold,
                       cfg.paper_literal_constants);
    }
    if (use_disc) disc_term = disc(out.probs_target);

    double tau;
    if (cfg.static_ratio) {
      tau = cfg.static_tau();
    } else if (need_tau) {
      // Discriminability from the pooled labeled source features.
      std::size_t pooled_rows = 0;
      for (const auto& t : out.common_source) pooled_rows += t.rows();
      Matrix pooled(pooled_rows, out.common_source.front().cols());
      std::vector<int> pooled_labels;
      pooled_labels.reserve(pooled_rows);
      std::size_t at = 0;
      for (std::size_t i = 0; i < n_domains; ++i) {
        const Matrix& v = out.common_source[i].value();
        for (std::size_t r = 0; r < v.rows(); ++r, ++at) std::copy(v.row(r), v.row(r) + v.cols(), pooled.row(at));
        pooled_labels.insert(pooled_labels.end(), source_labels[i].begin(), source_labels[i].end());
      }
      const double j = lda_score(Tensor::constant(pooled), pooled_labels).scalar_value();
      disc_state.update(mmd_value, j);
      tau = dynamic_tau(disc_state);
    } else {
      tau = 0.5;
    }

    TotalLoss total;
    try {
      total = total_loss(ce, mmd_term, scd_term, disc_term, sched.alpha, sched.beta, tau);
    } catch (const NumericError& e) {
      throw NumericError("train: iteration " + std::to_string(iter) + ": " + e.what());
    }

    model.zero_grads();
    backward(total.value);
    adam_step(params, adam);
    if (!model.parameters_finite())
      throw NumericError("train: iteration " + std::to_string(iter) + ": non-finite parameter after update");

    report.loss_log.push_back({iter, total.breakdown});
    if (log_path) log_buffer << format_log_row(report.loss_log.back());

    if ((iter + 1) % iters_per_epoch == 0) {
      std::fprintf(stderr, "epoch %zu/%zu: total %.6f ce %.6f tau %.3f\n", (iter + 1) / iters_per_epoch, cfg.epochs,
                   total.breakdown.total, total.breakdown.ce, tau);
    }
  }

  report.iterations = total_iters;
  report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  if (log_path) write_file_atomic(*log_path, log_buffer.str());
  return report;
}

}  // namespace msdcda
