#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "msdcda/dataio.hpp"
#include "msdcda/losses.hpp"
#include "msdcda/model.hpp"

namespace msdcda {

enum class LossTerm { kMmd, kScd, kDisc };

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;      // callers drop to 16 for 4-class runs
  double lr = 5e-3;
  KernelConfig kernel;
  double confidence_threshold = 0.8;
  std::uint64_t rng_seed = 0;
  bool paper_literal_constants = false;
  // Static (disc : mmd) weight pair overriding the dynamic coefficient.
  std::optional<std::pair<double, double>> static_ratio;
  std::set<LossTerm> disabled_losses;

  void validate() const;
  double static_tau() const;  // requires static_ratio
};

struct LogRow {
  std::size_t iter = 0;
  LossBreakdown losses;
};

struct TrainReport {
  std::vector<LogRow> loss_log;
  std::size_t iterations = 0;
  double wall_time_s = 0.0;
};

// Per-row argmax and its probability.
std::pair<std::vector<int>, std::vector<double>> pseudo_label(const Matrix& probs);

// One full optimization run over the bundle and the unlabeled target.
// Target labels, if present, are ignored. log_path, when given, receives one
// CSV row per iteration.
TrainReport train(MsDcdaModel& model, const SourceBundle& sources, const FeatureMatrix& target,
                  const TrainConfig& cfg, const std::optional<std::filesystem::path>& log_path = std::nullopt);

}  // namespace msdcda
