#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "msdcda/dataio.hpp"
#include "msdcda/model.hpp"
#include "msdcda/trainer.hpp"

namespace msdcda {

struct Metrics {
  double accuracy = 0.0;
  double f1_macro = 0.0;
  double kappa = 0.0;
};

Matrix confusion_from_labels(const std::vector<int>& y_true, const std::vector<int>& y_pred, std::size_t n_classes);

// accuracy = trace/total; F1 macro-averaged over classes that appear either
// as truth or prediction; kappa = (p_o - p_e) / (1 - p_e), zero when p_e = 1.
Metrics metrics(const Matrix& confusion);

struct FoldReport {
  std::string fold_id;
  std::size_t round = 0;
  Metrics scores;
  Matrix confusion;
  TrainReport train_report;
};

struct LooConfig {
  TrainConfig train;
  ModelDims dims;
  std::size_t rounds = 3;
  std::size_t jobs = 1;
  bool audit_disjoint = true;
};

// One adaptation run: fresh model over the bundle, scored on the labeled
// target.
FoldReport adapt_and_score(const SourceBundle& sources, const FeatureMatrix& target, const ModelDims& dims,
                           const TrainConfig& cfg, std::uint64_t model_seed);

std::vector<FoldReport> loo_cross_subject(const DatasetManifest& manifest, const std::string& session,
                                          const LooConfig& cfg);

std::vector<FoldReport> loo_cross_session(const DatasetManifest& manifest, const LooConfig& cfg);

// Same protocols over already-loaded domains; fold ids come from the
// domains' subject or session fields.
std::vector<FoldReport> loo_over_domains(const std::vector<FeatureMatrix>& domains,
                                         const std::vector<std::string>& fold_ids, const LooConfig& cfg);

// Mean/best-round aggregation across folds.
struct LooSummary {
  double acc_mean_all = 0.0;  // mean accuracy over every round and fold
  std::size_t best_round = 0;
  double acc_best_mean = 0.0;
  double acc_best_std = 0.0;  // across folds within the best round
  double f1_best = 0.0;
  double kappa_best = 0.0;
  std::size_t rounds = 0;
  std::size_t folds = 0;
};

LooSummary summarize(const std::vector<FoldReport>& reports, std::size_t rounds);

// True when no target row equals any source row (hash audit over raw bytes).
bool rows_disjoint(const SourceBundle& sources, const FeatureMatrix& target);

struct LobeMap {
  std::map<std::string, std::vector<std::size_t>> lobes;

  std::vector<std::size_t> resolve(const std::vector<std::string>& names) const;
};

LobeMap load_lobe_map(const std::filesystem::path& path);

// Keeps the selected channels across all bands of a band-major layout.
FeatureMatrix lobe_subset(const FeatureMatrix& features, const LobeMap& map, const std::vector<std::string>& lobes,
                          std::size_t n_bands);

// Relabels via old-class -> new-class map; the map must cover [0, new_M).
FeatureMatrix merge_classes(const FeatureMatrix& features, const std::vector<int>& mapping, std::size_t new_classes);

// Report writers used by the command-line driver.
void write_fold_csv(const std::filesystem::path& path, const std::vector<FoldReport>& reports);
void write_summary_json(const std::filesystem::path& path, const std::vector<FoldReport>& reports,
                        const LooSummary& summary, const std::map<std::string, std::string>& run_info);
void write_confusion_csv(const std::filesystem::path& path, const FoldReport& report);

}  // namespace msdcda
