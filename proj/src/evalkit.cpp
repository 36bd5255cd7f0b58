#include "msdcda/evalkit.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_set>

#include <json.hpp>

#include "msdcda/errors.hpp"
#include "msdcda/rng.hpp"

namespace msdcda {

namespace {

std::uint64_t row_hash(const double* row, std::size_t n) {
  // FNV-1a over the raw bytes
  std::uint64_t h = 1469598103934665603ULL;
  const unsigned char* bytes = reinterpret_cast<const unsigned char*>(row);
  for (std::size_t i = 0; i < n * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// Runs (round, fold) tasks over a fixed-size worker pool, deterministically
// collecting results by slot.
void run_tasks(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& task) {
  if (jobs <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  const std::size_t workers = std::min(jobs, count);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          task(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

Matrix confusion_from_labels(const std::vector<int>& y_true, const std::vector<int>& y_pred, std::size_t n_classes) {
  if (y_true.size() != y_pred.size()) throw DataError("confusion: label vectors differ in length");
  if (y_true.empty()) throw DataError("confusion: no samples");
  Matrix c(n_classes, n_classes, 0.0);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const int t = y_true[i], p = y_pred[i];
    if (t < 0 || static_cast<std::size_t>(t) >= n_classes || p < 0 || static_cast<std::size_t>(p) >= n_classes)
      throw DataError("confusion: label out of range at sample " + std::to_string(i));
    c(static_cast<std::size_t>(t), static_cast<std::size_t>(p)) += 1.0;
  }
  return c;
}

Metrics metrics(const Matrix& confusion) {
  const std::size_t m = confusion.rows();
  if (m == 0 || confusion.cols() != m) throw DataError("metrics: confusion matrix must be square and non-empty");
  double total = 0.0, trace = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (confusion(i, j) < 0.0) throw DataError("metrics: negative count");
      total += confusion(i, j);
      if (i == j) trace += confusion(i, j);
    }
  if (total == 0.0) throw DataError("metrics: empty confusion matrix");

  Metrics out;
  out.accuracy = trace / total;

  double f1_sum = 0.0;
  std::size_t f1_classes = 0;
  for (std::size_t c = 0; c < m; ++c) {
    double tp = confusion(c, c), fn = 0.0, fp = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j != c) {
        fn += confusion(c, j);
        fp += confusion(j, c);
      }
    }
    if (tp == 0.0 && fn == 0.0 && fp == 0.0) continue;  // class absent from truth and prediction
    ++f1_classes;
    const double denom = 2.0 * tp + fp + fn;
    f1_sum += denom > 0.0 ? 2.0 * tp / denom : 0.0;
  }
  out.f1_macro = f1_classes > 0 ? f1_sum / static_cast<double>(f1_classes) : 0.0;

  double pe = 0.0;
  for (std::size_t c = 0; c < m; ++c) {
    double row = 0.0, col = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      row += confusion(c, j);
      col += confusion(j, c);
    }
    pe += (row / total) * (col / total);
  }
  out.kappa = pe >= 1.0 ? 0.0 : (out.accuracy - pe) / (1.0 - pe);
  return out;
}

FoldReport adapt_and_score(const SourceBundle& sources, const FeatureMatrix& target, const ModelDims& dims,
                           const TrainConfig& cfg, std::uint64_t model_seed) {
  if (!target.labeled()) throw DataError("adapt_and_score: target has no labels to score against");

  MsDcdaModel model(dims, sources.n_domains(), model_seed);
  FoldReport report;
  report.train_report = train(model, sources, target, cfg);
  Prediction pred = model.predict(target);
  report.confusion = confusion_from_labels(target.labels, pred.labels, dims.classes);
  report.scores = metrics(report.confusion);
  return report;
}

bool rows_disjoint(const SourceBundle& sources, const FeatureMatrix& target) {
  std::unordered_set<std::uint64_t> source_hashes;
  for (std::size_t d = 0; d < sources.n_sources(); ++d) {
    const Matrix& v = sources.individual_sources[d].values;
    for (std::size_t r = 0; r < v.rows(); ++r) source_hashes.insert(row_hash(v.row(r), v.cols()));
  }
  const Matrix& t = target.values;
  for (std::size_t r = 0; r < t.rows(); ++r) {
    if (!source_hashes.count(row_hash(t.row(r), t.cols()))) continue;
    // hash hit: confirm with a byte compare against every source row
    for (std::size_t d = 0; d < sources.n_sources(); ++d) {
      const Matrix& v = sources.individual_sources[d].values;
      for (std::size_t sr = 0; sr < v.rows(); ++sr)
        if (std::memcmp(v.row(sr), t.row(r), v.cols() * sizeof(double)) == 0) return false;
    }
  }
  return true;
}

namespace {

struct FoldTask {
  std::string fold_id;
  std::size_t round = 0;
  SourceBundle bundle;
  const FeatureMatrix* target = nullptr;
};

std::vector<FoldReport> run_folds(std::vector<FoldTask>& tasks, const LooConfig& cfg, std::size_t feature_dim) {
  std::vector<FoldReport> reports(tasks.size());
  run_tasks(tasks.size(), cfg.jobs, [&](std::size_t i) {
    FoldTask& task = tasks[i];
    if (cfg.audit_disjoint && !rows_disjoint(task.bundle, *task.target))
      throw DataError("loo: target rows found in sources for fold " + task.fold_id);

    ModelDims dims = cfg.dims;
    dims.input = feature_dim;
    TrainConfig train_cfg = cfg.train;
    Rng seed_rng(cfg.train.rng_seed);
    train_cfg.rng_seed = seed_rng.child(1000 + task.round).child(i).seed();
    const std::uint64_t model_seed = seed_rng.child(2000 + task.round).child(i).seed();

    std::fprintf(stderr, "[fold %s round %zu] training\n", task.fold_id.c_str(), task.round + 1);
    FoldReport r = adapt_and_score(task.bundle, *task.target, dims, train_cfg, model_seed);
    r.fold_id = task.fold_id;
    r.round = task.round;
    reports[i] = std::move(r);
  });
  return reports;
}

}  // namespace

std::vector<FoldReport> loo_over_domains(const std::vector<FeatureMatrix>& domains,
                                         const std::vector<std::string>& fold_ids, const LooConfig& cfg) {
  if (domains.size() < 2) throw DataError("loo: need at least 2 domains");
  if (fold_ids.size() != domains.size()) throw DataError("loo: fold id count does not match domains");
  const std::size_t feature_dim = domains.front().feature_dim();

  std::vector<FoldTask> tasks;
  for (std::size_t round = 0; round < cfg.rounds; ++round) {
    for (std::size_t t = 0; t < domains.size(); ++t) {
      FoldTask task;
      task.fold_id = fold_ids[t];
      task.round = round;
      std::vector<FeatureMatrix> sources;
      for (std::size_t s = 0; s < domains.size(); ++s)
        if (s != t) sources.push_back(domains[s]);
      task.bundle = build_source_bundle(std::move(sources));
      task.target = &domains[t];
      tasks.push_back(std::move(task));
    }
  }
  return run_folds(tasks, cfg, feature_dim);
}

std::vector<FoldReport> loo_cross_subject(const DatasetManifest& manifest, const std::string& session,
                                          const LooConfig& cfg) {
  if (manifest.subjects.size() < 2) throw DataError("loo-subject: need at least 2 subjects");
  if (std::find(manifest.sessions.begin(), manifest.sessions.end(), session) == manifest.sessions.end())
    throw DataError("loo-subject: unknown session '" + session + "'");

  std::vector<FeatureMatrix> data;
  data.reserve(manifest.subjects.size());
  for (const auto& subject : manifest.subjects) data.push_back(load_features(manifest, subject, session));
  return loo_over_domains(data, manifest.subjects, cfg);
}

std::vector<FoldReport> loo_cross_session(const DatasetManifest& manifest, const LooConfig& cfg) {
  if (manifest.sessions.size() < 2) throw DataError("loo-session: need at least 2 sessions");

  // One concatenated domain per session.
  std::vector<FeatureMatrix> per_session;
  for (const auto& session : manifest.sessions) {
    std::vector<FeatureMatrix> parts;
    for (const auto& subject : manifest.subjects) parts.push_back(load_features(manifest, subject, session));
    SourceBundle merged = build_source_bundle(std::move(parts));
    merged.ensemble.subject_id = "all";
    merged.ensemble.session_id = session;
    per_session.push_back(std::move(merged.ensemble));
  }

  return loo_over_domains(per_session, manifest.sessions, cfg);
}

LooSummary summarize(const std::vector<FoldReport>& reports, std::size_t rounds) {
  if (reports.empty()) throw DataError("summarize: no fold reports");
  LooSummary s;
  s.rounds = rounds;
  s.folds = reports.size() / std::max<std::size_t>(rounds, 1);

  std::vector<double> all_acc;
  for (const auto& r : reports) all_acc.push_back(r.scores.accuracy);
  s.acc_mean_all = mean_of(all_acc);

  double best_mean = -1.0;
  for (std::size_t round = 0; round < rounds; ++round) {
    std::vector<double> accs, f1s, kappas;
    for (const auto& r : reports) {
      if (r.round != round) continue;
      accs.push_back(r.scores.accuracy);
      f1s.push_back(r.scores.f1_macro);
      kappas.push_back(r.scores.kappa);
    }
    if (accs.empty()) continue;
    const double m = mean_of(accs);
    if (m > best_mean) {
      best_mean = m;
      s.best_round = round;
      s.acc_best_mean = m;
      s.acc_best_std = std_of(accs);
      s.f1_best = mean_of(f1s);
      s.kappa_best = mean_of(kappas);
    }
  }
  return s;
}

std::vector<std::size_t> LobeMap::resolve(const std::vector<std::string>& names) const {
  if (names.empty()) throw ConfigError("lobes: empty selection");
  std::set<std::size_t> sel;
  for (const auto& name : names) {
    auto it = lobes.find(name);
    if (it == lobes.end()) throw ConfigError("lobes: unknown lobe '" + name + "'");
    sel.insert(it->second.begin(), it->second.end());
  }
  return {sel.begin(), sel.end()};
}

LobeMap load_lobe_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("lobe map not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("lobe map " + path.string() + ": invalid JSON: " + e.what());
  }
  LobeMap map;
  std::set<std::size_t> seen;
  for (const auto& [name, idx] : j.at("lobes").items()) {
    std::vector<std::size_t> channels;
    for (const auto& v : idx) {
      const std::size_t ch = v.get<std::size_t>();
      if (!seen.insert(ch).second)
        throw DataError("lobe map " + path.string() + ": channel " + std::to_string(ch) + " mapped twice");
      channels.push_back(ch);
    }
    map.lobes[name] = std::move(channels);
  }
  if (map.lobes.empty()) throw DataError("lobe map " + path.string() + ": no lobes defined");
  return map;
}

FeatureMatrix lobe_subset(const FeatureMatrix& features, const LobeMap& map, const std::vector<std::string>& lobes,
                          std::size_t n_bands) {
  const auto channels = map.resolve(lobes);
  if (n_bands == 0 || features.feature_dim() % n_bands != 0)
    throw DataError("lobe_subset: feature dimension is not a multiple of the band count");
  const std::size_t n_channels = features.feature_dim() / n_bands;
  for (std::size_t ch : channels)
    if (ch >= n_channels) throw DataError("lobe_subset: channel index " + std::to_string(ch) + " out of range");

  FeatureMatrix out;
  out.labels = features.labels;
  out.subject_id = features.subject_id;
  out.session_id = features.session_id;
  out.values = Matrix(features.rows(), channels.size() * n_bands);
  for (std::size_t b = 0; b < n_bands; ++b)
    for (std::size_t ci = 0; ci < channels.size(); ++ci) {
      const std::size_t src_col = b * n_channels + channels[ci];
      const std::size_t dst_col = b * channels.size() + ci;
      for (std::size_t r = 0; r < features.rows(); ++r) out.values(r, dst_col) = features.values(r, src_col);
    }
  return out;
}

FeatureMatrix merge_classes(const FeatureMatrix& features, const std::vector<int>& mapping, std::size_t new_classes) {
  if (!features.labeled()) throw DataError("merge_classes: dataset has no labels");
  std::vector<bool> hit(new_classes, false);
  for (int to : mapping) {
    if (to < 0 || static_cast<std::size_t>(to) >= new_classes)
      throw DataError("merge_classes: mapped label " + std::to_string(to) + " outside [0, " +
                      std::to_string(new_classes) + ")");
    hit[static_cast<std::size_t>(to)] = true;
  }
  for (std::size_t c = 0; c < new_classes; ++c)
    if (!hit[c]) throw DataError("merge_classes: no old class maps to " + std::to_string(c));

  FeatureMatrix out = features;
  for (auto& y : out.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= mapping.size())
      throw DataError("merge_classes: label " + std::to_string(y) + " outside the mapping domain");
    y = mapping[static_cast<std::size_t>(y)];
  }
  return out;
}

void write_fold_csv(const std::filesystem::path& path, const std::vector<FoldReport>& reports) {
  std::ostringstream out;
  out << "round,fold,acc,f1,kappa\n";
  char buf[128];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.12g,%.12g,%.12g\n", r.round + 1, r.fold_id.c_str(), r.scores.accuracy,
                  r.scores.f1_macro, r.scores.kappa);
    out << buf;
  }
  write_file_atomic(path, out.str());
}

void write_summary_json(const std::filesystem::path& path, const std::vector<FoldReport>& reports,
                        const LooSummary& summary, const std::map<std::string, std::string>& run_info) {
  nlohmann::json j;
  for (const auto& [k, v] : run_info) j["run"][k] = v;
  j["folds"] = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json f;
    f["round"] = r.round + 1;
    f["fold"] = r.fold_id;
    f["accuracy"] = r.scores.accuracy;
    f["f1_macro"] = r.scores.f1_macro;
    f["kappa"] = r.scores.kappa;
    j["folds"].push_back(f);
  }
  j["summary"] = {{"acc_mean", summary.acc_mean_all},   {"best_round", summary.best_round + 1},
                  {"acc_best_mean", summary.acc_best_mean}, {"acc_best_std", summary.acc_best_std},
                  {"f1_best", summary.f1_best},         {"kappa_best", summary.kappa_best},
                  {"rounds", summary.rounds},           {"folds", summary.folds}};
  write_file_atomic(path, j.dump(2) + "\n");
}

void write_confusion_csv(const std::filesystem::path& path, const FoldReport& report) {
  std::ostringstream out;
  const Matrix& c = report.confusion;
  out << "counts\n";
  for (std::size_t i = 0; i < c.rows(); ++i) {
    for (std::size_t j = 0; j < c.cols(); ++j) {
      if (j) out << ',';
      out << static_cast<long long>(c(i, j));
    }
    out << '\n';
  }
  out << "row_percent\n";
  char buf[64];
  for (std::size_t i = 0; i < c.rows(); ++i) {
    double row_total = 0.0;
    for (std::size_t j = 0; j < c.cols(); ++j) row_total += c(i, j);
    for (std::size_t j = 0; j < c.cols(); ++j) {
      if (j) out << ',';
      std::snprintf(buf, sizeof buf, "%.2f", row_total > 0.0 ? 100.0 * c(i, j) / row_total : 0.0);
      out << buf;
    }
    out << '\n';
  }
  write_file_atomic(path, out.str());
}

}  // namespace msdcda
