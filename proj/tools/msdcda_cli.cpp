// Command-line driver for feature extraction, adaptation training,
// leave-one-out evaluation, ablations, and dataset transfer.
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "msdcda/dataio.hpp"
#include "msdcda/errors.hpp"
#include "msdcda/evalkit.hpp"
#include "msdcda/features.hpp"
#include "msdcda/model.hpp"
#include "msdcda/trainer.hpp"

using namespace msdcda;
namespace fs = std::filesystem;

namespace {

struct CommonOpts {
  std::size_t epochs = 50;
  std::size_t batch = 0;  // 0: pick 32 or 16 from the class count
  double lr = 5e-3;
  std::uint64_t seed = 0;
  std::size_t rounds = 3;
  std::size_t jobs = 1;
  double threshold = 0.8;
  std::string kernel = "median";
  bool paper_literal = false;
  std::string disable;
  std::string ratio = "dynamic";
  std::string widths;
  std::string bn = "both";
};

void add_common_flags(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--epochs", opts.epochs, "Training epochs");
  cmd->add_option("--batch", opts.batch, "Batch size (default 32, or 16 for 4-class data)");
  cmd->add_option("--lr", opts.lr, "Adam learning rate");
  cmd->add_option("--seed", opts.seed, "Base RNG seed");
  cmd->add_option("--rounds", opts.rounds, "LOO rounds (seeds per fold)");
  cmd->add_option("--jobs", opts.jobs, "Parallel fold workers");
  cmd->add_option("--threshold", opts.threshold, "Pseudo-label confidence threshold");
  cmd->add_option("--kernel", opts.kernel, "Kernel bandwidth: 'median' or 'fixed:SIGMA'");
  cmd->add_flag("--paper-literal", opts.paper_literal, "Use the published normalization constants");
  cmd->add_option("--disable", opts.disable, "Comma list of losses to drop: mmd,scd,disc");
  cmd->add_option("--ratio", opts.ratio, "Static disc:mmd weight ratio, e.g. 7:3, or 'dynamic'");
  cmd->add_option("--widths", opts.widths, "Layer widths cfe1,cfe2,cfe3,branch,head (default 310,256,128,64,32)");
  cmd->add_option("--bn", opts.bn, "Batch normalization placement: both|cfe|mbc|none");
}

std::vector<std::string> split(const std::string& s, char delim) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, delim))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::pair<double, double> parse_ratio(const std::string& text) {
  const auto parts = split(text, ':');
  if (parts.size() != 2) throw ConfigError("ratio must look like 7:3");
  try {
    return {std::stod(parts[0]), std::stod(parts[1])};
  } catch (const std::exception&) {
    throw ConfigError("ratio must be numeric, got '" + text + "'");
  }
}

TrainConfig make_train_config(const CommonOpts& opts, std::size_t n_classes) {
  TrainConfig cfg;
  cfg.epochs = opts.epochs;
  cfg.batch_size = opts.batch != 0 ? opts.batch : (n_classes >= 4 ? 16 : 32);
  cfg.lr = opts.lr;
  cfg.rng_seed = opts.seed;
  cfg.confidence_threshold = opts.threshold;
  cfg.paper_literal_constants = opts.paper_literal;

  if (opts.kernel == "median") {
    cfg.kernel.mode = KernelConfig::Bandwidth::kMedianHeuristic;
  } else if (opts.kernel.rfind("fixed:", 0) == 0) {
    cfg.kernel.mode = KernelConfig::Bandwidth::kFixed;
    try {
      cfg.kernel.fixed_sigma = std::stod(opts.kernel.substr(6));
    } catch (const std::exception&) {
      throw ConfigError("bad --kernel sigma: '" + opts.kernel + "'");
    }
  } else {
    throw ConfigError("--kernel must be 'median' or 'fixed:SIGMA'");
  }

  for (const auto& name : split(opts.disable, ',')) {
    if (name == "mmd")
      cfg.disabled_losses.insert(LossTerm::kMmd);
    else if (name == "scd")
      cfg.disabled_losses.insert(LossTerm::kScd);
    else if (name == "disc")
      cfg.disabled_losses.insert(LossTerm::kDisc);
    else
      throw ConfigError("--disable: unknown loss '" + name + "'");
  }

  if (opts.ratio != "dynamic") cfg.static_ratio = parse_ratio(opts.ratio);
  cfg.validate();
  return cfg;
}

ModelDims make_dims(const CommonOpts& opts, std::size_t n_classes) {
  ModelDims dims;
  dims.classes = n_classes;
  if (!opts.widths.empty()) {
    const auto parts = split(opts.widths, ',');
    if (parts.size() != 5) throw ConfigError("--widths needs 5 entries: cfe1,cfe2,cfe3,branch,head");
    try {
      dims.cfe = {std::stoul(parts[0]), std::stoul(parts[1]), std::stoul(parts[2])};
      dims.branch = std::stoul(parts[3]);
      dims.head = std::stoul(parts[4]);
    } catch (const std::exception&) {
      throw ConfigError("--widths entries must be positive integers");
    }
  }
  if (opts.bn == "both") {
    dims.bn_cfe = dims.bn_mbc = true;
  } else if (opts.bn == "cfe") {
    dims.bn_cfe = true;
    dims.bn_mbc = false;
  } else if (opts.bn == "mbc") {
    dims.bn_cfe = false;
    dims.bn_mbc = true;
  } else if (opts.bn == "none") {
    dims.bn_cfe = dims.bn_mbc = false;
  } else {
    throw ConfigError("--bn must be both|cfe|mbc|none");
  }
  return dims;
}

DatasetManifest open_dataset(const std::string& data) {
  fs::path p(data);
  if (fs::is_directory(p)) p /= "manifest.json";
  return load_manifest(p);
}

std::map<std::string, std::string> run_info(const std::string& command, const CommonOpts& opts,
                                            const std::string& extra = "") {
  std::map<std::string, std::string> info;
  info["command"] = command;
  info["epochs"] = std::to_string(opts.epochs);
  info["seed"] = std::to_string(opts.seed);
  info["rounds"] = std::to_string(opts.rounds);
  info["ratio"] = opts.ratio;
  if (!extra.empty()) info["detail"] = extra;
  return info;
}

void emit_loo_outputs(const fs::path& out_dir, const std::vector<FoldReport>& reports, const LooSummary& summary,
                      const std::map<std::string, std::string>& info) {
  fs::create_directories(out_dir);
  write_fold_csv(out_dir / "folds.csv", reports);
  write_summary_json(out_dir / "summary.json", reports, summary, info);
  for (const auto& r : reports)
    write_confusion_csv(out_dir / ("confusion_" + r.fold_id + "_round" + std::to_string(r.round + 1) + ".csv"), r);
}

Matrix load_signal_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("signal file not found: " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        row.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw DataError(path.string() + ": not a number: '" + tok + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw DataError(path.string() + ": ragged rows");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError(path.string() + ": empty signal");
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
  return m;
}

// --- subcommand bodies ---------------------------------------------------

int cmd_synth(const std::string& out, std::size_t sources, std::size_t classes, std::size_t dim,
              std::size_t samples, double separation, double shift, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.n_sources = sources;
  spec.n_classes = classes;
  spec.feature_dim = dim;
  spec.samples_per_class = samples;
  spec.class_separation = separation;
  spec.domain_shift_scale = shift;
  spec.rng_seed = seed;
  write_synthetic_dataset(spec, out);
  std::fprintf(stderr, "wrote %zu subjects to %s\n", sources + 1, out.c_str());
  return 0;
}

int cmd_extract(const std::string& signal_path, double rate, double window, const std::string& labels_path,
                bool normalize, const std::string& out) {
  Matrix signal = load_signal_csv(signal_path);
  FeatureMatrix fm = extract_features(signal, rate, default_bands(), window);
  if (!labels_path.empty()) {
    std::ifstream in(labels_path);
    if (!in) throw DataError("labels file not found: " + labels_path);
    int y;
    std::vector<int> labels;
    while (in >> y) labels.push_back(y);
    if (labels.size() != fm.rows())
      throw DataError("labels file has " + std::to_string(labels.size()) + " entries for " +
                      std::to_string(fm.rows()) + " segments");
    fm.labels = std::move(labels);
  }
  if (normalize) fm = normalize_electrodewise(fm);
  save_feature_csv(fm, out);
  std::fprintf(stderr, "wrote %zu x %zu features to %s\n", fm.rows(), fm.feature_dim(), out.c_str());
  return 0;
}

int cmd_train(const std::string& data, const std::string& target_subject, const std::string& session,
              const std::string& out, const CommonOpts& opts) {
  DatasetManifest manifest = open_dataset(data);
  if (std::find(manifest.subjects.begin(), manifest.subjects.end(), target_subject) == manifest.subjects.end())
    throw DataError("unknown target subject '" + target_subject + "'");

  std::vector<FeatureMatrix> sources;
  FeatureMatrix target;
  for (const auto& subject : manifest.subjects) {
    if (subject == target_subject)
      target = load_features(manifest, subject, session);
    else
      sources.push_back(load_features(manifest, subject, session));
  }
  SourceBundle bundle = build_source_bundle(std::move(sources));

  TrainConfig cfg = make_train_config(opts, manifest.n_classes);
  ModelDims dims = make_dims(opts, manifest.n_classes);
  dims.input = manifest.feature_dim;

  fs::create_directories(out);
  MsDcdaModel model(dims, bundle.n_domains(), Rng(opts.seed).child(2000).seed());
  TrainReport report = train(model, bundle, target, cfg, fs::path(out) / "train_log.csv");
  model.save_checkpoint(fs::path(out) / "checkpoint.json");

  Prediction pred = model.predict(target);
  FoldReport fold;
  fold.fold_id = target_subject;
  fold.confusion = confusion_from_labels(target.labels, pred.labels, dims.classes);
  fold.scores = metrics(fold.confusion);
  write_confusion_csv(fs::path(out) / "confusion.csv", fold);

  nlohmann::json j;
  j["target"] = target_subject;
  j["session"] = session;
  j["accuracy"] = fold.scores.accuracy;
  j["f1_macro"] = fold.scores.f1_macro;
  j["kappa"] = fold.scores.kappa;
  j["iterations"] = report.iterations;
  write_file_atomic(fs::path(out) / "metrics.json", j.dump(2) + "\n");
  std::printf("accuracy %.4f f1 %.4f kappa %.4f\n", fold.scores.accuracy, fold.scores.f1_macro, fold.scores.kappa);
  return 0;
}

LooConfig make_loo_config(const CommonOpts& opts, std::size_t n_classes) {
  LooConfig cfg;
  cfg.train = make_train_config(opts, n_classes);
  cfg.dims = make_dims(opts, n_classes);
  cfg.rounds = opts.rounds;
  cfg.jobs = opts.jobs;
  return cfg;
}

int cmd_loo_subject(const std::string& data, const std::string& session, const std::string& out,
                    const CommonOpts& opts) {
  DatasetManifest manifest = open_dataset(data);
  LooConfig cfg = make_loo_config(opts, manifest.n_classes);
  auto reports = loo_cross_subject(manifest, session, cfg);
  LooSummary summary = summarize(reports, cfg.rounds);
  emit_loo_outputs(out, reports, summary, run_info("loo-subject", opts, "session=" + session));
  std::printf("acc_mean %.4f acc_best %.4f±%.4f f1 %.4f kappa %.4f\n", summary.acc_mean_all, summary.acc_best_mean,
              summary.acc_best_std, summary.f1_best, summary.kappa_best);
  return 0;
}

int cmd_loo_session(const std::string& data, const std::string& out, const CommonOpts& opts) {
  DatasetManifest manifest = open_dataset(data);
  LooConfig cfg = make_loo_config(opts, manifest.n_classes);
  auto reports = loo_cross_session(manifest, cfg);
  LooSummary summary = summarize(reports, cfg.rounds);
  emit_loo_outputs(out, reports, summary, run_info("loo-session", opts));
  std::printf("acc_mean %.4f acc_best %.4f±%.4f f1 %.4f kappa %.4f\n", summary.acc_mean_all, summary.acc_best_mean,
              summary.acc_best_std, summary.f1_best, summary.kappa_best);
  return 0;
}

int cmd_ablate_losses(const std::string& data, const std::string& session, const std::string& out,
                      const CommonOpts& opts) {
  DatasetManifest manifest = open_dataset(data);
  const std::vector<std::pair<std::string, std::string>> variants = {
      {"CE only", "mmd,scd,disc"}, {"w/o MMD", "mmd"}, {"w/o DISC", "disc"}, {"w/o SCD", "scd"}, {"ALL", ""}};

  nlohmann::json rows = nlohmann::json::array();
  std::ostringstream csv;
  csv << "variant,acc_mean,acc_best,acc_best_std,f1,kappa\n";
  for (const auto& [name, disable] : variants) {
    CommonOpts v = opts;
    v.disable = disable;
    LooConfig cfg = make_loo_config(v, manifest.n_classes);
    auto reports = loo_cross_subject(manifest, session, cfg);
    LooSummary s = summarize(reports, cfg.rounds);
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.12g,%.12g,%.12g,%.12g,%.12g\n", name.c_str(), s.acc_mean_all,
                  s.acc_best_mean, s.acc_best_std, s.f1_best, s.kappa_best);
    csv << buf;
    rows.push_back({{"variant", name},
                    {"acc_mean", s.acc_mean_all},
                    {"acc_best", s.acc_best_mean},
                    {"acc_best_std", s.acc_best_std},
                    {"f1", s.f1_best},
                    {"kappa", s.kappa_best}});
    std::printf("%-8s acc_mean %.4f\n", name.c_str(), s.acc_mean_all);
  }
  fs::create_directories(out);
  write_file_atomic(fs::path(out) / "ablate_losses.csv", csv.str());
  nlohmann::json j;
  for (const auto& [k, vv] : run_info("ablate-losses", opts, "session=" + session)) j["run"][k] = vv;
  j["rows"] = rows;
  write_file_atomic(fs::path(out) / "ablate_losses.json", j.dump(2) + "\n");
  return 0;
}

int cmd_ablate_ratio(const std::string& data, const std::string& session, const std::string& ratios,
                     const std::string& out, const CommonOpts& opts) {
  DatasetManifest manifest = open_dataset(data);
  const auto entries = split(ratios, ',');
  if (entries.empty()) throw ConfigError("--ratios is empty");

  nlohmann::json rows = nlohmann::json::array();
  std::ostringstream csv;
  csv << "ratio,acc_mean,acc_best,acc_best_std,f1,kappa\n";
  for (const auto& entry : entries) {
    CommonOpts v = opts;
    v.ratio = entry;
    if (entry != "dynamic") parse_ratio(entry);  // validate before any work
    LooConfig cfg = make_loo_config(v, manifest.n_classes);
    auto reports = loo_cross_subject(manifest, session, cfg);
    LooSummary s = summarize(reports, cfg.rounds);
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.12g,%.12g,%.12g,%.12g,%.12g\n", entry.c_str(), s.acc_mean_all,
                  s.acc_best_mean, s.acc_best_std, s.f1_best, s.kappa_best);
    csv << buf;
    rows.push_back({{"ratio", entry},
                    {"acc_mean", s.acc_mean_all},
                    {"acc_best", s.acc_best_mean},
                    {"acc_best_std", s.acc_best_std},
                    {"f1", s.f1_best},
                    {"kappa", s.kappa_best}});
    std::printf("%-8s acc_mean %.4f\n", entry.c_str(), s.acc_mean_all);
  }
  fs::create_directories(out);
  write_file_atomic(fs::path(out) / "ablate_ratio.csv", csv.str());
  nlohmann::json j;
  for (const auto& [k, vv] : run_info("ablate-ratio", opts, "session=" + session)) j["run"][k] = vv;
  j["rows"] = rows;
  write_file_atomic(fs::path(out) / "ablate_ratio.json", j.dump(2) + "\n");
  return 0;
}

int cmd_ablate_lobes(const std::string& data, const std::string& session, const std::string& lobes_arg,
                     const std::string& lobe_map_path, std::size_t n_bands, const std::string& out,
                     const CommonOpts& opts) {
  DatasetManifest manifest = open_dataset(data);
  LobeMap map = load_lobe_map(lobe_map_path);

  std::vector<FeatureMatrix> full;
  for (const auto& subject : manifest.subjects) full.push_back(load_features(manifest, subject, session));
  for (auto& fm : full) fm.subject_id = fm.subject_id.empty() ? "?" : fm.subject_id;

  std::vector<std::string> all_names;
  for (const auto& [name, idx] : map.lobes) all_names.push_back(name);

  nlohmann::json rows = nlohmann::json::array();
  std::ostringstream csv;
  csv << "lobes,feature_dim,acc_mean,acc_best,acc_best_std,f1,kappa\n";
  for (const auto& entry : split(lobes_arg, ',')) {
    const std::vector<std::string> selection = entry == "All" ? all_names : split(entry, '+');
    std::vector<FeatureMatrix> subset;
    for (const auto& fm : full) subset.push_back(lobe_subset(fm, map, selection, n_bands));

    LooConfig cfg = make_loo_config(opts, manifest.n_classes);
    auto reports = loo_over_domains(subset, manifest.subjects, cfg);
    LooSummary s = summarize(reports, cfg.rounds);
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.12g,%.12g,%.12g,%.12g,%.12g\n", entry.c_str(),
                  subset.front().feature_dim(), s.acc_mean_all, s.acc_best_mean, s.acc_best_std, s.f1_best,
                  s.kappa_best);
    csv << buf;
    rows.push_back({{"lobes", entry},
                    {"feature_dim", subset.front().feature_dim()},
                    {"acc_mean", s.acc_mean_all},
                    {"acc_best", s.acc_best_mean},
                    {"acc_best_std", s.acc_best_std},
                    {"f1", s.f1_best},
                    {"kappa", s.kappa_best}});
    std::printf("%-10s acc_mean %.4f\n", entry.c_str(), s.acc_mean_all);
  }
  fs::create_directories(out);
  write_file_atomic(fs::path(out) / "ablate_lobes.csv", csv.str());
  nlohmann::json j;
  for (const auto& [k, vv] : run_info("ablate-lobes", opts, "session=" + session)) j["run"][k] = vv;
  j["rows"] = rows;
  write_file_atomic(fs::path(out) / "ablate_lobes.json", j.dump(2) + "\n");
  return 0;
}

std::vector<int> parse_merge(const std::string& text) {
  std::vector<int> mapping;
  for (const auto& tok : split(text, ',')) {
    try {
      mapping.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw ConfigError("--merge entries must be integers");
    }
  }
  if (mapping.empty()) throw ConfigError("--merge is empty");
  return mapping;
}

int cmd_transfer(const std::string& data, const std::string& target_data, const std::string& session,
                 const std::string& target_session, const std::string& merge, const std::string& merge_side,
                 const std::string& out, const CommonOpts& opts) {
  DatasetManifest src_manifest = open_dataset(data);
  DatasetManifest tgt_manifest = open_dataset(target_data);

  std::vector<FeatureMatrix> sources;
  for (const auto& subject : src_manifest.subjects) sources.push_back(load_features(src_manifest, subject, session));

  std::vector<FeatureMatrix> target_parts;
  for (const auto& subject : tgt_manifest.subjects)
    target_parts.push_back(load_features(tgt_manifest, subject, target_session));
  FeatureMatrix target = build_source_bundle(std::move(target_parts)).ensemble;
  target.subject_id = "transfer-target";

  std::size_t n_classes = src_manifest.n_classes;
  if (!merge.empty()) {
    const auto mapping = parse_merge(merge);
    int max_new = 0;
    for (int v : mapping) max_new = std::max(max_new, v);
    const std::size_t merged_classes = static_cast<std::size_t>(max_new) + 1;
    if (merge_side == "source") {
      for (auto& fm : sources) fm = merge_classes(fm, mapping, merged_classes);
      n_classes = merged_classes;
      if (n_classes != tgt_manifest.n_classes)
        throw DataError("merged source classes do not match the target dataset");
    } else if (merge_side == "target") {
      target = merge_classes(target, mapping, merged_classes);
      if (merged_classes != src_manifest.n_classes)
        throw DataError("merged target classes do not match the source dataset");
    } else {
      throw ConfigError("--merge-side must be source or target");
    }
  } else if (src_manifest.n_classes != tgt_manifest.n_classes) {
    throw DataError("class counts differ; supply --merge and --merge-side");
  }
  if (src_manifest.feature_dim != tgt_manifest.feature_dim)
    throw DataError("feature dimensions differ between datasets");

  SourceBundle bundle = build_source_bundle(std::move(sources));
  TrainConfig cfg = make_train_config(opts, n_classes);
  ModelDims dims = make_dims(opts, n_classes);
  dims.input = src_manifest.feature_dim;

  FoldReport fold = adapt_and_score(bundle, target, dims, cfg, Rng(opts.seed).child(2000).seed());
  fold.fold_id = "transfer";
  fs::create_directories(out);
  write_confusion_csv(fs::path(out) / "confusion.csv", fold);
  nlohmann::json j;
  for (const auto& [k, vv] : run_info("transfer", opts)) j["run"][k] = vv;
  j["accuracy"] = fold.scores.accuracy;
  j["f1_macro"] = fold.scores.f1_macro;
  j["kappa"] = fold.scores.kappa;
  write_file_atomic(fs::path(out) / "transfer.json", j.dump(2) + "\n");
  std::printf("accuracy %.4f f1 %.4f kappa %.4f\n", fold.scores.accuracy, fold.scores.f1_macro, fold.scores.kappa);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-source dynamic contrastive domain adaptation for EEG emotion recognition"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic multi-domain dataset");
  std::string synth_out;
  std::size_t synth_sources = 4, synth_classes = 3, synth_dim = 20, synth_samples = 100;
  double synth_sep = 3.0, synth_shift = 1.0;
  std::uint64_t synth_seed = 0;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--sources", synth_sources, "Number of source domains");
  synth->add_option("--classes", synth_classes, "Number of classes");
  synth->add_option("--dim", synth_dim, "Feature dimension");
  synth->add_option("--samples-per-class", synth_samples, "Samples per class per domain");
  synth->add_option("--separation", synth_sep, "Class mean separation");
  synth->add_option("--shift", synth_shift, "Domain shift scale");
  synth->add_option("--seed", synth_seed, "RNG seed");

  // extract
  auto* extract = app.add_subcommand("extract", "Differential-entropy features from a raw signal CSV");
  std::string ex_signal, ex_labels, ex_out;
  double ex_rate = 200.0, ex_window = 1.0;
  bool ex_normalize = false;
  extract->add_option("--signal", ex_signal, "Raw signal CSV, one row per channel")->required();
  extract->add_option("--rate", ex_rate, "Sampling rate in Hz")->required();
  extract->add_option("--window", ex_window, "Segment window in seconds");
  extract->add_option("--labels", ex_labels, "Optional per-segment label file");
  extract->add_flag("--normalize", ex_normalize, "Apply electrode-wise normalization");
  extract->add_option("--out", ex_out, "Output feature CSV")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Single adaptation run against one held-out subject");
  std::string tr_data, tr_target, tr_session = "1", tr_out;
  CommonOpts tr_opts;
  train_cmd->add_option("--data", tr_data, "Dataset directory or manifest")->required();
  train_cmd->add_option("--target", tr_target, "Held-out subject id")->required();
  train_cmd->add_option("--session", tr_session, "Session id");
  train_cmd->add_option("--out", tr_out, "Output directory")->required();
  add_common_flags(train_cmd, tr_opts);

  // loo-subject
  auto* loos = app.add_subcommand("loo-subject", "Leave-one-subject-out cross-validation");
  std::string ls_data, ls_session = "1", ls_out;
  CommonOpts ls_opts;
  loos->add_option("--data", ls_data, "Dataset directory or manifest")->required();
  loos->add_option("--session", ls_session, "Session id");
  loos->add_option("--out", ls_out, "Output directory")->required();
  add_common_flags(loos, ls_opts);

  // loo-session
  auto* loosess = app.add_subcommand("loo-session", "Leave-one-session-out cross-validation");
  std::string lse_data, lse_out;
  CommonOpts lse_opts;
  loosess->add_option("--data", lse_data, "Dataset directory or manifest")->required();
  loosess->add_option("--out", lse_out, "Output directory")->required();
  add_common_flags(loosess, lse_opts);

  // ablate-losses
  auto* abl = app.add_subcommand("ablate-losses", "Loss-term ablation over LOO cross-subject runs");
  std::string abl_data, abl_session = "1", abl_out;
  CommonOpts abl_opts;
  abl->add_option("--data", abl_data, "Dataset directory or manifest")->required();
  abl->add_option("--session", abl_session, "Session id");
  abl->add_option("--out", abl_out, "Output directory")->required();
  add_common_flags(abl, abl_opts);

  // ablate-ratio
  auto* abr = app.add_subcommand("ablate-ratio", "Static vs dynamic loss-ratio ablation");
  std::string abr_data, abr_session = "1", abr_out, abr_ratios = "1:9,3:7,1:1,7:3,9:1,dynamic";
  CommonOpts abr_opts;
  abr->add_option("--data", abr_data, "Dataset directory or manifest")->required();
  abr->add_option("--session", abr_session, "Session id");
  abr->add_option("--ratios", abr_ratios, "Comma list of disc:mmd ratios plus 'dynamic'");
  abr->add_option("--out", abr_out, "Output directory")->required();
  add_common_flags(abr, abr_opts);

  // ablate-lobes
  auto* ablb = app.add_subcommand("ablate-lobes", "Brain-lobe channel subset ablation");
  std::string ablb_data, ablb_session = "1", ablb_out, ablb_lobes = "F,O,P,T,F+P,O+T,F+P+O,F+P+T,All";
  std::string ablb_map = "data/lobes_62.json";
  std::size_t ablb_bands = 5;
  CommonOpts ablb_opts;
  ablb->add_option("--data", ablb_data, "Dataset directory or manifest")->required();
  ablb->add_option("--session", ablb_session, "Session id");
  ablb->add_option("--lobes", ablb_lobes, "Comma list of selections, '+' for unions, 'All' for everything");
  ablb->add_option("--lobe-map", ablb_map, "Channel-to-lobe JSON map");
  ablb->add_option("--bands", ablb_bands, "Band count of the band-major layout");
  ablb->add_option("--out", ablb_out, "Output directory")->required();
  add_common_flags(ablb, ablb_opts);

  // transfer
  auto* tf = app.add_subcommand("transfer", "Train on one dataset, evaluate on another");
  std::string tf_data, tf_target_data, tf_session = "1", tf_target_session = "1", tf_merge, tf_merge_side = "source",
              tf_out;
  CommonOpts tf_opts;
  tf->add_option("--data", tf_data, "Source dataset directory or manifest")->required();
  tf->add_option("--target-data", tf_target_data, "Target dataset directory or manifest")->required();
  tf->add_option("--session", tf_session, "Source session id");
  tf->add_option("--target-session", tf_target_session, "Target session id");
  tf->add_option("--merge", tf_merge, "Old-to-new class map, e.g. 1,0,0,2");
  tf->add_option("--merge-side", tf_merge_side, "Which dataset the merge applies to: source|target");
  tf->add_option("--out", tf_out, "Output directory")->required();
  add_common_flags(tf, tf_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints the message; help exits cleanly
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed())
      return cmd_synth(synth_out, synth_sources, synth_classes, synth_dim, synth_samples, synth_sep, synth_shift,
                       synth_seed);
    if (extract->parsed()) return cmd_extract(ex_signal, ex_rate, ex_window, ex_labels, ex_normalize, ex_out);
    if (train_cmd->parsed()) return cmd_train(tr_data, tr_target, tr_session, tr_out, tr_opts);
    if (loos->parsed()) return cmd_loo_subject(ls_data, ls_session, ls_out, ls_opts);
    if (loosess->parsed()) return cmd_loo_session(lse_data, lse_out, lse_opts);
    if (abl->parsed()) return cmd_ablate_losses(abl_data, abl_session, abl_out, abl_opts);
    if (abr->parsed()) return cmd_ablate_ratio(abr_data, abr_session, abr_ratios, abr_out, abr_opts);
    if (ablb->parsed())
      return cmd_ablate_lobes(ablb_data, ablb_session, ablb_lobes, ablb_map, ablb_bands, ablb_out, ablb_opts);
    if (tf->parsed())
      return cmd_transfer(tf_data, tf_target_data, tf_session, tf_target_session, tf_merge, tf_merge_side, tf_out,
                          tf_opts);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: config: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: data: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: numeric: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
