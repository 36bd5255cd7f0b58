#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msdcda/matrix.hpp"

namespace msdcda {

struct BandDef {
  std::string name;
  double low_hz = 0.0;
  double high_hz = 0.0;
};

// Manifest of a prepared dataset: who was measured, where the feature files
// live, and the label/feature dimensions every file must agree with.
struct DatasetManifest {
  std::vector<std::string> subjects;
  std::vector<std::string> sessions;
  std::size_t n_classes = 0;
  std::size_t feature_dim = 0;
  // "subject/session" -> path relative to the manifest file
  std::map<std::string, std::string> files;
  std::map<std::string, std::size_t> sample_counts;  // optional, validated on load
  std::optional<double> sampling_rate_hz;
  std::vector<std::string> channel_names;
  std::vector<BandDef> band_definitions;
  std::filesystem::path base_dir;

  bool has_file(const std::string& subject, const std::string& session) const;
  const std::string& file_for(const std::string& subject, const std::string& session) const;
};

// One domain: W samples by B features, with labels when the domain is a
// labeled source (targets drop them for training).
struct FeatureMatrix {
  Matrix values;
  std::vector<int> labels;  // empty when unlabeled
  std::string subject_id;
  std::string session_id;

  std::size_t rows() const { return values.rows(); }
  std::size_t feature_dim() const { return values.cols(); }
  bool labeled() const { return !labels.empty(); }
};

// N individual sources plus their row-wise union as the (N+1)st source.
struct SourceBundle {
  std::vector<FeatureMatrix> individual_sources;
  FeatureMatrix ensemble;

  std::size_t n_sources() const { return individual_sources.size(); }
  std::size_t n_domains() const { return individual_sources.size() + 1; }
  const FeatureMatrix& domain(std::size_t i) const {
    return i < individual_sources.size() ? individual_sources[i] : ensemble;
  }
};

struct SyntheticSpec {
  std::size_t n_sources = 4;
  std::size_t n_classes = 3;
  std::size_t feature_dim = 20;
  std::size_t samples_per_class = 100;
  double class_separation = 3.0;
  double domain_shift_scale = 1.0;
  std::uint64_t rng_seed = 0;
};

DatasetManifest load_manifest(const std::filesystem::path& path);

FeatureMatrix load_features(const DatasetManifest& manifest, const std::string& subject, const std::string& session);

// Reads a feature CSV directly; expected_classes < 0 skips label validation.
FeatureMatrix load_feature_csv(const std::filesystem::path& path, long expected_dim = -1, long expected_classes = -1);

void save_feature_csv(const FeatureMatrix& features, const std::filesystem::path& path);

SourceBundle build_source_bundle(std::vector<FeatureMatrix> sources);

// Class-conditional Gaussian domains with per-domain, per-class mean offsets
// of fixed norm. Target labels are returned for scoring only.
std::pair<SourceBundle, FeatureMatrix> generate_synthetic(const SyntheticSpec& spec);

// Atomic write helper: temp file in the destination directory, then rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

// Materializes a synthetic dataset as a manifest plus one labeled CSV per
// domain; the generated target becomes the last subject so leave-one-out
// drivers see n_sources + 1 subjects.
void write_synthetic_dataset(const SyntheticSpec& spec, const std::filesystem::path& dir);

}  // namespace msdcda
