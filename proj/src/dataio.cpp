#include "msdcda/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "msdcda/errors.hpp"
#include "msdcda/rng.hpp"

namespace msdcda {

namespace {

using nlohmann::json;

std::string domain_key(const std::string& subject, const std::string& session) {
  return subject + "/" + session;
}

double parse_double(std::string_view tok, std::size_t row, std::size_t col, const std::filesystem::path& path) {
  double v = 0.0;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw DataError(path.string() + ": row " + std::to_string(row) + ", column " + std::to_string(col) +
                    ": not a number: '" + std::string(tok) + "'");
  return v;
}

std::vector<std::string_view> split_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace

bool DatasetManifest::has_file(const std::string& subject, const std::string& session) const {
  return files.count(domain_key(subject, session)) > 0;
}

const std::string& DatasetManifest::file_for(const std::string& subject, const std::string& session) const {
  auto it = files.find(domain_key(subject, session));
  if (it == files.end()) throw DataError("manifest has no file for " + domain_key(subject, session));
  return it->second;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest not found: " + path.string());

  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw DataError("manifest " + path.string() + ": invalid JSON: " + e.what());
  }

  DatasetManifest m;
  m.base_dir = path.parent_path();
  try {
    for (const auto& s : doc.at("subjects")) m.subjects.push_back(s.get<std::string>());
    for (const auto& s : doc.at("sessions")) m.sessions.push_back(s.get<std::string>());
    m.n_classes = doc.at("n_classes").get<std::size_t>();
    m.feature_dim = doc.at("feature_dim").get<std::size_t>();
    for (const auto& [key, value] : doc.at("files").items()) m.files[key] = value.get<std::string>();
    if (doc.contains("sample_counts"))
      for (const auto& [key, value] : doc["sample_counts"].items()) m.sample_counts[key] = value.get<std::size_t>();
    if (doc.contains("sampling_rate_hz")) m.sampling_rate_hz = doc["sampling_rate_hz"].get<double>();
    if (doc.contains("channels"))
      for (const auto& c : doc["channels"]) m.channel_names.push_back(c.get<std::string>());
    if (doc.contains("bands"))
      for (const auto& b : doc["bands"])
        m.band_definitions.push_back({b.at("name").get<std::string>(), b.at("low_hz").get<double>(), b.at("high_hz").get<double>()});
  } catch (const json::exception& e) {
    throw DataError("manifest " + path.string() + ": schema violation: " + e.what());
  }

  if (m.subjects.empty()) throw DataError("manifest " + path.string() + ": schema violation: key 'subjects' is empty");
  if (m.sessions.empty()) throw DataError("manifest " + path.string() + ": schema violation: key 'sessions' is empty");
  if (m.n_classes == 0) throw DataError("manifest " + path.string() + ": schema violation: key 'n_classes' must be positive");
  if (m.feature_dim == 0) throw DataError("manifest " + path.string() + ": schema violation: key 'feature_dim' must be positive");

  for (const auto& [key, rel] : m.files) {
    const std::size_t slash = key.find('/');
    if (slash == std::string::npos)
      throw DataError("manifest " + path.string() + ": schema violation: files key '" + key + "' is not subject/session");
    const std::string subject = key.substr(0, slash);
    const std::string session = key.substr(slash + 1);
    if (std::find(m.subjects.begin(), m.subjects.end(), subject) == m.subjects.end())
      throw DataError("manifest " + path.string() + ": files key '" + key + "' names unknown subject '" + subject + "'");
    if (std::find(m.sessions.begin(), m.sessions.end(), session) == m.sessions.end())
      throw DataError("manifest " + path.string() + ": files key '" + key + "' names unknown session '" + session + "'");
    const auto full = m.base_dir / rel;
    if (!std::filesystem::exists(full))
      throw DataError("manifest " + path.string() + ": missing file for '" + key + "': " + full.string());
  }
  return m;
}

FeatureMatrix load_feature_csv(const std::filesystem::path& path, long expected_dim, long expected_classes) {
  std::ifstream in(path);
  if (!in) throw DataError("feature file not found: " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();

  auto header = split_line(line);
  bool labeled = !header.empty() && header.back() == "label";
  const std::size_t dim = labeled ? header.size() - 1 : header.size();
  if (dim == 0) throw DataError(path.string() + ": header declares no feature columns");
  for (std::size_t c = 0; c < dim; ++c) {
    const std::string want = "f" + std::to_string(c);
    if (header[c] != want)
      throw DataError(path.string() + ": header column " + std::to_string(c) + " is '" + std::string(header[c]) +
                      "', expected '" + want + "'");
  }
  if (expected_dim >= 0 && dim != static_cast<std::size_t>(expected_dim))
    throw DataError(path.string() + ": feature dimension " + std::to_string(dim) + " does not match manifest value " +
                    std::to_string(expected_dim));

  std::vector<double> values;
  std::vector<int> labels;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto toks = split_line(line);
    if (toks.size() != header.size())
      throw DataError(path.string() + ": row " + std::to_string(row) + " has " + std::to_string(toks.size()) +
                      " columns, expected " + std::to_string(header.size()));
    for (std::size_t c = 0; c < dim; ++c) {
      const double v = parse_double(toks[c], row, c, path);
      if (!std::isfinite(v))
        throw DataError(path.string() + ": non-finite value at row " + std::to_string(row) + ", column " + std::to_string(c));
      values.push_back(v);
    }
    if (labeled) {
      long lab = 0;
      auto tok = toks[dim];
      auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), lab);
      if (ec != std::errc() || ptr != tok.data() + tok.size())
        throw DataError(path.string() + ": row " + std::to_string(row) + ": label is not an integer: '" + std::string(tok) + "'");
      if (lab < 0 || (expected_classes >= 0 && lab >= expected_classes))
        throw DataError(path.string() + ": row " + std::to_string(row) + ": label " + std::to_string(lab) +
                        " outside [0, " + std::to_string(expected_classes) + ")");
      labels.push_back(static_cast<int>(lab));
    }
    ++row;
  }
  if (row == 0) throw DataError(path.string() + ": no data rows");

  FeatureMatrix fm;
  fm.values = Matrix(row, dim, std::move(values));
  fm.labels = std::move(labels);
  return fm;
}

FeatureMatrix load_features(const DatasetManifest& manifest, const std::string& subject, const std::string& session) {
  const auto& rel = manifest.file_for(subject, session);
  FeatureMatrix fm = load_feature_csv(manifest.base_dir / rel, static_cast<long>(manifest.feature_dim),
                                      static_cast<long>(manifest.n_classes));
  fm.subject_id = subject;
  fm.session_id = session;
  const auto key = subject + "/" + session;
  auto it = manifest.sample_counts.find(key);
  if (it != manifest.sample_counts.end() && it->second != fm.rows())
    throw DataError("manifest declares " + std::to_string(it->second) + " rows for " + key + ", file has " +
                    std::to_string(fm.rows()));
  return fm;
}

void save_feature_csv(const FeatureMatrix& features, const std::filesystem::path& path) {
  std::ostringstream out;
  const std::size_t dim = features.feature_dim();
  for (std::size_t c = 0; c < dim; ++c) {
    if (c) out << ',';
    out << 'f' << c;
  }
  if (features.labeled()) out << ",label";
  out << '\n';

  char buf[32];
  for (std::size_t r = 0; r < features.rows(); ++r) {
    for (std::size_t c = 0; c < dim; ++c) {
      if (c) out << ',';
      // 17 significant digits round-trips doubles exactly
      std::snprintf(buf, sizeof buf, "%.17g", features.values(r, c));
      out << buf;
    }
    if (features.labeled()) out << ',' << features.labels[r];
    out << '\n';
  }
  write_file_atomic(path, out.str());
}

SourceBundle build_source_bundle(std::vector<FeatureMatrix> sources) {
  if (sources.empty()) throw DataError("build_source_bundle: need at least one source");
  const std::size_t dim = sources.front().feature_dim();
  std::size_t total = 0;
  for (const auto& s : sources) {
    if (s.feature_dim() != dim)
      throw DataError("build_source_bundle: feature dimension mismatch: " + std::to_string(s.feature_dim()) +
                      " vs " + std::to_string(dim));
    total += s.rows();
  }

  FeatureMatrix ensemble;
  ensemble.values = Matrix(total, dim);
  ensemble.subject_id = "ensemble";
  const bool labeled = std::all_of(sources.begin(), sources.end(), [](const FeatureMatrix& s) { return s.labeled(); });
  if (labeled) ensemble.labels.reserve(total);
  std::size_t at = 0;
  for (const auto& s : sources) {
    for (std::size_t r = 0; r < s.rows(); ++r, ++at) {
      std::copy(s.values.row(r), s.values.row(r) + dim, ensemble.values.row(at));
      if (labeled) ensemble.labels.push_back(s.labels[r]);
    }
  }

  SourceBundle bundle;
  bundle.individual_sources = std::move(sources);
  bundle.ensemble = std::move(ensemble);
  return bundle;
}

std::pair<SourceBundle, FeatureMatrix> generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_sources == 0 || spec.n_classes == 0 || spec.feature_dim == 0 || spec.samples_per_class == 0)
    throw ConfigError("generate_synthetic: sizes must be positive");
  if (spec.class_separation <= 0.0) throw ConfigError("generate_synthetic: class_separation must be positive");
  if (spec.domain_shift_scale < 0.0) throw ConfigError("generate_synthetic: domain_shift_scale must be non-negative");

  Rng root(spec.rng_seed);
  const std::size_t dim = spec.feature_dim;

  // Shared class means: random directions scaled to class_separation.
  Rng mean_rng = root.child(1);
  std::vector<std::vector<double>> class_means(spec.n_classes, std::vector<double>(dim));
  for (auto& mu : class_means) {
    double norm = 0.0;
    for (auto& x : mu) {
      x = mean_rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : mu) x = x / norm * spec.class_separation;
  }

  auto draw_domain = [&](std::uint64_t tag, const std::string& subject) {
    Rng rng = root.child(100 + tag);
    // Every class mean gets its own displacement of fixed norm, so the shift
    // is class-conditional rather than a plain translation.
    std::vector<std::vector<double>> offsets(spec.n_classes, std::vector<double>(dim, 0.0));
    if (spec.domain_shift_scale > 0.0) {
      for (auto& off : offsets) {
        double norm = 0.0;
        for (auto& x : off) {
          x = rng.normal();
          norm += x * x;
        }
        norm = std::sqrt(norm);
        for (auto& x : off) x = x / norm * spec.domain_shift_scale;
      }
    }
    FeatureMatrix fm;
    const std::size_t rows = spec.n_classes * spec.samples_per_class;
    fm.values = Matrix(rows, dim);
    fm.labels.reserve(rows);
    fm.subject_id = subject;
    fm.session_id = "1";
    std::size_t at = 0;
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
      for (std::size_t s = 0; s < spec.samples_per_class; ++s, ++at) {
        double* row = fm.values.row(at);
        for (std::size_t d = 0; d < dim; ++d) row[d] = class_means[c][d] + offsets[c][d] + rng.normal();
        fm.labels.push_back(static_cast<int>(c));
      }
    }
    return fm;
  };

  std::vector<FeatureMatrix> sources;
  sources.reserve(spec.n_sources);
  for (std::size_t i = 0; i < spec.n_sources; ++i) sources.push_back(draw_domain(i, "s" + std::to_string(i + 1)));
  FeatureMatrix target = draw_domain(spec.n_sources, "target");
  return {build_source_bundle(std::move(sources)), std::move(target)};
}

void write_synthetic_dataset(const SyntheticSpec& spec, const std::filesystem::path& dir) {
  auto [bundle, target] = generate_synthetic(spec);
  std::filesystem::create_directories(dir);

  json manifest;
  manifest["n_classes"] = spec.n_classes;
  manifest["feature_dim"] = spec.feature_dim;
  manifest["sessions"] = {"1"};
  json subjects = json::array();
  json files = json::object();
  json counts = json::object();

  auto add_subject = [&](const FeatureMatrix& fm, std::size_t index) {
    const std::string name = "s" + std::to_string(index);
    subjects.push_back(name);
    const std::string file = name + ".csv";
    files[name + "/1"] = file;
    counts[name + "/1"] = fm.rows();
    save_feature_csv(fm, dir / file);
  };
  for (std::size_t i = 0; i < bundle.n_sources(); ++i) add_subject(bundle.individual_sources[i], i + 1);
  add_subject(target, bundle.n_sources() + 1);

  manifest["subjects"] = subjects;
  manifest["files"] = files;
  manifest["sample_counts"] = counts;
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + tmp);
    out << contents;
    if (!out) throw DataError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace msdcda
