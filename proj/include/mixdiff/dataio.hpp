#pragma once

// Dataset container, normalization, hierarchical imputation, CSV ingestion
// and the toy mixed-type generator.
//
// On-disk layout of a dataset directory:
//   manifest.json   structured description (see DatasetManifest)
//   num.f32         little-endian float32, row-major [N, L, F_num]
//   cat.u8          uint8 category indices [N, L, F_cat]
//   labels.u8       uint8 labels [N]

#include <fcntl.h>
#include <unistd.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "mixdiff/error.hpp"

namespace mixdiff {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline constexpr int kDatasetFormatVersion = 1;

struct CategoricalFeature {
  std::string name;
  std::size_t cardinality = 2;
  friend bool operator==(const CategoricalFeature&, const CategoricalFeature&) = default;
};

/// Per numerical feature mean and (population) standard deviation of raw data.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;
  friend bool operator==(const NormStats&, const NormStats&) = default;
};

struct DatasetManifest {
  int format_version = kDatasetFormatVersion;
  std::size_t n = 0;
  std::size_t seq_len = 0;
  std::vector<std::string> numerical;
  std::vector<CategoricalFeature> categorical;
  CategoricalFeature label{"label", 2};
  bool labels_present = true;             ///< false for unconditional samples
  std::optional<NormStats> normalization;  ///< present iff values are stored normalized
  std::uint64_t creation_seed = 0;

  std::vector<std::size_t> cardinalities() const {
    std::vector<std::size_t> c;
    for (const auto& f : categorical) c.push_back(f.cardinality);
    return c;
  }
  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Dense mixed-type batch, time-major within each sample.
struct SequenceBatch {
  std::size_t n = 0, seq_len = 0, num_numerical = 0, num_categorical = 0;
  std::vector<float> numerical;           ///< [n, L, F_num]
  std::vector<std::uint8_t> categorical;  ///< [n, L, F_cat]
  std::vector<std::uint8_t> labels;       ///< [n]

  static SequenceBatch zeros(std::size_t n, std::size_t len, std::size_t fnum, std::size_t fcat) {
    SequenceBatch b;
    b.n = n;
    b.seq_len = len;
    b.num_numerical = fnum;
    b.num_categorical = fcat;
    b.numerical.assign(n * len * fnum, 0.0f);
    b.categorical.assign(n * len * fcat, 0);
    b.labels.assign(n, 0);
    return b;
  }

  float& num(std::size_t i, std::size_t l, std::size_t f) { return numerical[(i * seq_len + l) * num_numerical + f]; }
  float num(std::size_t i, std::size_t l, std::size_t f) const { return numerical[(i * seq_len + l) * num_numerical + f]; }
  std::uint8_t& cat(std::size_t i, std::size_t l, std::size_t j) { return categorical[(i * seq_len + l) * num_categorical + j]; }
  std::uint8_t cat(std::size_t i, std::size_t l, std::size_t j) const { return categorical[(i * seq_len + l) * num_categorical + j]; }

  SequenceBatch subset(std::span<const std::size_t> idx) const {
    SequenceBatch b = zeros(idx.size(), seq_len, num_numerical, num_categorical);
    const std::size_t sn = seq_len * num_numerical, sc = seq_len * num_categorical;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] >= n) throw ArgumentError("subset: index out of range");
      std::copy_n(numerical.begin() + idx[r] * sn, sn, b.numerical.begin() + r * sn);
      std::copy_n(categorical.begin() + idx[r] * sc, sc, b.categorical.begin() + r * sc);
      b.labels[r] = labels[idx[r]];
    }
    return b;
  }

  friend bool operator==(const SequenceBatch&, const SequenceBatch&) = default;
};

struct Dataset {
  DatasetManifest manifest;
  SequenceBatch data;
};

// ---------------------------------------------------------------------------
// Manifest JSON

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  using nlohmann::json;
  json j;
  j["format_version"] = m.format_version;
  j["n"] = m.n;
  j["seq_len"] = m.seq_len;
  j["numerical_features"] = m.numerical;
  json cats = json::array();
  for (const auto& c : m.categorical) cats.push_back({{"name", c.name}, {"cardinality", c.cardinality}});
  j["categorical_features"] = cats;
  j["label"] = {{"name", m.label.name}, {"cardinality", m.label.cardinality}};
  j["labels_present"] = m.labels_present;
  if (m.normalization)
    j["normalization"] = {{"mean", m.normalization->mean}, {"std", m.normalization->stddev}};
  else
    j["normalization"] = nullptr;
  j["creation_seed"] = m.creation_seed;
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kDatasetFormatVersion)
      throw FormatError("manifest.json: unknown format version " + std::to_string(m.format_version));
    m.n = j.at("n").get<std::size_t>();
    m.seq_len = j.at("seq_len").get<std::size_t>();
    m.numerical = j.at("numerical_features").get<std::vector<std::string>>();
    for (const auto& c : j.at("categorical_features"))
      m.categorical.push_back({c.at("name").get<std::string>(), c.at("cardinality").get<std::size_t>()});
    m.label = {j.at("label").at("name").get<std::string>(), j.at("label").at("cardinality").get<std::size_t>()};
    m.labels_present = j.value("labels_present", true);
    if (j.contains("normalization") && !j["normalization"].is_null())
      m.normalization = NormStats{j["normalization"].at("mean").get<std::vector<double>>(),
                                  j["normalization"].at("std").get<std::vector<double>>()};
    m.creation_seed = j.value("creation_seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  if (m.seq_len < 1) throw FormatError("manifest.json: seq_len must be at least 1");
  for (const auto& c : m.categorical)
    if (c.cardinality < 2 || c.cardinality > 255)
      throw FormatError("manifest.json: cardinality of '" + c.name + "' must lie in [2,255]");
  if (m.label.cardinality < 1 || m.label.cardinality > 255)
    throw FormatError("manifest.json: label cardinality must lie in [1,255]");
  if (m.normalization && (m.normalization->mean.size() != m.numerical.size() ||
                          m.normalization->stddev.size() != m.numerical.size()))
    throw FormatError("manifest.json: normalization statistics do not match the numerical features");
  return m;
}

// ---------------------------------------------------------------------------
// Read / write

namespace detail {

/// Exclusive writer lock: <dir>/.lock created with O_EXCL, removed on scope exit.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw FormatError("dataset directory is locked or not writable: " + dir.string());
  }
  ~DirLock() {
    ::close(fd_);
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

inline void write_blob(const std::filesystem::path& p, const void* data, std::size_t bytes) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + p.string() + " for writing");
  os.write(static_cast<const char*>(data), std::streamsize(bytes));
  if (!os) throw FormatError("write failed: " + p.string());
}

inline std::vector<char> read_blob(const std::filesystem::path& p, std::size_t expected) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw FormatError(p.filename().string() + ": missing");
  std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (buf.size() != expected)
    throw FormatError(p.filename().string() + ": expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(buf.size()));
  return buf;
}

}  // namespace detail

/// Checks shapes, category bounds and finiteness against the manifest.
inline void validate_dataset(const Dataset& ds) {
  const auto& m = ds.manifest;
  const auto& b = ds.data;
  if (b.n != m.n || b.seq_len != m.seq_len || b.num_numerical != m.numerical.size() ||
      b.num_categorical != m.categorical.size())
    throw FormatError("dataset: batch shape does not match manifest");
  if (b.numerical.size() != m.n * m.seq_len * m.numerical.size() ||
      b.categorical.size() != m.n * m.seq_len * m.categorical.size() || b.labels.size() != m.n)
    throw FormatError("dataset: buffer sizes do not match manifest");
  for (std::size_t i = 0; i < b.n; ++i)
    for (std::size_t l = 0; l < b.seq_len; ++l) {
      for (std::size_t j = 0; j < b.num_categorical; ++j)
        if (b.cat(i, l, j) >= m.categorical[j].cardinality)
          throw FormatError("cat.u8: value " + std::to_string(b.cat(i, l, j)) + " >= cardinality " +
                            std::to_string(m.categorical[j].cardinality) + " at sample " + std::to_string(i) +
                            ", time " + std::to_string(l) + ", feature " + std::to_string(j));
      for (std::size_t f = 0; f < b.num_numerical; ++f)
        if (!std::isfinite(b.num(i, l, f)))
          throw FormatError("num.f32: non-finite value at sample " + std::to_string(i) + ", time " +
                            std::to_string(l) + ", feature " + std::to_string(f));
    }
  for (std::size_t i = 0; i < b.n; ++i)
    if (b.labels[i] >= m.label.cardinality)
      throw FormatError("labels.u8: label " + std::to_string(b.labels[i]) + " out of range at sample " +
                        std::to_string(i));
}

inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  validate_dataset(ds);
  std::filesystem::create_directories(dir);
  detail::DirLock lock(dir);
  {
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    if (!os) throw FormatError("cannot write manifest.json in " + dir.string());
    os << manifest_to_json(ds.manifest).dump(2) << '\n';
  }
  detail::write_blob(dir / "num.f32", ds.data.numerical.data(), ds.data.numerical.size() * sizeof(float));
  detail::write_blob(dir / "cat.u8", ds.data.categorical.data(), ds.data.categorical.size());
  detail::write_blob(dir / "labels.u8", ds.data.labels.data(), ds.data.labels.size());
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw FormatError("manifest.json: missing in " + dir.string());
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("manifest.json: ") + e.what());
    }
    ds.manifest = manifest_from_json(j);
  }
  const auto& m = ds.manifest;
  ds.data = SequenceBatch::zeros(m.n, m.seq_len, m.numerical.size(), m.categorical.size());
  auto num = detail::read_blob(dir / "num.f32", ds.data.numerical.size() * sizeof(float));
  std::memcpy(ds.data.numerical.data(), num.data(), num.size());
  auto cat = detail::read_blob(dir / "cat.u8", ds.data.categorical.size());
  std::memcpy(ds.data.categorical.data(), cat.data(), cat.size());
  auto lab = detail::read_blob(dir / "labels.u8", ds.data.labels.size());
  std::memcpy(ds.data.labels.data(), lab.data(), lab.size());
  validate_dataset(ds);
  return ds;
}

/// FNV-1a 64 over the three blobs; identifies dataset content in reports.
inline std::uint64_t fingerprint(const SequenceBatch& b) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 1099511628211ull;
    }
  };
  mix(b.numerical.data(), b.numerical.size() * sizeof(float));
  mix(b.categorical.data(), b.categorical.size());
  mix(b.labels.data(), b.labels.size());
  return h;
}

// ---------------------------------------------------------------------------
// Normalization: x -> (x - mean) * (0.5 / std), matching sigma_data = 0.5.

inline constexpr double kTargetStd = 0.5;

inline NormStats compute_stats(const SequenceBatch& b) {
  NormStats s;
  const std::size_t fn = b.num_numerical, cnt = b.n * b.seq_len;
  s.mean.assign(fn, 0.0);
  s.stddev.assign(fn, 0.0);
  if (cnt == 0) return s;
  for (std::size_t r = 0; r < cnt; ++r)
    for (std::size_t f = 0; f < fn; ++f) s.mean[f] += b.numerical[r * fn + f];
  for (auto& m : s.mean) m /= double(cnt);
  for (std::size_t r = 0; r < cnt; ++r)
    for (std::size_t f = 0; f < fn; ++f) {
      const double d = b.numerical[r * fn + f] - s.mean[f];
      s.stddev[f] += d * d;
    }
  for (auto& v : s.stddev) v = std::sqrt(v / double(cnt));
  return s;
}

/// Scale factor per feature; zero for constant features.
inline double norm_scale(const NormStats& s, std::size_t f) {
  return s.stddev[f] > 0 ? kTargetStd / s.stddev[f] : 0.0;
}

inline SequenceBatch normalize(SequenceBatch b, const NormStats& s) {
  const std::size_t fn = b.num_numerical;
  if (s.mean.size() != fn || s.stddev.size() != fn) throw ArgumentError("normalize: statistics do not match features");
  for (std::size_t r = 0; r < b.n * b.seq_len; ++r)
    for (std::size_t f = 0; f < fn; ++f)
      b.numerical[r * fn + f] = float((b.numerical[r * fn + f] - s.mean[f]) * norm_scale(s, f));
  return b;
}

/// Exact inverse of normalize; constant features come back as their mean.
inline SequenceBatch denormalize(SequenceBatch b, const NormStats& s) {
  const std::size_t fn = b.num_numerical;
  if (s.mean.size() != fn || s.stddev.size() != fn) throw ArgumentError("denormalize: statistics do not match features");
  for (std::size_t r = 0; r < b.n * b.seq_len; ++r)
    for (std::size_t f = 0; f < fn; ++f) {
      const double k = norm_scale(s, f);
      b.numerical[r * fn + f] = k > 0 ? float(b.numerical[r * fn + f] / k + s.mean[f]) : float(s.mean[f]);
    }
  return b;
}

// ---------------------------------------------------------------------------
// Imputation

struct ImputeResult {
  std::vector<double> values;        ///< [N, L, F], all finite
  std::vector<std::uint8_t> mask;    ///< [N, L, F], 1 = originally observed
};

/// Fills non-finite entries of a raw [N, L, F] array: last observation carried
/// forward within the sample, then the sample's mean of observed entries, then
/// the dataset-wide feature mean.
inline ImputeResult impute(std::span<const double> raw, std::size_t n, std::size_t len, std::size_t nf,
                           std::span<const std::string> names = {}) {
  if (raw.size() != n * len * nf) throw ArgumentError("impute: array size does not match [N, L, F]");
  ImputeResult r{std::vector<double>(raw.begin(), raw.end()), std::vector<std::uint8_t>(raw.size(), 0)};
  auto at = [&](std::size_t i, std::size_t l, std::size_t f) { return (i * len + l) * nf + f; };
  for (std::size_t k = 0; k < raw.size(); ++k) r.mask[k] = std::isfinite(raw[k]) ? 1 : 0;

  for (std::size_t f = 0; f < nf; ++f) {
    double total = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t l = 0; l < len; ++l)
        if (r.mask[at(i, l, f)]) {
          total += raw[at(i, l, f)];
          ++count;
        }
    if (count == 0) {
      const std::string nm = f < names.size() ? names[f] : "#" + std::to_string(f);
      throw FormatError("impute: feature " + nm + " is missing in every sample");
    }
    const double global_mean = total / double(count);

    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      std::size_t c = 0;
      for (std::size_t l = 0; l < len; ++l)
        if (r.mask[at(i, l, f)]) {
          s += raw[at(i, l, f)];
          ++c;
        }
      const double fallback = c ? s / double(c) : global_mean;
      bool seen = false;
      double last = 0;
      for (std::size_t l = 0; l < len; ++l) {
        const std::size_t k = at(i, l, f);
        if (r.mask[k]) {
          seen = true;
          last = raw[k];
        } else {
          r.values[k] = seen ? last : fallback;
        }
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Toy generator

struct ToyConfig {
  std::size_t n = 4000;
  std::size_t seq_len = 24;
  std::uint64_t seed = 0;
};

/// Hidden 3-state Markov regime driving three AR(1) numerical features, a
/// noisy regime observation (C=3), an observation mask (C=2) and a binary
/// label: y = 1 iff more than a third of the steps are in regime 2.
inline Dataset gen_toy(const ToyConfig& cfg) {
  if (cfg.n < 1 || cfg.seq_len < 1) throw ArgumentError("gen_toy: n and seq_len must be positive");
  constexpr double kStay = 0.85, kAr = 0.8, kNoise = 0.1, kObsCorrect = 0.9;
  constexpr double kMu[3][3] = {{-1, 0, 1}, {1, 0, -1}, {0, 1, -1}};  // [feature][regime]
  constexpr double kMaskP[3] = {0.95, 0.8, 0.6};
  const double stat_sd = kNoise / std::sqrt(1 - kAr * kAr);

  Dataset ds;
  auto& m = ds.manifest;
  m.n = cfg.n;
  m.seq_len = cfg.seq_len;
  m.numerical = {"x0", "x1", "x2"};
  m.categorical = {{"regime_obs", 3}, {"observed", 2}};
  m.label = {"label", 2};
  m.creation_seed = cfg.seed;
  ds.data = SequenceBatch::zeros(cfg.n, cfg.seq_len, 3, 2);
  auto& b = ds.data;

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<int> pick3(0, 2), pick2(0, 1);

  for (std::size_t i = 0; i < cfg.n; ++i) {
    int r = pick3(rng);
    std::size_t in_regime2 = 0;
    double x[3];
    for (std::size_t l = 0; l < cfg.seq_len; ++l) {
      if (l > 0 && unif(rng) >= kStay) r = (r + 1 + pick2(rng)) % 3;
      for (int f = 0; f < 3; ++f) {
        const double mu = kMu[f][r];
        x[f] = l == 0 ? mu + stat_sd * gauss(rng) : mu + kAr * (x[f] - mu) + kNoise * gauss(rng);
        b.num(i, l, f) = float(x[f]);
      }
      b.cat(i, l, 0) = std::uint8_t(unif(rng) < kObsCorrect ? r : (r + 1 + pick2(rng)) % 3);
      b.cat(i, l, 1) = std::uint8_t(unif(rng) < kMaskP[r] ? 1 : 0);
      if (r == 2) ++in_regime2;
    }
    b.labels[i] = 3 * in_regime2 > cfg.seq_len ? 1 : 0;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CSV ingestion (long format: sample_id, time_index, feature, value)

/// Column mapping file (JSON):
/// {
///   "columns": {"sample_id": "...", "time_index": "...", "feature": "...", "value": "..."},
///   "seq_len": 24,
///   "numerical": ["hr", ...],
///   "categorical": [{"name": "gcs", "cardinality": 3}, ...],
///   "label": {"name": "mortality", "cardinality": 2}
/// }
/// Missing numerical cells are imputed and one observed-mask feature
/// ("<name>_observed", C=2) per numerical feature is appended to the
/// categorical features. Label rows may carry any time index.
inline Dataset ingest_csv(const std::filesystem::path& csv, const std::filesystem::path& mapping) {
  nlohmann::json mp;
  {
    std::ifstream is(mapping);
    if (!is) throw FormatError("cannot open mapping file " + mapping.string());
    try {
      is >> mp;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("mapping: ") + e.what());
    }
  }
  std::string c_sid, c_time, c_feat, c_val;
  std::size_t len = 0;
  std::vector<std::string> num_names;
  std::vector<CategoricalFeature> cats;
  CategoricalFeature label;
  try {
    const auto& cols = mp.at("columns");
    c_sid = cols.at("sample_id").get<std::string>();
    c_time = cols.at("time_index").get<std::string>();
    c_feat = cols.at("feature").get<std::string>();
    c_val = cols.at("value").get<std::string>();
    len = mp.at("seq_len").get<std::size_t>();
    num_names = mp.value("numerical", std::vector<std::string>{});
    for (const auto& c : mp.value("categorical", nlohmann::json::array()))
      cats.push_back({c.at("name").get<std::string>(), c.at("cardinality").get<std::size_t>()});
    label = {mp.at("label").at("name").get<std::string>(), mp.at("label").at("cardinality").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("mapping: ") + e.what());
  }
  if (len < 1) throw FormatError("mapping: seq_len must be at least 1");

  std::map<std::string, std::size_t> num_idx, cat_idx;
  for (std::size_t f = 0; f < num_names.size(); ++f) num_idx[num_names[f]] = f;
  for (std::size_t j = 0; j < cats.size(); ++j) cat_idx[cats[j].name] = j;

  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (char ch : line) {
      if (ch == '"') quoted = !quoted;
      else if (ch == ',' && !quoted) {
        out.push_back(cur);
        cur.clear();
      } else if (ch != '\r') cur += ch;
    }
    out.push_back(cur);
    return out;
  };

  std::ifstream is(csv);
  if (!is) throw FormatError("cannot open " + csv.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError(csv.filename().string() + ": empty file");
  const auto header = split(line);
  auto col = [&](const std::string& name) {
    for (std::size_t k = 0; k < header.size(); ++k)
      if (header[k] == name) return k;
    throw FormatError(csv.filename().string() + ": missing column '" + name + "'");
  };
  const std::size_t k_sid = col(c_sid), k_time = col(c_time), k_feat = col(c_feat), k_val = col(c_val);

  std::unordered_map<std::string, std::size_t> sample_of;
  std::vector<std::vector<double>> num_rows;      // per sample [L * F_num]
  std::vector<std::vector<int>> cat_rows;         // per sample [L * F_cat], -1 = missing
  std::vector<int> labels;
  const std::size_t fn = num_names.size(), fc = cats.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();

  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split(line);
    const std::string where = csv.filename().string() + ":" + std::to_string(lineno);
    if (cells.size() < header.size()) throw FormatError(where + ": too few columns");
    auto [it, inserted] = sample_of.try_emplace(cells[k_sid], num_rows.size());
    if (inserted) {
      num_rows.emplace_back(len * fn, nan);
      cat_rows.emplace_back(len * fc, -1);
      labels.push_back(-1);
    }
    const std::size_t s = it->second;
    const std::string& feat = cells[k_feat];
    const std::string& sval = cells[k_val];
    if (sval.empty()) continue;  // explicit missing cell
    double v = 0;
    try {
      std::size_t used = 0;
      v = std::stod(sval, &used);
      if (used != sval.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw FormatError(where + ": value '" + sval + "' is not numeric");
    }
    if (feat == label.name) {
      if (v < 0 || v >= double(label.cardinality) || v != std::floor(v))
        throw FormatError(where + ": label value out of range");
      labels[s] = int(v);
      continue;
    }
    long long ti = 0;
    try {
      ti = std::stoll(cells[k_time]);
    } catch (const std::exception&) {
      throw FormatError(where + ": bad time index");
    }
    if (ti < 0 || std::size_t(ti) >= len) throw FormatError(where + ": time index outside [0, seq_len)");
    if (auto f = num_idx.find(feat); f != num_idx.end()) {
      num_rows[s][std::size_t(ti) * fn + f->second] = v;
    } else if (auto c = cat_idx.find(feat); c != cat_idx.end()) {
      if (v < 0 || v >= double(cats[c->second].cardinality) || v != std::floor(v))
        throw FormatError(where + ": category out of range for '" + feat + "'");
      cat_rows[s][std::size_t(ti) * fc + c->second] = int(v);
    } else {
      throw FormatError(where + ": unknown feature '" + feat + "'");
    }
  }
  const std::size_t n = num_rows.size();
  if (n == 0) throw FormatError(csv.filename().string() + ": no data rows");

  std::vector<double> raw(n * len * fn);
  for (std::size_t i = 0; i < n; ++i) std::copy(num_rows[i].begin(), num_rows[i].end(), raw.begin() + i * len * fn);
  ImputeResult imp = fn ? impute(raw, n, len, fn, num_names) : ImputeResult{};

  Dataset ds;
  auto& m = ds.manifest;
  m.n = n;
  m.seq_len = len;
  m.numerical = num_names;
  m.categorical = cats;
  for (const auto& nm : num_names) m.categorical.push_back({nm + "_observed", 2});
  m.label = label;
  const std::size_t fc_all = m.categorical.size();
  ds.data = SequenceBatch::zeros(n, len, fn, fc_all);
  std::vector<std::string> ids(n);
  for (const auto& [id, s] : sample_of) ids[s] = id;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0) throw FormatError("sample '" + ids[i] + "': label missing");
    ds.data.labels[i] = std::uint8_t(labels[i]);
    for (std::size_t l = 0; l < len; ++l) {
      for (std::size_t f = 0; f < fn; ++f) {
        const std::size_t k = (i * len + l) * fn + f;
        ds.data.num(i, l, f) = float(imp.values[k]);
        ds.data.cat(i, l, fc + f) = imp.mask[k];
      }
      for (std::size_t j = 0; j < fc; ++j) {
        const int v = cat_rows[i][l * fc + j];
        if (v < 0)
          throw FormatError("sample '" + ids[i] + "': categorical '" + cats[j].name + "' missing at time " +
                            std::to_string(l));
        ds.data.cat(i, l, j) = std::uint8_t(v);
      }
    }
  }
  validate_dataset(ds);
  return ds;
}

}  // namespace mixdiff
