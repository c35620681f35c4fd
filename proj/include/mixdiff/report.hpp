#pragma once

// Evaluation battery -> JSON report.

#include <cstdint>
#include <cstdio>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixdiff/classify.hpp"
#include "mixdiff/dataio.hpp"
#include "mixdiff/metrics.hpp"

namespace mixdiff {

inline const std::vector<std::string>& all_metric_names() {
  static const std::vector<std::string> names = {"mmd",           "corr_mae", "acf_mse", "dtw",  "tvd",
                                                 "trans_dist",    "c2st_logistic",     "c2st_gru",
                                                 "tstr",          "trtr"};
  return names;
}

struct EvalOptions {
  std::vector<std::string> metrics;  ///< empty = every applicable metric
  std::uint64_t seed = 0;
  std::size_t mmd_max_samples = 1000;
  std::size_t dtw_pairs = 200;
  C2stOptions c2st;
  TstrOptions tstr;
};

inline std::vector<std::string> parse_metric_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  const auto& known = all_metric_names();
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (std::find(known.begin(), known.end(), item) == known.end())
      throw ArgumentError("unknown metric '" + item + "'");
    out.push_back(item);
  }
  if (out.empty()) throw ArgumentError("empty metric list");
  return out;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void check_compatible(const DatasetManifest& a, const DatasetManifest& b, const char* what) {
  if (a.seq_len != b.seq_len || a.numerical.size() != b.numerical.size() || a.cardinalities() != b.cardinalities() ||
      a.label.cardinality != b.label.cardinality)
    throw ManifestMismatch(std::string("eval: ") + what + " dataset layout differs from the real dataset");
}

/// Runs the requested metrics. `test_real` is the held-out real set used by
/// tstr/trtr (trtr trains on `real`, tstr on `synth`).
inline nlohmann::json evaluate(const Dataset& real, const Dataset& synth, const std::optional<Dataset>& test_real,
                               const EvalOptions& o) {
  using nlohmann::json;
  check_compatible(real.manifest, synth.manifest, "synthetic");
  if (test_real) check_compatible(real.manifest, test_real->manifest, "held-out");
  const auto cards = real.manifest.cardinalities();
  const std::size_t fn = real.manifest.numerical.size(), fc = cards.size(), len = real.manifest.seq_len;
  const bool explicit_list = !o.metrics.empty();
  const std::vector<std::string> wanted = explicit_list ? o.metrics : all_metric_names();

  auto describe = [](const Dataset& d) {
    return json{{"n", d.data.n}, {"fingerprint", hex64(fingerprint(d.data))}, {"labels_present", d.manifest.labels_present}};
  };
  json rep;
  rep["format_version"] = 1;
  rep["seed"] = o.seed;
  rep["datasets"] = {{"real", describe(real)}, {"synth", describe(synth)}};
  if (test_real) rep["datasets"]["test_real"] = describe(*test_real);
  json metrics = json::object(), skipped = json::object();

  auto unavailable = [&](const std::string& m, const std::string& why) {
    if (explicit_list) throw ArgumentError("metric " + m + ": " + why);
    skipped[m] = why;
  };
  auto auc_json = [](const AucSummary& s) {
    return json{{"value", s.mean}, {"std", s.stddev}, {"per_seed", s.per_seed}};
  };

  for (const auto& m : wanted) {
    if ((m == "mmd" || m == "acf_mse" || m == "dtw") && fn == 0) {
      unavailable(m, "no numerical features");
      continue;
    }
    if (m == "corr_mae" && fn < 2) {
      unavailable(m, "needs at least 2 numerical features");
      continue;
    }
    if ((m == "tvd" || m == "trans_dist") && fc == 0) {
      unavailable(m, "no categorical features");
      continue;
    }
    if ((m == "acf_mse" || m == "trans_dist") && len < 2) {
      unavailable(m, "sequence length must exceed 1");
      continue;
    }
    if (m == "mmd") {
      const auto r = mmd(real.data, synth.data, o.mmd_max_samples, o.seed);
      metrics[m] = {{"value", r.value},
                    {"config", {{"kernel", "rbf"}, {"bandwidth", "median pairwise distance (pooled)"},
                                {"bandwidths", r.bandwidths}, {"estimator", "biased V-statistic, sqrt of feature mean"},
                                {"n_real", r.n_real}, {"n_synth", r.n_synth}, {"seed", o.seed}}}};
    } else if (m == "corr_mae") {
      const auto r = corr_mae(real.data, synth.data);
      json sk = json::array();
      for (auto [a, b] : r.skipped) sk.push_back({a, b});
      metrics[m] = {{"value", r.value}, {"config", {{"pooling", "samples x timesteps"}, {"skipped_pairs", sk}}}};
    } else if (m == "acf_mse") {
      const auto r = acf_mse(real.data, synth.data);
      metrics[m] = {{"value", r.value},
                    {"config", {{"max_lag", r.max_lag}, {"constant_sequences_real", r.constant_real},
                                {"constant_sequences_synth", r.constant_synth}}}};
    } else if (m == "dtw") {
      const auto r = dtw_metric(real.data, synth.data, o.dtw_pairs, o.seed);
      metrics[m] = {{"value", r.value},
                    {"config", {{"pairs", r.pairs}, {"pairing", "shared random index"}, {"local_cost", "absolute"},
                                {"seed", o.seed}}}};
    } else if (m == "tvd") {
      metrics[m] = {{"value", tvd(real.data, synth.data, cards)},
                    {"config", {{"averaged_over", "features x timesteps"}}}};
    } else if (m == "trans_dist") {
      const auto r = trans_dist(real.data, synth.data, cards);
      metrics[m] = {{"value", r.value},
                    {"config", {{"occupancy", "real side (asymmetric)"}, {"unobserved_rows", r.unobserved_rows}}}};
    } else if (m == "c2st_logistic" || m == "c2st_gru") {
      C2stOptions co = o.c2st;
      co.seed = o.seed;
      const Discriminator d = m == "c2st_logistic" ? Discriminator::logistic : Discriminator::gru;
      auto j = auc_json(c2st(real.data, synth.data, cards, d, co));
      j["config"] = {{"discriminator", to_string(d)}, {"seeds", co.seeds}, {"max_per_side", co.max_per_side},
                     {"split", "balanced halves"}};
      metrics[m] = j;
    } else if (m == "tstr" || m == "trtr") {
      if (!test_real) {
        unavailable(m, "requires a held-out real dataset");
        continue;
      }
      const Dataset& train = m == "tstr" ? synth : real;
      if (!train.manifest.labels_present || !test_real->manifest.labels_present) {
        unavailable(m, "labels absent (unconditional samples carry no labels)");
        continue;
      }
      TstrOptions to = o.tstr;
      to.seed = o.seed;
      auto j = auc_json(tstr(train.data, test_real->data, cards, real.manifest.label.cardinality, to));
      j["config"] = {{"classifier", "gru"}, {"hidden", to.gru.hidden}, {"epochs", to.gru.epochs}, {"seeds", to.seeds}};
      metrics[m] = j;
    }
  }
  rep["metrics"] = metrics;
  if (!skipped.empty()) rep["skipped"] = skipped;
  return rep;
}

}  // namespace mixdiff
