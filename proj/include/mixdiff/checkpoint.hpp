#pragma once

// Checkpoint file:
//   MIXDIFF-CHECKPOINT
//   key=<json value>            one per line
//   block=<name> <d0>x<d1>...   one per parameter array, in payload order
//   end
//   <float32 little-endian payload>
//   <u64 FNV-1a of every preceding byte>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixdiff/dataio.hpp"
#include "mixdiff/model.hpp"

namespace mixdiff {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "MIXDIFF-CHECKPOINT";

inline nlohmann::json spec_to_json(const ModelSpec& s) {
  return {{"num_numerical", s.num_numerical}, {"cat_cards", s.cat_cards},       {"label_card", s.label_card},
          {"seq_len", s.seq_len},             {"embed_dim", s.embed_dim},       {"hidden", s.hidden},
          {"layers", s.layers},               {"label_dim", s.label_dim},       {"time_dim", s.time_dim},
          {"sigma_data", s.sigma_data},       {"sigma_min", s.sigma_min},       {"sigma_max_num", s.sigma_max_num},
          {"sigma_max_emb", s.sigma_max_emb}, {"rho_init_num", s.rho_init_num}, {"rho_init_emb", s.rho_init_emb},
          {"rho_lower", s.rho_lower},         {"rho_upper", s.rho_upper}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  j.at("num_numerical").get_to(s.num_numerical);
  j.at("cat_cards").get_to(s.cat_cards);
  j.at("label_card").get_to(s.label_card);
  j.at("seq_len").get_to(s.seq_len);
  j.at("embed_dim").get_to(s.embed_dim);
  j.at("hidden").get_to(s.hidden);
  j.at("layers").get_to(s.layers);
  j.at("label_dim").get_to(s.label_dim);
  j.at("time_dim").get_to(s.time_dim);
  j.at("sigma_data").get_to(s.sigma_data);
  j.at("sigma_min").get_to(s.sigma_min);
  j.at("sigma_max_num").get_to(s.sigma_max_num);
  j.at("sigma_max_emb").get_to(s.sigma_max_emb);
  j.at("rho_init_num").get_to(s.rho_init_num);
  j.at("rho_init_emb").get_to(s.rho_init_emb);
  j.at("rho_lower").get_to(s.rho_lower);
  j.at("rho_upper").get_to(s.rho_upper);
  s.validate();
  return s;
}

struct Checkpoint {
  Model<float> params;  ///< raw parameters of the retained snapshot
  Model<float> ema;     ///< EMA shadows of the retained snapshot
  std::uint64_t step = 0;         ///< step at which the snapshot was taken
  std::uint64_t total_steps = 0;  ///< steps run in total
  double ema_loss = 0;
  bool learn_schedule = true;
  NormStats norm;
  std::vector<double> label_freqs;
  std::vector<std::string> numerical_names;
  std::vector<CategoricalFeature> categorical;
  CategoricalFeature label;
  nlohmann::json train_config = nlohmann::json::object();

  /// Throws ManifestMismatch unless the dataset has the model's feature layout.
  void check_against(const DatasetManifest& m) const {
    const ModelSpec& s = params.spec;
    auto fail = [](const std::string& what) { throw ManifestMismatch("checkpoint/dataset mismatch: " + what); };
    if (m.numerical.size() != s.num_numerical)
      fail("numerical features " + std::to_string(m.numerical.size()) + " vs " + std::to_string(s.num_numerical));
    if (m.cardinalities() != s.cat_cards) fail("categorical cardinalities differ");
    if (m.seq_len != s.seq_len) fail("sequence length " + std::to_string(m.seq_len) + " vs " + std::to_string(s.seq_len));
    if (m.label.cardinality != s.label_card) fail("label cardinality differs");
  }
};

namespace detail {

inline std::uint64_t fnv1a(const char* p, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(p[i]);
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out.empty() ? "scalar" : out;
}

inline std::vector<const Parameter<float>*> checkpoint_blocks(const Model<float>& m) { return m.parameters(); }

}  // namespace detail

/// Serializes to a byte string; identical checkpoints give identical bytes.
inline std::string checkpoint_bytes(const Checkpoint& c) {
  using nlohmann::json;
  std::ostringstream h;
  h << kCheckpointMagic << '\n';
  auto kv = [&h](const char* k, const json& v) { h << k << '=' << v.dump() << '\n'; };
  kv("version", kCheckpointVersion);
  kv("spec", spec_to_json(c.params.spec));
  kv("step", c.step);
  kv("total_steps", c.total_steps);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", c.ema_loss);
  h << "ema_loss=" << buf << '\n';
  kv("learn_schedule", c.learn_schedule);
  auto dbl_list = [&h, &buf](const char* k, const std::vector<double>& v) {
    h << k << "=[";
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", v[i]);
      h << (i ? "," : "") << buf;
    }
    h << "]\n";
  };
  dbl_list("norm_mean", c.norm.mean);
  dbl_list("norm_std", c.norm.stddev);
  dbl_list("label_freqs", c.label_freqs);
  kv("numerical_names", c.numerical_names);
  json cats = json::array();
  for (const auto& f : c.categorical) cats.push_back({{"name", f.name}, {"cardinality", f.cardinality}});
  kv("categorical", cats);
  kv("label", json{{"name", c.label.name}, {"cardinality", c.label.cardinality}});
  kv("train_config", c.train_config);

  std::string payload;
  for (const auto* group : {&c.params, &c.ema}) {
    const std::string prefix = group == &c.params ? "params/" : "ema/";
    for (const auto* p : group->parameters()) {
      h << "block=" << prefix << p->name << ' ' << detail::shape_token(p->value.shape()) << '\n';
      payload.append(reinterpret_cast<const char*>(p->value.data()), p->value.size() * sizeof(float));
    }
  }
  h << "end\n";
  std::string out = h.str() + payload;
  const std::uint64_t digest = detail::fnv1a(out.data(), out.size());
  out.append(reinterpret_cast<const char*>(&digest), sizeof digest);
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const std::string bytes = checkpoint_bytes(c);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("checkpoint: cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), std::streamsize(bytes.size()));
    if (!os) throw FormatError("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  using nlohmann::json;
  auto fail = [](const std::string& why) -> void { throw FormatError("checkpoint: " + why); };
  std::size_t pos = 0;
  auto next_line = [&](std::string& line) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) return false;
    line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return true;
  };
  std::string line;
  if (!next_line(line) || line != kCheckpointMagic) fail("not a checkpoint file (bad magic)");

  std::map<std::string, std::string> kv;
  std::vector<std::pair<std::string, std::string>> blocks;
  bool ended = false;
  while (next_line(line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("malformed header line");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "block") {
      const auto sp = val.rfind(' ');
      if (sp == std::string::npos) fail("malformed block line");
      blocks.emplace_back(val.substr(0, sp), val.substr(sp + 1));
    } else {
      kv[key] = val;
    }
  }
  if (!ended) fail("truncated header");
  if (bytes.size() < pos + sizeof(std::uint64_t)) fail("truncated file");

  Checkpoint c;
  try {
    auto get = [&](const char* k) -> json {
      auto it = kv.find(k);
      if (it == kv.end()) throw FormatError(std::string("checkpoint: missing header key '") + k + "'");
      return json::parse(it->second);
    };
    const int version = get("version").get<int>();
    if (version != kCheckpointVersion)
      throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    const ModelSpec spec = spec_from_json(get("spec"));
    c.step = get("step").get<std::uint64_t>();
    c.total_steps = get("total_steps").get<std::uint64_t>();
    c.ema_loss = std::strtod(kv.at("ema_loss").c_str(), nullptr);
    c.learn_schedule = get("learn_schedule").get<bool>();
    c.norm.mean = get("norm_mean").get<std::vector<double>>();
    c.norm.stddev = get("norm_std").get<std::vector<double>>();
    c.label_freqs = get("label_freqs").get<std::vector<double>>();
    c.numerical_names = get("numerical_names").get<std::vector<std::string>>();
    for (const auto& f : get("categorical")) c.categorical.push_back({f.at("name"), f.at("cardinality")});
    const json lab = get("label");
    c.label = {lab.at("name"), lab.at("cardinality")};
    c.train_config = get("train_config");
    c.params = Model<float>::init(spec, 0);
    c.ema = c.params;
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header value: ") + e.what());
  } catch (const std::out_of_range&) {
    throw FormatError("checkpoint: missing header key");
  }

  std::map<std::string, Parameter<float>*> slots;
  for (auto* group : {&c.params, &c.ema}) {
    const std::string prefix = group == &c.params ? "params/" : "ema/";
    for (auto* p : group->parameters()) slots[prefix + p->name] = p;
  }
  if (blocks.size() != slots.size())
    throw ManifestMismatch("checkpoint: " + std::to_string(blocks.size()) + " blocks but the model has " +
                           std::to_string(slots.size()) + " arrays");
  std::size_t need = 0;
  for (const auto& [name, shape] : blocks) {
    auto it = slots.find(name);
    if (it == slots.end()) throw ManifestMismatch("checkpoint: unexpected block '" + name + "'");
    if (detail::shape_token(it->second->value.shape()) != shape)
      throw ManifestMismatch("checkpoint: block '" + name + "' has shape " + shape + ", model expects " +
                             detail::shape_token(it->second->value.shape()));
    need += it->second->value.size() * sizeof(float);
  }
  if (bytes.size() < pos + need + sizeof(std::uint64_t)) fail("truncated payload");
  if (bytes.size() > pos + need + sizeof(std::uint64_t)) fail("trailing bytes after digest");
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + pos + need, sizeof stored);
  if (detail::fnv1a(bytes.data(), pos + need) != stored) fail("digest mismatch (file corrupted)");

  for (const auto& [name, shape] : blocks) {
    Parameter<float>* p = slots[name];
    std::memcpy(p->value.data(), bytes.data() + pos, p->value.size() * sizeof(float));
    pos += p->value.size() * sizeof(float);
  }
  c.params.set_schedule_trainable(c.learn_schedule);
  c.ema.set_schedule_trainable(c.learn_schedule);
  return c;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace mixdiff
