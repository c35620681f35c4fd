// mixdiff command-line tool: gen-toy, ingest, train, sample, eval, grad-check.
//
// Exit codes: 0 ok, 1 usage, 2 data/format, 3 numeric failure. Failures print
// one line on stderr:  error kind=<usage|format|numeric> message="..."

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "mixdiff/mixdiff.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mixdiff;

namespace {

enum Exit { kOk = 0, kUsage = 1, kFormat = 2, kNumeric = 3 };

int fail(const char* kind, const std::string& msg, int code) {
  std::string esc;
  for (char c : msg) {
    if (c == '"' || c == '\\') esc += '\\';
    esc += (c == '\n') ? ' ' : c;
  }
  std::cerr << "error kind=" << kind << " message=\"" << esc << "\"\n";
  return code;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

// Output locations are left out so identical runs give identical files.
void log_config(const fs::path& p, const std::string& command, json args) {
  write_json(p, {{"command", command}, {"args", std::move(args)}});
}

json read_json_file(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw FormatError("cannot open " + p.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(p.filename().string() + ": " + e.what());
  }
}

std::vector<double> label_frequencies(const SequenceBatch& b, std::size_t card) {
  std::vector<double> f(card, 0.0);
  for (auto y : b.labels) f.at(y) += 1.0;
  for (auto& v : f) v /= double(std::max<std::size_t>(b.n, 1));
  return f;
}

struct GenToyArgs {
  std::string out;
  std::size_t n = 4000, seq_len = 24;
  std::uint64_t seed = 0;
};

int cmd_gen_toy(const GenToyArgs& a) {
  ToyConfig c;
  c.n = a.n;
  c.seq_len = a.seq_len;
  c.seed = a.seed;
  fs::create_directories(a.out);
  log_config(fs::path(a.out) / "run_config.json", "gen-toy", {{"n", a.n}, {"seq_len", a.seq_len}, {"seed", a.seed}});
  const Dataset ds = gen_toy(c);
  write_dataset(a.out, ds);
  std::cout << "wrote " << ds.data.n << " sequences to " << a.out << "\n";
  return kOk;
}

struct IngestArgs {
  std::string csv, mapping, out;
};

int cmd_ingest(const IngestArgs& a) {
  fs::create_directories(a.out);
  log_config(fs::path(a.out) / "run_config.json", "ingest", {{"csv", a.csv}, {"mapping", a.mapping}});
  const Dataset ds = ingest_csv(a.csv, a.mapping);
  write_dataset(a.out, ds);
  std::cout << "ingested " << ds.data.n << " sequences into " << a.out << "\n";
  return kOk;
}

struct TrainArgs {
  std::string data, config, out;
};

int cmd_train(const TrainArgs& a) {
  const Dataset ds = read_dataset(a.data);
  const TrainConfig cfg = a.config.empty() ? TrainConfig{} : train_config_from_json(read_json_file(a.config));
  const ModelSpec spec = model_spec_for(ds.manifest, cfg);
  NormStats stats;
  SequenceBatch norm;
  if (ds.manifest.normalization) {
    stats = *ds.manifest.normalization;
    norm = ds.data;
  } else {
    stats = compute_stats(ds.data);
    norm = normalize(ds.data, stats);
  }
  fs::create_directories(a.out);
  log_config(fs::path(a.out) / "run_config.json", "train",
             {{"data", a.data}, {"data_fingerprint", hex64(fingerprint(ds.data))}, {"config", to_json(cfg)}});
  std::ofstream metrics(fs::path(a.out) / "metrics.csv", std::ios::trunc);
  if (!metrics) throw FormatError("cannot write metrics.csv in " + a.out);
  auto res = train<float>(norm, spec, cfg, &metrics);

  Checkpoint ck;
  ck.params = std::move(res.params);
  ck.ema = std::move(res.ema);
  ck.step = res.selected_step;
  ck.total_steps = res.total_steps;
  ck.ema_loss = res.selected_ema_loss;
  ck.learn_schedule = cfg.learn_schedule;
  ck.norm = stats;
  ck.label_freqs = label_frequencies(ds.data, ds.manifest.label.cardinality);
  ck.numerical_names = ds.manifest.numerical;
  ck.categorical = ds.manifest.categorical;
  ck.label = ds.manifest.label;
  ck.train_config = to_json(cfg);
  save_checkpoint(fs::path(a.out) / "checkpoint.bin", ck);
  std::cout << "trained " << res.total_steps << " steps; kept step " << res.selected_step << " (ema loss "
            << res.selected_ema_loss << ")\n";
  return kOk;
}

struct SampleArgs {
  std::string ckpt, out, mode = "cfg-comb";
  std::size_t n = 1000, steps = 50, chunk = 256;
  double w_num = 2.0, w_cat = 2.0;
  std::uint64_t seed = 0;
  bool raw_params = false;
};

int cmd_sample(const SampleArgs& a) {
  fs::create_directories(a.out);
  log_config(fs::path(a.out) / "run_config.json", "sample",
             {{"ckpt", a.ckpt}, {"n", a.n}, {"steps", a.steps}, {"mode", a.mode}, {"w_num", a.w_num},
              {"w_cat", a.w_cat}, {"seed", a.seed}, {"weights", a.raw_params ? "raw" : "ema"}});
  const Checkpoint ck = load_checkpoint(a.ckpt);
  SamplerConfig sc;
  sc.steps = a.steps;
  sc.w_num = a.w_num;
  sc.w_cat = a.w_cat;
  sc.mode = parse_sample_mode(a.mode);
  sc.seed = a.seed;
  sc.chunk = a.chunk;
  const Model<float>& model = a.raw_params ? ck.params : ck.ema;
  Dataset ds;
  ds.data = sample(model, sc, a.n, {}, ck.label_freqs, &ck.norm);
  ds.manifest.n = a.n;
  ds.manifest.seq_len = model.spec.seq_len;
  ds.manifest.numerical = ck.numerical_names;
  ds.manifest.categorical = ck.categorical;
  ds.manifest.label = ck.label;
  ds.manifest.labels_present = sc.mode != SampleMode::uncond;
  ds.manifest.creation_seed = a.seed;
  write_dataset(a.out, ds);
  std::cout << "sampled " << a.n << " sequences into " << a.out << "\n";
  return kOk;
}

struct EvalArgs {
  std::string real, synth, test_real, out, metrics;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
  EvalOptions o;
  o.seed = a.seed;
  if (!a.metrics.empty()) o.metrics = parse_metric_list(a.metrics);
  log_config(a.out + ".run_config.json", "eval",
             {{"real", a.real}, {"synth", a.synth}, {"test_real", a.test_real}, {"metrics", a.metrics}, {"seed", a.seed}});
  const Dataset real = read_dataset(a.real), synth = read_dataset(a.synth);
  std::optional<Dataset> test;
  if (!a.test_real.empty()) test = read_dataset(a.test_real);
  json rep = evaluate(real, synth, test, o);
  write_json(a.out, rep);
  for (auto it = rep["metrics"].begin(); it != rep["metrics"].end(); ++it)
    std::cout << it.key() << " " << it.value()["value"].get<double>() << "\n";
  return kOk;
}

int cmd_grad_check(bool dbl) {
  (void)dbl;  // the suite always runs in double precision
  const auto rep = run_gradcheck_suite();
  for (const auto& e : rep.entries)
    std::printf("%-28s n=%-4zu max_rel=%.3e %s\n", e.name.c_str(), e.count, e.max_rel_error,
                e.max_rel_error < rep.tolerance ? "ok" : "FAIL");
  std::printf("grad-check %s: max relative error %.3e (tolerance %.0e)\n", rep.passed() ? "passed" : "FAILED",
              rep.max_rel_error(), rep.tolerance);
  if (!rep.passed()) return fail("numeric", "gradient check exceeded tolerance", kNumeric);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixed-type sequence diffusion: data, training, sampling, evaluation"};
  app.require_subcommand(1);

  GenToyArgs gt;
  auto* c_gen = app.add_subcommand("gen-toy", "generate the toy mixed-type dataset");
  c_gen->add_option("--out", gt.out, "output directory")->required();
  c_gen->add_option("--n", gt.n, "number of sequences")->capture_default_str();
  c_gen->add_option("--seq-len", gt.seq_len, "sequence length")->capture_default_str();
  c_gen->add_option("--seed", gt.seed, "random seed")->capture_default_str();

  IngestArgs ig;
  auto* c_ing = app.add_subcommand("ingest", "convert a long-format CSV into a dataset directory");
  c_ing->add_option("--csv", ig.csv, "input CSV")->required();
  c_ing->add_option("--mapping", ig.mapping, "JSON column mapping")->required();
  c_ing->add_option("--out", ig.out, "output directory")->required();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train a model");
  c_train->add_option("--data", tr.data, "dataset directory")->required();
  c_train->add_option("--config", tr.config, "TrainConfig JSON (defaults when omitted)");
  c_train->add_option("--out", tr.out, "output directory")->required();

  SampleArgs sa;
  auto* c_sample = app.add_subcommand("sample", "draw synthetic sequences from a checkpoint");
  c_sample->add_option("--ckpt", sa.ckpt, "checkpoint file")->required();
  c_sample->add_option("--n", sa.n, "number of sequences")->capture_default_str();
  c_sample->add_option("--steps", sa.steps, "Euler steps")->capture_default_str();
  c_sample->add_option("--mode", sa.mode, "uncond | cfg-comb | cfg-bal")->capture_default_str();
  c_sample->add_option("--w-num", sa.w_num, "guidance weight, numerical")->capture_default_str();
  c_sample->add_option("--w-cat", sa.w_cat, "guidance weight, categorical")->capture_default_str();
  c_sample->add_option("--seed", sa.seed, "random seed")->capture_default_str();
  c_sample->add_option("--chunk", sa.chunk, "samples per forward pass")->capture_default_str();
  c_sample->add_flag("--raw-params", sa.raw_params, "use raw instead of EMA weights");
  c_sample->add_option("--out", sa.out, "output directory")->required();

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "compare real and synthetic data");
  c_eval->add_option("--real", ev.real, "real dataset directory")->required();
  c_eval->add_option("--synth", ev.synth, "synthetic dataset directory")->required();
  c_eval->add_option("--test-real", ev.test_real, "held-out real dataset (enables tstr/trtr)");
  c_eval->add_option("--metrics", ev.metrics, "comma-separated metric list");
  c_eval->add_option("--seed", ev.seed, "random seed")->capture_default_str();
  c_eval->add_option("--out", ev.out, "report path")->required();

  bool dbl = false;
  auto* c_gc = app.add_subcommand("grad-check", "run the gradient-check suite");
  c_gc->add_flag("--double", dbl, "double precision (always on)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), kUsage);
  }

  try {
    if (*c_gen) return cmd_gen_toy(gt);
    if (*c_ing) return cmd_ingest(ig);
    if (*c_train) return cmd_train(tr);
    if (*c_sample) return cmd_sample(sa);
    if (*c_eval) return cmd_eval(ev);
    if (*c_gc) return cmd_grad_check(dbl);
  } catch (const ArgumentError& e) {
    return fail("usage", e.what(), kUsage);
  } catch (const NumericError& e) {
    return fail("numeric", e.what(), kNumeric);
  } catch (const FormatError& e) {
    return fail("format", e.what(), kFormat);
  } catch (const fs::filesystem_error& e) {
    return fail("format", e.what(), kFormat);
  } catch (const json::exception& e) {
    return fail("format", e.what(), kFormat);
  } catch (const std::exception& e) {
    return fail("format", e.what(), kFormat);
  }
  return kUsage;
}
