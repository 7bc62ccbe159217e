// kla — command-line front end for the sequence-kernel library.
//
// Subcommands:
//   verify  theory suite (projection / proximal / contraction checks) -> JSON
//   equiv   tokenwise vs chunkwise vs WY path equivalence sweep       -> JSON
//   gen     synthetic task datasets (JSONL + manifest)
//   train   toy model training (checkpoint + metrics CSV + manifest)
//   eval    exact-match evaluation of a checkpoint on a dataset
//   bench   prefill/decode wall-clock micro-benchmarks (CSV + manifest)
//
// Conventions:
//   - Every subcommand prints exactly one machine-readable JSON document to
//     stdout; human-readable notes go to stderr.
//   - Exit codes: 0 success, 1 check/metric failure, 2 usage/config error.
//   - --config FILE loads defaults from a flat JSON object; explicit flags
//     override it (the file's entries are injected before the user's flags
//     and every option takes the last value).
//   - Everything is deterministic given the seed; generation and training
//     require an explicit --seed so artifacts are always reproducible.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kla/bench.hpp"
#include "kla/chunk.hpp"
#include "kla/errors.hpp"
#include "kla/model.hpp"
#include "kla/recurrence.hpp"
#include "kla/rng.hpp"
#include "kla/tasks.hpp"
#include "kla/tensor.hpp"
#include "kla/theory.hpp"
#include "kla/train.hpp"

namespace {

using nlohmann::json;

// --- small parsing helpers ---------------------------------------------------

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    std::size_t a = item.find_first_not_of(" \t");
    std::size_t b = item.find_last_not_of(" \t");
    if (a == std::string::npos) continue;
    out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

std::vector<std::size_t> parse_size_list(const std::string& s, const std::string& flag) {
  std::vector<std::size_t> out;
  for (const std::string& item : split_csv(s)) {
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(item, &pos);
      if (pos != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw kla::config_error(flag + ": not a list of integers: " + s);
    }
  }
  if (out.empty()) throw kla::config_error(flag + ": empty list");
  return out;
}

// Option registrar: every option takes the last occurrence so config-file
// defaults (injected first) lose to explicit flags.
template <typename T>
CLI::Option* opt(CLI::App* sub, const std::string& name, T& var, const std::string& desc) {
  return sub->add_option(name, var, desc)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
}

CLI::Option* flag(CLI::App* sub, const std::string& name, bool& var, const std::string& desc) {
  return sub->add_flag(name, var, desc)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
}

// --- config-file merge ---------------------------------------------------------

// Rewrites the raw argument list so that entries from --config FILE appear
// right after the subcommand and before the user's own flags.
std::vector<std::string> merge_config_args(const std::vector<std::string>& raw) {
  std::string config_path;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] == "--config" && i + 1 < raw.size()) config_path = raw[i + 1];
    else if (raw[i].rfind("--config=", 0) == 0) config_path = raw[i].substr(9);
  }
  if (config_path.empty()) return raw;

  std::ifstream in(config_path);
  if (!in) throw kla::config_error("cannot open config file: " + config_path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw kla::config_error("config file is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object()) throw kla::config_error("config file must hold a JSON object");

  std::vector<std::string> injected;
  for (const auto& [key, value] : j.items()) {
    std::string rendered;
    if (value.is_string()) {
      rendered = value.get<std::string>();
    } else if (value.is_boolean()) {
      rendered = value.get<bool>() ? "true" : "false";
    } else if (value.is_number()) {
      rendered = value.dump();
    } else if (value.is_array()) {
      std::string joined;
      for (const auto& el : value) {
        if (!el.is_number() && !el.is_string())
          throw kla::config_error("config key '" + key + "': unsupported array element");
        if (!joined.empty()) joined += ',';
        joined += el.is_string() ? el.get<std::string>() : el.dump();
      }
      rendered = joined;
    } else {
      throw kla::config_error("config key '" + key + "': unsupported value type");
    }
    injected.push_back("--" + key + "=" + rendered);
  }

  std::vector<std::string> out;
  out.reserve(raw.size() + injected.size());
  if (!raw.empty()) out.push_back(raw[0]);  // subcommand name stays first
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), raw.begin() + (raw.empty() ? 0 : 1), raw.end());
  return out;
}

void emit(const json& report, const std::string& out_path) {
  std::cout << report.dump(2) << std::endl;
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw kla::config_error("cannot open report file for writing: " + out_path);
    out << report.dump(2) << '\n';
  }
}

// --- verify --------------------------------------------------------------------

struct VerifyOpts {
  std::size_t samples = 1000;
  std::size_t probes = 100;
  std::size_t max_dk = 32;
  std::size_t max_dv = 32;
  std::uint64_t seed = 42;
  bool inject_bug = false;
  std::string out;
  std::string config;
};

int run_verify(const VerifyOpts& o) {
  kla::TheorySuiteConfig cfg;
  cfg.samples = o.samples;
  cfg.probes = o.probes;
  cfg.max_dk = o.max_dk;
  cfg.max_dv = o.max_dv;
  cfg.seed = o.seed;
  cfg.inject_gdn_coefficient = o.inject_bug;
  const auto reports = kla::run_theory_suite(cfg);

  bool all_pass = true;
  json checks = json::array();
  for (const auto& r : reports) {
    all_pass = all_pass && r.pass;
    checks.push_back({{"check", r.check},
                      {"max_deviation", r.max_deviation},
                      {"tolerance", r.tolerance},
                      {"pass", r.pass},
                      {"samples", r.samples}});
  }
  emit(json{{"command", "verify"},
            {"seed", o.seed},
            {"samples", o.samples},
            {"probes", o.probes},
            {"inject_bug", o.inject_bug},
            {"checks", checks},
            {"all_pass", all_pass}},
       o.out);
  return all_pass ? 0 : 1;
}

// --- equiv ---------------------------------------------------------------------

struct EquivOpts {
  std::string rules = "gdn,kla";
  std::string chunks = "1,2,4,16,64";
  std::string lens = "5,64,257,512";
  std::size_t dk = 16;
  std::size_t dv = 32;
  double eps = 1e-6;
  double tol = 1e-9;
  double wy_tol = 1e-10;
  std::size_t wy_max = 32;
  std::uint64_t seed = 42;
  std::string out;
  std::string config;
};

std::vector<kla::TokenInput<double>> random_tokens(std::size_t n, std::size_t dk,
                                                   std::size_t dv, kla::Rng& rng) {
  std::vector<kla::TokenInput<double>> tokens(n);
  for (auto& t : tokens) {
    t.k = rng.normal_vector(dk);
    t.v = rng.normal_vector(dv);
    t.q = rng.normal_vector(dk);
    t.alpha = rng.uniform();
    t.eta = rng.uniform(0.05, 1.0);
  }
  return tokens;
}

int run_equiv(const EquivOpts& o) {
  if (o.dk == 0 || o.dv == 0) throw kla::config_error("equiv: dims must be positive");
  const auto chunk_sizes = parse_size_list(o.chunks, "--chunks");
  const auto lengths = parse_size_list(o.lens, "--lens");
  for (std::size_t c : chunk_sizes)
    if (c == 0) throw kla::config_error("equiv: chunk sizes must be positive");
  for (std::size_t l : lengths)
    if (l == 0) throw kla::config_error("equiv: lengths must be positive");

  const kla::Rng root(o.seed);
  json cases = json::array(), wy_cases = json::array();
  double worst = 0.0;
  bool all_pass = true;
  std::uint64_t salt = 0;

  for (const std::string& rname : split_csv(o.rules)) {
    kla::UpdateRule rule;
    rule.rule = kla::rule_from_name(rname);
    const kla::StateMatrix<double> s0(o.dk, o.dv);

    std::vector<kla::TokenInput<double>> longest;
    for (std::size_t L : lengths) {
      kla::Rng rng = root.derive(++salt);
      const auto tokens = random_tokens(L, o.dk, o.dv, rng);
      if (tokens.size() > longest.size()) longest = tokens;
      const auto ref = kla::run_sequence(rule, s0, tokens, o.eps);
      for (std::size_t C : chunk_sizes) {
        const auto chunked = kla::run_chunked(rule, s0, tokens, C, o.eps);
        const double dev =
            std::max(kla::max_abs_diff(ref.outputs, chunked.outputs),
                     kla::max_abs_diff(ref.final_state.s, chunked.final_state.s));
        worst = std::max(worst, dev);
        const bool pass = dev <= o.tol;
        all_pass = all_pass && pass;
        cases.push_back({{"rule", rname},
                         {"length", L},
                         {"chunk", C},
                         {"max_deviation", dev},
                         {"pass", pass}});
      }
    }

    // WY operator reconstruction against the direct products, plus the
    // combined per-position state identity, for chunk sizes up to wy_max.
    for (std::size_t C : chunk_sizes) {
      if (C > o.wy_max || C > longest.size()) continue;
      const auto chunk = kla::chunk_from_tokens(longest, 0, C);
      const auto wy = kla::wy_build(chunk, o.eps, rule);
      double dev = 0.0;
      for (std::size_t i = 0; i < C; ++i) {
        dev = std::max(dev, kla::max_abs_diff(wy.p_wy[i], wy.p_direct[i]));
        dev = std::max(dev, kla::max_abs_diff(wy.h_wy[i], wy.h_direct[i]));
      }
      const auto combined = kla::verify_combined_wy(s0, chunk, o.eps, rule);
      dev = std::max(dev, combined.max_deviation);
      const bool pass = dev <= o.wy_tol;
      all_pass = all_pass && pass;
      wy_cases.push_back(
          {{"rule", rname}, {"chunk", C}, {"max_deviation", dev}, {"pass", pass}});
    }
  }

  emit(json{{"command", "equiv"},
            {"seed", o.seed},
            {"d_k", o.dk},
            {"d_v", o.dv},
            {"tolerance", o.tol},
            {"wy_tolerance", o.wy_tol},
            {"cases", cases},
            {"wy_cases", wy_cases},
            {"max_deviation", worst},
            {"all_pass", all_pass}},
       o.out);
  return all_pass ? 0 : 1;
}

// --- task-config plumbing shared by gen / train / eval --------------------------

struct TaskOpts {
  std::string task;
  std::size_t vocab = 64;
  std::size_t len = 64;
  std::size_t pairs = 8;
  std::size_t queries = 8;
  std::size_t stacks = 2;
  std::size_t extrap = 1;
};

void add_task_options(CLI::App* sub, TaskOpts& t, bool required_task) {
  auto* taskopt = opt(sub, "--task", t.task, "task name: mqar | sniah | palindrome | stack");
  if (required_task) taskopt->required();
  opt(sub, "--vocab", t.vocab, "vocabulary size (task tokens and model head)");
  opt(sub, "--len", t.len, "base sequence length");
  opt(sub, "--pairs", t.pairs, "mqar: key-value pairs per sample");
  opt(sub, "--queries", t.queries, "mqar: queried keys per sample");
  opt(sub, "--stacks", t.stacks, "stack: number of independent stacks");
  opt(sub, "--extrap", t.extrap, "length-extrapolation factor (1, 2, 4, or 8)");
}

kla::TaskConfig task_config_of(const TaskOpts& t) {
  kla::TaskConfig cfg;
  cfg.kind = kla::task_from_name(t.task);
  cfg.vocab = t.vocab;
  cfg.length = t.len;
  cfg.num_pairs = t.pairs;
  cfg.num_queries = t.queries;
  cfg.num_stacks = t.stacks;
  cfg.extrap = t.extrap;
  cfg.validate();
  return cfg;
}

std::size_t split_index(const std::string& name) {
  if (name == "train") return 0;
  if (name == "val") return 1;
  if (name == "test") return 2;
  throw kla::config_error("unknown split name: " + name);
}

// Loads one split of a dataset manifest written by `gen`.
std::vector<kla::TaskSample> load_manifest_split(const std::string& manifest_path,
                                                 const std::string& split,
                                                 kla::TaskConfig* cfg_out) {
  std::ifstream in(manifest_path);
  if (!in) throw kla::config_error("cannot open dataset manifest: " + manifest_path);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw kla::structural_error("manifest is not valid JSON: " + std::string(e.what()));
  }
  if (cfg_out) *cfg_out = kla::task_config_from_json(manifest.at("config"));
  const std::filesystem::path dir = std::filesystem::path(manifest_path).parent_path();
  for (const auto& sp : manifest.at("splits")) {
    if (sp.at("name").get<std::string>() != split) continue;
    const auto path = dir / sp.at("file").get<std::string>();
    auto rows = kla::read_jsonl(path.string());
    if (rows.size() != sp.at("count").get<std::size_t>())
      throw kla::structural_error("manifest count mismatch for split " + split);
    return rows;
  }
  throw kla::config_error("manifest has no split named '" + split + "'");
}

// --- gen -------------------------------------------------------------------------

struct GenOpts {
  TaskOpts task;
  std::string out_dir;
  std::string stem;
  std::uint64_t seed = 0;
  std::size_t train_n = 20000;
  std::size_t val_n = 2000;
  std::size_t test_n = 2000;
  std::string config;
};

int run_gen(const GenOpts& o) {
  const kla::TaskConfig cfg = task_config_of(o.task);
  std::filesystem::create_directories(o.out_dir);
  const std::string stem = o.stem.empty() ? o.task.task : o.stem;

  std::vector<kla::SplitSpec> splits;
  if (o.train_n) splits.push_back({"train", o.train_n});
  if (o.val_n) splits.push_back({"val", o.val_n});
  if (o.test_n) splits.push_back({"test", o.test_n});
  if (splits.empty()) throw kla::config_error("gen: all split counts are zero");

  const std::string manifest = kla::write_dataset(o.out_dir, stem, cfg, o.seed, splits);

  json jsplits = json::array();
  std::size_t total = 0;
  for (const auto& s : splits) {
    jsplits.push_back({{"name", s.name}, {"count", s.count}});
    total += s.count;
  }
  emit(json{{"command", "gen"},
            {"task", o.task.task},
            {"seed", o.seed},
            {"manifest", manifest},
            {"splits", jsplits},
            {"total_samples", total}},
       "");
  return 0;
}

// --- model/train flag plumbing -----------------------------------------------------

struct ModelOpts {
  std::string rule = "kla";
  std::string norm = "kaczmarz";
  std::string gating = "dual";
  std::string seq_factor = "none";
  double learned_scalar = 1.0;
  std::size_t d_model = 64;
  std::size_t dk = 16;
  std::size_t dv = 0;  // 0 -> dk * vexpand
  std::size_t vexpand = 2;
  std::size_t layers = 2;
  std::size_t hidden_mult = 2;
  double eps = 1e-6;
  double norm_eps = 1e-6;
  double alpha_bias = 4.0;
};

void add_model_options(CLI::App* sub, ModelOpts& m) {
  opt(sub, "--rule", m.rule, "update rule: la | retnet | gla | longhorn | deltanet | gdn | kla");
  opt(sub, "--norm", m.norm, "write normalization: kaczmarz | none | key_norm_only | learned_scalar");
  opt(sub, "--gating", m.gating, "gate binding: dual | single");
  opt(sub, "--seq-factor", m.seq_factor, "sequence factor: none | inv_t | inv_sqrt_t | inv_log_t");
  opt(sub, "--learned-scalar", m.learned_scalar, "initial value for the learned write scalar");
  opt(sub, "--d-model", m.d_model, "residual stream width");
  opt(sub, "--dk", m.dk, "key/query dimension");
  opt(sub, "--dv", m.dv, "value dimension (0 = dk * vexpand)");
  opt(sub, "--vexpand", m.vexpand, "value expansion factor");
  opt(sub, "--layers", m.layers, "number of recurrence blocks");
  opt(sub, "--hidden-mult", m.hidden_mult, "MLP width multiplier");
  opt(sub, "--eps", m.eps, "write-coefficient stabilizer");
  opt(sub, "--norm-eps", m.norm_eps, "RMS-norm stabilizer");
  opt(sub, "--alpha-bias", m.alpha_bias, "decay-gate bias initialization");
}

kla::ModelConfig model_config_of(const ModelOpts& m, std::size_t vocab) {
  kla::ModelConfig cfg;
  cfg.vocab = vocab;
  cfg.d_model = m.d_model;
  cfg.d_k = m.dk;
  cfg.d_v = m.dv;
  cfg.v_expand = m.vexpand;
  cfg.n_layers = m.layers;
  cfg.hidden_mult = m.hidden_mult;
  cfg.rule.rule = kla::rule_from_name(m.rule);
  cfg.rule.normalization = kla::normalization_from_name(m.norm);
  cfg.rule.gating = kla::gating_from_name(m.gating);
  cfg.rule.seq_factor = kla::seq_factor_from_name(m.seq_factor);
  cfg.rule.learned_scalar = m.learned_scalar;
  cfg.eps = m.eps;
  cfg.norm_eps = m.norm_eps;
  cfg.alpha_bias_init = m.alpha_bias;
  cfg.validate();
  return cfg;
}

struct TrainOpts {
  TaskOpts task;
  ModelOpts model;
  std::string data;
  std::string out = "model.ckpt";
  std::string metrics;
  std::uint64_t seed = 0;
  std::size_t steps = 5000;
  std::size_t batch = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double clip = 1.0;
  std::size_t eval_interval = 200;
  std::size_t patience = 10;
  double target_acc = -1.0;
  std::size_t train_n = 2000;
  std::size_t val_n = 500;
  std::string config;
};

int run_train(const TrainOpts& o) {
  if (o.task.task.empty() == o.data.empty())
    throw kla::config_error("train: exactly one of --task or --data is required");

  kla::TaskConfig tcfg;
  std::vector<kla::TaskSample> train_set, val_set;
  std::string data_source;
  if (!o.data.empty()) {
    train_set = load_manifest_split(o.data, "train", &tcfg);
    val_set = load_manifest_split(o.data, "val", nullptr);
    data_source = o.data;
  } else {
    tcfg = task_config_of(o.task);
    train_set = kla::gen_task(tcfg, kla::split_seed(o.seed, 0), o.train_n);
    val_set = kla::gen_task(tcfg, kla::split_seed(o.seed, 1), o.val_n);
    data_source = "generated:" + o.task.task;
  }

  const kla::ModelConfig mcfg = model_config_of(o.model, tcfg.vocab);
  kla::TrainConfig trc;
  trc.steps = o.steps;
  trc.batch = o.batch;
  trc.lr = o.lr;
  trc.beta1 = o.beta1;
  trc.beta2 = o.beta2;
  trc.weight_decay = o.weight_decay;
  trc.clip = o.clip;
  trc.eval_interval = o.eval_interval;
  trc.patience = o.patience;
  trc.target_acc = o.target_acc;
  trc.seed = o.seed;

  const kla::TrainResult res = kla::train(mcfg, trc, train_set, val_set);
  kla::save_checkpoint(o.out, mcfg, res.params);
  if (!o.metrics.empty()) kla::write_metrics_csv(o.metrics, res.trace);

  json manifest{{"command", "train"},
                {"seed", o.seed},
                {"data", data_source},
                {"task_config", kla::task_config_json(tcfg)},
                {"model_config", kla::model_config_json(mcfg)},
                {"train",
                 {{"steps", o.steps},
                  {"batch", o.batch},
                  {"lr", o.lr},
                  {"eval_interval", o.eval_interval},
                  {"patience", o.patience},
                  {"target_acc", o.target_acc}}},
                {"steps_run", res.steps_run},
                {"best_acc", res.best_acc},
                {"stop_reason", res.stop_reason},
                {"checkpoint", o.out}};
  {
    std::ofstream mout(o.out + ".manifest.json");
    if (!mout) throw kla::config_error("cannot write training manifest next to " + o.out);
    mout << manifest.dump(2) << '\n';
  }

  json report = manifest;
  if (!res.trace.empty()) {
    report["final_loss"] = res.trace.back().loss;
    report["final_eval_acc"] = res.trace.back().eval_acc;
  }
  if (!o.metrics.empty()) report["metrics"] = o.metrics;
  emit(report, "");

  const bool target_missed = o.target_acc >= 0.0 && res.stop_reason != "target_reached";
  return target_missed ? 1 : 0;
}

// --- eval -----------------------------------------------------------------------

struct EvalOpts {
  TaskOpts task;
  std::string ckpt;
  std::string data;
  std::string split = "test";
  std::size_t count = 2000;
  std::uint64_t seed = 42;
  double min_acc = -1.0;
  std::string out;
  std::string config;
};

int run_eval(const EvalOpts& o) {
  if (o.task.task.empty() == o.data.empty())
    throw kla::config_error("eval: exactly one of --task or --data is required");

  auto [mcfg, params] = kla::load_checkpoint(o.ckpt);

  std::vector<kla::TaskSample> data;
  if (!o.data.empty()) {
    data = load_manifest_split(o.data, o.split, nullptr);
  } else {
    const kla::TaskConfig tcfg = task_config_of(o.task);
    data = kla::gen_task(tcfg, kla::split_seed(o.seed, split_index(o.split)), o.count);
  }
  if (data.empty()) throw kla::config_error("eval: empty dataset");
  const std::size_t L = data[0].length();
  for (const auto& s : data)
    if (s.length() != L) throw kla::config_error("eval: nonuniform sample lengths");

  kla::ModelHandles h = kla::build_model_tape(mcfg, L);
  h.set_params(params);
  const double acc = kla::evaluate_model(h, data);

  const bool below = o.min_acc >= 0.0 && acc < o.min_acc;
  emit(json{{"command", "eval"},
            {"checkpoint", o.ckpt},
            {"samples", data.size()},
            {"seq_len", L},
            {"accuracy", acc},
            {"min_acc", o.min_acc},
            {"pass", !below}},
       o.out);
  return below ? 1 : 0;
}

// --- bench ----------------------------------------------------------------------

struct BenchOpts {
  std::string mode = "prefill";
  std::string rules = "gdn,kla";
  std::string paths = "tokenwise,chunkwise";
  std::string lens = "256,512,1024,2048";
  std::string contexts = "1024,32768";
  std::size_t gen_tokens = 64;
  std::size_t reps = 5;
  std::size_t warmup = 2;
  std::size_t chunk = 64;
  std::size_t dk = 16;
  std::size_t dv = 32;
  std::string precision = "f64";
  std::uint64_t seed = 42;
  std::string out = "bench.csv";
  std::string config;
};

template <typename T>
std::vector<kla::BenchResult> run_bench_typed(const BenchOpts& o) {
  kla::BenchConfig cfg;
  cfg.d_k = o.dk;
  cfg.d_v = o.dv;
  cfg.chunk = o.chunk;
  cfg.reps = o.reps;
  cfg.warmup = o.warmup;
  cfg.seed = o.seed;

  std::vector<kla::BenchResult> rows;
  for (const std::string& rname : split_csv(o.rules)) {
    kla::UpdateRule rule;
    rule.rule = kla::rule_from_name(rname);
    if (o.mode == "prefill") {
      for (std::size_t L : parse_size_list(o.lens, "--lens")) {
        if (L == 0) {
          std::cerr << "note: skipping length 0\n";
          continue;
        }
        for (const std::string& path : split_csv(o.paths))
          rows.push_back(kla::bench_prefill<T>(rule, path, L, cfg));
      }
    } else if (o.mode == "decode") {
      for (std::size_t ctx : parse_size_list(o.contexts, "--contexts")) {
        if (ctx == 0) {
          std::cerr << "note: skipping context 0\n";
          continue;
        }
        rows.push_back(kla::bench_decode<T>(rule, ctx, o.gen_tokens, cfg));
      }
    } else {
      throw kla::config_error("bench: unknown mode: " + o.mode);
    }
  }
  return rows;
}

int run_bench(const BenchOpts& o) {
  std::vector<kla::BenchResult> rows;
  if (o.precision == "f64") rows = run_bench_typed<double>(o);
  else if (o.precision == "f32") rows = run_bench_typed<float>(o);
  else throw kla::config_error("bench: precision must be f64 or f32");
  if (rows.empty()) throw kla::config_error("bench: nothing to measure");

  kla::write_bench_csv(o.out, rows);

  json jrows = json::array();
  for (const auto& r : rows)
    jrows.push_back({{"rule", r.rule},
                     {"path", r.path},
                     {"length", r.length},
                     {"precision", r.precision},
                     {"reps", r.reps},
                     {"min_ms", r.min_ms},
                     {"median_ms", r.median_ms},
                     {"max_ms", r.max_ms},
                     {"tok_per_s", r.tok_per_s},
                     {"tpot_ms", r.tpot_ms}});
  json manifest{{"command", "bench"},
                {"mode", o.mode},
                {"seed", o.seed},
                {"d_k", o.dk},
                {"d_v", o.dv},
                {"chunk", o.chunk},
                {"reps", o.reps},
                {"warmup", o.warmup},
                {"precision", o.precision},
                {"csv", o.out},
                {"results", jrows}};
  {
    std::ofstream mout(o.out + ".manifest.json");
    if (!mout) throw kla::config_error("cannot write bench manifest next to " + o.out);
    mout << manifest.dump(2) << '\n';
  }
  emit(manifest, "");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sequence-kernel toolkit: verification, equivalence, tasks, training, benchmarks"};
  app.require_subcommand(1);

  VerifyOpts vo;
  CLI::App* verify = app.add_subcommand("verify", "run the theory-check suite");
  opt(verify, "--samples", vo.samples, "random instances per check");
  opt(verify, "--probes", vo.probes, "feasible probes per minimum-norm check");
  opt(verify, "--max-dk", vo.max_dk, "maximum key dimension");
  opt(verify, "--max-dv", vo.max_dv, "maximum value dimension");
  opt(verify, "--seed", vo.seed, "random seed");
  flag(verify, "--inject-bug", vo.inject_bug, "use the non-normalized write coefficient (must fail)");
  opt(verify, "--out", vo.out, "also write the JSON report here");
  opt(verify, "--config", vo.config, "JSON config file (flags override)");

  EquivOpts eo;
  CLI::App* equiv = app.add_subcommand("equiv", "tokenwise/chunkwise/WY equivalence sweep");
  opt(equiv, "--rules", eo.rules, "comma list of delta rules to sweep");
  opt(equiv, "--chunks", eo.chunks, "comma list of chunk sizes");
  opt(equiv, "--lens", eo.lens, "comma list of sequence lengths");
  opt(equiv, "--dk", eo.dk, "key dimension");
  opt(equiv, "--dv", eo.dv, "value dimension");
  opt(equiv, "--eps", eo.eps, "write-coefficient stabilizer");
  opt(equiv, "--tol", eo.tol, "max-abs tolerance for path agreement");
  opt(equiv, "--wy-tol", eo.wy_tol, "tolerance for WY reconstruction");
  opt(equiv, "--wy-max", eo.wy_max, "largest chunk size for the WY check");
  opt(equiv, "--seed", eo.seed, "random seed");
  opt(equiv, "--out", eo.out, "also write the JSON report here");
  opt(equiv, "--config", eo.config, "JSON config file (flags override)");

  GenOpts go;
  CLI::App* gen = app.add_subcommand("gen", "generate task datasets (JSONL + manifest)");
  add_task_options(gen, go.task, /*required_task=*/true);
  opt(gen, "--out", go.out_dir, "output directory")->required();
  opt(gen, "--stem", go.stem, "file stem (default: task name)");
  opt(gen, "--seed", go.seed, "dataset seed")->required();
  opt(gen, "--train-n", go.train_n, "training split size");
  opt(gen, "--val-n", go.val_n, "validation split size");
  opt(gen, "--test-n", go.test_n, "test split size");
  opt(gen, "--config", go.config, "JSON config file (flags override)");

  TrainOpts to;
  CLI::App* train = app.add_subcommand("train", "train a toy model");
  add_task_options(train, to.task, /*required_task=*/false);
  add_model_options(train, to.model);
  opt(train, "--data", to.data, "dataset manifest from `gen` (alternative to --task)");
  opt(train, "--out", to.out, "checkpoint output path");
  opt(train, "--metrics", to.metrics, "metrics CSV output path");
  opt(train, "--seed", to.seed, "training seed")->required();
  opt(train, "--steps", to.steps, "optimizer steps");
  opt(train, "--batch", to.batch, "batch size");
  opt(train, "--lr", to.lr, "learning rate");
  opt(train, "--beta1", to.beta1, "first-moment decay");
  opt(train, "--beta2", to.beta2, "second-moment decay");
  opt(train, "--weight-decay", to.weight_decay, "decoupled weight decay on matrices");
  opt(train, "--clip", to.clip, "global gradient-norm ceiling (0 disables)");
  opt(train, "--eval-interval", to.eval_interval, "steps between evaluations");
  opt(train, "--patience", to.patience, "evaluations without improvement before stopping");
  opt(train, "--target-acc", to.target_acc, "stop at this eval accuracy; exit 1 if missed");
  opt(train, "--train-n", to.train_n, "generated training samples (with --task)");
  opt(train, "--val-n", to.val_n, "generated validation samples (with --task)");
  opt(train, "--config", to.config, "JSON config file (flags override)");

  EvalOpts evo;
  CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint (exact match)");
  add_task_options(evalc, evo.task, /*required_task=*/false);
  opt(evalc, "--ckpt", evo.ckpt, "checkpoint path")->required();
  opt(evalc, "--data", evo.data, "dataset manifest from `gen` (alternative to --task)");
  opt(evalc, "--split", evo.split, "split to evaluate: train | val | test");
  opt(evalc, "--count", evo.count, "generated samples (with --task)");
  opt(evalc, "--seed", evo.seed, "generation seed (with --task)");
  opt(evalc, "--min-acc", evo.min_acc, "exit 1 if accuracy falls below this");
  opt(evalc, "--out", evo.out, "also write the JSON report here");
  opt(evalc, "--config", evo.config, "JSON config file (flags override)");

  BenchOpts bo;
  CLI::App* bench = app.add_subcommand("bench", "wall-clock micro-benchmarks");
  opt(bench, "--mode", bo.mode, "prefill | decode");
  opt(bench, "--rules", bo.rules, "comma list of rules");
  opt(bench, "--paths", bo.paths, "prefill paths: tokenwise and/or chunkwise");
  opt(bench, "--lens", bo.lens, "prefill lengths (comma list; 0 entries are skipped)");
  opt(bench, "--contexts", bo.contexts, "decode context lengths (comma list)");
  opt(bench, "--gen-tokens", bo.gen_tokens, "decode: tokens generated per repetition");
  opt(bench, "--reps", bo.reps, "timed repetitions (>= 5)");
  opt(bench, "--warmup", bo.warmup, "discarded warmup repetitions");
  opt(bench, "--chunk", bo.chunk, "chunkwise block size");
  opt(bench, "--dk", bo.dk, "key dimension");
  opt(bench, "--dv", bo.dv, "value dimension");
  opt(bench, "--precision", bo.precision, "f64 | f32");
  opt(bench, "--seed", bo.seed, "input seed");
  opt(bench, "--out", bo.out, "CSV output path");
  opt(bench, "--config", bo.config, "JSON config file (flags override)");

  try {
    std::vector<std::string> raw(argv + 1, argv + argc);
    std::vector<std::string> args = merge_config_args(raw);
    std::reverse(args.begin(), args.end());  // CLI11 consumes reversed args
    app.parse(args);

    if (app.got_subcommand(verify)) return run_verify(vo);
    if (app.got_subcommand(equiv)) return run_equiv(eo);
    if (app.got_subcommand(gen)) return run_gen(go);
    if (app.got_subcommand(train)) return run_train(to);
    if (app.got_subcommand(evalc)) return run_eval(evo);
    if (app.got_subcommand(bench)) return run_bench(bo);
    std::cerr << "kla: no subcommand given\n";
    return 2;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exits 0
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const kla::config_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const kla::range_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const kla::error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
