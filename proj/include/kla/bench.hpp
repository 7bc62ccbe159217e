#pragma once

// Wall-clock micro-benchmarks for the sequence kernels.
//
// Protocol: inputs are pregenerated outside the timed region, a fixed number
// of warmup repetitions run and are discarded, then every timed repetition
// measures the same work on the steady clock. Reported statistics are the
// min/median/max over repetitions; throughput and time-per-output-token are
// derived from the median.
//
// The decode path is the latency-critical one, so its timed region is a
// plain loop of in-place single-token steps over preallocated buffers — it
// performs no heap allocation in steady state (asserted by tests via the
// allocation counter). The prefill paths may allocate internally.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "kla/chunk.hpp"
#include "kla/errors.hpp"
#include "kla/recurrence.hpp"
#include "kla/rng.hpp"
#include "kla/tensor.hpp"

namespace kla {

struct BenchConfig {
  std::size_t d_k = 16;
  std::size_t d_v = 32;
  std::size_t chunk = 64;   // block size for the chunkwise path
  std::size_t reps = 5;     // timed repetitions (median over these)
  std::size_t warmup = 2;   // discarded repetitions before timing
  std::uint64_t seed = 42;

  void validate() const {
    if (d_k == 0 || d_v == 0) throw config_error("bench: dims must be positive");
    if (reps < 5) throw range_error("bench: need at least 5 repetitions");
  }
};

struct BenchResult {
  std::string rule;
  std::string path;       // tokenwise | chunkwise | decode
  std::size_t length;     // prefill length, or context length for decode
  std::string precision;  // f64 | f32
  std::size_t reps;
  double min_ms = 0.0;
  double median_ms = 0.0;
  double max_ms = 0.0;
  double tok_per_s = 0.0;
  double tpot_ms = 0.0;
};

namespace detail {

template <typename T>
const char* precision_name() {
  return sizeof(T) == sizeof(double) ? "f64" : "f32";
}

// Pregenerated per-token inputs in row-major blocks, plus scratch buffers:
// everything a steady-state decode loop touches.
template <typename T>
struct StepWorkspace {
  UpdateRule rule;
  T eps = T(1e-6);
  Mat<T> state;
  Mat<T> keys, vals, queries;  // n x d_k / n x d_v / n x d_k
  Vec<T> alphas, etas;
  Vec<T> e_buf, o_buf;
  std::size_t t0 = 1;  // 1-based global position of the first step
};

template <typename T>
StepWorkspace<T> make_workspace(const UpdateRule& rule, std::size_t n, const BenchConfig& cfg,
                                std::uint64_t salt) {
  StepWorkspace<T> w;
  w.rule = rule;
  w.eps = T(1e-6);
  w.state = Mat<T>(cfg.d_k, cfg.d_v);
  w.keys = Mat<T>(n, cfg.d_k);
  w.vals = Mat<T>(n, cfg.d_v);
  w.queries = Mat<T>(n, cfg.d_k);
  w.alphas = Vec<T>(n);
  w.etas = Vec<T>(n);
  w.e_buf = Vec<T>(cfg.d_v);
  w.o_buf = Vec<T>(cfg.d_v);
  Rng rng = Rng(cfg.seed).derive(salt);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < cfg.d_k; ++j) w.keys(i, j) = T(rng.normal());
    for (std::size_t j = 0; j < cfg.d_v; ++j) w.vals(i, j) = T(rng.normal());
    for (std::size_t j = 0; j < cfg.d_k; ++j) w.queries(i, j) = T(rng.normal());
    w.alphas[i] = T(rng.uniform(0.9, 1.0));
    w.etas[i] = T(rng.uniform(0.5, 1.0));
  }
  return w;
}

// The timed region for tokenwise prefill and for decode: no allocation.
template <typename T>
void run_steps(StepWorkspace<T>& w) {
  const std::size_t n = w.keys.rows();
  for (std::size_t i = 0; i < n; ++i)
    step_inplace(w.rule, w.state, w.keys.row(i), w.vals.row(i), w.queries.row(i),
                 w.alphas[i], w.etas[i], w.eps, w.t0 + i, w.e_buf.data(), w.o_buf.data());
}

template <typename T>
std::vector<TokenInput<T>> workspace_tokens(const StepWorkspace<T>& w) {
  const std::size_t n = w.keys.rows();
  std::vector<TokenInput<T>> tokens(n);
  for (std::size_t i = 0; i < n; ++i) {
    tokens[i].k = Vec<T>(w.keys.cols());
    tokens[i].v = Vec<T>(w.vals.cols());
    tokens[i].q = Vec<T>(w.queries.cols());
    for (std::size_t j = 0; j < w.keys.cols(); ++j) tokens[i].k[j] = w.keys(i, j);
    for (std::size_t j = 0; j < w.vals.cols(); ++j) tokens[i].v[j] = w.vals(i, j);
    for (std::size_t j = 0; j < w.queries.cols(); ++j) tokens[i].q[j] = w.queries(i, j);
    tokens[i].alpha = w.alphas[i];
    tokens[i].eta = w.etas[i];
  }
  return tokens;
}

template <typename Fn>
BenchResult time_reps(Fn&& fn, std::size_t reps, std::size_t warmup, std::size_t tokens) {
  using clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> ms(reps);
  for (std::size_t i = 0; i < reps; ++i) {
    const auto start = clock::now();
    fn();
    ms[i] = std::chrono::duration<double, std::milli>(clock::now() - start).count();
  }
  std::sort(ms.begin(), ms.end());
  BenchResult r;
  r.reps = reps;
  r.min_ms = ms.front();
  r.max_ms = ms.back();
  r.median_ms = (reps % 2) ? ms[reps / 2] : 0.5 * (ms[reps / 2 - 1] + ms[reps / 2]);
  r.tpot_ms = r.median_ms / static_cast<double>(tokens);
  r.tok_per_s = (r.median_ms > 0.0)
                    ? 1000.0 * static_cast<double>(tokens) / r.median_ms
                    : 0.0;
  return r;
}

}  // namespace detail

// One full-sequence state build over `length` tokens per repetition.
template <typename T = double>
BenchResult bench_prefill(const UpdateRule& rule, const std::string& path,
                          std::size_t length, const BenchConfig& cfg) {
  cfg.validate();
  rule.validate();
  if (length == 0) throw range_error("bench: length must be positive");

  BenchResult r;
  if (path == "tokenwise") {
    auto w = detail::make_workspace<T>(rule, length, cfg, 0x70B5);
    r = detail::time_reps([&] { w.state.fill(T(0)); detail::run_steps(w); },
                          cfg.reps, cfg.warmup, length);
  } else if (path == "chunkwise") {
    if (cfg.chunk == 0) throw range_error("bench: chunk must be positive");
    auto w = detail::make_workspace<T>(rule, length, cfg, 0xC4AB);
    const auto tokens = detail::workspace_tokens(w);
    const StateMatrix<T> s0(cfg.d_k, cfg.d_v);
    r = detail::time_reps([&] { run_chunked(rule, s0, tokens, cfg.chunk, w.eps); },
                          cfg.reps, cfg.warmup, length);
  } else {
    throw config_error("bench: unknown prefill path: " + path);
  }
  r.rule = rule_name(rule.rule);
  r.path = path;
  r.length = length;
  r.precision = detail::precision_name<T>();
  return r;
}

// Builds a state over `context` tokens once (untimed), then times
// `gen_tokens` single-token steps per repetition.
template <typename T = double>
BenchResult bench_decode(const UpdateRule& rule, std::size_t context,
                         std::size_t gen_tokens, const BenchConfig& cfg) {
  cfg.validate();
  rule.validate();
  if (context == 0) throw range_error("bench: context must be positive");
  if (gen_tokens == 0) throw range_error("bench: gen_tokens must be positive");

  auto prefill = detail::make_workspace<T>(rule, context, cfg, 0xDEC0);
  detail::run_steps(prefill);

  auto w = detail::make_workspace<T>(rule, gen_tokens, cfg, 0xDEC1);
  w.state = prefill.state;  // continue from the prefilled state
  w.t0 = context + 1;

  BenchResult r = detail::time_reps([&] { detail::run_steps(w); }, cfg.reps,
                                    cfg.warmup, gen_tokens);
  r.rule = rule_name(rule.rule);
  r.path = "decode";
  r.length = context;
  r.precision = detail::precision_name<T>();
  return r;
}

inline constexpr const char* kBenchCsvHeader =
    "rule,path,length,precision,reps,min_ms,median_ms,max_ms,tok_per_s,tpot_ms";

inline void write_bench_csv(const std::string& path, const std::vector<BenchResult>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot open bench csv for writing: " + path);
  out << kBenchCsvHeader << '\n';
  out.precision(10);
  for (const BenchResult& r : rows)
    out << r.rule << ',' << r.path << ',' << r.length << ',' << r.precision << ','
        << r.reps << ',' << r.min_ms << ',' << r.median_ms << ',' << r.max_ms << ','
        << r.tok_per_s << ',' << r.tpot_ms << '\n';
  if (!out) throw config_error("bench csv write failed: " + path);
}

}  // namespace kla
