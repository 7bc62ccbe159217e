#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kla/alloc_count.hpp"
#include "kla/bench.hpp"

KLA_DEFINE_ALLOC_COUNTER

using kla::BenchConfig;
using kla::BenchResult;
using kla::Rule;
using kla::UpdateRule;

namespace {

UpdateRule rule_of(Rule r) {
  UpdateRule u;
  u.rule = r;
  return u;
}

BenchConfig tiny_bench() {
  BenchConfig cfg;
  cfg.d_k = 8;
  cfg.d_v = 16;
  cfg.chunk = 16;
  cfg.reps = 5;
  cfg.warmup = 1;
  return cfg;
}

void check_invariants(const BenchResult& r, std::size_t tokens) {
  CHECK(r.reps >= 5);
  CHECK(r.min_ms >= 0.0);
  CHECK(r.min_ms <= r.median_ms);
  CHECK(r.median_ms <= r.max_ms);
  CHECK(r.tpot_ms == r.median_ms / static_cast<double>(tokens));
  if (r.median_ms > 0.0)
    CHECK(r.tok_per_s == 1000.0 * static_cast<double>(tokens) / r.median_ms);
}

}  // namespace

TEST_CASE("prefill results satisfy the field invariants") {
  const BenchConfig cfg = tiny_bench();
  for (Rule r : {Rule::linear_attention, Rule::gdn, Rule::kla}) {
    const BenchResult tok = kla::bench_prefill(rule_of(r), "tokenwise", 64, cfg);
    check_invariants(tok, 64);
    CHECK(tok.rule == kla::rule_name(r));
    CHECK(tok.path == "tokenwise");
    CHECK(tok.length == 64);
    CHECK(tok.precision == "f64");
  }
  for (Rule r : {Rule::gdn, Rule::kla}) {
    const BenchResult ch = kla::bench_prefill(rule_of(r), "chunkwise", 64, cfg);
    check_invariants(ch, 64);
    CHECK(ch.path == "chunkwise");
  }
  const BenchResult f32 = kla::bench_prefill<float>(rule_of(Rule::kla), "tokenwise", 64, cfg);
  CHECK(f32.precision == "f32");
}

TEST_CASE("decode results report context length and per-token latency") {
  const BenchConfig cfg = tiny_bench();
  const BenchResult r = kla::bench_decode(rule_of(Rule::kla), 128, 32, cfg);
  check_invariants(r, 32);
  CHECK(r.path == "decode");
  CHECK(r.length == 128);

  SECTION("a single generated token makes tpot equal the wall time") {
    const BenchResult one = kla::bench_decode(rule_of(Rule::gdn), 64, 1, cfg);
    CHECK(one.tpot_ms == one.median_ms);
  }
}

TEST_CASE("longer prefills cost more") {
  BenchConfig cfg = tiny_bench();
  cfg.reps = 7;
  const BenchResult short_run = kla::bench_prefill(rule_of(Rule::kla), "tokenwise", 32, cfg);
  const BenchResult long_run = kla::bench_prefill(rule_of(Rule::kla), "tokenwise", 2048, cfg);
  CHECK(long_run.median_ms > short_run.median_ms);
}

TEST_CASE("steady-state decode loop performs no allocation") {
  const BenchConfig cfg = tiny_bench();
  for (Rule r : {Rule::linear_attention, Rule::retnet_mamba2, Rule::gla, Rule::longhorn,
                 Rule::deltanet, Rule::gdn, Rule::kla}) {
    auto w = kla::detail::make_workspace<double>(rule_of(r), 256, cfg, 0xA110C);
    kla::detail::run_steps(w);  // warm: any lazy setup happens here
    const std::uint64_t before = kla::alloc::count();
    kla::detail::run_steps(w);
    kla::detail::run_steps(w);
    const std::uint64_t after = kla::alloc::count();
    INFO("rule " << kla::rule_name(r));
    CHECK(after == before);
  }

  SECTION("the counter itself is live") {
    const std::uint64_t before = kla::alloc::count();
    auto* sink = new std::vector<double>(1000);
    const std::uint64_t after = kla::alloc::count();
    delete sink;
    CHECK(after > before);
  }
}

TEST_CASE("csv output uses the fixed header and one row per result") {
  const BenchConfig cfg = tiny_bench();
  std::vector<BenchResult> rows;
  rows.push_back(kla::bench_prefill(rule_of(Rule::kla), "tokenwise", 32, cfg));
  rows.push_back(kla::bench_decode(rule_of(Rule::gdn), 32, 8, cfg));
  const std::string path = "test_bench.csv";
  kla::write_bench_csv(path, rows);

  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  std::getline(in, line);
  CHECK(line == "rule,path,length,precision,reps,min_ms,median_ms,max_ms,tok_per_s,tpot_ms");
  std::size_t nrows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++nrows;
    std::size_t fields = 1;
    for (char c : line) fields += (c == ',');
    CHECK(fields == 10);
  }
  CHECK(nrows == rows.size());
}

TEST_CASE("bench input validation") {
  const BenchConfig cfg = tiny_bench();
  CHECK_THROWS_AS(kla::bench_prefill(rule_of(Rule::kla), "tokenwise", 0, cfg),
                  kla::range_error);
  CHECK_THROWS_AS(kla::bench_prefill(rule_of(Rule::kla), "sideways", 16, cfg),
                  kla::config_error);
  CHECK_THROWS_AS(kla::bench_decode(rule_of(Rule::kla), 0, 4, cfg), kla::range_error);
  CHECK_THROWS_AS(kla::bench_decode(rule_of(Rule::kla), 4, 0, cfg), kla::range_error);

  BenchConfig bad = cfg;
  bad.reps = 3;
  CHECK_THROWS_AS(kla::bench_prefill(rule_of(Rule::kla), "tokenwise", 16, bad),
                  kla::range_error);
  bad = cfg;
  bad.chunk = 0;
  CHECK_THROWS_AS(kla::bench_prefill(rule_of(Rule::kla), "chunkwise", 16, bad),
                  kla::range_error);

  // The chunkwise path inherits the kernel's rule restriction.
  CHECK_THROWS(kla::bench_prefill(rule_of(Rule::gla), "chunkwise", 16, cfg));
}
