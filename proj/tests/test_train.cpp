#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "kla/tasks.hpp"
#include "kla/train.hpp"

using kla::ModelConfig;
using kla::ParamSet;
using kla::Rule;
using kla::TaskConfig;
using kla::TaskKind;
using kla::TrainConfig;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.vocab = 12;
  m.d_model = 8;
  m.d_k = 4;
  m.v_expand = 2;
  m.n_layers = 1;
  m.rule.rule = Rule::kla;
  return m;
}

TaskConfig tiny_task() {
  TaskConfig t;
  t.kind = TaskKind::mqar;
  t.vocab = 12;
  t.length = 8;
  t.num_pairs = 2;
  t.num_queries = 2;
  return t;
}

bool params_bitwise_equal(const ParamSet& a, const ParamSet& b) {
  if (a.blocks.size() != b.blocks.size()) return false;
  for (std::size_t i = 0; i < a.blocks.size(); ++i) {
    if (a.names[i] != b.names[i]) return false;
    const auto bytes = a.blocks[i].rows() * a.blocks[i].cols() * sizeof(double);
    if (b.blocks[i].rows() != a.blocks[i].rows() ||
        b.blocks[i].cols() != a.blocks[i].cols())
      return false;
    if (std::memcmp(a.blocks[i].data(), b.blocks[i].data(), bytes) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("zero steps returns the untouched initialization") {
  const auto data = kla::gen_task(tiny_task(), 5, 8);
  TrainConfig tc;
  tc.steps = 0;
  tc.batch = 2;
  tc.seed = 99;
  const auto res = kla::train(tiny_model(), tc, data, data);
  CHECK(res.steps_run == 0);
  CHECK(res.trace.empty());
  CHECK(res.stop_reason == "completed");

  kla::Rng expect_rng = kla::Rng(99).derive(1);
  const ParamSet expect = kla::init_params(tiny_model(), expect_rng);
  CHECK(params_bitwise_equal(res.params, expect));
}

TEST_CASE("zero learning rate leaves parameters untouched and loss flat") {
  const auto data = kla::gen_task(tiny_task(), 6, 1);  // single fixed sample
  TrainConfig tc;
  tc.steps = 5;
  tc.batch = 1;
  tc.lr = 0.0;
  tc.eval_interval = 1;
  tc.seed = 7;
  tc.patience = 100;  // flat accuracy must not trip the stopper here
  const auto res = kla::train(tiny_model(), tc, data, data);
  CHECK(res.steps_run == 5);
  CHECK(res.stop_reason == "completed");

  kla::Rng expect_rng = kla::Rng(7).derive(1);
  const ParamSet expect = kla::init_params(tiny_model(), expect_rng);
  CHECK(params_bitwise_equal(res.params, expect));
  REQUIRE(res.trace.size() >= 2);
  for (const auto& row : res.trace) CHECK(row.loss == res.trace[0].loss);
}

TEST_CASE("stagnant evaluations trigger early stopping") {
  const auto data = kla::gen_task(tiny_task(), 6, 1);
  TrainConfig tc;
  tc.steps = 100;
  tc.batch = 1;
  tc.lr = 0.0;  // accuracy frozen, so patience must fire
  tc.eval_interval = 1;
  tc.patience = 2;
  tc.seed = 7;
  const auto res = kla::train(tiny_model(), tc, data, data);
  CHECK(res.stop_reason == "early_stop");
  CHECK(res.steps_run <= 3);
}

TEST_CASE("training is deterministic") {
  const auto train_set = kla::gen_task(tiny_task(), 8, 16);
  const auto val_set = kla::gen_task(tiny_task(), 9, 8);
  TrainConfig tc;
  tc.steps = 12;
  tc.batch = 4;
  tc.lr = 3e-3;
  tc.eval_interval = 4;
  tc.patience = 100;
  tc.seed = 21;
  const auto a = kla::train(tiny_model(), tc, train_set, val_set);
  const auto b = kla::train(tiny_model(), tc, train_set, val_set);
  REQUIRE(a.trace.size() == b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    CHECK(a.trace[i].step == b.trace[i].step);
    CHECK(a.trace[i].loss == b.trace[i].loss);
    CHECK(a.trace[i].eval_acc == b.trace[i].eval_acc);
  }
  CHECK(params_bitwise_equal(a.params, b.params));
  CHECK(a.steps_run == 12);
}

TEST_CASE("optimization reduces the training loss") {
  const auto train_set = kla::gen_task(tiny_task(), 10, 32);
  TrainConfig tc;
  tc.steps = 60;
  tc.batch = 8;
  tc.lr = 1e-2;
  tc.eval_interval = 10;
  tc.patience = 1000;
  tc.seed = 33;
  const auto res = kla::train(tiny_model(), tc, train_set, train_set);
  REQUIRE(res.trace.size() >= 2);
  CHECK(res.trace.back().loss < res.trace.front().loss);
  CHECK(res.stop_reason == "completed");
}

TEST_CASE("target accuracy of zero stops at the first evaluation") {
  const auto data = kla::gen_task(tiny_task(), 11, 8);
  TrainConfig tc;
  tc.steps = 50;
  tc.batch = 2;
  tc.eval_interval = 5;
  tc.target_acc = 0.0;
  tc.seed = 13;
  const auto res = kla::train(tiny_model(), tc, data, data);
  CHECK(res.stop_reason == "target_reached");
  CHECK(res.steps_run == 5);
  REQUIRE(res.trace.size() == 1);
  CHECK(res.trace[0].step == 5);
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  const auto data = kla::gen_task(tiny_task(), 12, 4);
  kla::Rng rng(3);
  ParamSet poisoned = kla::init_params(tiny_model(), rng);
  poisoned.block("embed").fill(std::numeric_limits<double>::quiet_NaN());
  TrainConfig tc;
  tc.steps = 3;
  tc.batch = 2;
  tc.seed = 4;
  CHECK_THROWS_AS(kla::train(tiny_model(), tc, data, data, &poisoned),
                  kla::numeric_error);
  try {
    kla::train(tiny_model(), tc, data, data, &poisoned);
  } catch (const kla::numeric_error& e) {
    CHECK(std::string(e.what()).find("embed") != std::string::npos);
  }
}

TEST_CASE("warm start validates the block layout") {
  const auto data = kla::gen_task(tiny_task(), 14, 4);
  ModelConfig other = tiny_model();
  other.d_k = 8;  // different projection shapes
  kla::Rng rng(5);
  ParamSet wrong = kla::init_params(other, rng);
  TrainConfig tc;
  tc.steps = 1;
  tc.batch = 1;
  CHECK_THROWS_AS(kla::train(tiny_model(), tc, data, data, &wrong),
                  kla::structural_error);

  ModelConfig no_eta = tiny_model();
  no_eta.rule.normalization = kla::Normalization::key_norm_only;  // fewer blocks
  kla::Rng rng2(6);
  ParamSet fewer = kla::init_params(no_eta, rng2);
  CHECK_THROWS_AS(kla::train(tiny_model(), tc, data, data, &fewer),
                  kla::structural_error);

  // A matching warm start is accepted and actually used.
  kla::Rng rng3(7);
  ParamSet warm = kla::init_params(tiny_model(), rng3);
  TrainConfig frozen = tc;
  frozen.lr = 0.0;
  const auto res = kla::train(tiny_model(), frozen, data, data, &warm);
  CHECK(params_bitwise_equal(res.params, warm));
}

TEST_CASE("input validation") {
  const auto data = kla::gen_task(tiny_task(), 15, 4);
  TrainConfig tc;
  CHECK_THROWS_AS(kla::train(tiny_model(), tc, {}, data), kla::config_error);

  auto ragged = data;
  ragged.push_back(ragged[0]);
  ragged.back().input_ids.push_back(kla::kPad);
  ragged.back().target_ids.push_back(kla::kPad);
  ragged.back().loss_mask.push_back(0);
  CHECK_THROWS_AS(kla::train(tiny_model(), tc, ragged, data), kla::config_error);

  TrainConfig bad = tc;
  bad.batch = 0;
  CHECK_THROWS_AS(kla::train(tiny_model(), bad, data, data), kla::config_error);
  bad = tc;
  bad.eval_interval = 0;
  CHECK_THROWS_AS(kla::train(tiny_model(), bad, data, data), kla::config_error);
}

TEST_CASE("greedy tape evaluation agrees with the generic evaluator") {
  const auto data = kla::gen_task(tiny_task(), 16, 24);
  const ModelConfig mc = tiny_model();
  kla::Rng rng(17);
  const ParamSet p = kla::init_params(mc, rng);
  auto h = kla::build_model_tape(mc, data[0].length());
  h.set_params(p);
  const double direct = kla::evaluate_model(h, data);

  auto h2 = kla::build_model_tape(mc, data[0].length());
  h2.set_params(p);
  auto predictor = [&](const kla::TaskSample& s) {
    h2.set_sample(s.input_ids, s.target_ids, s.loss_mask);
    h2.tape.forward();
    const kla::Matrix& logits = h2.tape.value(h2.logits);
    std::vector<std::int64_t> preds(s.length());
    for (std::size_t i = 0; i < s.length(); ++i) {
      const double* row = logits.row(i);
      std::size_t arg = 0;
      for (std::size_t j = 1; j < logits.cols(); ++j)
        if (row[j] > row[arg]) arg = j;
      preds[i] = static_cast<std::int64_t>(arg);
    }
    return preds;
  };
  CHECK(kla::evaluate(predictor, data) == direct);

  auto h3 = kla::build_model_tape(mc, data[0].length());
  h3.set_params(p);
  CHECK_THROWS_AS(kla::evaluate_model(h3, {}), kla::range_error);
}

TEST_CASE("metrics csv format") {
  std::vector<kla::TraceRow> trace = {{10, 2.5, 0.125}, {20, 1.25, 0.5}};
  const std::string path = "test_train_metrics.csv";
  kla::write_metrics_csv(path, trace);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  std::getline(in, line);
  CHECK(line == "step,loss,eval_acc");
  std::getline(in, line);
  CHECK(line == "10,2.5,0.125");
  std::getline(in, line);
  CHECK(line == "20,1.25,0.5");
  CHECK(!std::getline(in, line));
}
