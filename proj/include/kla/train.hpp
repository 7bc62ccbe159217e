#pragma once

// Toy training loop: AdamW over the tape model, per-sample gradient
// accumulation, periodic exact-match evaluation, early stopping, and a
// deterministic metric trace.
//
// Determinism contract: all sample order, initialization, and arithmetic
// are driven by derived streams of the single seed and run serially, so two
// runs with the same inputs produce bit-identical traces and parameters.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kla/errors.hpp"
#include "kla/model.hpp"
#include "kla/rng.hpp"
#include "kla/tasks.hpp"

namespace kla {

struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t batch = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double clip = 1.0;          // global gradient-norm ceiling
  double adam_eps = 1e-8;
  std::size_t eval_interval = 200;
  std::size_t patience = 10;  // evaluations without improvement before stopping
  double target_acc = -1.0;   // stop once eval accuracy reaches this (off if < 0)
  std::uint64_t seed = 42;

  void validate() const {
    if (batch == 0) throw config_error("train: batch must be positive");
    if (!(lr >= 0.0)) throw range_error("train: lr must be >= 0");
    if (eval_interval == 0) throw config_error("train: eval_interval must be positive");
  }
};

struct TraceRow {
  std::size_t step;
  double loss;      // mean train loss since the previous evaluation
  double eval_acc;
};

struct TrainResult {
  ParamSet params;
  std::vector<TraceRow> trace;
  std::size_t steps_run = 0;
  double best_acc = 0.0;
  std::string stop_reason;  // completed | early_stop | target_reached
};

// Greedy decode over the scored positions of every sample.
inline double evaluate_model(ModelHandles& h, const std::vector<TaskSample>& dataset) {
  std::size_t total = 0, correct = 0;
  for (const TaskSample& s : dataset) {
    if (s.length() != h.seq_len) throw shape_error("evaluate_model: sample length vs tape");
    h.set_sample(s.input_ids, s.target_ids, s.loss_mask);
    h.tape.forward();
    const Matrix& logits = h.tape.value(h.logits);
    for (std::size_t i = 0; i < s.length(); ++i) {
      if (!s.loss_mask[i]) continue;
      const double* row = logits.row(i);
      std::size_t arg = 0;
      for (std::size_t j = 1; j < logits.cols(); ++j)
        if (row[j] > row[arg]) arg = j;
      ++total;
      if (static_cast<std::int64_t>(arg) == s.target_ids[i]) ++correct;
    }
  }
  if (total == 0) throw range_error("evaluate_model: no scored positions");
  return static_cast<double>(correct) / static_cast<double>(total);
}

inline TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg,
                         const std::vector<TaskSample>& train_set,
                         const std::vector<TaskSample>& val_set,
                         const ParamSet* warm_start = nullptr) {
  model_cfg.validate();
  cfg.validate();
  if (train_set.empty()) throw config_error("train: empty training set");
  const std::size_t L = train_set[0].length();
  for (const TaskSample& s : train_set)
    if (s.length() != L) throw config_error("train: nonuniform sample lengths");

  const Rng root(cfg.seed);
  Rng init_rng = root.derive(1);
  Rng order_rng = root.derive(2);

  ModelHandles h = build_model_tape(model_cfg, L);
  TrainResult res;
  if (warm_start) {
    const auto specs = detail::block_specs(model_cfg);
    if (specs.size() != warm_start->blocks.size())
      throw structural_error("train: warm-start block count does not match config");
    for (std::size_t i = 0; i < specs.size(); ++i)
      if (specs[i].name != warm_start->names[i] ||
          specs[i].rows != warm_start->blocks[i].rows() ||
          specs[i].cols != warm_start->blocks[i].cols())
        throw structural_error("train: warm-start block mismatch at " + specs[i].name);
    res.params = *warm_start;
  } else {
    res.params = init_params(model_cfg, init_rng);
  }
  res.stop_reason = "completed";

  const std::size_t nblocks = res.params.blocks.size();
  std::vector<Matrix> grads(nblocks), m1(nblocks), m2(nblocks);
  for (std::size_t b = 0; b < nblocks; ++b) {
    const Matrix& p = res.params.blocks[b];
    grads[b] = Matrix(p.rows(), p.cols());
    m1[b] = Matrix(p.rows(), p.cols());
    m2[b] = Matrix(p.rows(), p.cols());
  }

  std::vector<int> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::size_t cursor = order.size();  // forces an initial shuffle

  double loss_accum = 0.0;
  std::size_t loss_count = 0;
  std::size_t evals_since_best = 0;

  h.set_params(res.params);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (Matrix& g : grads) g.fill(0.0);
    double batch_loss = 0.0;
    for (std::size_t bi = 0; bi < cfg.batch; ++bi) {
      if (cursor >= order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      const TaskSample& s = train_set[static_cast<std::size_t>(order[cursor++])];
      h.set_sample(s.input_ids, s.target_ids, s.loss_mask);
      h.tape.forward();
      h.tape.backward(h.loss);
      batch_loss += h.tape.value_scalar(h.loss);
      for (std::size_t b = 0; b < nblocks; ++b) {
        const Matrix& g = h.tape.gradient(h.param_leaves[b]);
        for (std::size_t i = 0; i < g.rows() * g.cols(); ++i)
          grads[b].data()[i] += g.data()[i];
      }
    }
    batch_loss /= static_cast<double>(cfg.batch);
    if (!std::isfinite(batch_loss)) {
      std::ostringstream dump;
      dump << "train: non-finite loss " << batch_loss << " at step " << step
           << "; param block max-abs:";
      for (std::size_t b = 0; b < nblocks; ++b)
        dump << ' ' << res.params.names[b] << '=' << max_abs(res.params.blocks[b]);
      throw numeric_error(dump.str());
    }
    loss_accum += batch_loss;
    ++loss_count;

    const double inv_batch = 1.0 / static_cast<double>(cfg.batch);
    double norm_sq = 0.0;
    for (Matrix& g : grads)
      for (std::size_t i = 0; i < g.rows() * g.cols(); ++i) {
        g.data()[i] *= inv_batch;
        norm_sq += g.data()[i] * g.data()[i];
      }
    const double gnorm = std::sqrt(norm_sq);
    const double gscale = (cfg.clip > 0.0 && gnorm > cfg.clip) ? cfg.clip / gnorm : 1.0;

    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t b = 0; b < nblocks; ++b) {
      Matrix& p = res.params.blocks[b];
      // Weight decay applies to genuine matrices only (projections,
      // embeddings); biases, gains, and gate vectors are exempt.
      const bool decay = p.rows() > 1 && p.cols() > 1;
      for (std::size_t i = 0; i < p.rows() * p.cols(); ++i) {
        const double g = grads[b].data()[i] * gscale;
        m1[b].data()[i] = cfg.beta1 * m1[b].data()[i] + (1.0 - cfg.beta1) * g;
        m2[b].data()[i] = cfg.beta2 * m2[b].data()[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = m1[b].data()[i] / bc1;
        const double vhat = m2[b].data()[i] / bc2;
        double upd = mhat / (std::sqrt(vhat) + cfg.adam_eps);
        if (decay) upd += cfg.weight_decay * p.data()[i];
        p.data()[i] -= cfg.lr * upd;
      }
    }
    h.set_params(res.params);
    res.steps_run = step;

    if (step % cfg.eval_interval == 0 || step == cfg.steps) {
      const double acc = val_set.empty() ? 0.0 : evaluate_model(h, val_set);
      res.trace.push_back({step, loss_accum / static_cast<double>(loss_count), acc});
      loss_accum = 0.0;
      loss_count = 0;
      if (acc > res.best_acc) {
        res.best_acc = acc;
        evals_since_best = 0;
      } else {
        ++evals_since_best;
      }
      if (cfg.target_acc >= 0.0 && acc >= cfg.target_acc) {
        res.stop_reason = "target_reached";
        break;
      }
      if (evals_since_best >= cfg.patience) {
        res.stop_reason = "early_stop";
        break;
      }
      if (step == cfg.steps) break;  // avoid duplicate final row
    }
  }
  return res;
}

inline void write_metrics_csv(const std::string& path, const std::vector<TraceRow>& trace) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot open metrics file for writing: " + path);
  out << "step,loss,eval_acc\n";
  out.precision(17);
  for (const TraceRow& r : trace) out << r.step << ',' << r.loss << ',' << r.eval_acc << '\n';
  if (!out) throw config_error("metrics write failed: " + path);
}

}  // namespace kla
