#pragma once

// Per-token state recurrences behind one rule selector.
//
// Every rule maintains a fixed-size associative state S in R^{d_k x d_v},
// read out as o = S^T q / ||q||. The update is forget-then-write:
//
//   S~ = alpha * S                      (decay; some rules skip it)
//   e  = v - S~^T k                     (residual; delta rules only)
//   S' = S~ + beta * k * (e or v)^T     (rank-one write)
//
//   linear_attention  S' = S + k v^T
//   retnet_mamba2     S' = alpha S + eta k v^T
//   gla               S' = Diag(a) S + k v^T         (per-row decay vector a)
//   longhorn          S' = S + rho k e^T,  rho = b/(1 + b ||k||^2), b = eta
//                     (equivalently (I - rho k k^T) S + rho k v^T; no decay)
//   deltanet          S' = S + eta k e^T              (no decay)
//   gdn               S' = S~ + eta k e^T
//   kla               S' = S~ + beta k e^T,  beta = eta / (||k||^2 + eps)
//
// The kla coefficient is the relaxed Kaczmarz step: with eta = 1, eps = 0 the
// write is the exact orthogonal projection of S~ onto {S : S^T k = v}, and for
// eta in (0,1] the residual contracts by 1 - eta ||k||^2 / (||k||^2 + eps).
//
// Longhorn's rho is a reconstruction: its source gives the update form but not
// the coefficient formula; we use the closed-form implicit-SGD step.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "kla/errors.hpp"
#include "kla/tensor.hpp"

namespace kla {

enum class Rule { linear_attention, retnet_mamba2, gla, longhorn, deltanet, gdn, kla };

// Ablation variants of the write coefficient. `kaczmarz` means each rule's
// canonical coefficient (only kla actually divides by the key norm); the
// others replace the kla coefficient in ablation studies.
enum class Normalization { kaczmarz, none, key_norm_only, learned_scalar };

// dual: separate alpha/eta gates. single_gate: one gate drives both (applied
// where gates are produced, in the model's projection block).
enum class Gating { dual, single_gate };

// Optional deterministic schedule multiplying the write coefficient at
// 1-based position t.
enum class SeqFactor { none, inv_t, inv_sqrt_t, inv_log_t };

inline bool is_delta_rule(Rule r) {
  return r == Rule::longhorn || r == Rule::deltanet || r == Rule::gdn || r == Rule::kla;
}

inline const char* rule_name(Rule r) {
  switch (r) {
    case Rule::linear_attention: return "la";
    case Rule::retnet_mamba2: return "retnet";
    case Rule::gla: return "gla";
    case Rule::longhorn: return "longhorn";
    case Rule::deltanet: return "deltanet";
    case Rule::gdn: return "gdn";
    case Rule::kla: return "kla";
  }
  return "?";
}

inline Rule rule_from_name(const std::string& s) {
  if (s == "la" || s == "linear_attention") return Rule::linear_attention;
  if (s == "retnet" || s == "mamba2" || s == "retnet_mamba2") return Rule::retnet_mamba2;
  if (s == "gla") return Rule::gla;
  if (s == "longhorn") return Rule::longhorn;
  if (s == "deltanet") return Rule::deltanet;
  if (s == "gdn") return Rule::gdn;
  if (s == "kla") return Rule::kla;
  throw config_error("unknown rule: " + s);
}

struct UpdateRule {
  Rule rule = Rule::kla;
  Normalization normalization = Normalization::kaczmarz;
  Gating gating = Gating::dual;
  SeqFactor seq_factor = SeqFactor::none;
  double learned_scalar = 1.0;  // ablation coefficient, trainable, init 1.0

  void validate() const {
    if (normalization != Normalization::kaczmarz && !is_delta_rule(rule))
      throw config_error(std::string("normalization variants require a delta rule, got ") +
                         rule_name(rule));
    if (seq_factor != SeqFactor::none && !is_delta_rule(rule))
      throw config_error(std::string("sequence factors require a delta rule, got ") +
                         rule_name(rule));
    if (!std::isfinite(learned_scalar))
      throw numeric_error("learned_scalar must be finite");
  }
};

template <typename T>
struct StateMatrix {
  Mat<T> s;  // d_k x d_v

  StateMatrix() = default;
  explicit StateMatrix(Mat<T> m) : s(std::move(m)) {}
  StateMatrix(std::size_t d_k, std::size_t d_v) : s(d_k, d_v) {}

  std::size_t d_k() const { return s.rows(); }
  std::size_t d_v() const { return s.cols(); }
};

template <typename T>
struct TokenInput {
  Vec<T> k;  // d_k
  Vec<T> v;  // d_v
  Vec<T> q;  // d_k
  T alpha = T(1);  // decay gate, in [0,1]
  T eta = T(1);    // relaxation gate, in (0,1]
  // gla only: per-dimension decay vector (d_k). Absent -> alpha broadcast.
  std::optional<Vec<T>> alpha_vec;

  void validate(std::size_t d_k, std::size_t d_v) const {
    if (k.size() != d_k || v.size() != d_v || q.size() != d_k)
      throw shape_error("TokenInput: k/v/q sizes " + std::to_string(k.size()) + "/" +
                        std::to_string(v.size()) + "/" + std::to_string(q.size()) +
                        " vs state " + std::to_string(d_k) + "x" + std::to_string(d_v));
    if (!(alpha >= T(0) && alpha <= T(1)))
      throw range_error("TokenInput: alpha outside [0,1]");
    if (!(eta > T(0) && eta <= T(1)))
      throw range_error("TokenInput: eta outside (0,1]");
    if (!k.all_finite() || !v.all_finite() || !q.all_finite())
      throw numeric_error("TokenInput: non-finite entry");
    if (alpha_vec) {
      if (alpha_vec->size() != d_k) throw shape_error("TokenInput: alpha_vec size mismatch");
      for (std::size_t i = 0; i < alpha_vec->size(); ++i)
        if (!((*alpha_vec)[i] >= T(0) && (*alpha_vec)[i] <= T(1)))
          throw range_error("TokenInput: alpha_vec entry outside [0,1]");
    }
  }
};

template <typename T>
struct StepOutput {
  Vec<T> o;                  // d_v readout
  StateMatrix<T> new_state;  // d_k x d_v
  T beta = T(0);             // write coefficient actually used
  Vec<T> residual_before;    // e  = v - S~^T k (delta rules; zeros otherwise)
  Vec<T> residual_after;     // e+ = v - S'^T k (delta rules; zeros otherwise)
};

template <typename T>
struct SequenceResult {
  Mat<T> outputs;  // L x d_v
  StateMatrix<T> final_state;
  std::vector<StepOutput<T>> trace;  // empty unless recording was requested
};

// S~ = alpha * S.
template <typename T>
StateMatrix<T> decay_state(const StateMatrix<T>& s, T alpha) {
  if (!(alpha >= T(0) && alpha <= T(1))) throw range_error("decay_state: alpha outside [0,1]");
  return StateMatrix<T>(scale(s.s, alpha));
}

// S~ = Diag(a) * S: row i scaled by a[i].
template <typename T>
StateMatrix<T> decay_state_diag(const StateMatrix<T>& s, const Vec<T>& a) {
  if (a.size() != s.d_k()) throw shape_error("decay_state_diag: vector size mismatch");
  Mat<T> out(s.d_k(), s.d_v());
  for (std::size_t i = 0; i < s.d_k(); ++i) {
    if (!(a[i] >= T(0) && a[i] <= T(1)))
      throw range_error("decay_state_diag: entry outside [0,1]");
    const T* src = s.s.row(i);
    T* dst = out.row(i);
    for (std::size_t j = 0; j < s.d_v(); ++j) dst[j] = a[i] * src[j];
  }
  return StateMatrix<T>(std::move(out));
}

// e = v - S~^T k.
template <typename T>
Vec<T> residual(const StateMatrix<T>& s_tilde, const Vec<T>& k, const Vec<T>& v) {
  if (k.size() != s_tilde.d_k() || v.size() != s_tilde.d_v())
    throw shape_error("residual: k " + std::to_string(k.size()) + ", v " +
                      std::to_string(v.size()) + " vs state " + s_tilde.s.shape_str());
  Vec<T> e = matvec_t(s_tilde.s, k);
  for (std::size_t j = 0; j < e.size(); ++j) e[j] = v[j] - e[j];
  return e;
}

// beta = eta / (||k||^2 + eps): the relaxed Kaczmarz step size.
template <typename T>
T kla_coefficient(T eta, const Vec<T>& k, T eps) {
  if (!(eta > T(0) && eta <= T(1))) throw range_error("kla_coefficient: eta outside (0,1]");
  if (!(eps >= T(0))) throw range_error("kla_coefficient: eps must be >= 0");
  const T den = l2_norm_sq(k) + eps;
  if (den == T(0)) throw singular_error("kla_coefficient: zero key with eps = 0");
  return eta / den;
}

namespace detail {

template <typename T>
T seq_factor_value(SeqFactor f, std::size_t t) {
  if (f == SeqFactor::none) return T(1);
  if (t < 1) throw range_error("sequence factor needs a 1-based position");
  const T td = static_cast<T>(t);
  switch (f) {
    case SeqFactor::inv_t: return T(1) / td;
    case SeqFactor::inv_sqrt_t: return T(1) / std::sqrt(td);
    case SeqFactor::inv_log_t: return T(1) / std::log(td + T(1));
    default: return T(1);
  }
}

// o = S^T q / ||q||, zero when q = 0. Written against raw buffers so the
// checked and unchecked paths share one arithmetic sequence.
template <typename T>
void readout_into(const Mat<T>& s, const T* q, T* o) {
  T nq = T(0);
  for (std::size_t i = 0; i < s.rows(); ++i) nq += q[i] * q[i];
  if (nq == T(0)) {
    for (std::size_t j = 0; j < s.cols(); ++j) o[j] = T(0);
    return;
  }
  const T inv = T(1) / std::sqrt(nq);
  for (std::size_t j = 0; j < s.cols(); ++j) {
    T acc = T(0);
    for (std::size_t i = 0; i < s.rows(); ++i) acc += s(i, j) * q[i];
    o[j] = acc * inv;
  }
}

template <typename T>
void residual_into(const Mat<T>& s, const T* k, const T* v, T* e) {
  for (std::size_t j = 0; j < s.cols(); ++j) {
    T acc = T(0);
    for (std::size_t i = 0; i < s.rows(); ++i) acc += s(i, j) * k[i];
    e[j] = v[j] - acc;
  }
}

}  // namespace detail

// Final write coefficient for a delta rule, including ablation variants.
// knorm_sq = ||k||^2 is passed in because callers already have it.
template <typename T>
T write_coefficient(const UpdateRule& rule, T eta, T knorm_sq, T eps, std::size_t t = 1) {
  T base;
  switch (rule.normalization) {
    case Normalization::kaczmarz:
      base = (rule.rule == Rule::kla) ? eta / (knorm_sq + eps) : eta;
      break;
    case Normalization::none:
      base = eta;
      break;
    case Normalization::key_norm_only:
      base = T(1) / (knorm_sq + eps);
      break;
    case Normalization::learned_scalar:
      base = static_cast<T>(rule.learned_scalar);
      break;
    default:
      base = eta;
  }
  if (rule.rule == Rule::longhorn) base = base / (T(1) + base * knorm_sq);
  return base * detail::seq_factor_value<T>(rule.seq_factor, t);
}

// o = S^T q / ||q|| (zero vector when q = 0).
template <typename T>
Vec<T> readout(const StateMatrix<T>& s, const Vec<T>& q) {
  if (q.size() != s.d_k()) throw shape_error("readout: q size vs state rows");
  Vec<T> o(s.d_v());
  detail::readout_into(s.s, q.data(), o.data());
  return o;
}

// One recurrence step on a caller-owned state, allocation free. e_buf and
// o_buf must hold d_v entries each. Inputs are NOT validated here; this is
// the unchecked hot path shared by step() and the decode benchmark. Returns
// the write coefficient used.
template <typename T>
T step_inplace(const UpdateRule& rule, Mat<T>& s, const T* k, const T* v, const T* q,
               T alpha, T eta, T eps, std::size_t t, T* e_buf, T* o_buf,
               const T* alpha_vec = nullptr) {
  const std::size_t dk = s.rows(), dv = s.cols();
  T beta = T(1);
  switch (rule.rule) {
    case Rule::linear_attention: {
      for (std::size_t i = 0; i < dk; ++i) {
        T* si = s.row(i);
        for (std::size_t j = 0; j < dv; ++j) si[j] += k[i] * v[j];
      }
      beta = T(1);
      break;
    }
    case Rule::retnet_mamba2: {
      for (std::size_t i = 0; i < dk; ++i) {
        T* si = s.row(i);
        for (std::size_t j = 0; j < dv; ++j) si[j] = alpha * si[j] + eta * k[i] * v[j];
      }
      beta = eta;
      break;
    }
    case Rule::gla: {
      for (std::size_t i = 0; i < dk; ++i) {
        const T ai = alpha_vec ? alpha_vec[i] : alpha;
        T* si = s.row(i);
        for (std::size_t j = 0; j < dv; ++j) si[j] = ai * si[j] + k[i] * v[j];
      }
      beta = T(1);
      break;
    }
    case Rule::longhorn:
    case Rule::deltanet:
    case Rule::gdn:
    case Rule::kla: {
      const bool decays = (rule.rule == Rule::gdn || rule.rule == Rule::kla);
      if (decays && alpha != T(1)) {
        for (std::size_t i = 0; i < s.size(); ++i) s.data()[i] *= alpha;
      }
      T knorm_sq = T(0);
      for (std::size_t i = 0; i < dk; ++i) knorm_sq += k[i] * k[i];
      detail::residual_into(s, k, v, e_buf);
      beta = write_coefficient(rule, eta, knorm_sq, eps, t);
      for (std::size_t i = 0; i < dk; ++i) {
        const T bk = beta * k[i];
        T* si = s.row(i);
        for (std::size_t j = 0; j < dv; ++j) si[j] += bk * e_buf[j];
      }
      break;
    }
  }
  detail::readout_into(s, q, o_buf);
  return beta;
}

// One validated recurrence step. t is the 1-based sequence position, only
// consulted by the sequence-factor ablations.
template <typename T>
StepOutput<T> step(const UpdateRule& rule, const StateMatrix<T>& s, const TokenInput<T>& x,
                   T eps, std::size_t t = 1) {
  rule.validate();
  x.validate(s.d_k(), s.d_v());
  if (!(eps >= T(0))) throw range_error("step: eps must be >= 0");
  if (rule.rule == Rule::kla && eps == T(0) && l2_norm_sq(x.k) == T(0))
    throw singular_error("step: zero key with eps = 0 under the kla rule");

  StepOutput<T> out;
  const std::size_t dv = s.d_v();
  out.o = Vec<T>(dv);
  out.residual_before = Vec<T>(dv);
  out.residual_after = Vec<T>(dv);

  Mat<T> next = s.s;  // copy, then update in place
  const T* avec = (rule.rule == Rule::gla && x.alpha_vec) ? x.alpha_vec->data() : nullptr;
  out.beta = step_inplace(rule, next, x.k.data(), x.v.data(), x.q.data(), x.alpha, x.eta,
                          eps, t, out.residual_before.data(), out.o.data(), avec);
  if (is_delta_rule(rule.rule)) {
    detail::residual_into(next, x.k.data(), x.v.data(), out.residual_after.data());
  } else {
    // residual_before was used as scratch by step_inplace only for delta
    // rules; make both zero vectors here per the contract.
    for (std::size_t j = 0; j < dv; ++j) out.residual_before[j] = T(0);
  }
  out.new_state = StateMatrix<T>(std::move(next));
  return out;
}

// Sequential left fold of step() over a token list. Positions are 1-based.
// With record_trace the per-step outputs (including state snapshots) are
// kept; benchmarks run with it off.
template <typename T>
SequenceResult<T> run_sequence(const UpdateRule& rule, const StateMatrix<T>& s0,
                               const std::vector<TokenInput<T>>& tokens, T eps,
                               bool record_trace = false) {
  rule.validate();
  SequenceResult<T> res;
  const std::size_t L = tokens.size();
  res.outputs = Mat<T>(L, s0.d_v());
  if (L == 0) {
    res.final_state = s0;
    return res;
  }
  if (record_trace) {
    StateMatrix<T> state = s0;
    res.trace.reserve(L);
    for (std::size_t t = 0; t < L; ++t) {
      StepOutput<T> so = step(rule, state, tokens[t], eps, t + 1);
      state = so.new_state;
      for (std::size_t j = 0; j < s0.d_v(); ++j) res.outputs(t, j) = so.o[j];
      res.trace.push_back(std::move(so));
    }
    res.final_state = std::move(state);
  } else {
    Mat<T> s = s0.s;
    Vec<T> e_buf(s0.d_v());
    for (std::size_t t = 0; t < L; ++t) {
      const TokenInput<T>& x = tokens[t];
      x.validate(s0.d_k(), s0.d_v());
      const T* avec = (rule.rule == Rule::gla && x.alpha_vec) ? x.alpha_vec->data() : nullptr;
      step_inplace(rule, s, x.k.data(), x.v.data(), x.q.data(), x.alpha, x.eta, eps, t + 1,
                   e_buf.data(), res.outputs.row(t), avec);
    }
    res.final_state = StateMatrix<T>(std::move(s));
  }
  return res;
}

}  // namespace kla
