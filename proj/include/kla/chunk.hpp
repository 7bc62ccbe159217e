#pragma once

// Chunkwise-parallel execution of the gated delta recurrences (kla / gdn),
// plus the WY-style construction of the same operators. Both must agree with
// the tokenwise fold; the tests enforce it.
//
// Within a chunk of C tokens (0-based i, j):
//
//   gamma_i = prod_{r<=i} alpha_r            cumulative decay
//   A[i][j] = prod_{r=j+1..i} alpha_r        decay between positions (j<=i)
//   beta_i  = write coefficient (kla: eta_i/(||k_i||^2+eps); gdn: eta_i)
//
// Absorbing the writes as S_i = gamma_i S_0 + sum_{r<=i} A[i][r] k_r ubar_r^T
// and eliminating the residuals gives a unit-lower-triangular system
//
//   (I + B (A_strict o K K^T)) Ubar = B (V - D_gamma K S_0)
//
// solved by forward substitution. Outputs and the outgoing state follow in
// closed form:
//
//   O     = D_gamma Qhat S_0 + (A o Qhat K^T) Ubar      (Qhat: rows normalized)
//   S_out = gamma_{C-1} S_0 + K^T Diag(A[C-1][i]) Ubar
//
// All inter-position decay factors are computed as fresh alpha-products over
// their index interval, never as gamma ratios: ratios are undefined once some
// alpha underflows to zero, products always make sense.
//
// The WY construction expresses the same chunk as P_i = M_i ... M_0 and the
// affine part H_i (so S_i = P_i S_0 + H_i), with M_i = alpha_i (I - beta_i
// k_i k_i^T), through auxiliary vectors:
//
//   w_i = beta_i (gamma_i k_i - sum_{r<i} A[i][r] (k_r^T k_i) w_r)
//   u_i = beta_i (v_i        - sum_{r<i} A[i][r] (k_r^T k_i) u_r)
//   P_i = gamma_i I - sum_{r<=i} A[i][r] k_r w_r^T
//   H_i =            sum_{r<=i} A[i][r] k_r u_r^T
//
// and the combined form S_i = gamma_i S_0 + sum_{r<=i} A[i][r] k_r uhat_r^T
// with uhat_r = u_r - S_0^T w_r.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "kla/errors.hpp"
#include "kla/recurrence.hpp"
#include "kla/tensor.hpp"

namespace kla {

template <typename T>
struct ChunkBatch {
  Mat<T> k_mat;  // C x d_k
  Mat<T> v_mat;  // C x d_v
  Mat<T> q_mat;  // C x d_k
  Vec<T> alphas;
  Vec<T> etas;

  std::size_t length() const { return k_mat.rows(); }

  void validate() const {
    const std::size_t c = k_mat.rows();
    if (v_mat.rows() != c || q_mat.rows() != c || alphas.size() != c || etas.size() != c)
      throw shape_error("ChunkBatch: inconsistent chunk length across fields");
    if (q_mat.cols() != k_mat.cols())
      throw shape_error("ChunkBatch: q width " + std::to_string(q_mat.cols()) +
                        " vs k width " + std::to_string(k_mat.cols()));
    for (std::size_t i = 0; i < c; ++i) {
      if (!(alphas[i] >= T(0) && alphas[i] <= T(1)))
        throw range_error("ChunkBatch: alpha outside [0,1]");
      if (!(etas[i] > T(0) && etas[i] <= T(1)))
        throw range_error("ChunkBatch: eta outside (0,1]");
    }
  }
};

template <typename T>
struct ChunkArtifacts {
  Vec<T> gammas;    // gamma_i
  Vec<T> b_diag;    // beta_i
  Mat<T> a_full;    // A[i][j] for j <= i, unit diagonal, zero above
  Mat<T> a_strict;  // strict lower part of a_full
  Mat<T> u_mat;     // Ubar solution, filled by chunk_solve
};

namespace detail {
inline void require_chunk_rule(const UpdateRule& rule) {
  rule.validate();
  if (rule.rule != Rule::gdn && rule.rule != Rule::kla)
    throw config_error(std::string("chunkwise path supports gdn and kla, got ") +
                       rule_name(rule.rule));
}
}  // namespace detail

// Decay/coefficient precomputation for one chunk. t_offset is the number of
// tokens that precede this chunk in the sequence (only the sequence-factor
// ablations look at it). The rule picks the coefficient: kla divides by the
// key norm, gdn writes with eta directly.
template <typename T>
ChunkArtifacts<T> build_artifacts(const ChunkBatch<T>& chunk, T eps,
                                  const UpdateRule& rule = UpdateRule{},
                                  std::size_t t_offset = 0) {
  detail::require_chunk_rule(rule);
  chunk.validate();
  const std::size_t c = chunk.length();
  ChunkArtifacts<T> art;
  art.gammas = Vec<T>(c);
  art.b_diag = Vec<T>(c);
  art.a_full = Mat<T>(c, c);
  art.a_strict = Mat<T>(c, c);

  T running = T(1);
  for (std::size_t i = 0; i < c; ++i) {
    running *= chunk.alphas[i];
    art.gammas[i] = running;
    T knorm_sq = T(0);
    const T* ki = chunk.k_mat.row(i);
    for (std::size_t d = 0; d < chunk.k_mat.cols(); ++d) knorm_sq += ki[d] * ki[d];
    art.b_diag[i] = write_coefficient(rule, chunk.etas[i], knorm_sq, eps, t_offset + i + 1);
  }
  // Row i of A: walk j downward from the diagonal, multiplying in alpha_{j+1}
  // at each step, so every entry is a fresh product over (j, i].
  for (std::size_t i = 0; i < c; ++i) {
    art.a_full(i, i) = T(1);
    T acc = T(1);
    for (std::size_t j = i; j-- > 0;) {
      acc *= chunk.alphas[j + 1];
      art.a_full(i, j) = acc;
      art.a_strict(i, j) = acc;
    }
  }
  return art;
}

template <typename T>
struct ChunkSolveResult {
  Mat<T> o_mat;  // C x d_v outputs
  StateMatrix<T> s_out;
  ChunkArtifacts<T> artifacts;
};

// One chunk: solve for Ubar, then form outputs and the outgoing state.
template <typename T>
ChunkSolveResult<T> chunk_solve(const StateMatrix<T>& s0, const ChunkBatch<T>& chunk, T eps,
                                const UpdateRule& rule = UpdateRule{},
                                std::size_t t_offset = 0) {
  if (chunk.k_mat.cols() != s0.d_k() || chunk.v_mat.cols() != s0.d_v())
    throw shape_error("chunk_solve: chunk dims " + chunk.k_mat.shape_str() + "/" +
                      chunk.v_mat.shape_str() + " vs state " + s0.s.shape_str());
  ChunkArtifacts<T> art = build_artifacts(chunk, eps, rule, t_offset);
  const std::size_t c = chunk.length();
  const std::size_t dv = s0.d_v();

  const Mat<T> gram = matmul_nt(chunk.k_mat, chunk.k_mat);  // K K^T

  Mat<T> m(c, c);
  for (std::size_t i = 0; i < c; ++i) {
    m(i, i) = T(1);
    for (std::size_t j = 0; j < i; ++j) m(i, j) = art.b_diag[i] * art.a_strict(i, j) * gram(i, j);
  }

  const Mat<T> ks0 = matmul(chunk.k_mat, s0.s);  // C x d_v
  Mat<T> rhs(c, dv);
  for (std::size_t i = 0; i < c; ++i) {
    const T bi = art.b_diag[i], gi = art.gammas[i];
    for (std::size_t j = 0; j < dv; ++j) rhs(i, j) = bi * (chunk.v_mat(i, j) - gi * ks0(i, j));
  }

  art.u_mat = forward_substitution(m, rhs, Check::on);

  // Readout uses normalized queries; normalizing rows up front keeps the
  // output linear in q, and a zero query row stays zero.
  Mat<T> qhat = chunk.q_mat;
  for (std::size_t i = 0; i < c; ++i) {
    T nq = T(0);
    T* qi = qhat.row(i);
    for (std::size_t d = 0; d < qhat.cols(); ++d) nq += qi[d] * qi[d];
    if (nq > T(0)) {
      const T inv = T(1) / std::sqrt(nq);
      for (std::size_t d = 0; d < qhat.cols(); ++d) qi[d] *= inv;
    }
  }

  const Mat<T> qs0 = matmul(qhat, s0.s);           // C x d_v
  const Mat<T> qk = matmul_nt(qhat, chunk.k_mat);  // C x C

  ChunkSolveResult<T> res;
  res.o_mat = Mat<T>(c, dv);
  for (std::size_t i = 0; i < c; ++i) {
    T* oi = res.o_mat.row(i);
    const T gi = art.gammas[i];
    for (std::size_t j = 0; j < dv; ++j) oi[j] = gi * qs0(i, j);
    for (std::size_t r = 0; r <= i; ++r) {
      const T wgt = art.a_full(i, r) * qk(i, r);
      if (wgt == T(0)) continue;
      const T* ur = art.u_mat.row(r);
      for (std::size_t j = 0; j < dv; ++j) oi[j] += wgt * ur[j];
    }
  }

  // tail[i] = prod_{r=i+1..C-1} alpha_r, again as fresh products.
  Vec<T> tail(c);
  tail[c - 1] = T(1);
  for (std::size_t i = c - 1; i-- > 0;) tail[i] = tail[i + 1] * chunk.alphas[i + 1];

  Mat<T> s_out = scale(s0.s, art.gammas[c - 1]);
  for (std::size_t i = 0; i < c; ++i) {
    const T ti = tail[i];
    const T* ki = chunk.k_mat.row(i);
    const T* ui = art.u_mat.row(i);
    for (std::size_t a = 0; a < s_out.rows(); ++a) {
      const T kt = ki[a] * ti;
      T* sa = s_out.row(a);
      for (std::size_t b = 0; b < dv; ++b) sa[b] += kt * ui[b];
    }
  }

  res.s_out = StateMatrix<T>(std::move(s_out));
  res.artifacts = std::move(art);
  return res;
}

// Copies tokens [begin, end) into a chunk batch. alpha_vec tokens are not
// representable here; the chunkwise path is scalar-gated (gdn / kla).
template <typename T>
ChunkBatch<T> chunk_from_tokens(const std::vector<TokenInput<T>>& tokens, std::size_t begin,
                                std::size_t end) {
  const std::size_t c = end - begin;
  const std::size_t dk = tokens[begin].k.size(), dv = tokens[begin].v.size();
  ChunkBatch<T> chunk;
  chunk.k_mat = Mat<T>(c, dk);
  chunk.v_mat = Mat<T>(c, dv);
  chunk.q_mat = Mat<T>(c, dk);
  chunk.alphas = Vec<T>(c);
  chunk.etas = Vec<T>(c);
  for (std::size_t i = 0; i < c; ++i) {
    const TokenInput<T>& x = tokens[begin + i];
    for (std::size_t d = 0; d < dk; ++d) chunk.k_mat(i, d) = x.k[d];
    for (std::size_t d = 0; d < dv; ++d) chunk.v_mat(i, d) = x.v[d];
    for (std::size_t d = 0; d < dk; ++d) chunk.q_mat(i, d) = x.q[d];
    chunk.alphas[i] = x.alpha;
    chunk.etas[i] = x.eta;
  }
  return chunk;
}

template <typename T>
struct ChunkedRunResult {
  Mat<T> outputs;  // L x d_v
  StateMatrix<T> final_state;
};

// Partitions the sequence into ceil(L/C) chunks (last one possibly short;
// never padded) and threads the state through chunk_solve calls.
template <typename T>
ChunkedRunResult<T> run_chunked(const UpdateRule& rule, const StateMatrix<T>& s0,
                                const std::vector<TokenInput<T>>& tokens,
                                std::size_t chunk_len, T eps) {
  detail::require_chunk_rule(rule);
  if (chunk_len < 1) throw config_error("run_chunked: chunk_len must be >= 1");
  if (tokens.empty()) throw config_error("run_chunked: empty token sequence");
  const std::size_t L = tokens.size();
  const std::size_t dv = s0.d_v();

  ChunkedRunResult<T> res;
  res.outputs = Mat<T>(L, dv);
  StateMatrix<T> state = s0;
  for (std::size_t begin = 0; begin < L; begin += chunk_len) {
    const std::size_t end = std::min(L, begin + chunk_len);
    for (std::size_t i = begin; i < end; ++i) tokens[i].validate(s0.d_k(), dv);
    const ChunkBatch<T> chunk = chunk_from_tokens(tokens, begin, end);
    ChunkSolveResult<T> out = chunk_solve(state, chunk, eps, rule, begin);
    for (std::size_t i = 0; i < end - begin; ++i)
      for (std::size_t j = 0; j < dv; ++j) res.outputs(begin + i, j) = out.o_mat(i, j);
    state = std::move(out.s_out);
  }
  res.final_state = std::move(state);
  return res;
}

template <typename T>
struct WyBuild {
  std::vector<Vec<T>> w;  // d_k each
  std::vector<Vec<T>> u;  // d_v each
  std::vector<Mat<T>> p_wy, p_direct;  // d_k x d_k per position
  std::vector<Mat<T>> h_wy, h_direct;  // d_k x d_v per position
};

// Builds the per-position transition operators both ways: through the w/u
// recursions (WY form) and by direct evaluation of the defining products
// P_i = M_i ... M_0, H_i = M_i H_{i-1} + beta_i k_i v_i^T.
template <typename T>
WyBuild<T> wy_build(const ChunkBatch<T>& chunk, T eps, const UpdateRule& rule = UpdateRule{},
                    std::size_t t_offset = 0) {
  const ChunkArtifacts<T> art = build_artifacts(chunk, eps, rule, t_offset);
  const std::size_t c = chunk.length();
  const std::size_t dk = chunk.k_mat.cols(), dv = chunk.v_mat.cols();
  const Mat<T> gram = matmul_nt(chunk.k_mat, chunk.k_mat);

  WyBuild<T> wy;
  wy.w.reserve(c);
  wy.u.reserve(c);
  for (std::size_t i = 0; i < c; ++i) {
    Vec<T> wi(dk), ui(dv);
    const T* ki = chunk.k_mat.row(i);
    const T gi = art.gammas[i];
    for (std::size_t d = 0; d < dk; ++d) wi[d] = gi * ki[d];
    for (std::size_t d = 0; d < dv; ++d) ui[d] = chunk.v_mat(i, d);
    for (std::size_t r = 0; r < i; ++r) {
      const T coef = art.a_full(i, r) * gram(r, i);
      if (coef == T(0)) continue;
      for (std::size_t d = 0; d < dk; ++d) wi[d] -= coef * wy.w[r][d];
      for (std::size_t d = 0; d < dv; ++d) ui[d] -= coef * wy.u[r][d];
    }
    const T bi = art.b_diag[i];
    for (std::size_t d = 0; d < dk; ++d) wi[d] *= bi;
    for (std::size_t d = 0; d < dv; ++d) ui[d] *= bi;
    wy.w.push_back(std::move(wi));
    wy.u.push_back(std::move(ui));
  }

  // WY sums, each position assembled afresh from the recursion outputs.
  for (std::size_t i = 0; i < c; ++i) {
    Mat<T> p = scale(Mat<T>::identity(dk), art.gammas[i]);
    Mat<T> h(dk, dv);
    for (std::size_t r = 0; r <= i; ++r) {
      const T g = art.a_full(i, r);
      const T* kr = chunk.k_mat.row(r);
      for (std::size_t a = 0; a < dk; ++a) {
        const T gk = g * kr[a];
        T* pa = p.row(a);
        T* ha = h.row(a);
        for (std::size_t b2 = 0; b2 < dk; ++b2) pa[b2] -= gk * wy.w[r][b2];
        for (std::size_t b2 = 0; b2 < dv; ++b2) ha[b2] += gk * wy.u[r][b2];
      }
    }
    wy.p_wy.push_back(std::move(p));
    wy.h_wy.push_back(std::move(h));
  }

  // Direct evaluation of the same operators.
  Mat<T> p_acc = Mat<T>::identity(dk);
  Mat<T> h_acc(dk, dv);
  for (std::size_t i = 0; i < c; ++i) {
    const T* ki = chunk.k_mat.row(i);
    Mat<T> mi = Mat<T>::identity(dk);
    for (std::size_t a = 0; a < dk; ++a)
      for (std::size_t b2 = 0; b2 < dk; ++b2)
        mi(a, b2) = chunk.alphas[i] * (mi(a, b2) - art.b_diag[i] * ki[a] * ki[b2]);
    p_acc = matmul(mi, p_acc);
    h_acc = matmul(mi, h_acc);
    for (std::size_t a = 0; a < dk; ++a) {
      const T bk = art.b_diag[i] * ki[a];
      T* ha = h_acc.row(a);
      for (std::size_t b2 = 0; b2 < dv; ++b2) ha[b2] += bk * chunk.v_mat(i, b2);
    }
    wy.p_direct.push_back(p_acc);
    wy.h_direct.push_back(h_acc);
  }
  return wy;
}

template <typename T>
struct CombinedWyReport {
  std::vector<T> per_position;  // max abs deviation at each position
  T max_deviation = T(0);
};

// Checks the combined form S_i = gamma_i S_0 + sum_{r<=i} A[i][r] k_r uhat_r^T
// (uhat_r = u_r - S_0^T w_r) against the tokenwise fold at every position.
template <typename T>
CombinedWyReport<T> verify_combined_wy(const StateMatrix<T>& s0, const ChunkBatch<T>& chunk,
                                       T eps, const UpdateRule& rule = UpdateRule{}) {
  detail::require_chunk_rule(rule);
  chunk.validate();
  if (chunk.k_mat.cols() != s0.d_k() || chunk.v_mat.cols() != s0.d_v())
    throw shape_error("verify_combined_wy: chunk dims vs state dims");
  const std::size_t c = chunk.length();
  const std::size_t dk = s0.d_k(), dv = s0.d_v();
  const ChunkArtifacts<T> art = build_artifacts(chunk, eps, rule);
  const WyBuild<T> wy = wy_build(chunk, eps, rule);

  std::vector<Vec<T>> uhat;
  uhat.reserve(c);
  for (std::size_t r = 0; r < c; ++r) {
    Vec<T> uh = matvec_t(s0.s, wy.w[r]);  // S_0^T w_r
    for (std::size_t d = 0; d < dv; ++d) uh[d] = wy.u[r][d] - uh[d];
    uhat.push_back(std::move(uh));
  }

  CombinedWyReport<T> report;
  report.per_position.resize(c);
  Mat<T> token_state = s0.s;
  Vec<T> e_buf(dv), o_buf(dv);
  Vec<T> zero_q(dk);
  for (std::size_t i = 0; i < c; ++i) {
    step_inplace(rule, token_state, chunk.k_mat.row(i), chunk.v_mat.row(i), zero_q.data(),
                 chunk.alphas[i], chunk.etas[i], eps, i + 1, e_buf.data(), o_buf.data());
    Mat<T> combined = scale(s0.s, art.gammas[i]);
    for (std::size_t r = 0; r <= i; ++r) {
      const T g = art.a_full(i, r);
      const T* kr = chunk.k_mat.row(r);
      for (std::size_t a = 0; a < dk; ++a) {
        const T gk = g * kr[a];
        T* ca = combined.row(a);
        for (std::size_t b2 = 0; b2 < dv; ++b2) ca[b2] += gk * uhat[r][b2];
      }
    }
    const T dev = max_abs_diff(combined, token_state);
    report.per_position[i] = dev;
    if (dev > report.max_deviation) report.max_deviation = dev;
  }
  return report;
}

}  // namespace kla
