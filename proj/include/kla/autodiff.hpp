#pragma once

// Reverse-mode differentiation tape over dense matrices.
//
// Design:
//   * Nodes are appended in topological order (parents always precede
//     children), so forward() is a single left-to-right sweep and
//     backward() the reverse sweep.
//   * All value/gradient/auxiliary buffers are allocated when the node is
//     built. forward() and backward() never allocate, so one tape can be
//     reused across training samples: update leaf values, gather indices,
//     and cross-entropy targets in place, then rerun both sweeps.
//   * Everything is 64-bit. Finite-difference agreement at 32-bit degrades
//     to ~1e-3 relative error and is intentionally not asserted anywhere.
//
// The op set is the minimum needed by the token recurrences and the toy
// task models: gather/matmul/elementwise plumbing, rowwise RMS norm,
// sigmoid/SiLU, squared norms with a zero-safe inverse square root for the
// query readout, and a fused masked cross-entropy over logits.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kla/errors.hpp"
#include "kla/tensor.hpp"

namespace kla {

enum class Op {
  leaf,
  gather_rows,
  rms_norm,
  matmul,
  matmul_tn,
  add,
  sub,
  mul,
  div,
  scale_const,
  add_const,
  scale_node,
  add_rowvec,
  sigmoid,
  silu,
  clamp_min,
  slice_row,
  concat_rows,
  norm_sq,
  rsqrt0,
  cross_entropy,
};

class Tape {
 public:
  using NodeId = std::int32_t;

  // --- construction -------------------------------------------------------

  NodeId leaf(std::size_t rows, std::size_t cols) {
    return push(Op::leaf, rows, cols, -1, -1);
  }

  // rows of the embedding table selected by mutable integer ids; `rows` is
  // the fixed output row count (sequence length).
  NodeId gather_rows(NodeId table, std::size_t rows) {
    const Node& t = at(table);
    return push(Op::gather_rows, rows, t.val.cols(), table, -1);
  }

  // y_ij = x_ij * gain_j / sqrt(mean_j(x_ij^2) + eps); aux caches 1/rms per row.
  NodeId rms_norm(NodeId x, NodeId gain, double eps) {
    const Node& xn = at(x);
    const Node& gn = at(gain);
    if (gn.val.rows() != 1 || gn.val.cols() != xn.val.cols())
      throw shape_error("rms_norm: gain must be 1 x cols(x)");
    NodeId id = push(Op::rms_norm, xn.val.rows(), xn.val.cols(), x, gain);
    node(id).c = eps;
    node(id).aux = Matrix(xn.val.rows(), 1);
    return id;
  }

  NodeId matmul(NodeId a, NodeId b) {
    const Node& an = at(a);
    const Node& bn = at(b);
    if (an.val.cols() != bn.val.rows()) throw shape_error("tape matmul: inner dims");
    return push(Op::matmul, an.val.rows(), bn.val.cols(), a, b);
  }

  // a^T b with a: m x n, b: m x p -> n x p (used for outer products k^T e).
  NodeId matmul_tn(NodeId a, NodeId b) {
    const Node& an = at(a);
    const Node& bn = at(b);
    if (an.val.rows() != bn.val.rows()) throw shape_error("tape matmul_tn: outer dims");
    return push(Op::matmul_tn, an.val.cols(), bn.val.cols(), a, b);
  }

  NodeId add(NodeId a, NodeId b) { return same_shape(Op::add, a, b); }
  NodeId sub(NodeId a, NodeId b) { return same_shape(Op::sub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return same_shape(Op::mul, a, b); }
  NodeId div(NodeId a, NodeId b) { return same_shape(Op::div, a, b); }

  NodeId scale_const(NodeId a, double c) { return unary_with_c(Op::scale_const, a, c); }
  NodeId add_const(NodeId a, double c) { return unary_with_c(Op::add_const, a, c); }

  // a scaled by the 1x1 node s; gradient flows into both.
  NodeId scale_node(NodeId a, NodeId s) {
    const Node& sn = at(s);
    if (sn.val.rows() != 1 || sn.val.cols() != 1)
      throw shape_error("scale_node: scale operand must be 1x1");
    const Node& an = at(a);
    return push(Op::scale_node, an.val.rows(), an.val.cols(), a, s);
  }

  // m (L x d) + r (1 x d) broadcast over rows (bias addition).
  NodeId add_rowvec(NodeId m, NodeId r) {
    const Node& mn = at(m);
    const Node& rn = at(r);
    if (rn.val.rows() != 1 || rn.val.cols() != mn.val.cols())
      throw shape_error("add_rowvec: row operand must be 1 x cols(m)");
    return push(Op::add_rowvec, mn.val.rows(), mn.val.cols(), m, r);
  }

  NodeId sigmoid(NodeId a) { return unary_with_c(Op::sigmoid, a, 0.0); }
  NodeId silu(NodeId a) { return unary_with_c(Op::silu, a, 0.0); }
  NodeId clamp_min(NodeId a, double c) { return unary_with_c(Op::clamp_min, a, c); }

  NodeId slice_row(NodeId m, std::size_t row) {
    const Node& mn = at(m);
    if (row >= mn.val.rows()) throw range_error("slice_row: row out of range");
    NodeId id = push(Op::slice_row, 1, mn.val.cols(), m, -1);
    node(id).i = static_cast<std::int64_t>(row);
    return id;
  }

  // stacks 1 x d rows into |parts| x d.
  NodeId concat_rows(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw shape_error("concat_rows: empty part list");
    const std::size_t cols = at(parts[0]).val.cols();
    for (NodeId p : parts) {
      const Node& pn = at(p);
      if (pn.val.rows() != 1 || pn.val.cols() != cols)
        throw shape_error("concat_rows: all parts must be 1 x d with equal d");
    }
    NodeId id = push(Op::concat_rows, parts.size(), cols, -1, -1);
    node(id).many = parts;
    return id;
  }

  NodeId norm_sq(NodeId a) {
    NodeId id = push(Op::norm_sq, 1, 1, a, -1);
    return id;
  }

  // 1/sqrt(s) for s > 0, exactly 0 at s = 0 (zero-query readout convention;
  // the gradient at 0 is defined as 0).
  NodeId rsqrt0(NodeId s) {
    const Node& sn = at(s);
    if (sn.val.rows() != 1 || sn.val.cols() != 1) throw shape_error("rsqrt0: operand must be 1x1");
    return push(Op::rsqrt0, 1, 1, s, -1);
  }

  // Mean over masked rows of logsumexp(logits_row) - logits_row[target].
  // Targets and mask are mutable per sample; aux caches row softmax.
  NodeId cross_entropy(NodeId logits) {
    const Node& ln = at(logits);
    NodeId id = push(Op::cross_entropy, 1, 1, logits, -1);
    node(id).aux = Matrix(ln.val.rows(), ln.val.cols());
    node(id).ids.assign(ln.val.rows(), 0);
    node(id).mask.assign(ln.val.rows(), 0);
    return id;
  }

  // --- mutable per-sample inputs ------------------------------------------

  void set_leaf(NodeId id, const Matrix& v) {
    Node& n = node(id);
    if (n.op != Op::leaf) throw structural_error("set_leaf: node is not a leaf");
    if (v.rows() != n.val.rows() || v.cols() != n.val.cols())
      throw shape_error("set_leaf: " + v.shape_str() + " vs " + n.val.shape_str());
    n.val = v;
  }

  void set_gather_ids(NodeId id, const std::vector<std::int64_t>& ids) {
    Node& n = node(id);
    if (n.op != Op::gather_rows) throw structural_error("set_gather_ids: wrong op");
    if (ids.size() != n.val.rows()) throw shape_error("set_gather_ids: id count vs rows");
    n.ids = ids;
  }

  void set_targets(NodeId id, const std::vector<std::int64_t>& targets,
                   const std::vector<std::uint8_t>& mask) {
    Node& n = node(id);
    if (n.op != Op::cross_entropy) throw structural_error("set_targets: wrong op");
    if (targets.size() != n.aux.rows() || mask.size() != n.aux.rows())
      throw shape_error("set_targets: length vs logit rows");
    n.ids = targets;
    n.mask = mask;
  }

  // --- execution -----------------------------------------------------------

  void forward() {
    for (Node& n : nodes_) forward_one(n);
  }

  void backward(NodeId loss) {
    const Node& ln = at(loss);
    if (ln.val.rows() != 1 || ln.val.cols() != 1)
      throw shape_error("backward: loss node must be 1x1");
    for (Node& n : nodes_) n.grad.fill(0.0);
    node(loss).grad(0, 0) = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) backward_one(nodes_[i]);
  }

  const Matrix& value(NodeId id) const { return at(id).val; }
  double value_scalar(NodeId id) const { return at(id).val(0, 0); }
  const Matrix& gradient(NodeId id) const { return at(id).grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op;
    NodeId a = -1, b = -1;      // primary parents
    double c = 0.0;             // op constant (scale, clamp floor, norm eps)
    std::int64_t i = 0;         // row index for slice_row
    Matrix val, grad, aux;
    std::vector<NodeId> many;             // concat_rows parents
    std::vector<std::int64_t> ids;        // gather indices / CE targets
    std::vector<std::uint8_t> mask;       // CE loss mask
  };

  std::vector<Node> nodes_;

  Node& node(NodeId id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& at(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw structural_error("tape: node id out of range");
    return nodes_[static_cast<std::size_t>(id)];
  }

  NodeId push(Op op, std::size_t rows, std::size_t cols, NodeId a, NodeId b) {
    if (a >= 0) (void)at(a);
    if (b >= 0) (void)at(b);
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.val = Matrix(rows, cols);
    n.grad = Matrix(rows, cols);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId same_shape(Op op, NodeId a, NodeId b) {
    const Node& an = at(a);
    const Node& bn = at(b);
    if (an.val.rows() != bn.val.rows() || an.val.cols() != bn.val.cols())
      throw shape_error("tape binary op: " + an.val.shape_str() + " vs " + bn.val.shape_str());
    return push(op, an.val.rows(), an.val.cols(), a, b);
  }

  NodeId unary_with_c(Op op, NodeId a, double c) {
    const Node& an = at(a);
    NodeId id = push(op, an.val.rows(), an.val.cols(), a, -1);
    node(id).c = c;
    return id;
  }

  static double sigmoid_stable(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  void forward_one(Node& n) {
    const std::size_t R = n.val.rows(), C = n.val.cols();
    switch (n.op) {
      case Op::leaf:
        break;
      case Op::gather_rows: {
        const Matrix& e = node(n.a).val;
        if (n.ids.size() != R) throw range_error("gather_rows: ids unset");
        for (std::size_t r = 0; r < R; ++r) {
          const std::int64_t id = n.ids[r];
          if (id < 0 || static_cast<std::size_t>(id) >= e.rows())
            throw range_error("gather_rows: id out of table range");
          const double* src = e.row(static_cast<std::size_t>(id));
          double* dst = n.val.row(r);
          for (std::size_t j = 0; j < C; ++j) dst[j] = src[j];
        }
        break;
      }
      case Op::rms_norm: {
        const Matrix& x = node(n.a).val;
        const Matrix& g = node(n.b).val;
        for (std::size_t r = 0; r < R; ++r) {
          const double* xr = x.row(r);
          double ms = 0.0;
          for (std::size_t j = 0; j < C; ++j) ms += xr[j] * xr[j];
          const double inv = 1.0 / std::sqrt(ms / static_cast<double>(C) + n.c);
          n.aux(r, 0) = inv;
          double* yr = n.val.row(r);
          for (std::size_t j = 0; j < C; ++j) yr[j] = xr[j] * g(0, j) * inv;
        }
        break;
      }
      case Op::matmul: {
        const Matrix& a = node(n.a).val;
        const Matrix& b = node(n.b).val;
        const std::size_t K = a.cols();
        for (std::size_t i = 0; i < R; ++i) {
          const double* ar = a.row(i);
          double* out = n.val.row(i);
          for (std::size_t j = 0; j < C; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < K; ++k) acc += ar[k] * b(k, j);
            out[j] = acc;
          }
        }
        break;
      }
      case Op::matmul_tn: {
        const Matrix& a = node(n.a).val;
        const Matrix& b = node(n.b).val;
        const std::size_t K = a.rows();
        for (std::size_t i = 0; i < R; ++i) {
          double* out = n.val.row(i);
          for (std::size_t j = 0; j < C; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < K; ++k) acc += a(k, i) * b(k, j);
            out[j] = acc;
          }
        }
        break;
      }
      case Op::add: {
        const Matrix& a = node(n.a).val;
        const Matrix& b = node(n.b).val;
        for (std::size_t i = 0; i < R * C; ++i) n.val.data()[i] = a.data()[i] + b.data()[i];
        break;
      }
      case Op::sub: {
        const Matrix& a = node(n.a).val;
        const Matrix& b = node(n.b).val;
        for (std::size_t i = 0; i < R * C; ++i) n.val.data()[i] = a.data()[i] - b.data()[i];
        break;
      }
      case Op::mul: {
        const Matrix& a = node(n.a).val;
        const Matrix& b = node(n.b).val;
        for (std::size_t i = 0; i < R * C; ++i) n.val.data()[i] = a.data()[i] * b.data()[i];
        break;
      }
      case Op::div: {
        const Matrix& a = node(n.a).val;
        const Matrix& b = node(n.b).val;
        for (std::size_t i = 0; i < R * C; ++i) n.val.data()[i] = a.data()[i] / b.data()[i];
        break;
      }
      case Op::scale_const: {
        const Matrix& a = node(n.a).val;
        for (std::size_t i = 0; i < R * C; ++i) n.val.data()[i] = n.c * a.data()[i];
        break;
      }
      case Op::add_const: {
        const Matrix& a = node(n.a).val;
        for (std::size_t i = 0; i < R * C; ++i) n.val.data()[i] = a.data()[i] + n.c;
        break;
      }
      case Op::scale_node: {
        const Matrix& a = node(n.a).val;
        const double s = node(n.b).val(0, 0);
        for (std::size_t i = 0; i < R * C; ++i) n.val.data()[i] = s * a.data()[i];
        break;
      }
      case Op::add_rowvec: {
        const Matrix& m = node(n.a).val;
        const Matrix& r = node(n.b).val;
        for (std::size_t i = 0; i < R; ++i) {
          const double* mr = m.row(i);
          double* out = n.val.row(i);
          for (std::size_t j = 0; j < C; ++j) out[j] = mr[j] + r(0, j);
        }
        break;
      }
      case Op::sigmoid: {
        const Matrix& a = node(n.a).val;
        for (std::size_t i = 0; i < R * C; ++i) n.val.data()[i] = sigmoid_stable(a.data()[i]);
        break;
      }
      case Op::silu: {
        const Matrix& a = node(n.a).val;
        for (std::size_t i = 0; i < R * C; ++i) {
          const double x = a.data()[i];
          n.val.data()[i] = x * sigmoid_stable(x);
        }
        break;
      }
      case Op::clamp_min: {
        const Matrix& a = node(n.a).val;
        for (std::size_t i = 0; i < R * C; ++i)
          n.val.data()[i] = a.data()[i] > n.c ? a.data()[i] : n.c;
        break;
      }
      case Op::slice_row: {
        const Matrix& m = node(n.a).val;
        const double* src = m.row(static_cast<std::size_t>(n.i));
        double* dst = n.val.row(0);
        for (std::size_t j = 0; j < C; ++j) dst[j] = src[j];
        break;
      }
      case Op::concat_rows: {
        for (std::size_t r = 0; r < R; ++r) {
          const double* src = node(n.many[r]).val.row(0);
          double* dst = n.val.row(r);
          for (std::size_t j = 0; j < C; ++j) dst[j] = src[j];
        }
        break;
      }
      case Op::norm_sq: {
        const Matrix& a = node(n.a).val;
        double acc = 0.0;
        const std::size_t sz = a.rows() * a.cols();
        for (std::size_t i = 0; i < sz; ++i) acc += a.data()[i] * a.data()[i];
        n.val(0, 0) = acc;
        break;
      }
      case Op::rsqrt0: {
        const double s = node(n.a).val(0, 0);
        n.val(0, 0) = s > 0.0 ? 1.0 / std::sqrt(s) : 0.0;
        break;
      }
      case Op::cross_entropy: {
        const Matrix& l = node(n.a).val;
        const std::size_t L = l.rows(), V = l.cols();
        std::size_t scored = 0;
        double total = 0.0;
        for (std::size_t r = 0; r < L; ++r) {
          if (!n.mask[r]) continue;
          const std::int64_t z = n.ids[r];
          if (z < 0 || static_cast<std::size_t>(z) >= V)
            throw range_error("cross_entropy: target out of vocab range");
          const double* lr = l.row(r);
          double m = lr[0];
          for (std::size_t j = 1; j < V; ++j) m = lr[j] > m ? lr[j] : m;
          double sum = 0.0;
          double* soft = n.aux.row(r);
          for (std::size_t j = 0; j < V; ++j) {
            soft[j] = std::exp(lr[j] - m);
            sum += soft[j];
          }
          const double inv = 1.0 / sum;
          for (std::size_t j = 0; j < V; ++j) soft[j] *= inv;
          total += m + std::log(sum) - lr[static_cast<std::size_t>(z)];
          ++scored;
        }
        if (scored == 0) throw range_error("cross_entropy: no scored positions");
        n.val(0, 0) = total / static_cast<double>(scored);
        n.c = static_cast<double>(scored);  // cached for backward
        break;
      }
    }
  }

  void backward_one(Node& n) {
    const std::size_t R = n.val.rows(), C = n.val.cols();
    const Matrix& G = n.grad;
    switch (n.op) {
      case Op::leaf:
        break;
      case Op::gather_rows: {
        Matrix& eg = node(n.a).grad;
        for (std::size_t r = 0; r < R; ++r) {
          double* dst = eg.row(static_cast<std::size_t>(n.ids[r]));
          const double* src = G.row(r);
          for (std::size_t j = 0; j < C; ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::rms_norm: {
        const Matrix& x = node(n.a).val;
        const Matrix& g = node(n.b).val;
        Matrix& xg = node(n.a).grad;
        Matrix& gg = node(n.b).grad;
        for (std::size_t r = 0; r < R; ++r) {
          const double inv = n.aux(r, 0);
          const double* xr = x.row(r);
          const double* gr = G.row(r);
          double s = 0.0;  // <G_r * gain, x_r>
          for (std::size_t j = 0; j < C; ++j) s += gr[j] * g(0, j) * xr[j];
          const double k = inv * inv * inv * s / static_cast<double>(C);
          double* xgr = xg.row(r);
          for (std::size_t j = 0; j < C; ++j) {
            xgr[j] += inv * gr[j] * g(0, j) - k * xr[j];
            gg(0, j) += gr[j] * xr[j] * inv;
          }
        }
        break;
      }
      case Op::matmul: {
        const Matrix& a = node(n.a).val;
        const Matrix& b = node(n.b).val;
        Matrix& ag = node(n.a).grad;
        Matrix& bg = node(n.b).grad;
        const std::size_t K = a.cols();
        for (std::size_t i = 0; i < R; ++i) {
          const double* gr = G.row(i);
          double* agr = ag.row(i);
          for (std::size_t k = 0; k < K; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < C; ++j) acc += gr[j] * b(k, j);
            agr[k] += acc;
          }
        }
        for (std::size_t k = 0; k < K; ++k) {
          double* bgr = bg.row(k);
          for (std::size_t j = 0; j < C; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < R; ++i) acc += a(i, k) * G(i, j);
            bgr[j] += acc;
          }
        }
        break;
      }
      case Op::matmul_tn: {
        // C = a^T b, a: K x R, b: K x C
        const Matrix& a = node(n.a).val;
        const Matrix& b = node(n.b).val;
        Matrix& ag = node(n.a).grad;
        Matrix& bg = node(n.b).grad;
        const std::size_t K = a.rows();
        for (std::size_t k = 0; k < K; ++k) {
          double* agr = ag.row(k);
          double* bgr = bg.row(k);
          for (std::size_t i = 0; i < R; ++i) {
            const double* gr = G.row(i);
            double acc = 0.0;
            for (std::size_t j = 0; j < C; ++j) acc += gr[j] * b(k, j);
            agr[i] += acc;
          }
          for (std::size_t j = 0; j < C; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < R; ++i) acc += a(k, i) * G(i, j);
            bgr[j] += acc;
          }
        }
        break;
      }
      case Op::add: {
        Matrix& ag = node(n.a).grad;
        Matrix& bg = node(n.b).grad;
        for (std::size_t i = 0; i < R * C; ++i) {
          ag.data()[i] += G.data()[i];
          bg.data()[i] += G.data()[i];
        }
        break;
      }
      case Op::sub: {
        Matrix& ag = node(n.a).grad;
        Matrix& bg = node(n.b).grad;
        for (std::size_t i = 0; i < R * C; ++i) {
          ag.data()[i] += G.data()[i];
          bg.data()[i] -= G.data()[i];
        }
        break;
      }
      case Op::mul: {
        const Matrix& a = node(n.a).val;
        const Matrix& b = node(n.b).val;
        Matrix& ag = node(n.a).grad;
        Matrix& bg = node(n.b).grad;
        for (std::size_t i = 0; i < R * C; ++i) {
          ag.data()[i] += G.data()[i] * b.data()[i];
          bg.data()[i] += G.data()[i] * a.data()[i];
        }
        break;
      }
      case Op::div: {
        const Matrix& a = node(n.a).val;
        const Matrix& b = node(n.b).val;
        Matrix& ag = node(n.a).grad;
        Matrix& bg = node(n.b).grad;
        for (std::size_t i = 0; i < R * C; ++i) {
          const double bi = b.data()[i];
          ag.data()[i] += G.data()[i] / bi;
          bg.data()[i] -= G.data()[i] * a.data()[i] / (bi * bi);
        }
        break;
      }
      case Op::scale_const: {
        Matrix& ag = node(n.a).grad;
        for (std::size_t i = 0; i < R * C; ++i) ag.data()[i] += n.c * G.data()[i];
        break;
      }
      case Op::add_const: {
        Matrix& ag = node(n.a).grad;
        for (std::size_t i = 0; i < R * C; ++i) ag.data()[i] += G.data()[i];
        break;
      }
      case Op::scale_node: {
        const Matrix& a = node(n.a).val;
        const double s = node(n.b).val(0, 0);
        Matrix& ag = node(n.a).grad;
        double acc = 0.0;
        for (std::size_t i = 0; i < R * C; ++i) {
          ag.data()[i] += s * G.data()[i];
          acc += G.data()[i] * a.data()[i];
        }
        node(n.b).grad(0, 0) += acc;
        break;
      }
      case Op::add_rowvec: {
        Matrix& mg = node(n.a).grad;
        Matrix& rg = node(n.b).grad;
        for (std::size_t i = 0; i < R; ++i) {
          const double* gr = G.row(i);
          double* mgr = mg.row(i);
          for (std::size_t j = 0; j < C; ++j) {
            mgr[j] += gr[j];
            rg(0, j) += gr[j];
          }
        }
        break;
      }
      case Op::sigmoid: {
        Matrix& ag = node(n.a).grad;
        for (std::size_t i = 0; i < R * C; ++i) {
          const double y = n.val.data()[i];
          ag.data()[i] += G.data()[i] * y * (1.0 - y);
        }
        break;
      }
      case Op::silu: {
        const Matrix& a = node(n.a).val;
        Matrix& ag = node(n.a).grad;
        for (std::size_t i = 0; i < R * C; ++i) {
          const double x = a.data()[i];
          const double s = sigmoid_stable(x);
          ag.data()[i] += G.data()[i] * s * (1.0 + x * (1.0 - s));
        }
        break;
      }
      case Op::clamp_min: {
        const Matrix& a = node(n.a).val;
        Matrix& ag = node(n.a).grad;
        for (std::size_t i = 0; i < R * C; ++i)
          if (a.data()[i] > n.c) ag.data()[i] += G.data()[i];
        break;
      }
      case Op::slice_row: {
        Matrix& mg = node(n.a).grad;
        double* dst = mg.row(static_cast<std::size_t>(n.i));
        const double* src = G.row(0);
        for (std::size_t j = 0; j < C; ++j) dst[j] += src[j];
        break;
      }
      case Op::concat_rows: {
        for (std::size_t r = 0; r < R; ++r) {
          double* dst = node(n.many[r]).grad.row(0);
          const double* src = G.row(r);
          for (std::size_t j = 0; j < C; ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::norm_sq: {
        const Matrix& a = node(n.a).val;
        Matrix& ag = node(n.a).grad;
        const double g0 = G(0, 0);
        const std::size_t sz = a.rows() * a.cols();
        for (std::size_t i = 0; i < sz; ++i) ag.data()[i] += 2.0 * g0 * a.data()[i];
        break;
      }
      case Op::rsqrt0: {
        const double s = node(n.a).val(0, 0);
        if (s > 0.0) node(n.a).grad(0, 0) += -0.5 * G(0, 0) / (s * std::sqrt(s));
        break;
      }
      case Op::cross_entropy: {
        const Matrix& l = node(n.a).val;
        Matrix& lg = node(n.a).grad;
        const double scale = G(0, 0) / n.c;  // n.c caches the scored count
        const std::size_t L = l.rows(), V = l.cols();
        for (std::size_t r = 0; r < L; ++r) {
          if (!n.mask[r]) continue;
          const double* soft = n.aux.row(r);
          double* dst = lg.row(r);
          for (std::size_t j = 0; j < V; ++j) dst[j] += scale * soft[j];
          dst[static_cast<std::size_t>(n.ids[r])] -= scale;
        }
        break;
      }
    }
  }
};

// Central finite differences of loss() with respect to the entries of p.
// loss() must observe p by reference (the tape leaf is reset by the caller
// inside loss, or p aliases live storage). O(2 * p.size()) loss evaluations.
template <typename LossFn>
Matrix finite_diff(LossFn&& loss, Matrix& p, double h) {
  if (!(h > 0.0)) throw range_error("finite_diff: h must be > 0");
  Matrix g(p.rows(), p.cols());
  for (std::size_t i = 0; i < p.rows() * p.cols(); ++i) {
    const double saved = p.data()[i];
    p.data()[i] = saved + h;
    const double up = loss();
    p.data()[i] = saved - h;
    const double down = loss();
    p.data()[i] = saved;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

}  // namespace kla
