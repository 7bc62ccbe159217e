#pragma once

// Toy sequence models assembled on the reverse-mode tape.
//
// Block structure (a reconstruction; the update rules themselves are the
// specified part):
//   token embedding
//   N x [ pre-RMSNorm -> recurrence layer -> output projection -> residual,
//         pre-RMSNorm -> 2x-wide SiLU MLP -> residual ]
//   final RMSNorm -> vocab head -> masked cross-entropy
//
// The recurrence layer projects keys/values/queries from the normalized
// stream, gates alpha/eta via sigmoid-activated linear projections of the
// same stream, and folds the per-rule state update token by token on the
// tape so gradients flow through every coefficient, including the
// ||k||^2 denominator of the Kaczmarz write.
//
// Parameter blocks are named, ordered, and fixed at build time; a tape is
// built once per sequence length and reused across samples by resetting the
// leaf values, gather ids, and cross-entropy targets.

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kla/autodiff.hpp"
#include "kla/errors.hpp"
#include "kla/recurrence.hpp"
#include "kla/rng.hpp"
#include "kla/tensor.hpp"

namespace kla {

// --- enum <-> name maps for configs and checkpoints -------------------------

inline const char* normalization_name(Normalization n) {
  switch (n) {
    case Normalization::kaczmarz: return "kaczmarz";
    case Normalization::none: return "none";
    case Normalization::key_norm_only: return "key_norm_only";
    case Normalization::learned_scalar: return "learned_scalar";
  }
  return "kaczmarz";
}

inline Normalization normalization_from_name(const std::string& s) {
  if (s == "kaczmarz") return Normalization::kaczmarz;
  if (s == "none") return Normalization::none;
  if (s == "key_norm_only") return Normalization::key_norm_only;
  if (s == "learned_scalar") return Normalization::learned_scalar;
  throw config_error("unknown normalization: " + s);
}

inline const char* gating_name(Gating g) {
  return g == Gating::single_gate ? "single" : "dual";
}

inline Gating gating_from_name(const std::string& s) {
  if (s == "dual") return Gating::dual;
  if (s == "single") return Gating::single_gate;
  throw config_error("unknown gating: " + s);
}

inline const char* seq_factor_name(SeqFactor f) {
  switch (f) {
    case SeqFactor::none: return "none";
    case SeqFactor::inv_t: return "inv_t";
    case SeqFactor::inv_sqrt_t: return "inv_sqrt_t";
    case SeqFactor::inv_log_t: return "inv_log_t";
  }
  return "none";
}

inline SeqFactor seq_factor_from_name(const std::string& s) {
  if (s == "none") return SeqFactor::none;
  if (s == "inv_t") return SeqFactor::inv_t;
  if (s == "inv_sqrt_t") return SeqFactor::inv_sqrt_t;
  if (s == "inv_log_t") return SeqFactor::inv_log_t;
  throw config_error("unknown seq factor: " + s);
}

// --- configuration ----------------------------------------------------------

struct ModelConfig {
  std::size_t vocab = 64;
  std::size_t d_model = 64;
  std::size_t d_k = 16;
  std::size_t v_expand = 2;
  std::size_t d_v = 0;  // 0 -> d_k * v_expand
  std::size_t n_layers = 2;
  std::size_t hidden_mult = 2;  // MLP width multiplier
  UpdateRule rule;
  double eps = 1e-6;       // write-coefficient stabilizer
  double norm_eps = 1e-6;  // RMS-norm stabilizer
  // Decay-gate bias init. 4.0 puts alpha near 0.98 at init so the state
  // retains information across the sequence from step one; a zero init
  // (alpha ~ 0.5) forgets within a couple of tokens and stalls recall tasks.
  double alpha_bias_init = 4.0;

  std::size_t dv() const { return d_v ? d_v : d_k * v_expand; }

  // Which gate projections the configured rule actually consumes.
  bool uses_alpha() const {
    return rule.rule == Rule::retnet_mamba2 || rule.rule == Rule::gla ||
           rule.rule == Rule::gdn || rule.rule == Rule::kla;
  }
  bool uses_eta() const {
    switch (rule.rule) {
      case Rule::linear_attention:
      case Rule::gla:
        return false;
      case Rule::retnet_mamba2:
        return true;
      default:  // delta rules: eta feeds the write coefficient only for these
        return rule.normalization == Normalization::kaczmarz ||
               rule.normalization == Normalization::none;
    }
  }

  void validate() const {
    rule.validate();
    if (vocab < 4) throw config_error("model: vocab must be >= 4");
    if (d_model == 0 || d_k == 0 || dv() == 0 || n_layers == 0 || hidden_mult == 0)
      throw config_error("model: dims and layer count must be positive");
    if (!(eps >= 0.0)) throw range_error("model: eps must be >= 0");
    if (!(norm_eps > 0.0)) throw range_error("model: norm_eps must be > 0");
    if (rule.gating == Gating::single_gate && !(uses_alpha() && uses_eta()))
      throw config_error("model: single-gate binding needs a rule using both gates");
  }
};

// Named parameter blocks in fixed order; the order defines the tape leaf
// order and the checkpoint layout.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Matrix> blocks;

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw config_error("param block not found: " + name);
  }
  Matrix& block(const std::string& name) { return blocks[index_of(name)]; }
  const Matrix& block(const std::string& name) const { return blocks[index_of(name)]; }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const Matrix& b : blocks) n += b.rows() * b.cols();
    return n;
  }
};

namespace detail {

struct BlockSpec {
  std::string name;
  std::size_t rows, cols;
};

inline std::vector<BlockSpec> block_specs(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, dk = cfg.d_k, dvv = cfg.dv();
  const std::size_t h = cfg.hidden_mult * d;
  std::vector<BlockSpec> out;
  out.push_back({"embed", cfg.vocab, d});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    out.push_back({p + "norm1.g", 1, d});
    out.push_back({p + "wk", d, dk});
    out.push_back({p + "wv", d, dvv});
    out.push_back({p + "wq", d, dk});
    if (cfg.rule.gating == Gating::single_gate) {
      out.push_back({p + "w_gate", d, 1});
      out.push_back({p + "b_gate", 1, 1});
    } else {
      if (cfg.uses_alpha()) {
        out.push_back({p + "w_alpha", d, 1});
        out.push_back({p + "b_alpha", 1, 1});
      }
      if (cfg.uses_eta()) {
        out.push_back({p + "w_eta", d, 1});
        out.push_back({p + "b_eta", 1, 1});
      }
    }
    if (cfg.rule.normalization == Normalization::learned_scalar)
      out.push_back({p + "c_write", 1, 1});
    out.push_back({p + "wo", dvv, d});
    out.push_back({p + "norm2.g", 1, d});
    out.push_back({p + "mlp.w1", d, h});
    out.push_back({p + "mlp.b1", 1, h});
    out.push_back({p + "mlp.w2", h, d});
    out.push_back({p + "mlp.b2", 1, d});
  }
  out.push_back({"final_norm.g", 1, d});
  out.push_back({"head.w", d, cfg.vocab});
  out.push_back({"head.b", 1, cfg.vocab});
  return out;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

// normal(0, 0.02) for projections/embeddings, ones for norm gains and the
// learned write scalar, zeros for biases except the decay-gate bias.
inline ParamSet init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamSet p;
  for (const auto& spec : detail::block_specs(cfg)) {
    Matrix m(spec.rows, spec.cols);
    if (detail::ends_with(spec.name, "norm1.g") || detail::ends_with(spec.name, "norm2.g") ||
        spec.name == "final_norm.g" || detail::ends_with(spec.name, "c_write")) {
      m.fill(1.0);
    } else if (detail::ends_with(spec.name, "b_alpha") || detail::ends_with(spec.name, "b_gate")) {
      m.fill(cfg.alpha_bias_init);
    } else if (detail::ends_with(spec.name, "b_eta") || detail::ends_with(spec.name, ".b1") ||
               detail::ends_with(spec.name, ".b2") || spec.name == "head.b") {
      m.fill(0.0);
    } else {
      m = rng.normal_matrix(spec.rows, spec.cols, 0.02);
    }
    p.names.push_back(spec.name);
    p.blocks.push_back(std::move(m));
  }
  return p;
}

// A built tape plus the handles needed to run it: parameter leaves (parallel
// to ParamSet order), the id gather, the logits node, and the loss node.
struct ModelHandles {
  Tape tape;
  std::vector<Tape::NodeId> param_leaves;
  std::vector<std::string> param_names;
  Tape::NodeId gather = -1;
  Tape::NodeId logits = -1;
  Tape::NodeId loss = -1;
  std::size_t seq_len = 0;

  void set_params(const ParamSet& p) {
    if (p.blocks.size() != param_leaves.size())
      throw shape_error("set_params: block count vs leaf count");
    for (std::size_t i = 0; i < p.blocks.size(); ++i)
      tape.set_leaf(param_leaves[i], p.blocks[i]);
  }
  void set_sample(const std::vector<std::int64_t>& input_ids,
                  const std::vector<std::int64_t>& target_ids,
                  const std::vector<std::uint8_t>& mask) {
    tape.set_gather_ids(gather, input_ids);
    tape.set_targets(loss, target_ids, mask);
  }
};

namespace detail {

// beta node for the delta-rule write, mirroring write_coefficient():
// normalization picks the base, longhorn transforms it, the sequence factor
// rescales it. t is the 1-based global position.
inline Tape::NodeId beta_node(Tape& tape, const ModelConfig& cfg, Tape::NodeId eta_t,
                              Tape::NodeId nk, Tape::NodeId one, Tape::NodeId c_write,
                              std::size_t t) {
  Tape::NodeId base;
  switch (cfg.rule.normalization) {
    case Normalization::kaczmarz:
      base = (cfg.rule.rule == Rule::kla) ? tape.div(eta_t, tape.add_const(nk, cfg.eps)) : eta_t;
      break;
    case Normalization::none:
      base = eta_t;
      break;
    case Normalization::key_norm_only:
      base = tape.div(one, tape.add_const(nk, cfg.eps));
      break;
    case Normalization::learned_scalar:
      base = c_write;
      break;
    default:
      base = eta_t;
  }
  if (cfg.rule.rule == Rule::longhorn)
    base = tape.div(base, tape.add_const(tape.mul(base, nk), 1.0));
  const double f = seq_factor_value<double>(cfg.rule.seq_factor, t);
  if (f != 1.0) base = tape.scale_const(base, f);
  return base;
}

}  // namespace detail

inline ModelHandles build_model_tape(const ModelConfig& cfg, std::size_t seq_len) {
  cfg.validate();
  if (seq_len == 0) throw config_error("model: sequence length must be positive");

  ModelHandles h;
  h.seq_len = seq_len;
  Tape& tp = h.tape;

  const auto specs = detail::block_specs(cfg);
  for (const auto& s : specs) {
    h.param_leaves.push_back(tp.leaf(s.rows, s.cols));
    h.param_names.push_back(s.name);
  }
  auto leaf_of = [&](const std::string& name) -> Tape::NodeId {
    for (std::size_t i = 0; i < h.param_names.size(); ++i)
      if (h.param_names[i] == name) return h.param_leaves[i];
    return -1;
  };

  // Non-trainable constants: scalar one (ablation numerator) and the zero
  // initial state shared by all layers.
  Tape::NodeId one = tp.leaf(1, 1);
  {
    Matrix m(1, 1);
    m(0, 0) = 1.0;
    tp.set_leaf(one, m);
  }
  Tape::NodeId s0 = tp.leaf(cfg.d_k, cfg.dv());
  tp.set_leaf(s0, Matrix(cfg.d_k, cfg.dv()));

  h.gather = tp.gather_rows(leaf_of("embed"), seq_len);
  Tape::NodeId x = h.gather;

  const bool use_alpha = cfg.uses_alpha();
  const bool use_eta = cfg.uses_eta();
  const bool decays = cfg.rule.rule == Rule::gdn || cfg.rule.rule == Rule::kla;

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    Tape::NodeId xn = tp.rms_norm(x, leaf_of(p + "norm1.g"), cfg.norm_eps);
    Tape::NodeId K = tp.matmul(xn, leaf_of(p + "wk"));
    Tape::NodeId V = tp.matmul(xn, leaf_of(p + "wv"));
    Tape::NodeId Q = tp.matmul(xn, leaf_of(p + "wq"));

    Tape::NodeId alpha_col = -1, eta_col = -1;
    if (cfg.rule.gating == Gating::single_gate) {
      Tape::NodeId g = tp.sigmoid(
          tp.add_rowvec(tp.matmul(xn, leaf_of(p + "w_gate")), leaf_of(p + "b_gate")));
      alpha_col = g;
      eta_col = tp.clamp_min(g, 1e-6);
    } else {
      if (use_alpha)
        alpha_col = tp.sigmoid(
            tp.add_rowvec(tp.matmul(xn, leaf_of(p + "w_alpha")), leaf_of(p + "b_alpha")));
      if (use_eta)
        eta_col = tp.clamp_min(
            tp.sigmoid(
                tp.add_rowvec(tp.matmul(xn, leaf_of(p + "w_eta")), leaf_of(p + "b_eta"))),
            1e-6);
    }
    Tape::NodeId c_write = (cfg.rule.normalization == Normalization::learned_scalar)
                               ? leaf_of(p + "c_write")
                               : -1;

    Tape::NodeId S = s0;
    std::vector<Tape::NodeId> out_rows;
    out_rows.reserve(seq_len);
    for (std::size_t t = 0; t < seq_len; ++t) {
      Tape::NodeId k = tp.slice_row(K, t);
      Tape::NodeId v = tp.slice_row(V, t);
      Tape::NodeId q = tp.slice_row(Q, t);
      Tape::NodeId a_t = use_alpha ? tp.slice_row(alpha_col, t) : -1;
      Tape::NodeId h_t = use_eta ? tp.slice_row(eta_col, t) : -1;

      switch (cfg.rule.rule) {
        case Rule::linear_attention:
          S = tp.add(S, tp.matmul_tn(k, v));
          break;
        case Rule::retnet_mamba2:
          S = tp.add(tp.scale_node(S, a_t), tp.scale_node(tp.matmul_tn(k, v), h_t));
          break;
        case Rule::gla:  // scalar decay broadcast over the diagonal
          S = tp.add(tp.scale_node(S, a_t), tp.matmul_tn(k, v));
          break;
        default: {  // delta rules
          Tape::NodeId Sd = decays ? tp.scale_node(S, a_t) : S;
          Tape::NodeId e = tp.sub(v, tp.matmul(k, Sd));
          Tape::NodeId nk = tp.norm_sq(k);
          Tape::NodeId beta = detail::beta_node(tp, cfg, h_t, nk, one, c_write, t + 1);
          S = tp.add(Sd, tp.matmul_tn(k, tp.scale_node(e, beta)));
          break;
        }
      }
      out_rows.push_back(
          tp.scale_node(tp.matmul(q, S), tp.rsqrt0(tp.norm_sq(q))));
    }
    Tape::NodeId O = tp.concat_rows(out_rows);
    Tape::NodeId y = tp.add(x, tp.matmul(O, leaf_of(p + "wo")));

    Tape::NodeId yn = tp.rms_norm(y, leaf_of(p + "norm2.g"), cfg.norm_eps);
    Tape::NodeId hidden = tp.silu(
        tp.add_rowvec(tp.matmul(yn, leaf_of(p + "mlp.w1")), leaf_of(p + "mlp.b1")));
    x = tp.add(y, tp.add_rowvec(tp.matmul(hidden, leaf_of(p + "mlp.w2")),
                                leaf_of(p + "mlp.b2")));
  }

  Tape::NodeId hn = tp.rms_norm(x, leaf_of("final_norm.g"), cfg.norm_eps);
  h.logits = tp.add_rowvec(tp.matmul(hn, leaf_of("head.w")), leaf_of("head.b"));
  h.loss = tp.cross_entropy(h.logits);
  return h;
}

// --- checkpoint format -------------------------------------------------------
//
// Bytes: "KLAC" | u32 version (=1) | u64 header length | header JSON (UTF-8)
// | per-block f64 payloads, little-endian, in header block order.

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

inline nlohmann::json model_config_json(const ModelConfig& cfg) {
  return nlohmann::json{{"vocab", cfg.vocab},
                        {"d_model", cfg.d_model},
                        {"d_k", cfg.d_k},
                        {"v_expand", cfg.v_expand},
                        {"d_v", cfg.d_v},
                        {"n_layers", cfg.n_layers},
                        {"hidden_mult", cfg.hidden_mult},
                        {"rule", rule_name(cfg.rule.rule)},
                        {"normalization", normalization_name(cfg.rule.normalization)},
                        {"gating", gating_name(cfg.rule.gating)},
                        {"seq_factor", seq_factor_name(cfg.rule.seq_factor)},
                        {"learned_scalar", cfg.rule.learned_scalar},
                        {"eps", cfg.eps},
                        {"norm_eps", cfg.norm_eps},
                        {"alpha_bias_init", cfg.alpha_bias_init}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.vocab = j.at("vocab").get<std::size_t>();
  cfg.d_model = j.at("d_model").get<std::size_t>();
  cfg.d_k = j.at("d_k").get<std::size_t>();
  cfg.v_expand = j.at("v_expand").get<std::size_t>();
  cfg.d_v = j.at("d_v").get<std::size_t>();
  cfg.n_layers = j.at("n_layers").get<std::size_t>();
  cfg.hidden_mult = j.at("hidden_mult").get<std::size_t>();
  cfg.rule.rule = rule_from_name(j.at("rule").get<std::string>());
  cfg.rule.normalization = normalization_from_name(j.at("normalization").get<std::string>());
  cfg.rule.gating = gating_from_name(j.at("gating").get<std::string>());
  cfg.rule.seq_factor = seq_factor_from_name(j.at("seq_factor").get<std::string>());
  cfg.rule.learned_scalar = j.at("learned_scalar").get<double>();
  cfg.eps = j.at("eps").get<double>();
  cfg.norm_eps = j.at("norm_eps").get<double>();
  cfg.alpha_bias_init = j.at("alpha_bias_init").get<double>();
  return cfg;
}

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                            const ParamSet& params) {
  nlohmann::json header;
  header["config"] = model_config_json(cfg);
  header["blocks"] = nlohmann::json::array();
  for (std::size_t i = 0; i < params.blocks.size(); ++i)
    header["blocks"].push_back({{"name", params.names[i]},
                                {"rows", params.blocks[i].rows()},
                                {"cols", params.blocks[i].cols()}});
  const std::string head = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot open checkpoint for writing: " + path);
  out.write("KLAC", 4);
  const std::uint32_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  const std::uint64_t hlen = head.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const Matrix& b : params.blocks)
    out.write(reinterpret_cast<const char*>(b.data()),
              static_cast<std::streamsize>(b.rows() * b.cols() * sizeof(double)));
  if (!out) throw config_error("checkpoint write failed: " + path);
}

inline std::pair<ModelConfig, ParamSet> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "KLAC")
    throw structural_error("checkpoint: bad magic in " + path);
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (!in || version != 1) throw structural_error("checkpoint: unsupported version");
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  if (!in || hlen == 0 || hlen > (1u << 20)) throw structural_error("checkpoint: bad header length");
  std::string head(hlen, '\0');
  in.read(head.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw structural_error("checkpoint: truncated header");

  nlohmann::json header = nlohmann::json::parse(head);
  ModelConfig cfg = model_config_from_json(header.at("config"));

  ParamSet params;
  for (const auto& b : header.at("blocks")) {
    const std::size_t rows = b.at("rows").get<std::size_t>();
    const std::size_t cols = b.at("cols").get<std::size_t>();
    Matrix m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(rows * cols * sizeof(double)));
    if (!in) throw structural_error("checkpoint: truncated block payload");
    params.names.push_back(b.at("name").get<std::string>());
    params.blocks.push_back(std::move(m));
  }

  // Shape cross-check against the config-derived layout.
  const auto specs = detail::block_specs(cfg);
  if (specs.size() != params.blocks.size())
    throw structural_error("checkpoint: block count does not match config");
  for (std::size_t i = 0; i < specs.size(); ++i)
    if (specs[i].name != params.names[i] || specs[i].rows != params.blocks[i].rows() ||
        specs[i].cols != params.blocks[i].cols())
      throw structural_error("checkpoint: block mismatch at " + specs[i].name);
  return {cfg, params};
}

}  // namespace kla
