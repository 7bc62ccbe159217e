#pragma once

// Synthetic task generators, JSONL dataset IO, and exact-match evaluation.
//
// Token conventions (shared by all four tasks):
//   PAD = 0, SEP = 1. Targets at unscored positions are PAD with mask 0.
//   mqar        keys in [2, vocab/2), values in [vocab/2, vocab)
//               layout: k1 v1 ... kP vP, PAD fill, SEP, then queried keys;
//               the target at each query position is that key's value.
//   sniah       needle key in [2, vocab/4), value in [vocab/4, vocab/2),
//               distractors in [vocab/2, 3*vocab/4) — disjoint ranges, so
//               the needle is identifiable; layout: distractors with the
//               (key, value) pair planted at a random position, SEP, key;
//               the single scored target is the value at the final position.
//   palindrome  symbols in [2, vocab); layout: t_1..t_n, SEP, t_n..t_1;
//               scored targets start after the first echoed token (the
//               position holding reversed token i predicts reversed i+1).
//   stack       PUSH = 2, POP = 3, stack ids in [4, 4+num_stacks), values
//               in [vocab/2, vocab); a push is the three tokens
//               [PUSH, id, value], a pop the two tokens [POP, id] with the
//               popped value scored on the id position. The generator never
//               pops an empty stack and always emits at least one pop.
//
// Every sample i of a generation call is drawn from an independent derived
// stream (seed, i), so datasets are reproducible and order-independent.
// Extrapolation factors scale only the sequence length.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kla/errors.hpp"
#include "kla/rng.hpp"

namespace kla {

constexpr std::int64_t kPad = 0;
constexpr std::int64_t kSep = 1;

struct TaskSample {
  std::vector<std::int64_t> input_ids;
  std::vector<std::int64_t> target_ids;
  std::vector<std::uint8_t> loss_mask;  // 1 where the target is scored

  std::size_t length() const { return input_ids.size(); }
};

enum class TaskKind { mqar, sniah, palindrome, stack };

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::mqar: return "mqar";
    case TaskKind::sniah: return "sniah";
    case TaskKind::palindrome: return "palindrome";
    case TaskKind::stack: return "stack";
  }
  return "mqar";
}

inline TaskKind task_from_name(const std::string& s) {
  if (s == "mqar") return TaskKind::mqar;
  if (s == "sniah") return TaskKind::sniah;
  if (s == "palindrome") return TaskKind::palindrome;
  if (s == "stack") return TaskKind::stack;
  throw config_error("unknown task: " + s);
}

struct TaskConfig {
  TaskKind kind = TaskKind::mqar;
  std::size_t vocab = 64;
  std::size_t length = 64;      // base length; training always uses factor 1
  std::size_t num_pairs = 8;    // mqar
  std::size_t num_queries = 8;  // mqar
  std::size_t num_stacks = 2;   // stack
  std::size_t extrap = 1;       // length multiplier in {1, 2, 4, 8}

  std::size_t eff_length() const { return length * extrap; }

  void validate() const {
    if (vocab < 8) throw config_error("task: vocab must be >= 8");
    if (extrap != 1 && extrap != 2 && extrap != 4 && extrap != 8)
      throw config_error("task: extrapolation factor must be one of {1,2,4,8}");
    const std::size_t L = eff_length();
    switch (kind) {
      case TaskKind::mqar: {
        const std::size_t key_space = vocab / 2 - 2;
        if (num_pairs == 0 || num_pairs > key_space)
          throw config_error("mqar: need 1 <= num_pairs <= vocab/2 - 2");
        if (num_queries == 0 || num_queries > num_pairs)
          throw config_error("mqar: need 1 <= num_queries <= num_pairs");
        if (2 * num_pairs + 1 + num_queries > L)
          throw config_error("mqar: 2*pairs + sep + queries exceeds length");
        break;
      }
      case TaskKind::sniah:
        if (vocab < 16) throw config_error("sniah: vocab must be >= 16");
        if (L < 4) throw config_error("sniah: length must be >= 4");
        break;
      case TaskKind::palindrome:
        if (L < 3 || L % 2 == 0)
          throw config_error("palindrome: length must be odd and >= 3");
        break;
      case TaskKind::stack:
        if (L < 5) throw config_error("stack: length must be >= 5");
        if (num_stacks == 0 || num_stacks + 4 > vocab / 2)
          throw config_error("stack: need 1 <= num_stacks <= vocab/2 - 4");
        break;
    }
  }
};

namespace detail {

inline TaskSample blank_sample(std::size_t len) {
  TaskSample s;
  s.input_ids.assign(len, kPad);
  s.target_ids.assign(len, kPad);
  s.loss_mask.assign(len, 0);
  return s;
}

inline std::int64_t value_token(const TaskConfig& cfg, Rng& r) {
  const int lo = static_cast<int>(cfg.vocab / 2);
  return lo + r.uniform_int(static_cast<int>(cfg.vocab) - lo);
}

inline TaskSample mqar_sample(const TaskConfig& cfg, Rng& r) {
  const std::size_t L = cfg.eff_length();
  TaskSample s = blank_sample(L);
  const int key_space = static_cast<int>(cfg.vocab / 2 - 2);
  const std::vector<int> key_idx =
      r.sample_without_replacement(key_space, static_cast<int>(cfg.num_pairs));
  std::vector<std::int64_t> keys(cfg.num_pairs), vals(cfg.num_pairs);
  for (std::size_t i = 0; i < cfg.num_pairs; ++i) {
    keys[i] = 2 + key_idx[i];
    vals[i] = value_token(cfg, r);
    s.input_ids[2 * i] = keys[i];
    s.input_ids[2 * i + 1] = vals[i];
  }
  const std::size_t sep_pos = L - cfg.num_queries - 1;
  s.input_ids[sep_pos] = kSep;
  const std::vector<int> queried = r.sample_without_replacement(
      static_cast<int>(cfg.num_pairs), static_cast<int>(cfg.num_queries));
  for (std::size_t j = 0; j < cfg.num_queries; ++j) {
    const std::size_t pos = sep_pos + 1 + j;
    s.input_ids[pos] = keys[static_cast<std::size_t>(queried[j])];
    s.target_ids[pos] = vals[static_cast<std::size_t>(queried[j])];
    s.loss_mask[pos] = 1;
  }
  return s;
}

inline TaskSample sniah_sample(const TaskConfig& cfg, Rng& r) {
  const std::size_t L = cfg.eff_length();
  TaskSample s = blank_sample(L);
  const int quarter = static_cast<int>(cfg.vocab / 4);
  const std::int64_t key = 2 + r.uniform_int(quarter - 2);
  const std::int64_t val = quarter + r.uniform_int(quarter);
  const int distractor_lo = 2 * quarter;
  for (std::size_t p = 0; p + 2 < L; ++p)
    s.input_ids[p] = distractor_lo + r.uniform_int(quarter);
  const std::size_t needle = static_cast<std::size_t>(r.uniform_int(static_cast<int>(L) - 3));
  s.input_ids[needle] = key;
  s.input_ids[needle + 1] = val;
  s.input_ids[L - 2] = kSep;
  s.input_ids[L - 1] = key;
  s.target_ids[L - 1] = val;
  s.loss_mask[L - 1] = 1;
  return s;
}

inline TaskSample palindrome_sample(const TaskConfig& cfg, Rng& r) {
  const std::size_t L = cfg.eff_length();
  const std::size_t n = (L - 1) / 2;
  TaskSample s = blank_sample(L);
  for (std::size_t i = 0; i < n; ++i)
    s.input_ids[i] = 2 + r.uniform_int(static_cast<int>(cfg.vocab) - 2);
  s.input_ids[n] = kSep;
  for (std::size_t i = 0; i < n; ++i) s.input_ids[n + 1 + i] = s.input_ids[n - 1 - i];
  // Position holding reversed token i predicts reversed token i+1; the first
  // echoed token itself is unscored.
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const std::size_t pos = n + 1 + i;
    s.target_ids[pos] = s.input_ids[pos + 1];
    s.loss_mask[pos] = 1;
  }
  return s;
}

inline TaskSample stack_sample(const TaskConfig& cfg, Rng& r) {
  const std::size_t L = cfg.eff_length();
  TaskSample s = blank_sample(L);
  std::vector<std::vector<std::int64_t>> stacks(cfg.num_stacks);
  std::size_t pos = 0, pops = 0;
  while (true) {
    const std::size_t remaining = L - pos;
    std::size_t nonempty = 0;
    for (const auto& st : stacks) nonempty += st.empty() ? 0 : 1;
    const bool can_push = remaining >= 3;
    const bool can_pop = remaining >= 2 && nonempty > 0;
    if (!can_push && !can_pop) break;
    bool do_pop;
    if (!can_pop) do_pop = false;
    else if (!can_push) do_pop = true;
    else if (pops == 0 && remaining <= 5) do_pop = true;  // guarantee a scored pop
    else do_pop = r.uniform() < 0.4;
    if (do_pop) {
      int pick = r.uniform_int(static_cast<int>(nonempty));
      std::size_t sid = 0;
      for (std::size_t i = 0; i < stacks.size(); ++i) {
        if (stacks[i].empty()) continue;
        if (pick-- == 0) { sid = i; break; }
      }
      s.input_ids[pos] = 3;  // POP
      s.input_ids[pos + 1] = 4 + static_cast<std::int64_t>(sid);
      s.target_ids[pos + 1] = stacks[sid].back();
      s.loss_mask[pos + 1] = 1;
      stacks[sid].pop_back();
      pos += 2;
      ++pops;
    } else {
      const std::size_t sid = static_cast<std::size_t>(r.uniform_int(static_cast<int>(cfg.num_stacks)));
      const std::int64_t val = value_token(cfg, r);
      s.input_ids[pos] = 2;  // PUSH
      s.input_ids[pos + 1] = 4 + static_cast<std::int64_t>(sid);
      s.input_ids[pos + 2] = val;
      stacks[sid].push_back(val);
      pos += 3;
    }
  }
  return s;
}

}  // namespace detail

inline TaskSample gen_sample(const TaskConfig& cfg, Rng& r) {
  switch (cfg.kind) {
    case TaskKind::mqar: return detail::mqar_sample(cfg, r);
    case TaskKind::sniah: return detail::sniah_sample(cfg, r);
    case TaskKind::palindrome: return detail::palindrome_sample(cfg, r);
    case TaskKind::stack: return detail::stack_sample(cfg, r);
  }
  throw config_error("gen_sample: unknown task kind");
}

inline std::vector<TaskSample> gen_task(const TaskConfig& cfg, std::uint64_t seed,
                                        std::size_t count) {
  cfg.validate();
  const Rng root(seed);
  std::vector<TaskSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng r = root.derive(i);
    out.push_back(gen_sample(cfg, r));
  }
  return out;
}

// --- exact-match evaluation --------------------------------------------------

// fn(sample) must return one predicted token id per position; accuracy is
// counted over masked positions only.
template <typename PredictFn>
double evaluate(PredictFn&& fn, const std::vector<TaskSample>& dataset) {
  std::size_t total = 0, correct = 0;
  for (const TaskSample& s : dataset) {
    const std::vector<std::int64_t> preds = fn(s);
    if (preds.size() != s.length())
      throw shape_error("evaluate: prediction length vs sample length");
    for (std::size_t i = 0; i < s.length(); ++i) {
      if (!s.loss_mask[i]) continue;
      ++total;
      if (preds[i] == s.target_ids[i]) ++correct;
    }
  }
  if (total == 0) throw range_error("evaluate: no scored positions in dataset");
  return static_cast<double>(correct) / static_cast<double>(total);
}

// --- JSONL + manifest IO ------------------------------------------------------

inline void write_jsonl(const std::string& path, const std::vector<TaskSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot open dataset for writing: " + path);
  for (const TaskSample& s : samples) {
    nlohmann::json j;
    j["input_ids"] = s.input_ids;
    j["target_ids"] = s.target_ids;
    j["loss_mask"] = std::vector<int>(s.loss_mask.begin(), s.loss_mask.end());
    out << j.dump() << '\n';
  }
  if (!out) throw config_error("dataset write failed: " + path);
}

inline std::vector<TaskSample> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot open dataset: " + path);
  std::vector<TaskSample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    TaskSample s;
    s.input_ids = j.at("input_ids").get<std::vector<std::int64_t>>();
    s.target_ids = j.at("target_ids").get<std::vector<std::int64_t>>();
    for (int m : j.at("loss_mask").get<std::vector<int>>())
      s.loss_mask.push_back(static_cast<std::uint8_t>(m != 0));
    if (s.target_ids.size() != s.input_ids.size() || s.loss_mask.size() != s.input_ids.size())
      throw structural_error("dataset line with inconsistent lengths in " + path);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string file_hash_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot hash missing file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  std::ostringstream hex;
  hex << std::hex << fnv1a64(ss.str());
  return hex.str();
}

inline nlohmann::json task_config_json(const TaskConfig& cfg) {
  return nlohmann::json{{"task", task_name(cfg.kind)},
                        {"vocab", cfg.vocab},
                        {"length", cfg.length},
                        {"num_pairs", cfg.num_pairs},
                        {"num_queries", cfg.num_queries},
                        {"num_stacks", cfg.num_stacks},
                        {"extrap", cfg.extrap}};
}

inline TaskConfig task_config_from_json(const nlohmann::json& j) {
  TaskConfig cfg;
  cfg.kind = task_from_name(j.at("task").get<std::string>());
  cfg.vocab = j.at("vocab").get<std::size_t>();
  cfg.length = j.at("length").get<std::size_t>();
  cfg.num_pairs = j.at("num_pairs").get<std::size_t>();
  cfg.num_queries = j.at("num_queries").get<std::size_t>();
  cfg.num_stacks = j.at("num_stacks").get<std::size_t>();
  cfg.extrap = j.at("extrap").get<std::size_t>();
  return cfg;
}

struct SplitSpec {
  std::string name;
  std::size_t count;
};

// Seed for split index i (train=0, val=1, test=2) of a dataset-level seed.
// Shared by file generation and in-memory generation so both agree.
inline std::uint64_t split_seed(std::uint64_t seed, std::size_t index) {
  return splitmix64(seed ^ splitmix64(0xD15EA5E + index));
}

// Writes {stem}_{split}.jsonl per split plus {stem}_manifest.json recording
// config, seed, counts, and content hashes. Split i draws from an
// independent derived seed so splits never overlap sample streams.
inline std::string write_dataset(const std::string& dir, const std::string& stem,
                                 const TaskConfig& cfg, std::uint64_t seed,
                                 const std::vector<SplitSpec>& splits) {
  cfg.validate();
  nlohmann::json manifest;
  manifest["config"] = task_config_json(cfg);
  manifest["seed"] = seed;
  manifest["splits"] = nlohmann::json::array();
  for (std::size_t i = 0; i < splits.size(); ++i) {
    const std::uint64_t sseed = split_seed(seed, i);
    const auto samples = gen_task(cfg, sseed, splits[i].count);
    const std::string file = stem + "_" + splits[i].name + ".jsonl";
    write_jsonl(dir + "/" + file, samples);
    manifest["splits"].push_back({{"name", splits[i].name},
                                  {"file", file},
                                  {"count", splits[i].count},
                                  {"seed", sseed},
                                  {"fnv1a64", file_hash_hex(dir + "/" + file)}});
  }
  manifest["notes"] = {
      "sniah distractor distribution and prompt format are reconstructions",
      "stack pop encoding (POP marker, id; target on the id token) is a reconstruction",
      "palindrome scoring starts after the first echoed token"};
  const std::string mpath = dir + "/" + stem + "_manifest.json";
  std::ofstream out(mpath, std::ios::binary);
  if (!out) throw config_error("cannot open manifest for writing: " + mpath);
  out << manifest.dump(2) << '\n';
  return mpath;
}

}  // namespace kla
