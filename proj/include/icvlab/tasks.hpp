#pragma once

// Synthetic task families and episode rendering.
//
// simple_mapping: a family of substitution ciphers. Cipher t maps each input
// symbol through its own permutation into its own answer alphabet. An episode
// fixes one cipher; the base model sees all ciphers during pretraining and
// must read the active one off the demonstrations.
//
// mixed_vqa: a symbolic "scene" plus a question (IDENT / COUNT / EXIST /
// MAJORITY). Answers come from disjoint spaces (symbols, digits, yes/no),
// and each space exists in several surface formats. A task instance fixes
// one format per subtask; demonstrations reveal the format only for the
// subtasks they happen to contain.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "icvlab/seed.hpp"

namespace icvlab {

namespace tok {
inline constexpr int kBos = 0;
inline constexpr int kQ = 1;
inline constexpr int kA = 2;
inline constexpr int kSep = 3;
inline constexpr int kFirstFree = 4;
}  // namespace tok

enum class TaskKind { kSimpleMapping, kMixedVqa };

enum class Subtask : int { kIdent = 0, kCount = 1, kExist = 2, kMajority = 3 };
inline constexpr int kNumSubtasks = 4;

/// Answer categories used by the bias report.
enum class AnswerCategory : int { kSymbol = 0, kNumber = 1, kYesNo = 2 };
inline constexpr int kNumCategories = 3;

inline const char* to_string(TaskKind k) { return k == TaskKind::kSimpleMapping ? "simple_mapping" : "mixed_vqa"; }

inline const char* to_string(Subtask s) {
  switch (s) {
    case Subtask::kIdent:
      return "IDENT";
    case Subtask::kCount:
      return "COUNT";
    case Subtask::kExist:
      return "EXIST";
    case Subtask::kMajority:
      return "MAJORITY";
  }
  return "?";
}

inline const char* to_string(AnswerCategory c) {
  switch (c) {
    case AnswerCategory::kSymbol:
      return "symbol";
    case AnswerCategory::kNumber:
      return "number";
    case AnswerCategory::kYesNo:
      return "yes_no";
  }
  return "?";
}

inline Subtask subtask_from_string(const std::string& s) {
  for (int i = 0; i < kNumSubtasks; ++i)
    if (s == to_string(static_cast<Subtask>(i))) return static_cast<Subtask>(i);
  throw std::invalid_argument("unknown subtask '" + s + "'");
}

inline AnswerCategory category_of(Subtask s) {
  switch (s) {
    case Subtask::kIdent:
    case Subtask::kMajority:
      return AnswerCategory::kSymbol;
    case Subtask::kCount:
      return AnswerCategory::kNumber;
    case Subtask::kExist:
      return AnswerCategory::kYesNo;
  }
  return AnswerCategory::kSymbol;
}

struct TaskSpec {
  TaskKind kind = TaskKind::kSimpleMapping;
  int n_symbols = 12;     // simple: cipher alphabet; mixed: scene alphabet
  int input_len = 3;      // simple only
  int family_size = 8;    // simple: number of ciphers; mixed: formats per answer space
  int instance = 0;       // which cipher / format assignment the dataset uses
  int scene_len = 9;      // mixed only
  bool shared_format = false;  // mixed: one format for every subtask of an instance
  std::vector<Subtask> subtasks{Subtask::kIdent, Subtask::kCount, Subtask::kExist, Subtask::kMajority};
  int train_size = 1200;
  int eval_size = 300;
  std::uint64_t mapping_seed = 7;  // fixes the cipher family

  // ---- vocabulary layout -------------------------------------------------
  // simple: [ctrl 4][inputs n][answers family*n]
  // mixed:  [ctrl 4][subtask 4][scene symbols n][index scene_len]
  //         [symbol answers family*n][digits family*10][yes/no family*2]
  int input_base() const { return kind == TaskKind::kSimpleMapping ? tok::kFirstFree : tok::kFirstFree + kNumSubtasks; }
  int subtask_token(Subtask s) const { return tok::kFirstFree + static_cast<int>(s); }
  int symbol_token(int s) const { return input_base() + s; }
  int index_token(int i) const { return input_base() + n_symbols + i; }
  int simple_answer_token(int family, int s) const { return tok::kFirstFree + n_symbols + family * n_symbols + s; }
  int symbol_answer_base() const { return index_token(0) + scene_len; }
  int symbol_answer_token(int format, int s) const { return symbol_answer_base() + format * n_symbols + s; }
  int digit_base() const { return symbol_answer_base() + family_size * n_symbols; }
  int digit_token(int format, int v) const { return digit_base() + format * 10 + v; }
  int yesno_base() const { return digit_base() + family_size * 10; }
  int yesno_token(int format, bool yes) const { return yesno_base() + format * 2 + (yes ? 0 : 1); }

  int vocab_used() const {
    if (kind == TaskKind::kSimpleMapping) return tok::kFirstFree + n_symbols + family_size * n_symbols;
    return yesno_base() + family_size * 2;
  }

  /// Format of each subtask under an instance id (base-family digits).
  std::array<int, kNumSubtasks> formats_of(int inst) const {
    std::array<int, kNumSubtasks> f{};
    if (shared_format) {
      f.fill(inst % family_size);
      return f;
    }
    for (int s = 0; s < kNumSubtasks; ++s) {
      f[static_cast<std::size_t>(s)] = inst % family_size;
      inst /= family_size;
    }
    return f;
  }

  int instance_count() const {
    if (kind == TaskKind::kSimpleMapping || shared_format) return family_size;
    int n = 1;
    for (int s = 0; s < kNumSubtasks; ++s) n *= family_size;
    return n;
  }

  /// Category of an emitted token, or nullopt if it lies outside every answer space.
  std::optional<AnswerCategory> category_of_token(int t) const {
    if (kind == TaskKind::kSimpleMapping) {
      if (t >= simple_answer_token(0, 0) && t < vocab_used()) return AnswerCategory::kSymbol;
      return std::nullopt;
    }
    if (t >= symbol_answer_base() && t < digit_base()) return AnswerCategory::kSymbol;
    if (t >= digit_base() && t < yesno_base()) return AnswerCategory::kNumber;
    if (t >= yesno_base() && t < yesno_base() + family_size * 2) return AnswerCategory::kYesNo;
    return std::nullopt;
  }

  void validate(int vocab_size) const {
    if (n_symbols < 2) throw std::invalid_argument("task.n_symbols must be >= 2");
    if (family_size < 1) throw std::invalid_argument("task.family_size must be >= 1");
    if (instance < 0 || instance >= instance_count()) {
      throw std::invalid_argument("task.instance " + std::to_string(instance) + " outside [0, " +
                                  std::to_string(instance_count()) + ")");
    }
    if (train_size < 1 || eval_size < 1) throw std::invalid_argument("task.train_size and task.eval_size must be positive");
    if (kind == TaskKind::kSimpleMapping) {
      if (input_len < 1) throw std::invalid_argument("task.input_len must be >= 1");
      double domain = std::pow(static_cast<double>(n_symbols), input_len);
      if (static_cast<double>(train_size) + eval_size > domain) {
        throw std::invalid_argument("task: train_size + eval_size exceeds the " + std::to_string(static_cast<long long>(domain)) +
                                    " distinct inputs");
      }
    } else {
      if (scene_len < 1) throw std::invalid_argument("task.scene_len must be >= 1");
      if (scene_len > 9) {
        throw std::invalid_argument("task.scene_len " + std::to_string(scene_len) + " exceeds the digit answer range 0-9");
      }
      if (subtasks.empty()) throw std::invalid_argument("task.subtasks must be nonempty");
    }
    if (vocab_used() > vocab_size) {
      throw std::invalid_argument("task needs " + std::to_string(vocab_used()) + " tokens but vocab_size is " +
                                  std::to_string(vocab_size));
    }
  }
};

struct Pair {
  std::vector<int> input;
  std::vector<int> answer;
  int subtask = -1;  // mixed only
  int instance = 0;

  bool operator==(const Pair&) const = default;
};

struct Episode {
  std::vector<Pair> demos;
  Pair query;
  int task_id = 0;
  std::uint64_t seed = 0;
};

struct Dataset {
  TaskSpec spec;
  std::vector<Pair> train;
  std::vector<Pair> eval;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Task definitions (the stored-mapping ground truth).

/// Cipher table for family member t: symbol index -> symbol index.
inline std::vector<std::vector<int>> cipher_family(const TaskSpec& spec) {
  std::mt19937_64 rng(derive_seed(spec.mapping_seed, "cipher-family"));
  std::vector<std::vector<int>> fam;
  for (int t = 0; t < spec.family_size; ++t) {
    std::vector<int> perm(static_cast<std::size_t>(spec.n_symbols));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    fam.push_back(std::move(perm));
  }
  return fam;
}

/// Answer of a mixed query from its scene content, in instance-neutral form:
/// returns (category, value) where value is a symbol index, a count, or 1/0.
inline std::pair<AnswerCategory, int> interpret_scene(std::span<const int> scene_symbols, Subtask s, int arg) {
  switch (s) {
    case Subtask::kIdent:
      return {AnswerCategory::kSymbol, scene_symbols[static_cast<std::size_t>(arg)]};
    case Subtask::kCount:
      return {AnswerCategory::kNumber, static_cast<int>(std::count(scene_symbols.begin(), scene_symbols.end(), arg))};
    case Subtask::kExist:
      return {AnswerCategory::kYesNo,
              std::find(scene_symbols.begin(), scene_symbols.end(), arg) != scene_symbols.end() ? 1 : 0};
    case Subtask::kMajority: {
      std::vector<int> counts(64, 0);
      for (int x : scene_symbols) ++counts[static_cast<std::size_t>(x)];
      return {AnswerCategory::kSymbol, static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin())};
    }
  }
  return {AnswerCategory::kSymbol, 0};
}

namespace detail {

inline Pair make_simple_pair(const TaskSpec& spec, const std::vector<std::vector<int>>& fam, int family,
                             std::span<const int> symbols) {
  Pair p;
  p.instance = family;
  for (int s : symbols) {
    p.input.push_back(spec.symbol_token(s));
    p.answer.push_back(
        spec.simple_answer_token(family, fam[static_cast<std::size_t>(family)][static_cast<std::size_t>(s)]));
  }
  return p;
}

inline Pair make_mixed_pair(const TaskSpec& spec, int instance, std::mt19937_64& rng, std::span<const Subtask> allowed) {
  const auto formats = spec.formats_of(instance);
  std::uniform_int_distribution<int> pick_sub(0, static_cast<int>(allowed.size()) - 1);
  std::uniform_int_distribution<int> pick_sym(0, spec.n_symbols - 1);
  const Subtask sub = allowed[static_cast<std::size_t>(pick_sub(rng))];
  std::vector<int> scene(static_cast<std::size_t>(spec.scene_len));
  int arg = -1;
  for (;;) {
    for (auto& x : scene) x = pick_sym(rng);
    if (sub == Subtask::kMajority) {
      std::vector<int> counts(static_cast<std::size_t>(spec.n_symbols), 0);
      for (int x : scene) ++counts[static_cast<std::size_t>(x)];
      const int top = *std::max_element(counts.begin(), counts.end());
      if (std::count(counts.begin(), counts.end(), top) != 1) continue;  // unique majority only
    }
    break;
  }
  switch (sub) {
    case Subtask::kIdent:
      arg = std::uniform_int_distribution<int>(0, spec.scene_len - 1)(rng);
      break;
    case Subtask::kCount:
      // Half the time ask about a symbol that is present.
      arg = std::bernoulli_distribution(0.5)(rng) ? scene[static_cast<std::size_t>(
                                                        std::uniform_int_distribution<int>(0, spec.scene_len - 1)(rng))]
                                                  : pick_sym(rng);
      break;
    case Subtask::kExist:
      if (std::bernoulli_distribution(0.5)(rng)) {
        arg = scene[static_cast<std::size_t>(std::uniform_int_distribution<int>(0, spec.scene_len - 1)(rng))];
      } else {
        std::vector<int> absent;
        for (int s = 0; s < spec.n_symbols; ++s)
          if (std::find(scene.begin(), scene.end(), s) == scene.end()) absent.push_back(s);
        arg = absent.empty() ? pick_sym(rng)
                             : absent[static_cast<std::size_t>(
                                   std::uniform_int_distribution<int>(0, static_cast<int>(absent.size()) - 1)(rng))];
      }
      break;
    case Subtask::kMajority:
      break;
  }

  Pair p;
  p.instance = instance;
  p.subtask = static_cast<int>(sub);
  for (int x : scene) p.input.push_back(spec.symbol_token(x));
  if (sub == Subtask::kIdent) p.input.push_back(spec.index_token(arg));
  if (sub == Subtask::kCount || sub == Subtask::kExist) p.input.push_back(spec.symbol_token(arg));
  p.input.push_back(spec.subtask_token(sub));  // adjacent to the answer marker

  const auto [cat, value] = interpret_scene(scene, sub, arg);
  const int fmt = formats[static_cast<std::size_t>(sub)];
  switch (cat) {
    case AnswerCategory::kSymbol:
      p.answer.push_back(spec.symbol_answer_token(fmt, value));
      break;
    case AnswerCategory::kNumber:
      p.answer.push_back(spec.digit_token(fmt, value));
      break;
    case AnswerCategory::kYesNo:
      p.answer.push_back(spec.yesno_token(fmt, value == 1));
      break;
  }
  return p;
}

inline std::uint64_t hash_tokens(std::span<const int> v) {
  std::uint64_t h = 1469598103934665603ULL;
  for (int x : v) {
    h ^= static_cast<std::uint64_t>(x) + 0x9e3779b97f4a7c15ULL;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

/// Key identifying a pair's input content, for leakage checks.
inline std::uint64_t input_key(const Pair& p) { return detail::hash_tokens(p.input); }

// ---------------------------------------------------------------------------
// Generators.

/// Simple cipher dataset for instance `spec.instance`; train and eval inputs
/// are distinct.
inline Dataset gen_simple(const TaskSpec& spec, std::uint64_t seed) {
  if (spec.kind != TaskKind::kSimpleMapping) throw std::invalid_argument("gen_simple: task kind must be simple_mapping");
  spec.validate(std::numeric_limits<int>::max());
  const auto fam = cipher_family(spec);
  std::mt19937_64 rng(derive_seed(seed, "gen-simple"));
  std::uniform_int_distribution<int> pick(0, spec.n_symbols - 1);
  std::unordered_set<std::uint64_t> seen;
  Dataset ds;
  ds.spec = spec;
  ds.seed = seed;
  const int total = spec.train_size + spec.eval_size;
  std::vector<int> sym(static_cast<std::size_t>(spec.input_len));
  while (static_cast<int>(ds.train.size() + ds.eval.size()) < total) {
    for (auto& s : sym) s = pick(rng);
    Pair p = detail::make_simple_pair(spec, fam, spec.instance, sym);
    if (!seen.insert(input_key(p)).second) continue;
    if (static_cast<int>(ds.eval.size()) < spec.eval_size) {
      ds.eval.push_back(std::move(p));
    } else {
      ds.train.push_back(std::move(p));
    }
  }
  return ds;
}

/// Mixed scene-question dataset for instance `spec.instance`.
inline Dataset gen_mixed(const TaskSpec& spec, std::uint64_t seed) {
  if (spec.kind != TaskKind::kMixedVqa) throw std::invalid_argument("gen_mixed: task kind must be mixed_vqa");
  spec.validate(std::numeric_limits<int>::max());
  std::mt19937_64 rng(derive_seed(seed, "gen-mixed"));
  std::unordered_set<std::uint64_t> seen;
  Dataset ds;
  ds.spec = spec;
  ds.seed = seed;
  const int total = spec.train_size + spec.eval_size;
  int attempts = 0;
  while (static_cast<int>(ds.train.size() + ds.eval.size()) < total) {
    if (++attempts > total * 100) throw std::runtime_error("gen_mixed: could not draw enough distinct pairs");
    Pair p = detail::make_mixed_pair(spec, spec.instance, rng, spec.subtasks);
    if (!seen.insert(input_key(p)).second) continue;
    if (static_cast<int>(ds.eval.size()) < spec.eval_size) {
      ds.eval.push_back(std::move(p));
    } else {
      ds.train.push_back(std::move(p));
    }
  }
  return ds;
}

inline Dataset generate_dataset(const TaskSpec& spec, std::uint64_t seed) {
  return spec.kind == TaskKind::kSimpleMapping ? gen_simple(spec, seed) : gen_mixed(spec, seed);
}

/// Pretraining episodes over random task instances, each with a demo count
/// drawn uniformly from [k_min, k_max]. Inputs listed in `excluded` (eval
/// inputs) never appear.
class EpisodeStream {
 public:
  EpisodeStream(TaskSpec spec, std::uint64_t seed, int k_min, int k_max, std::unordered_set<std::uint64_t> excluded = {})
      : spec_(std::move(spec)),
        rng_(derive_seed(seed, "episode-stream")),
        k_min_(k_min),
        k_max_(k_max),
        excluded_(std::move(excluded)) {
    if (k_min < 0 || k_max < k_min) throw std::invalid_argument("EpisodeStream: need 0 <= k_min <= k_max");
    if (spec_.kind == TaskKind::kSimpleMapping) family_ = cipher_family(spec_);
  }

  Episode next() {
    Episode ep;
    ep.seed = rng_();
    ep.task_id = std::uniform_int_distribution<int>(0, spec_.instance_count() - 1)(rng_);
    const int k = std::uniform_int_distribution<int>(k_min_, k_max_)(rng_);
    for (int i = 0; i < k; ++i) ep.demos.push_back(draw(ep.task_id));
    ep.query = draw(ep.task_id);
    return ep;
  }

  const TaskSpec& spec() const { return spec_; }

 private:
  Pair draw(int instance) {
    for (;;) {
      Pair p;
      if (spec_.kind == TaskKind::kSimpleMapping) {
        std::uniform_int_distribution<int> pick(0, spec_.n_symbols - 1);
        std::vector<int> sym(static_cast<std::size_t>(spec_.input_len));
        for (auto& s : sym) s = pick(rng_);
        p = detail::make_simple_pair(spec_, family_, instance, sym);
      } else {
        p = detail::make_mixed_pair(spec_, instance, rng_, spec_.subtasks);
      }
      if (!excluded_.contains(input_key(p))) return p;
    }
  }

  TaskSpec spec_;
  std::mt19937_64 rng_;
  int k_min_, k_max_;
  std::unordered_set<std::uint64_t> excluded_;
  std::vector<std::vector<int>> family_;
};

inline std::unordered_set<std::uint64_t> input_keys(std::span<const Pair> pairs) {
  std::unordered_set<std::uint64_t> keys;
  for (const auto& p : pairs) keys.insert(input_key(p));
  return keys;
}

// ---------------------------------------------------------------------------
// Episode sampling.

namespace detail {
inline std::vector<Pair> sample_demos(std::span<const Pair> pool, int k, std::uint64_t seed,
                                      std::optional<std::size_t> exclude) {
  const std::size_t avail = pool.size() - (exclude ? 1 : 0);
  if (k < 0 || static_cast<std::size_t>(k) > avail) {
    throw std::invalid_argument("sample_episode: k=" + std::to_string(k) + " exceeds the " + std::to_string(avail) +
                                " available demonstrations");
  }
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates over indices, skipping the excluded one.
  std::vector<std::size_t> idx;
  idx.reserve(avail);
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (!exclude || i != *exclude) idx.push_back(i);
  std::vector<Pair> demos;
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), idx.size() - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[pick(rng)]);
    demos.push_back(pool[idx[static_cast<std::size_t>(i)]]);
  }
  return demos;
}
}  // namespace detail

/// Query = train[query_index]; k demos drawn uniformly without replacement
/// from the rest of the training split.
inline Episode sample_episode(const Dataset& ds, int k, std::uint64_t seed, std::size_t query_index) {
  if (query_index >= ds.train.size()) throw std::out_of_range("sample_episode: query index outside training split");
  if (k < 0 || static_cast<std::size_t>(k) >= ds.train.size()) {
    throw std::invalid_argument("sample_episode: k=" + std::to_string(k) + " must be below the dataset size " +
                                std::to_string(ds.train.size()));
  }
  Episode ep;
  ep.seed = derive_seed(seed, "train-episode", query_index);
  ep.query = ds.train[query_index];
  ep.task_id = ds.spec.instance;
  ep.demos = detail::sample_demos(ds.train, k, ep.seed, query_index);
  return ep;
}

/// Query = eval[eval_index]; demos from the training split.
inline Episode sample_eval_episode(const Dataset& ds, int k, std::uint64_t seed, std::size_t eval_index) {
  if (eval_index >= ds.eval.size()) throw std::out_of_range("sample_eval_episode: index outside eval split");
  Episode ep;
  ep.seed = derive_seed(seed, "eval-episode", eval_index);
  ep.query = ds.eval[eval_index];
  ep.task_id = ds.spec.instance;
  ep.demos = detail::sample_demos(ds.train, k, ep.seed, std::nullopt);
  return ep;
}

// ---------------------------------------------------------------------------
// Rendering.

struct Rendered {
  std::vector<int> tokens;
  /// Positions whose next-token target is a query answer token.
  std::vector<int> answer_positions;
  /// Positions whose next-token target is a demo answer token or the SEP
  /// closing a demo answer (pretraining targets).
  std::vector<int> demo_target_positions;
  /// Index of the final Q token (start of the query segment).
  int boundary = 0;

  std::vector<bool> answer_mask() const {
    std::vector<bool> m(tokens.size(), false);
    for (int p : answer_positions) m[static_cast<std::size_t>(p)] = true;
    return m;
  }
};

/// [BOS] (Q in A ans SEP) x k  Q query_in A [query_ans]
inline Rendered render(const Episode& ep, bool include_query_answer, int max_seq_len = std::numeric_limits<int>::max()) {
  Rendered r;
  auto& t = r.tokens;
  t.push_back(tok::kBos);
  for (const auto& d : ep.demos) {
    t.push_back(tok::kQ);
    t.insert(t.end(), d.input.begin(), d.input.end());
    t.push_back(tok::kA);
    for (std::size_t i = 0; i < d.answer.size(); ++i) {
      r.demo_target_positions.push_back(static_cast<int>(t.size()) - 1);
      t.push_back(d.answer[i]);
    }
    r.demo_target_positions.push_back(static_cast<int>(t.size()) - 1);  // predicts SEP
    t.push_back(tok::kSep);
  }
  r.boundary = static_cast<int>(t.size());
  t.push_back(tok::kQ);
  t.insert(t.end(), ep.query.input.begin(), ep.query.input.end());
  t.push_back(tok::kA);
  const int a_pos = static_cast<int>(t.size()) - 1;
  if (include_query_answer) {
    for (std::size_t i = 0; i < ep.query.answer.size(); ++i) {
      r.answer_positions.push_back(a_pos + static_cast<int>(i));
      t.push_back(ep.query.answer[i]);
    }
  } else {
    r.answer_positions.push_back(a_pos);
  }
  if (static_cast<int>(t.size()) > max_seq_len) {
    throw std::length_error("render: episode (task " + std::to_string(ep.task_id) + ", seed " + std::to_string(ep.seed) +
                            ", k=" + std::to_string(ep.demos.size()) + ") renders to " + std::to_string(t.size()) +
                            " tokens, over max_seq_len " + std::to_string(max_seq_len));
  }
  return r;
}

/// Length of a rendered k-shot episode for a task (upper bound over pairs).
inline int rendered_length(const TaskSpec& spec, int k, bool include_query_answer) {
  int in_len = 0;
  int ans_len = 0;
  if (spec.kind == TaskKind::kSimpleMapping) {
    in_len = spec.input_len;
    ans_len = spec.input_len;
  } else {
    in_len = spec.scene_len + 2;
    ans_len = 1;
  }
  const int pair_len = 1 + in_len + 1 + ans_len + 1;
  return 1 + k * pair_len + 1 + in_len + 1 + (include_query_answer ? ans_len : 0);
}

// ---------------------------------------------------------------------------
// JSON Lines serialization.

inline nlohmann::json pair_to_json(const Pair& p, const TaskSpec& spec, const char* split) {
  nlohmann::json j;
  j["split"] = split;
  j["task_kind"] = to_string(spec.kind);
  j["instance"] = p.instance;
  j["input"] = p.input;
  j["answer"] = p.answer;
  if (p.subtask >= 0) j["subtask"] = to_string(static_cast<Subtask>(p.subtask));
  return j;
}

inline void write_jsonl(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (const auto& p : ds.train) out << pair_to_json(p, ds.spec, "train").dump() << '\n';
  for (const auto& p : ds.eval) out << pair_to_json(p, ds.spec, "eval").dump() << '\n';
}

/// Reads pairs back into the splits of `ds` (spec is kept as given).
inline Dataset read_jsonl(const std::string& path, const TaskSpec& spec) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  Dataset ds;
  ds.spec = spec;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    Pair p;
    p.input = j.at("input").get<std::vector<int>>();
    p.answer = j.at("answer").get<std::vector<int>>();
    p.instance = j.at("instance").get<int>();
    if (j.contains("subtask")) p.subtask = static_cast<int>(subtask_from_string(j["subtask"].get<std::string>()));
    (j.at("split").get<std::string>() == "train" ? ds.train : ds.eval).push_back(std::move(p));
  }
  return ds;
}

}  // namespace icvlab
