#pragma once

// Experiment configuration (strict JSON), validation, run manifests, lock
// files and JSON Lines metrics.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icvlab/baselines.hpp"
#include "icvlab/eval.hpp"
#include "icvlab/live.hpp"
#include "icvlab/model.hpp"
#include "icvlab/pretrain.hpp"
#include "icvlab/seed.hpp"
#include "icvlab/tasks.hpp"

namespace icvlab {

inline constexpr const char* kCodeVersion = "icvlab 0.1.0";

/// Raised for invalid configs; carries every field-level message.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> errors)
      : std::runtime_error(join(errors)), errors_(std::move(errors)) {}
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  static std::string join(const std::vector<std::string>& e) {
    std::string s;
    for (const auto& x : e) s += (s.empty() ? "" : "; ") + x;
    return s;
  }
  std::vector<std::string> errors_;
};

struct PretrainSection {
  PretrainHyper hyper;
  bool single_precision = true;  // train in float, store double
};

struct EvalSection {
  int k = 8;           // demonstrations for ICL and for extraction
  int limit = 0;       // 0 = whole eval split
  DecodeConfig decode = default_decode();
  int shift_queries = 200;
  int timing_repeats = 5;
};

struct BaselineSection {
  int extraction_episodes = 32;
  int fv_top_n = -1;  // -1: max(1, floor(L*H/10))
  int fv_dev_size = 64;
  int pca_demos = 32;
  std::vector<double> pca_strengths{1e-2, 1e-3, 1e-4, 1e-5};
  int sweep_limit = 0;  // eval queries per sweep point, 0 = all
};

struct SweepSection {
  std::vector<int> shots{1, 4, 8, 16, 32};
  std::vector<int> train_sizes;
};

struct Seeds {
  std::uint64_t model = 1;
  std::uint64_t data = 11;
  std::uint64_t train = 3;
  std::uint64_t eval = 5;
};

struct ExperimentConfig {
  std::string description;
  ModelConfig model;
  TaskSpec task;
  PretrainSection pretrain;
  LiveHyper live;
  LoraHyper lora;
  BaselineSection baselines;
  EvalSection eval;
  SweepSection sweep;
  std::string method = "live";
  Seeds seeds;
  std::string checkpoint;            // pretrained model for downstream stages
  std::vector<std::string> vectors;  // saved interventions (eval / merge inputs)
  std::vector<TaskSpec> variants;    // general LIVE: one task per bundle in `vectors`
  std::string out_dir = "runs/default";
};

inline const std::set<std::string>& known_methods() {
  static const std::set<std::string> m{"zero_shot", "icl", "live", "tv", "fv", "pca_icv", "lora_head", "general_live"};
  return m;
}

/// Longest sequence a k-shot episode can reach: training renders include
/// the query answer, generation appends up to max_new tokens.
inline int max_episode_length(const TaskSpec& spec, int k, int max_new) {
  return std::max(rendered_length(spec, k, true), rendered_length(spec, k, false) + max_new);
}

// ---------------------------------------------------------------------------
// JSON reading with unknown-key rejection.

namespace detail {

class Reader {
 public:
  Reader(const nlohmann::json& j, std::string path, std::vector<std::string>& errors)
      : j_(j), path_(std::move(path)), errors_(errors) {
    if (!j_.is_object()) errors_.push_back(path_ + ": expected an object");
  }
  ~Reader() {
    if (!j_.is_object()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.contains(it.key())) errors_.push_back("unknown key '" + key(it.key()) + "'");
  }

  template <typename T>
  void get(const char* name, T& out) {
    seen_.insert(name);
    if (!j_.is_object() || !j_.contains(name)) return;
    try {
      out = j_.at(name).get<T>();
    } catch (const nlohmann::json::exception&) {
      errors_.push_back(key(name) + ": wrong type");
    }
  }

  const nlohmann::json* child(const char* name) {
    seen_.insert(name);
    if (!j_.is_object() || !j_.contains(name)) return nullptr;
    return &j_.at(name);
  }

  std::string key(const std::string& name) const { return path_.empty() ? name : path_ + "." + name; }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

inline void read_model(const nlohmann::json& j, ModelConfig& m, std::vector<std::string>& e) {
  Reader r(j, "model", e);
  r.get("n_layers", m.n_layers);
  r.get("d_model", m.d_model);
  r.get("n_heads", m.n_heads);
  r.get("d_mlp", m.d_mlp);
  r.get("vocab_size", m.vocab_size);
  r.get("max_seq_len", m.max_seq_len);
}

inline void read_task(const nlohmann::json& j, const std::string& path, TaskSpec& t, std::vector<std::string>& e) {
  Reader r(j, path, e);
  std::string kind = to_string(t.kind);
  r.get("kind", kind);
  if (kind == "simple_mapping") {
    t.kind = TaskKind::kSimpleMapping;
  } else if (kind == "mixed_vqa") {
    t.kind = TaskKind::kMixedVqa;
  } else {
    e.push_back(r.key("kind") + ": must be simple_mapping or mixed_vqa");
  }
  r.get("n_symbols", t.n_symbols);
  r.get("input_len", t.input_len);
  r.get("family_size", t.family_size);
  r.get("instance", t.instance);
  r.get("scene_len", t.scene_len);
  r.get("shared_format", t.shared_format);
  r.get("train_size", t.train_size);
  r.get("eval_size", t.eval_size);
  r.get("mapping_seed", t.mapping_seed);
  std::vector<std::string> subs;
  for (auto s : t.subtasks) subs.emplace_back(to_string(s));
  r.get("subtasks", subs);
  t.subtasks.clear();
  for (const auto& s : subs) {
    try {
      t.subtasks.push_back(subtask_from_string(s));
    } catch (const std::invalid_argument& ex) {
      e.push_back(r.key("subtasks") + ": " + ex.what());
    }
  }
}

inline void read_decode(const nlohmann::json& j, DecodeConfig& d, std::vector<std::string>& e) {
  Reader r(j, "eval.decode", e);
  r.get("max_new", d.max_new);
  r.get("beams", d.beams);
  r.get("length_penalty", d.length_penalty);
  r.get("min_new", d.min_new);
}

}  // namespace detail

/// Parses and validates; throws ConfigError listing every problem.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
  std::vector<std::string> e;
  ExperimentConfig c;
  {
    detail::Reader r(j, "", e);
    r.get("description", c.description);
    r.get("method", c.method);
    r.get("checkpoint", c.checkpoint);
    r.get("vectors", c.vectors);
    r.get("out_dir", c.out_dir);
    if (auto* m = r.child("model")) detail::read_model(*m, c.model, e);
    if (auto* t = r.child("task")) detail::read_task(*t, "task", c.task, e);
    if (auto* v = r.child("variants")) {
      if (!v->is_array()) {
        e.push_back("variants: expected an array");
      } else {
        for (std::size_t i = 0; i < v->size(); ++i) {
          TaskSpec t = c.task;
          detail::read_task((*v)[i], "variants[" + std::to_string(i) + "]", t, e);
          c.variants.push_back(t);
        }
      }
    }
    if (auto* p = r.child("pretrain")) {
      detail::Reader q(*p, "pretrain", e);
      auto& h = c.pretrain.hyper;
      q.get("steps", h.steps);
      q.get("batch_size", h.batch_size);
      q.get("lr", h.lr);
      q.get("weight_decay", h.weight_decay);
      q.get("warmup_fraction", h.warmup_fraction);
      q.get("k_min", h.k_min);
      q.get("k_max", h.k_max);
      q.get("log_every", h.log_every);
      q.get("single_precision", c.pretrain.single_precision);
    }
    if (auto* p = r.child("live")) {
      detail::Reader q(*p, "live", e);
      auto& h = c.live;
      q.get("lambda", h.lambda);
      q.get("lr_v", h.lr_v);
      q.get("lr_alpha", h.lr_alpha);
      q.get("weight_decay", h.weight_decay);
      q.get("warmup_fraction", h.warmup_fraction);
      q.get("batch_size", h.batch_size);
      q.get("accumulation", h.accumulation);
      q.get("epochs", h.epochs);
      q.get("k", h.k);
      q.get("use_kl", h.use_kl);
      q.get("use_gt", h.use_gt);
      q.get("shared_mode", h.shared_mode);
      q.get("eval_limit", h.eval_limit);
    }
    if (auto* p = r.child("lora")) {
      detail::Reader q(*p, "lora", e);
      auto& h = c.lora;
      q.get("rank", h.rank);
      q.get("lr", h.lr);
      q.get("dropout", h.dropout);
      q.get("weight_decay", h.weight_decay);
      q.get("warmup_fraction", h.warmup_fraction);
      q.get("batch_size", h.batch_size);
      q.get("epochs", h.epochs);
    }
    if (auto* p = r.child("baselines")) {
      detail::Reader q(*p, "baselines", e);
      auto& b = c.baselines;
      q.get("extraction_episodes", b.extraction_episodes);
      q.get("fv_top_n", b.fv_top_n);
      q.get("fv_dev_size", b.fv_dev_size);
      q.get("pca_demos", b.pca_demos);
      q.get("pca_strengths", b.pca_strengths);
      q.get("sweep_limit", b.sweep_limit);
    }
    if (auto* p = r.child("eval")) {
      detail::Reader q(*p, "eval", e);
      q.get("k", c.eval.k);
      q.get("limit", c.eval.limit);
      q.get("shift_queries", c.eval.shift_queries);
      q.get("timing_repeats", c.eval.timing_repeats);
      if (auto* d = q.child("decode")) detail::read_decode(*d, c.eval.decode, e);
    }
    if (auto* p = r.child("sweep")) {
      detail::Reader q(*p, "sweep", e);
      q.get("shots", c.sweep.shots);
      q.get("train_sizes", c.sweep.train_sizes);
    }
    if (auto* p = r.child("seeds")) {
      detail::Reader q(*p, "seeds", e);
      q.get("model", c.seeds.model);
      q.get("data", c.seeds.data);
      q.get("train", c.seeds.train);
      q.get("eval", c.seeds.eval);
    }
  }

  // Cross-field checks.
  auto check = [&](auto&& fn) {
    try {
      fn();
    } catch (const std::exception& ex) {
      e.push_back(ex.what());
    }
  };
  check([&] { c.model.validate(); });
  check([&] { c.task.validate(c.model.vocab_size); });
  for (const auto& v : c.variants) check([&] { v.validate(c.model.vocab_size); });
  check([&] { c.live.validate(); });
  if (!known_methods().contains(c.method)) e.push_back("method: unknown method '" + c.method + "'");
  auto fits = [&](int k, const char* what) {
    const int len = max_episode_length(c.task, k, c.eval.decode.max_new);
    if (len > c.model.max_seq_len) {
      e.push_back(std::string(what) + ": k=" + std::to_string(k) + " renders up to " + std::to_string(len) +
                  " tokens, exceeding model.max_seq_len " + std::to_string(c.model.max_seq_len));
    }
  };
  if (c.eval.k < 0) e.push_back("eval.k must be >= 0");
  fits(c.eval.k, "eval.k");
  fits(c.live.k, "live.k");
  fits(c.pretrain.hyper.k_max, "pretrain.k_max");
  for (int k : c.sweep.shots) fits(k, "sweep.shots");
  const auto& h = c.pretrain.hyper;
  if (h.steps < 0 || h.batch_size < 1) e.push_back("pretrain: steps must be >= 0 and batch_size >= 1");
  if (h.k_min < 0 || h.k_max < h.k_min) e.push_back("pretrain: need 0 <= k_min <= k_max");
  if (c.eval.decode.beams < 1) e.push_back("eval.decode.beams must be >= 1");
  if (c.eval.decode.max_new < 0) e.push_back("eval.decode.max_new must be >= 0");
  if (c.lora.rank < 0 || c.lora.rank > std::min(c.model.d_model, c.model.vocab_size)) e.push_back("lora.rank out of range");
  if (c.baselines.pca_demos < 2) e.push_back("baselines.pca_demos must be >= 2");
  if (c.baselines.extraction_episodes < 1) e.push_back("baselines.extraction_episodes must be >= 1");
  if (c.baselines.fv_top_n > c.model.n_layers * c.model.n_heads) e.push_back("baselines.fv_top_n exceeds the head count");
  if (c.eval.timing_repeats < 3) e.push_back("eval.timing_repeats must be >= 3");
  if (!e.empty()) throw ConfigError(std::move(e));
  c.eval.decode.stop_token = tok::kSep;
  return c;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot read config " + path.string()});
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& ex) {
    throw ConfigError({path.string() + ": " + ex.what()});
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(read_json_file(path)); }

/// Errors only; never throws for a readable file.
inline std::vector<std::string> validate_config(const std::filesystem::path& path) {
  try {
    (void)load_config(path);
    return {};
  } catch (const ConfigError& ex) {
    return ex.errors();
  }
}

// ---------------------------------------------------------------------------
// Serialization of the effective config (for hashing and manifests).

inline nlohmann::json task_to_json(const TaskSpec& t) {
  nlohmann::json subs = nlohmann::json::array();
  for (auto s : t.subtasks) subs.push_back(to_string(s));
  return {{"kind", to_string(t.kind)},       {"n_symbols", t.n_symbols},   {"input_len", t.input_len},
          {"family_size", t.family_size},    {"instance", t.instance},     {"scene_len", t.scene_len},
          {"shared_format", t.shared_format},
          {"train_size", t.train_size},      {"eval_size", t.eval_size},   {"mapping_seed", t.mapping_seed},
          {"subtasks", subs}};
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  const auto& p = c.pretrain.hyper;
  const auto& l = c.live;
  nlohmann::json variants = nlohmann::json::array();
  for (const auto& v : c.variants) variants.push_back(task_to_json(v));
  return {
      {"description", c.description},
      {"method", c.method},
      {"checkpoint", c.checkpoint},
      {"vectors", c.vectors},
      {"out_dir", c.out_dir},
      {"model",
       {{"n_layers", c.model.n_layers},
        {"d_model", c.model.d_model},
        {"n_heads", c.model.n_heads},
        {"d_mlp", c.model.d_mlp},
        {"vocab_size", c.model.vocab_size},
        {"max_seq_len", c.model.max_seq_len}}},
      {"task", task_to_json(c.task)},
      {"variants", variants},
      {"pretrain",
       {{"steps", p.steps},
        {"batch_size", p.batch_size},
        {"lr", p.lr},
        {"weight_decay", p.weight_decay},
        {"warmup_fraction", p.warmup_fraction},
        {"k_min", p.k_min},
        {"k_max", p.k_max},
        {"log_every", p.log_every},
        {"single_precision", c.pretrain.single_precision}}},
      {"live",
       {{"lambda", l.lambda},
        {"lr_v", l.lr_v},
        {"lr_alpha", l.lr_alpha},
        {"weight_decay", l.weight_decay},
        {"warmup_fraction", l.warmup_fraction},
        {"batch_size", l.batch_size},
        {"accumulation", l.accumulation},
        {"epochs", l.epochs},
        {"k", l.k},
        {"use_kl", l.use_kl},
        {"use_gt", l.use_gt},
        {"shared_mode", l.shared_mode},
        {"eval_limit", l.eval_limit}}},
      {"lora",
       {{"rank", c.lora.rank},
        {"lr", c.lora.lr},
        {"dropout", c.lora.dropout},
        {"weight_decay", c.lora.weight_decay},
        {"warmup_fraction", c.lora.warmup_fraction},
        {"batch_size", c.lora.batch_size},
        {"epochs", c.lora.epochs}}},
      {"baselines",
       {{"extraction_episodes", c.baselines.extraction_episodes},
        {"fv_top_n", c.baselines.fv_top_n},
        {"fv_dev_size", c.baselines.fv_dev_size},
        {"pca_demos", c.baselines.pca_demos},
        {"pca_strengths", c.baselines.pca_strengths},
        {"sweep_limit", c.baselines.sweep_limit}}},
      {"eval",
       {{"k", c.eval.k},
        {"limit", c.eval.limit},
        {"shift_queries", c.eval.shift_queries},
        {"timing_repeats", c.eval.timing_repeats},
        {"decode",
         {{"max_new", c.eval.decode.max_new},
          {"beams", c.eval.decode.beams},
          {"length_penalty", c.eval.decode.length_penalty},
          {"min_new", c.eval.decode.min_new}}}}},
      {"sweep", {{"shots", c.sweep.shots}, {"train_sizes", c.sweep.train_sizes}}},
      {"seeds", {{"model", c.seeds.model}, {"data", c.seeds.data}, {"train", c.seeds.train}, {"eval", c.seeds.eval}}},
  };
}

/// Stable hash of the effective config (keys sorted by the JSON dump).
inline std::uint64_t config_hash(const nlohmann::json& j) { return fnv1a(j.dump()); }

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Run bookkeeping.

/// Exclusive ownership of an output directory for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    std::filesystem::create_directories(dir);
    std::FILE* f = std::fopen(path_.string().c_str(), "wx");
    if (!f) throw std::runtime_error("output directory " + dir.string() + " is locked by another run (" + path_.string() + ")");
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Append-only JSON Lines writer.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
  }
  void write(const nlohmann::json& j) { out_ << j.dump() << '\n' << std::flush; }

 private:
  std::ofstream out_;
};

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string subcommand;
  nlohmann::json config;
  std::string started = utc_now();
  nlohmann::json artifacts = nlohmann::json::object();
  nlohmann::json metrics = nlohmann::json::object();
  nlohmann::json seeds = nlohmann::json::object();

  nlohmann::json to_json() const {
    return {{"subcommand", subcommand},
            {"config_hash", hex64(config_hash(config))},
            {"code_version", kCodeVersion},
            {"started", started},
            {"finished", utc_now()},
            {"config", config},
            {"seeds", seeds},
            {"artifacts", artifacts},
            {"metrics", metrics}};
  }
};

inline void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace icvlab
