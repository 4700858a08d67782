#pragma once

// Stage recipes shared by the CLI and the acceptance suite: dataset and
// model preparation, method construction and evaluation.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icvlab/baselines.hpp"
#include "icvlab/checkpoint.hpp"
#include "icvlab/eval.hpp"
#include "icvlab/experiment.hpp"
#include "icvlab/live.hpp"
#include "icvlab/pretrain.hpp"

namespace icvlab {

using EventLog = std::function<void(const nlohmann::json&)>;

inline Dataset make_dataset(const ExperimentConfig& c) { return generate_dataset(c.task, c.seeds.data); }

inline Dataset make_dataset(const ExperimentConfig& c, const TaskSpec& variant) {
  return generate_dataset(variant, c.seeds.data);
}

/// Everything that determines the pretrained weights.
inline nlohmann::json pretrain_identity(const ExperimentConfig& c) {
  const auto full = to_json(c);
  return {{"code_version", kCodeVersion},
          {"model", full["model"]},
          {"task", full["task"]},
          {"pretrain", full["pretrain"]},
          {"model_seed", c.seeds.model},
          {"data_seed", c.seeds.data}};
}

/// Meta-trains on fresh episodes of random task instances with k uniform in
/// [k_min, k_max]; eval inputs of `ds` never appear.
inline Parameters<double> pretrain_model(const ExperimentConfig& c, const Dataset& ds, const EventLog& log = {}) {
  const auto& h = c.pretrain.hyper;
  EpisodeStream stream(c.task, derive_seed(c.seeds.data, "pretrain-stream"), h.k_min, h.k_max, input_keys(ds.eval));
  auto next = [&] { return stream.next(); };
  auto on_log = [&](int step, double loss) {
    if (log) log({{"stage", "pretrain"}, {"step", step}, {"loss", loss}});
  };
  if (c.pretrain.single_precision) {
    auto p = init_model<float>(c.model, c.seeds.model);
    pretrain(p, next, h, on_log);
    return cast_parameters<double>(p);
  }
  auto p = init_model<double>(c.model, c.seeds.model);
  pretrain(p, next, h, on_log);
  return p;
}

/// Loads a cached checkpoint keyed by the pretraining identity, or trains
/// and stores one. An empty cache directory disables caching.
inline Parameters<double> load_or_pretrain(const ExperimentConfig& c, const Dataset& ds, const std::filesystem::path& cache_dir,
                                           const EventLog& log = {}) {
  const auto id = pretrain_identity(c);
  if (cache_dir.empty()) return pretrain_model(c, ds, log);
  const auto path = cache_dir / ("model-" + hex64(config_hash(id)) + ".icv");
  if (std::filesystem::exists(path)) {
    auto p = load_model(path);
    if (log) log({{"stage", "pretrain"}, {"cache_hit", path.string()}});
    return p;
  }
  auto p = pretrain_model(c, ds, log);
  std::filesystem::create_directories(cache_dir);
  save_model(path, p, {{"identity", id}});
  return p;
}

// ---------------------------------------------------------------------------
// Methods.

inline LiveHyper live_hyper(const ExperimentConfig& c) {
  LiveHyper h = c.live;
  h.seed = derive_seed(c.seeds.train, "live");
  return h;
}

inline LiveResult run_live(const Parameters<double>& params, const Dataset& ds, const LiveHyper& h, const EventLog& log = {}) {
  return train_live(params, ds, h, [&](const LiveMetric& m) {
    if (!log) return;
    nlohmann::json j{{"stage", "train-live"}, {"step", m.step}, {"loss", m.loss}, {"l_d", m.l_d}, {"l_gt", m.l_gt}};
    if (m.epoch >= 0) j["epoch"] = m.epoch;
    if (m.eval_acc) j["eval_acc"] = *m.eval_acc;
    log(j);
  });
}

/// A non-learnable intervention chosen by a sweep on the eval split.
struct Extracted {
  std::string name;
  InterventionSpec spec;
  SweepTable sweep;
  std::string setting_name;
};

inline std::size_t sweep_limit(const ExperimentConfig& c) { return static_cast<std::size_t>(c.baselines.sweep_limit); }

inline Extracted extract_tv(const Parameters<double>& params, const Dataset& ds, const ExperimentConfig& c) {
  const auto eps = extraction_episodes(ds, c.eval.k, c.baselines.extraction_episodes, derive_seed(c.seeds.train, "tv"));
  const Matrix states = task_vector_states(params, eps);
  auto at = [&](int l) { return InterventionSpec::replace_last_token(l, states.row(l)); };
  Extracted e{"tv", {}, sweep_layers(params, at, ds, c.seeds.eval, sweep_limit(c)), "layer"};
  e.spec = at(static_cast<int>(e.sweep.best_setting()));
  return e;
}

inline Extracted extract_fv(const Parameters<double>& params, const Dataset& ds, const ExperimentConfig& c) {
  const auto eps = extraction_episodes(ds, c.eval.k, c.baselines.extraction_episodes, derive_seed(c.seeds.train, "fv"));
  const std::size_t n_dev = std::min(ds.train.size(), static_cast<std::size_t>(c.baselines.fv_dev_size));
  const std::span<const Pair> dev(ds.train.data() + (ds.train.size() - n_dev), n_dev);
  const int top_n = c.baselines.fv_top_n < 0 ? default_fv_heads(c.model) : c.baselines.fv_top_n;
  const FunctionVector fv = extract_function_vector(params, eps, dev, top_n);
  auto at = [&](int l) { return InterventionSpec::add_last_token(l, fv.spec.vectors); };
  Extracted e{"fv", {}, sweep_layers(params, at, ds, c.seeds.eval, sweep_limit(c)), "layer"};
  e.spec = at(static_cast<int>(e.sweep.best_setting()));
  return e;
}

inline Extracted extract_pca(const Parameters<double>& params, const Dataset& ds, const ExperimentConfig& c) {
  std::vector<Pair> demos;
  std::mt19937_64 rng(derive_seed(c.seeds.train, "pca"));
  std::uniform_int_distribution<std::size_t> pick(0, ds.train.size() - 1);
  for (int i = 0; i < c.baselines.pca_demos; ++i) demos.push_back(ds.train[pick(rng)]);
  const auto base = extract_pca_icv(params, demos, c.baselines.pca_strengths.front());
  Extracted e{"pca_icv", base, sweep_strengths(params, base, c.baselines.pca_strengths, ds, c.seeds.eval, sweep_limit(c)),
              "strength"};
  e.spec.strength = e.sweep.best_setting();
  return e;
}

inline Extracted extract_named(const std::string& which, const Parameters<double>& params, const Dataset& ds,
                               const ExperimentConfig& c) {
  if (which == "tv") return extract_tv(params, ds, c);
  if (which == "fv") return extract_fv(params, ds, c);
  if (which == "pca" || which == "pca_icv") return extract_pca(params, ds, c);
  throw std::invalid_argument("extract: unknown method '" + which + "' (tv, fv, pca)");
}

inline LoraHyper lora_hyper(const ExperimentConfig& c) {
  LoraHyper h = c.lora;
  h.seed = derive_seed(c.seeds.train, "lora");
  return h;
}

inline void save_lora(const std::filesystem::path& path, const LoraHead& head, const nlohmann::json& meta = {}) {
  Container c;
  c.kind = "lora_head";
  if (meta.is_object()) c.meta = meta;
  c.meta["rank"] = head.A.cols();
  c.tensors.push_back({"A", head.A, "f64"});
  c.tensors.push_back({"B", head.B, "f64"});
  write_container(path, c);
}

inline LoraHead load_lora(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.kind != "lora_head") throw std::runtime_error("checkpoint: expected lora_head, found '" + c.kind + "'");
  return {c.get("A").values, c.get("B").values};
}

/// Evaluation summary for the manifest and the metrics log.
inline nlohmann::json eval_summary(const std::string& method, const EvalResult& r) {
  return {{"method", method}, {"accuracy", r.accuracy}, {"n", r.size()}};
}

inline EvalResult run_eval(const Parameters<double>& params, const Dataset& ds, const Method& m, const ExperimentConfig& c) {
  return evaluate(params, ds, m, c.seeds.eval, c.eval.decode, static_cast<std::size_t>(c.eval.limit));
}

}  // namespace icvlab
