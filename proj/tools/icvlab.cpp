// icvlab: command-line driver for the workbench stages.
//
//   icvlab <subcommand> --config <path> [--seed N] [--out DIR]
//
// Exit codes: 0 ok, 2 config or usage error, 3 runtime error.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "icvlab/analysis.hpp"
#include "icvlab/checkpoint.hpp"
#include "icvlab/experiment.hpp"
#include "icvlab/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace icvlab;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string method;  // extract / sweep / analyze selector
  std::optional<int> k;
};

/// Config, output directory lock, metrics stream and manifest of one run.
class Run {
 public:
  Run(const std::string& subcommand, const Options& o) : cfg_(load_config(o.config)) {
    if (o.seed) cfg_.seeds.train = *o.seed;
    if (o.k) cfg_.eval.k = *o.k;
    if (!o.out.empty()) cfg_.out_dir = o.out;
    out_ = cfg_.out_dir;
    lock_ = std::make_unique<RunLock>(out_);
    metrics_ = std::make_unique<MetricsWriter>(out_ / "metrics.jsonl");
    manifest_.subcommand = subcommand;
    manifest_.config = to_json(cfg_);
    manifest_.seeds = {{"model", cfg_.seeds.model},
                       {"data", cfg_.seeds.data},
                       {"train", cfg_.seeds.train},
                       {"eval", cfg_.seeds.eval},
                       {"live", derive_seed(cfg_.seeds.train, "live")},
                       {"lora", derive_seed(cfg_.seeds.train, "lora")},
                       {"pretrain_stream", derive_seed(cfg_.seeds.data, "pretrain-stream")}};
  }

  const ExperimentConfig& cfg() const { return cfg_; }
  fs::path path(const std::string& name) const { return out_ / name; }
  EventLog log() {
    return [this](const json& j) { metrics_->write(j); };
  }
  void artifact(const std::string& key, const fs::path& p) { manifest_.artifacts[key] = p.string(); }
  void metric(const std::string& key, const json& v) {
    manifest_.metrics[key] = v;
    metrics_->write({{"summary", key}, {"value", v}});
  }

  Parameters<double> model() const {
    if (cfg_.checkpoint.empty()) throw std::runtime_error("config.checkpoint is required for this subcommand");
    if (!fs::exists(cfg_.checkpoint)) throw std::runtime_error("checkpoint not found: " + cfg_.checkpoint);
    auto p = load_model(cfg_.checkpoint);
    if (p.config.vocab_size != cfg_.model.vocab_size || p.config.d_model != cfg_.model.d_model ||
        p.config.n_layers != cfg_.model.n_layers) {
      throw std::runtime_error("checkpoint " + cfg_.checkpoint + " does not match config.model");
    }
    return p;
  }

  void finish() {
    const auto p = path("manifest.json");
    write_json_atomic(p, manifest_.to_json());
    std::cout << json{{"manifest", p.string()}, {"metrics", manifest_.metrics}}.dump() << '\n';
  }

 private:
  ExperimentConfig cfg_;
  fs::path out_;
  std::unique_ptr<RunLock> lock_;
  std::unique_ptr<MetricsWriter> metrics_;
  RunManifest manifest_;
};

std::vector<fs::path> vector_paths(const ExperimentConfig& c) {
  std::vector<fs::path> out;
  for (const auto& v : c.vectors) {
    if (!fs::exists(v)) throw std::runtime_error("vector file not found: " + v);
    out.emplace_back(v);
  }
  return out;
}

/// The configured method as an evaluable Method (learned artifacts come
/// from config.vectors).
Method configured_method(const ExperimentConfig& c) {
  if (c.method == "zero_shot") return Method::zero_shot();
  if (c.method == "icl") return Method::icl(c.eval.k);
  const auto paths = vector_paths(c);
  if (c.method == "general_live") {
    std::vector<ICVBundle> bundles;
    for (const auto& p : paths) bundles.push_back(load_bundle(p));
    return Method::with_intervention("general_live", InterventionSpec::add_per_layer(merge_live(bundles)));
  }
  if (paths.size() != 1) throw std::runtime_error("method " + c.method + " needs exactly one entry in config.vectors");
  if (c.method == "lora_head") return Method::with_unembed_delta("lora_head", load_lora(paths[0]).delta());
  return Method::with_intervention(c.method, load_intervention(paths[0]));
}

void write_predictions(const fs::path& path, const Dataset& ds, const EvalResult& r) {
  MetricsWriter w(path);
  for (std::size_t i = 0; i < r.size(); ++i)
    w.write({{"query", i}, {"prediction", r.predictions[i]}, {"gold", ds.eval[i].answer}, {"correct", r.correct[i]}});
}

// ---------------------------------------------------------------------------

int cmd_validate(const Options& o) {
  if (!fs::exists(o.config)) {
    std::cerr << "error: cannot read config " << o.config << '\n';
    return kExitConfig;
  }
  const auto errors = validate_config(o.config);
  for (const auto& e : errors) std::cerr << "error: " << e << '\n';
  if (errors.empty()) std::cout << "ok\n";
  return errors.empty() ? 0 : kExitConfig;
}

int cmd_pretrain(const Options& o) {
  Run run("pretrain", o);
  const auto& c = run.cfg();
  const Dataset ds = make_dataset(c);
  const auto params = pretrain_model(c, ds, run.log());
  const auto path = run.path("model.icv");
  save_model(path, params, {{"identity", pretrain_identity(c)}});
  run.artifact("model", path);
  run.metric("zero_shot", run_eval(params, ds, Method::zero_shot(), c).accuracy);
  run.metric("icl" + std::to_string(c.eval.k), run_eval(params, ds, Method::icl(c.eval.k), c).accuracy);
  run.finish();
  return 0;
}

int cmd_train_live(const Options& o) {
  Run run("train-live", o);
  const auto& c = run.cfg();
  const auto params = run.model();
  const Dataset ds = make_dataset(c);
  const auto res = run_live(params, ds, live_hyper(c), run.log());
  const auto path = run.path("live.icv");
  save_bundle(path, res.bundle, {{"method", "live"}, {"k", c.live.k}});
  run.artifact("live", path);
  run.metric("live", run_eval(params, ds, Method::with_intervention("live", InterventionSpec::add_per_layer(res.bundle)), c).accuracy);
  run.finish();
  return 0;
}

int cmd_extract(const Options& o) {
  Run run("extract", o);
  const auto& c = run.cfg();
  const auto params = run.model();
  const Dataset ds = make_dataset(c);
  const Extracted e = extract_named(o.method, params, ds, c);
  const auto path = run.path(e.name + ".icv");
  save_intervention(path, e.spec, {{"method", e.name}, {"best_" + e.setting_name, e.sweep.best_setting()}});
  const auto csv = run.path(e.name + "_sweep.csv");
  write_sweep_csv(csv, e.setting_name, e.sweep);
  run.artifact(e.name, path);
  run.artifact(e.name + "_sweep", csv);
  run.metric(e.name, run_eval(params, ds, Method::with_intervention(e.name, e.spec), c).accuracy);
  run.metric("best_" + e.setting_name, e.sweep.best_setting());
  run.finish();
  return 0;
}

int cmd_train_lora(const Options& o) {
  Run run("train-lora", o);
  const auto& c = run.cfg();
  const auto params = run.model();
  const Dataset ds = make_dataset(c);
  auto log = run.log();
  const LoraHead head = train_lora_head(params, ds, lora_hyper(c), [&](int step, double loss) {
    log({{"stage", "train-lora"}, {"step", step}, {"loss", loss}});
  });
  const auto path = run.path("lora.icv");
  save_lora(path, head);
  run.artifact("lora_head", path);
  run.metric("trainable_parameters", head.trainable_count());
  run.metric("lora_head", run_eval(params, ds, Method::with_unembed_delta("lora_head", head.delta()), c).accuracy);
  run.finish();
  return 0;
}

int cmd_eval(const Options& o) {
  Run run("eval", o);
  const auto& c = run.cfg();
  const auto params = run.model();
  const Dataset ds = make_dataset(c);
  const Method m = configured_method(c);
  const auto r = run_eval(params, ds, m, c);
  const auto pred = run.path("predictions.jsonl");
  write_predictions(pred, ds, r);
  run.artifact("predictions", pred);
  run.metric(m.name, r.accuracy);
  run.finish();
  return 0;
}

int cmd_sweep(const Options& o) {
  Run run("sweep", o);
  const auto& c = run.cfg();
  const auto params = run.model();
  const Dataset ds = make_dataset(c);
  if (o.method == "tv" || o.method == "fv" || o.method == "pca") {
    const Extracted e = extract_named(o.method, params, ds, c);
    const auto csv = run.path(e.name + "_sweep.csv");
    write_sweep_csv(csv, e.setting_name, e.sweep);
    run.artifact(e.name + "_sweep", csv);
    run.metric("best_" + e.setting_name, e.sweep.best_setting());
    run.metric("best_accuracy", e.sweep.best_accuracy());
  } else if (o.method == "shots") {
    const auto csv = run.path("shots.csv");
    std::ofstream out(csv);
    out.precision(17);
    out << "k,live,icl\n";
    json rows = json::array();
    for (int k : c.sweep.shots) {
      LiveHyper h = live_hyper(c);
      h.k = k;
      const auto res = run_live(params, ds, h, run.log());
      const double live = run_eval(params, ds, Method::with_intervention("live", InterventionSpec::add_per_layer(res.bundle)), c).accuracy;
      const double icl = run_eval(params, ds, Method::icl(k), c).accuracy;
      out << k << ',' << live << ',' << icl << '\n';
      rows.push_back({{"k", k}, {"live", live}, {"icl", icl}});
    }
    run.artifact("shots", csv);
    run.metric("shots", rows);
  } else if (o.method == "train-sizes") {
    if (c.sweep.train_sizes.empty()) throw ConfigError({"sweep.train_sizes is empty"});
    const auto csv = run.path("train_sizes.csv");
    std::ofstream out(csv);
    out.precision(17);
    out << "train_size,accuracy\n";
    json rows = json::array();
    for (int n : c.sweep.train_sizes) {
      if (n < 1 || n > static_cast<int>(ds.train.size())) throw ConfigError({"sweep.train_sizes entry out of range"});
      Dataset sub = ds;
      sub.train.resize(static_cast<std::size_t>(n));
      const auto res = run_live(params, sub, live_hyper(c), run.log());
      const double acc = run_eval(params, ds, Method::with_intervention("live", InterventionSpec::add_per_layer(res.bundle)), c).accuracy;
      out << n << ',' << acc << '\n';
      rows.push_back({{"train_size", n}, {"accuracy", acc}});
    }
    run.artifact("train_sizes", csv);
    run.metric("train_sizes", rows);
  } else {
    throw ConfigError({"sweep: unknown kind '" + o.method + "' (tv, fv, pca, shots, train-sizes)"});
  }
  run.finish();
  return 0;
}

/// Named interventions from config.vectors (name = file stem).
std::vector<std::pair<std::string, InterventionSpec>> named_vectors(const ExperimentConfig& c) {
  std::vector<std::pair<std::string, InterventionSpec>> out;
  for (const auto& p : vector_paths(c)) out.emplace_back(p.stem().string(), load_intervention(p));
  return out;
}

int cmd_analyze(const Options& o) {
  Run run("analyze", o);
  const auto& c = run.cfg();
  const auto params = run.model();
  const Dataset ds = make_dataset(c);
  const auto vectors = named_vectors(c);
  const std::size_t n_shift = static_cast<std::size_t>(c.eval.shift_queries);

  if (o.method == "similarity") {
    json means;
    for (const auto& [name, iv] : vectors) {
      const auto recs = shift_records(params, ds, c.eval.k, iv, c.seeds.eval, n_shift);
      const auto s = shift_similarity(recs);
      const auto csv = run.path("similarity_" + name + ".csv");
      write_similarity_csv(csv, name, s);
      run.artifact("similarity_" + name, csv);
      means[name] = {{"mean", s.mean}, {"degenerate", s.degenerate}};
    }
    run.metric("similarity", means);
  } else if (o.method == "decode") {
    const auto csv = run.path("decode.csv");
    std::ofstream out(csv);
    out.precision(17);
    out << "vector,layer,rank,token,prob\n";
    for (const auto& [name, iv] : vectors) {
      if (iv.kind != InterventionSpec::Kind::kAddPerLayer) continue;
      for (int l = 0; l < iv.bundle.n_layers(); ++l) {
        const auto d = decode_vector(iv.bundle.shift(l), params, 10);
        for (std::size_t r = 0; r < d.top.size(); ++r)
          out << name << ',' << l << ',' << r << ',' << d.top[r].first << ',' << d.top[r].second << '\n';
      }
    }
    run.artifact("decode", csv);
  } else if (o.method == "bias") {
    std::vector<Method> methods{Method::zero_shot(), Method::icl(c.eval.k)};
    for (const auto& [name, iv] : vectors) methods.push_back(Method::with_intervention(name, iv));
    json counts;
    for (const auto& m : methods) {
      const auto r = run_eval(params, ds, m, c);
      const auto rep = bias_report(ds.spec, r.predictions, expected_categories(ds, r.size()));
      const auto csv = run.path("bias_" + m.name + ".csv");
      write_bias_csv(csv, m.name, rep);
      run.artifact("bias_" + m.name, csv);
      counts[m.name] = {{"hallucination", rep.hallucination}, {"meaningless", rep.meaningless}, {"accuracy", r.accuracy}};
    }
    run.metric("bias", counts);
  } else if (o.method == "flops" || o.method == "timing") {
    const std::size_t n = std::min<std::size_t>(ds.eval.size(), 16);
    std::vector<std::vector<int>> zs;
    for (std::size_t i = 0; i < n; ++i) zs.push_back(eval_prompt(ds, Method::zero_shot(), c.seeds.eval, i, c.model.max_seq_len));
    std::vector<Method> methods{Method::zero_shot(), Method::icl(c.eval.k)};
    for (const auto& [name, iv] : vectors) methods.push_back(Method::with_intervention(name, iv));
    const auto timing = timing_benchmark(params, zs, methods, &ds, c.seeds.eval, c.eval.timing_repeats);
    if (o.method == "timing") {
      const auto csv = run.path("timing.csv");
      write_timing_csv(csv, timing);
      run.artifact("timing", csv);
      json t;
      for (const auto& r : timing) t[r.method] = r.median_seconds;
      run.metric("median_seconds", t);
    } else {
      std::vector<FlopsRow> rows;
      for (std::size_t m = 0; m < methods.size(); ++m) {
        const auto prompt = eval_prompt(ds, methods[m], c.seeds.eval, 0, c.model.max_seq_len);
        const auto& iv = methods[m].intervention;
        rows.push_back({methods[m].name, static_cast<std::int64_t>(prompt.size()),
                        flops_estimate(c.model, static_cast<std::int64_t>(prompt.size()), iv.kind, iv.renormalize),
                        timing[m].median_seconds});
      }
      const auto csv = run.path("flops.csv");
      write_flops_csv(csv, rows);
      run.artifact("flops", csv);
      json t;
      for (const auto& r : rows) t[r.method] = r.flops.total();
      run.metric("flops", t);
    }
  } else if (o.method == "project") {
    const std::size_t n = std::min(n_shift, ds.eval.size());
    std::vector<std::pair<std::string, InterventionSpec>> zs_methods{{"zero_shot", {}}};
    for (const auto& v : vectors) zs_methods.push_back(v);
    const std::size_t rows = n * (zs_methods.size() + 1);
    Matrix states(static_cast<Index>(rows), c.model.d_model);
    std::vector<std::string> labels(rows), methods(rows);
    std::size_t r = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto zs = eval_prompt(ds, Method::zero_shot(), c.seeds.eval, i, c.model.max_seq_len);
      const auto icl = eval_prompt(ds, Method::icl(c.eval.k), c.seeds.eval, i, c.model.max_seq_len);
      const std::string label = ds.eval[i].subtask >= 0 ? to_string(static_cast<Subtask>(ds.eval[i].subtask)) : "query";
      states.row(static_cast<Index>(r)) = first_answer_state(params, icl, {});
      labels[r] = label;
      methods[r++] = "icl" + std::to_string(c.eval.k);
      for (const auto& [name, iv] : zs_methods) {
        states.row(static_cast<Index>(r)) = first_answer_state(params, zs, iv);
        labels[r] = label;
        methods[r++] = name;
      }
    }
    const auto p = project_2d(states);
    const auto csv = run.path("projection.csv");
    write_projection_csv(csv, p, labels, methods);
    run.artifact("projection", csv);
    run.metric("rank_deficient", p.rank_deficient);
  } else {
    throw ConfigError({"analyze: unknown kind '" + o.method + "' (similarity, decode, bias, flops, timing, project)"});
  }
  run.finish();
  return 0;
}

int cmd_merge(const Options& o) {
  Run run("merge", o);
  const auto& c = run.cfg();
  const auto params = run.model();
  std::vector<ICVBundle> bundles;
  for (const auto& p : vector_paths(run.cfg())) bundles.push_back(load_bundle(p));
  const ICVBundle merged = merge_live(bundles);
  const auto path = run.path("merged.icv");
  save_bundle(path, merged, {{"method", "general_live"}, {"sources", c.vectors}});
  run.artifact("merged", path);
  const Method m = Method::with_intervention("general_live", InterventionSpec::add_per_layer(merged));
  const std::vector<TaskSpec> tasks = c.variants.empty() ? std::vector<TaskSpec>{c.task} : c.variants;
  json acc = json::array();
  for (const auto& t : tasks) acc.push_back(run_eval(params, make_dataset(c, t), m, c).accuracy);
  run.metric("general_live", acc);
  run.finish();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"icvlab: in-context vector workbench"};
  app.require_subcommand(1);
  Options o;
  std::map<std::string, std::function<int(const Options&)>> handlers;

  auto add = [&](const std::string& name, const std::string& help, std::function<int(const Options&)> fn) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "experiment config (JSON)")->required();
    if (name != "validate") {
      sub->add_option("--seed", o.seed, "override seeds.train");
      sub->add_option("--out", o.out, "output directory (overrides out_dir)");
    }
    handlers[name] = std::move(fn);
    return sub;
  };
  add("validate", "check a config and list every error", cmd_validate);
  add("pretrain", "meta-train the toy model", cmd_pretrain);
  add("train-live", "train a LIVE bundle", cmd_train_live);
  add("extract", "extract a non-learnable vector", cmd_extract)
      ->add_option("--method", o.method, "tv | fv | pca")
      ->required()
      ->check(CLI::IsMember({"tv", "fv", "pca"}));
  add("train-lora", "train the low-rank unembedding adapter", cmd_train_lora);
  add("eval", "evaluate config.method", cmd_eval)->add_option("--k", o.k, "demonstrations for icl");
  add("sweep", "layer, strength, shot-count or training-size sweeps", cmd_sweep)
      ->add_option("--kind", o.method, "tv | fv | pca | shots | train-sizes")
      ->required();
  add("analyze", "diagnostics over config.vectors", cmd_analyze)
      ->add_option("--kind", o.method, "similarity | decode | bias | flops | timing | project")
      ->required();
  add("merge", "merge LIVE bundles (general LIVE)", cmd_merge);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  for (auto* sub : app.get_subcommands()) {
    try {
      return handlers.at(sub->get_name())(o);
    } catch (const ConfigError& e) {
      for (const auto& msg : e.errors()) std::cerr << "config error: " << msg << '\n';
      return kExitConfig;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kExitRuntime;
    }
  }
  return kExitConfig;
}
