#pragma once

// Non-learnable in-context vectors (task vector, function vector, PCA-ICV),
// layer and strength sweeps, and a low-rank adapter on the unembedding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "icvlab/eval.hpp"
#include "icvlab/model.hpp"
#include "icvlab/optim.hpp"
#include "icvlab/parallel.hpp"
#include "icvlab/seed.hpp"
#include "icvlab/tasks.hpp"

namespace icvlab {

/// Extraction episodes: k demos each, query without its answer.
inline std::vector<Episode> extraction_episodes(const Dataset& ds, int k, int count, std::uint64_t seed) {
  std::vector<Episode> eps;
  std::mt19937_64 rng(derive_seed(seed, "extraction-queries"));
  std::uniform_int_distribution<std::size_t> pick(0, ds.train.size() - 1);
  for (int i = 0; i < count; ++i) eps.push_back(sample_episode(ds, k, derive_seed(seed, "extraction"), pick(rng)));
  return eps;
}

// ---------------------------------------------------------------------------
// Task vector.

/// Mean final-prompt-position residual per layer over the episodes (L x d).
inline Matrix task_vector_states(const Parameters<double>& params, std::span<const Episode> episodes) {
  if (episodes.empty()) throw std::invalid_argument("extract_task_vector: no extraction episodes");
  const int L = params.config.n_layers;
  std::vector<Matrix> per(episodes.size());
  parallel_for(episodes.size(), [&](std::size_t i) {
    const auto tokens = render(episodes[i], false, params.config.max_seq_len).tokens;
    std::vector<CapturePoint> cap;
    for (int l = 0; l < L; ++l) cap.push_back({l, -1});
    const auto out = forward(params, tokens, {}, cap);
    per[i].resize(L, params.config.d_model);
    for (int l = 0; l < L; ++l) per[i].row(l) = out.captured.at({l, -1});
  });
  Matrix mean = Matrix::Zero(L, params.config.d_model);
  for (const auto& m : per) mean += m;
  return mean / static_cast<double>(episodes.size());
}

inline InterventionSpec extract_task_vector(const Parameters<double>& params, std::span<const Episode> episodes, int layer) {
  if (layer < 0 || layer >= params.config.n_layers) throw std::out_of_range("extract_task_vector: layer out of range");
  const Matrix all = task_vector_states(params, episodes);
  return InterventionSpec::replace_last_token(layer, all.row(layer));
}

struct SweepRow {
  double setting = 0.0;  // layer index or strength
  double accuracy = 0.0;
};

struct SweepTable {
  std::vector<SweepRow> rows;
  std::size_t best = 0;  // argmax, earliest row on ties

  double best_setting() const { return rows.at(best).setting; }
  double best_accuracy() const { return rows.at(best).accuracy; }
};

inline SweepTable make_sweep(std::vector<SweepRow> rows) {
  SweepTable t;
  t.rows = std::move(rows);
  for (std::size_t i = 1; i < t.rows.size(); ++i)
    if (t.rows[i].accuracy > t.rows[t.best].accuracy) t.best = i;
  return t;
}

inline void write_sweep_csv(const std::filesystem::path& path, const std::string& setting_name, const SweepTable& t) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << setting_name << ",accuracy\n";
  for (const auto& r : t.rows) out << r.setting << ',' << r.accuracy << '\n';
}

/// Accuracy of extractor(layer) for every layer (zero-shot prompts).
inline SweepTable sweep_layers(const Parameters<double>& params, const std::function<InterventionSpec(int)>& extractor,
                               const Dataset& ds, std::uint64_t eval_seed, std::size_t limit = 0) {
  std::vector<SweepRow> rows;
  for (int l = 0; l < params.config.n_layers; ++l) {
    const auto r = evaluate(params, ds, Method::with_intervention("layer" + std::to_string(l), extractor(l)), eval_seed,
                            default_decode(), limit);
    rows.push_back({static_cast<double>(l), r.accuracy});
  }
  return make_sweep(std::move(rows));
}

// ---------------------------------------------------------------------------
// Function vector.

/// Mean last-position output of every head through its slice of the output
/// projection: [layer][head] -> d-vector.
inline std::vector<std::vector<Eigen::RowVectorXd>> head_mean_outputs(const Parameters<double>& params,
                                                                      std::span<const Episode> episodes) {
  if (episodes.empty()) throw std::invalid_argument("extract_function_vector: no extraction episodes");
  const auto& cfg = params.config;
  const Index dh = cfg.head_dim();
  std::vector<std::vector<std::vector<Eigen::RowVectorXd>>> per(episodes.size());
  parallel_for(episodes.size(), [&](std::size_t i) {
    const auto tokens = render(episodes[i], false, cfg.max_seq_len).tokens;
    ForwardOptions fo;
    fo.trace_heads = true;
    const auto out = forward(params, tokens, {}, {}, fo);
    per[i].resize(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
      const auto& W = params.layers[static_cast<std::size_t>(l)].w_o.values;
      for (int h = 0; h < cfg.n_heads; ++h) {
        const auto& tr = out.heads[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
        per[i][static_cast<std::size_t>(l)].push_back(tr.output.row(tr.output.rows() - 1) * W.middleRows(h * dh, dh));
      }
    }
  });
  std::vector<std::vector<Eigen::RowVectorXd>> mean(static_cast<std::size_t>(cfg.n_layers),
                                                    std::vector<Eigen::RowVectorXd>(static_cast<std::size_t>(cfg.n_heads),
                                                                                    Eigen::RowVectorXd::Zero(cfg.d_model)));
  for (const auto& e : per)
    for (std::size_t l = 0; l < e.size(); ++l)
      for (std::size_t h = 0; h < e[l].size(); ++h) mean[l][h] += e[l][h];
  for (auto& row : mean)
    for (auto& v : row) v /= static_cast<double>(episodes.size());
  return mean;
}

struct HeadScore {
  int layer = 0;
  int head = 0;
  double accuracy_delta = 0.0;  // vs zero-shot on the dev queries
  double logprob_delta = 0.0;   // tie-breaker: mean gold log-prob change
};

struct FunctionVector {
  InterventionSpec spec;
  std::vector<HeadScore> scores;  // ranked, best first
};

namespace detail {
/// Accuracy and mean first-answer-token gold log-prob on zero-shot dev prompts.
inline std::pair<double, double> dev_score(const Parameters<double>& params, std::span<const Pair> dev,
                                           const InterventionSpec& iv) {
  std::vector<double> acc(dev.size()), lp(dev.size());
  parallel_for(dev.size(), [&](std::size_t i) {
    Episode ep;
    ep.query = dev[i];
    const auto prompt = render(ep, false, params.config.max_seq_len).tokens;
    acc[i] = generate(params, prompt, iv, default_decode()) == dev[i].answer ? 1.0 : 0.0;
    InterventionSpec pinned = iv;
    if (pinned.position < 0) pinned.position = static_cast<int>(prompt.size()) - 1;
    const auto out = forward(params, prompt, pinned);
    const Eigen::RowVectorXd row = out.logits.row(out.logits.rows() - 1);
    const double m = row.maxCoeff();
    lp[i] = row(dev[i].answer.front()) - m - std::log((row.array() - m).exp().sum());
  });
  // Fixed-order sums: independent of thread count.
  double a = 0.0, l = 0.0;
  for (std::size_t i = 0; i < dev.size(); ++i) {
    a += acc[i];
    l += lp[i];
  }
  return {a / static_cast<double>(dev.size()), l / static_cast<double>(dev.size())};
}
}  // namespace detail

inline int default_fv_heads(const ModelConfig& cfg) { return std::max(1, cfg.n_layers * cfg.n_heads / 10); }

/// Scores each head by adding its mean output alone at its layer's last
/// prompt position on the dev queries; FV = sum of the top_n head means,
/// injected at the layer of the best head.
inline FunctionVector extract_function_vector(const Parameters<double>& params, std::span<const Episode> episodes,
                                              std::span<const Pair> dev, int top_n) {
  const auto& cfg = params.config;
  if (dev.empty()) throw std::invalid_argument("extract_function_vector: dev set is empty");
  if (top_n < 0 || top_n > cfg.n_layers * cfg.n_heads) throw std::invalid_argument("extract_function_vector: top_n out of range");
  const auto means = head_mean_outputs(params, episodes);
  const auto [base_acc, base_lp] = detail::dev_score(params, dev, {});
  FunctionVector fv;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto iv = InterventionSpec::add_last_token(l, means[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)]);
      const auto [a, lp] = detail::dev_score(params, dev, iv);
      fv.scores.push_back({l, h, a - base_acc, lp - base_lp});
    }
  }
  std::stable_sort(fv.scores.begin(), fv.scores.end(), [](const HeadScore& x, const HeadScore& y) {
    if (x.accuracy_delta != y.accuracy_delta) return x.accuracy_delta > y.accuracy_delta;
    return x.logprob_delta > y.logprob_delta;
  });
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(cfg.d_model);
  for (int i = 0; i < top_n; ++i) {
    const auto& s = fv.scores[static_cast<std::size_t>(i)];
    sum += means[static_cast<std::size_t>(s.layer)][static_cast<std::size_t>(s.head)];
  }
  fv.spec = InterventionSpec::add_last_token(fv.scores.front().layer, sum);
  return fv;
}

// ---------------------------------------------------------------------------
// PCA-ICV.

/// Leading eigenvector of the uncentered second-moment matrix of the rows
/// of D, signed to agree with the row mean.
inline Eigen::RowVectorXd principal_direction(const Matrix& D) {
  const Matrix M = D.transpose() * D / static_cast<double>(D.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
  Eigen::RowVectorXd v = es.eigenvectors().col(es.eigenvectors().cols() - 1).transpose();
  const Eigen::RowVectorXd mean = D.colwise().mean();
  if (v.dot(mean) < 0) v = -v;
  return v;
}

/// Per-layer state differences (question+answer minus question) at the last
/// token, one row per pair: [layer] -> n x d.
inline std::vector<Matrix> pca_differences(const Parameters<double>& params, std::span<const Pair> demos) {
  const int L = params.config.n_layers;
  std::vector<Matrix> D(static_cast<std::size_t>(L), Matrix(static_cast<Index>(demos.size()), params.config.d_model));
  std::vector<CapturePoint> cap;
  for (int l = 0; l < L; ++l) cap.push_back({l, -1});
  parallel_for(demos.size(), [&](std::size_t i) {
    Episode ep;
    ep.query = demos[i];
    const auto q = forward(params, render(ep, false, params.config.max_seq_len).tokens, {}, cap);
    const auto qa = forward(params, render(ep, true, params.config.max_seq_len).tokens, {}, cap);
    for (int l = 0; l < L; ++l) D[static_cast<std::size_t>(l)].row(static_cast<Index>(i)) = qa.captured.at({l, -1}) - q.captured.at({l, -1});
  });
  return D;
}

inline InterventionSpec extract_pca_icv(const Parameters<double>& params, std::span<const Pair> demos, double strength) {
  if (demos.size() < 2) throw std::invalid_argument("extract_pca_icv: needs at least 2 demonstrations");
  const auto D = pca_differences(params, demos);
  Matrix dirs(params.config.n_layers, params.config.d_model);
  for (int l = 0; l < params.config.n_layers; ++l) dirs.row(l) = principal_direction(D[static_cast<std::size_t>(l)]);
  return InterventionSpec::add_all_tokens(dirs, strength, true);
}

/// Accuracy for each strength applied to fixed directions.
inline SweepTable sweep_strengths(const Parameters<double>& params, const InterventionSpec& pca, std::span<const double> strengths,
                                  const Dataset& ds, std::uint64_t eval_seed, std::size_t limit = 0) {
  std::vector<SweepRow> rows;
  for (double s : strengths) {
    InterventionSpec iv = pca;
    iv.strength = s;
    rows.push_back({s, evaluate(params, ds, Method::with_intervention("pca", iv), eval_seed, default_decode(), limit).accuracy});
  }
  return make_sweep(std::move(rows));
}

// ---------------------------------------------------------------------------
// Low-rank adapter on the unembedding.

struct LoraHyper {
  int rank = 8;
  double lr = 1e-3;
  double dropout = 0.05;
  double weight_decay = 0.0;
  double warmup_fraction = 0.1;
  int batch_size = 2;
  int epochs = 10;
  std::uint64_t seed = 0;
};

struct LoraHead {
  Matrix A;  // d x r
  Matrix B;  // r x N

  Matrix delta() const {
    if (A.cols() == 0) return Matrix::Zero(A.rows(), B.cols());
    return A * B;
  }
  std::size_t trainable_count() const { return static_cast<std::size_t>(A.size() + B.size()); }
};

inline std::size_t lora_trainable_count(const ModelConfig& cfg, int rank) {
  return static_cast<std::size_t>(rank) * static_cast<std::size_t>(cfg.d_model + cfg.vocab_size);
}

/// Trains only A and B with cross entropy on the query answers of zero-shot
/// prompts. The model is frozen, so final hidden states are computed once.
inline LoraHead train_lora_head(const Parameters<double>& params, const Dataset& ds, const LoraHyper& h,
                                const std::function<void(int step, double loss)>& on_step = {}) {
  const auto& cfg = params.config;
  if (h.rank < 0 || h.rank > std::min(cfg.d_model, cfg.vocab_size)) throw std::invalid_argument("train_lora_head: rank out of range");
  if (h.dropout < 0 || h.dropout >= 1) throw std::invalid_argument("train_lora_head: dropout must be in [0, 1)");
  std::mt19937_64 rng(derive_seed(h.seed, "lora-init"));
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
  Tensor<double> A(Matrix(cfg.d_model, h.rank));
  for (Index i = 0; i < A.values.size(); ++i) A.values.data()[i] = normal(rng);
  Tensor<double> B(Matrix::Zero(h.rank, cfg.vocab_size));
  if (h.rank == 0) return {A.values, B.values};

  struct Item {
    Matrix hidden;  // answer positions x d
    Matrix logits;  // answer positions x N
    std::vector<int> gold;
  };
  std::vector<Item> items(ds.train.size());
  parallel_for(ds.train.size(), [&](std::size_t i) {
    Episode ep;
    ep.query = ds.train[i];
    const Rendered r = render(ep, true, cfg.max_seq_len);
    const auto out = forward(params, r.tokens);
    Item it;
    it.hidden.resize(static_cast<Index>(r.answer_positions.size()), cfg.d_model);
    it.logits.resize(static_cast<Index>(r.answer_positions.size()), cfg.vocab_size);
    for (std::size_t p = 0; p < r.answer_positions.size(); ++p) {
      it.hidden.row(static_cast<Index>(p)) = out.final_hidden.row(r.answer_positions[p]);
      it.logits.row(static_cast<Index>(p)) = out.logits.row(r.answer_positions[p]);
    }
    it.gold = ds.train[i].answer;
    items[i] = std::move(it);
  });

  AdamW<double> opt({{{&A, &B}, h.lr, h.weight_decay}});
  const std::size_t n = items.size();
  const std::size_t per_step = static_cast<std::size_t>(std::max(1, h.batch_size));
  const std::size_t total = ((n + per_step - 1) / per_step) * static_cast<std::size_t>(h.epochs);
  std::bernoulli_distribution keep(1.0 - h.dropout);
  int step = 0;
  for (int epoch = 0; epoch < h.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(derive_seed(h.seed, "lora-order", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t s0 = 0; s0 < n; s0 += per_step) {
      const std::size_t cnt = std::min(per_step, n - s0);
      double loss = 0.0;
      for (std::size_t j = 0; j < cnt; ++j) {
        const Item& it = items[order[s0 + j]];
        Matrix mask(it.hidden.rows(), it.hidden.cols());
        for (Index e = 0; e < mask.size(); ++e) mask.data()[e] = keep(rng) ? 1.0 / (1.0 - h.dropout) : 0.0;
        Tape tape;
        DVar a = tape.leaf(A, true);
        DVar b = tape.leaf(B, true);
        DVar hid = tape.constant(it.hidden.cwiseProduct(mask));
        DVar logits = add(tape.constant(it.logits), matmul(matmul(hid, a), b));
        DVar l = cross_entropy(logits, std::span<const int>(it.gold));
        loss += l.value()(0, 0);
        tape.backward(l);
      }
      loss /= static_cast<double>(cnt);
      if (!std::isfinite(loss)) throw std::runtime_error("train_lora_head: loss diverged (non-finite) at step " + std::to_string(step));
      opt.step(lr_multiplier(static_cast<std::size_t>(step), total, h.warmup_fraction, Schedule::kLinearDecay),
               1.0 / static_cast<double>(cnt));
      if (on_step) on_step(step, loss);
      ++step;
    }
  }
  return {A.values, B.values};
}

}  // namespace icvlab
