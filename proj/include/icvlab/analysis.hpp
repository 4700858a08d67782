#pragma once

// Diagnostics: shift-direction similarity, unembedding decode, answer-bias
// accounting, FLOPs and latency, 2-D projections, CSV writers.
// FLOPs are reported as 2 per multiply-add throughout.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "icvlab/eval.hpp"
#include "icvlab/model.hpp"
#include "icvlab/parallel.hpp"
#include "icvlab/tasks.hpp"

namespace icvlab {

// ---------------------------------------------------------------------------
// Shift-direction similarity.

struct ShiftRecord {
  Eigen::RowVectorXd r_zs, r_icl, r_method;
};

struct SimilarityResult {
  std::vector<double> cosines;  // per record; NaN where degenerate
  std::vector<bool> valid;
  double mean = 0.0;
  std::size_t degenerate = 0;
};

inline constexpr double kShiftNormFloor = 1e-9;

inline SimilarityResult shift_similarity(std::span<const ShiftRecord> records) {
  SimilarityResult out;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : records) {
    const Eigen::RowVectorXd s_gt = r.r_icl - r.r_zs;
    const Eigen::RowVectorXd s_m = r.r_method - r.r_zs;
    const double a = s_gt.norm();
    const double b = s_m.norm();
    if (a <= kShiftNormFloor || b <= kShiftNormFloor) {
      out.cosines.push_back(std::nan(""));
      out.valid.push_back(false);
      ++out.degenerate;
      continue;
    }
    const double c = std::clamp(s_gt.dot(s_m) / (a * b), -1.0, 1.0);
    out.cosines.push_back(c);
    out.valid.push_back(true);
    sum += c;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("shift_similarity: every query has a degenerate shift");
  out.mean = sum / static_cast<double>(n);
  return out;
}

/// Residual at `layer` (default: last) at the final prompt position, i.e.
/// the state that predicts the first answer token.
inline Eigen::RowVectorXd first_answer_state(const Parameters<double>& params, std::span<const int> prompt,
                                             const InterventionSpec& iv, int layer = -1) {
  const int l = layer < 0 ? params.config.n_layers - 1 : layer;
  const CapturePoint cp{l, -1};
  return forward(params, prompt, iv, std::span<const CapturePoint>(&cp, 1)).captured.at(cp);
}

/// Records over the first `count` eval queries: zero-shot, k-shot ICL and
/// the method (applied to the zero-shot prompt).
inline std::vector<ShiftRecord> shift_records(const Parameters<double>& params, const Dataset& ds, int k,
                                              const InterventionSpec& method, std::uint64_t seed, std::size_t count = 200,
                                              int layer = -1) {
  const std::size_t n = std::min(count, ds.eval.size());
  std::vector<ShiftRecord> recs(n);
  parallel_for(n, [&](std::size_t i) {
    const auto zs = eval_prompt(ds, Method::zero_shot(), seed, i, params.config.max_seq_len);
    const auto icl = eval_prompt(ds, Method::icl(k), seed, i, params.config.max_seq_len);
    recs[i].r_zs = first_answer_state(params, zs, {}, layer);
    recs[i].r_icl = first_answer_state(params, icl, {}, layer);
    recs[i].r_method = first_answer_state(params, zs, method, layer);
  });
  return recs;
}

// ---------------------------------------------------------------------------
// Unembedding decode.

struct DecodedVector {
  Eigen::RowVectorXd probs;                  // softmax(v E)
  std::vector<std::pair<int, double>> top;  // (token, prob), ties by lower id
};

inline DecodedVector decode_vector(const Eigen::RowVectorXd& v, const Parameters<double>& params, int top_k) {
  if (v.size() != params.config.d_model) throw std::invalid_argument("decode_vector: vector length must equal d_model");
  DecodedVector out;
  const Matrix logits = v * params.unembed.values;
  out.probs = softmax_rows<double>(logits).row(0);
  std::vector<int> ids(static_cast<std::size_t>(out.probs.size()));
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return out.probs(a) > out.probs(b); });
  const int k = std::clamp(top_k, 0, static_cast<int>(ids.size()));
  for (int i = 0; i < k; ++i) out.top.emplace_back(ids[static_cast<std::size_t>(i)], out.probs(ids[static_cast<std::size_t>(i)]));
  return out;
}

// ---------------------------------------------------------------------------
// Bias report.

struct BiasReport {
  // counts[expected][emitted]; emitted column kNumCategories = outside every answer space.
  std::array<std::array<std::int64_t, kNumCategories + 1>, kNumCategories> counts{};
  std::int64_t hallucination = 0;  // yes/no emitted where another category was expected
  std::int64_t meaningless = 0;
  std::int64_t total() const {
    std::int64_t t = 0;
    for (const auto& row : counts)
      for (auto v : row) t += v;
    return t;
  }
};

inline BiasReport bias_report(const TaskSpec& spec, std::span<const std::vector<int>> predictions,
                              std::span<const std::optional<AnswerCategory>> expected) {
  if (predictions.size() != expected.size()) throw std::invalid_argument("bias_report: prediction/label count mismatch");
  BiasReport r;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (!expected[i]) throw std::invalid_argument("bias_report: query " + std::to_string(i) + " has no answer category");
    const int e = static_cast<int>(*expected[i]);
    std::optional<AnswerCategory> got;
    if (!predictions[i].empty()) got = spec.category_of_token(predictions[i].front());
    const int col = got ? static_cast<int>(*got) : kNumCategories;
    ++r.counts[static_cast<std::size_t>(e)][static_cast<std::size_t>(col)];
    if (!got) ++r.meaningless;
    if (got && *got == AnswerCategory::kYesNo && *expected[i] != AnswerCategory::kYesNo) ++r.hallucination;
  }
  return r;
}

/// Expected categories of the first `n` eval pairs of a dataset.
inline std::vector<std::optional<AnswerCategory>> expected_categories(const Dataset& ds, std::size_t n) {
  std::vector<std::optional<AnswerCategory>> out;
  for (std::size_t i = 0; i < n && i < ds.eval.size(); ++i) {
    const auto& p = ds.eval[i];
    out.push_back(p.subtask >= 0 ? std::optional(category_of(static_cast<Subtask>(p.subtask)))
                                 : ds.spec.category_of_token(p.answer.front()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// FLOPs.

struct FlopsBreakdown {
  std::array<std::int64_t, static_cast<int>(MacComponent::kCount)> flops{};
  std::int64_t total() const { return std::accumulate(flops.begin(), flops.end(), std::int64_t{0}); }
};

inline const char* to_string(MacComponent c) {
  switch (c) {
    case MacComponent::kEmbeddings:
      return "embeddings";
    case MacComponent::kAttentionScores:
      return "attention_scores";
    case MacComponent::kAttentionMix:
      return "attention_mix";
    case MacComponent::kProjections:
      return "projections";
    case MacComponent::kMlp:
      return "mlp";
    case MacComponent::kUnembedding:
      return "unembedding";
    case MacComponent::kIntervention:
      return "intervention";
    case MacComponent::kCount:
      break;
  }
  return "?";
}

/// Closed-form forward FLOPs for one pass over seq_len tokens. Embeddings
/// are lookups (0). Attention is counted as the full T x T product.
inline FlopsBreakdown flops_estimate(const ModelConfig& cfg, std::int64_t seq_len,
                                     InterventionSpec::Kind kind = InterventionSpec::Kind::kNone, bool renormalize = true) {
  if (seq_len > cfg.max_seq_len) throw std::out_of_range("flops_estimate: seq_len exceeds max_seq_len");
  FlopsBreakdown f;
  const std::int64_t T = seq_len, d = cfg.d_model, L = cfg.n_layers, m = cfg.d_mlp, N = cfg.vocab_size;
  auto set = [&](MacComponent c, std::int64_t macs) { f.flops[static_cast<std::size_t>(c)] = 2 * macs; };
  set(MacComponent::kEmbeddings, 0);
  set(MacComponent::kAttentionScores, L * T * T * d);
  set(MacComponent::kAttentionMix, L * T * T * d);
  set(MacComponent::kProjections, L * (T * d * 3 * d + T * d * d));
  set(MacComponent::kMlp, L * 2 * T * d * m);
  set(MacComponent::kUnembedding, T * d * N);
  std::int64_t iv = 0;
  using K = InterventionSpec::Kind;
  if (T > 0) {
    if (kind == K::kAddPerLayer) iv = L * T * d;
    if (kind == K::kAddLastToken) iv = d;
    if (kind == K::kAddAllTokens) iv = L * T * d * (renormalize ? 4 : 1);
  }
  set(MacComponent::kIntervention, iv);
  return f;
}

/// Multiply-adds recorded during one real forward pass.
inline MacTally instrumented_macs(const Parameters<double>& params, std::span<const int> tokens,
                                  const InterventionSpec& iv = {}) {
  MacTally tally;
  {
    MacCounter counter(tally);
    (void)forward(params, tokens, iv);
  }
  return tally;
}

// ---------------------------------------------------------------------------
// Timing.

struct TimingRow {
  std::string method;
  double median_seconds = 0.0;
  std::size_t samples = 0;
};

/// Median wall time of a single forward per method. Methods are timed in an
/// interleaved order so drift affects all of them alike; one warmup round is
/// discarded. Runs on the calling thread only.
inline std::vector<TimingRow> timing_benchmark(const Parameters<double>& params,
                                               std::span<const std::vector<int>> zero_shot_prompts,
                                               std::span<const Method> methods, const Dataset* ds, std::uint64_t seed,
                                               int repeats) {
  if (repeats < 3) throw std::invalid_argument("timing_benchmark: repeats must be >= 3");
  std::vector<std::vector<std::vector<int>>> prompts(methods.size());
  for (std::size_t m = 0; m < methods.size(); ++m) {
    for (std::size_t i = 0; i < zero_shot_prompts.size(); ++i) {
      if (methods[m].k > 0) {
        if (!ds) throw std::invalid_argument("timing_benchmark: ICL methods need a dataset");
        prompts[m].push_back(eval_prompt(*ds, methods[m], seed, i, params.config.max_seq_len));
      } else {
        prompts[m].push_back(zero_shot_prompts[i]);
      }
    }
  }
  std::vector<std::vector<double>> times(methods.size());
  for (int r = 0; r <= repeats; ++r) {
    for (std::size_t i = 0; i < zero_shot_prompts.size(); ++i) {
      for (std::size_t m = 0; m < methods.size(); ++m) {
        ForwardOptions fo;
        if (methods[m].unembed_delta) fo.unembed_delta = &*methods[m].unembed_delta;
        const auto t0 = std::chrono::steady_clock::now();
        (void)forward(params, prompts[m][i], methods[m].intervention, {}, fo);
        const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (r > 0) times[m].push_back(dt);
      }
    }
  }
  std::vector<TimingRow> rows;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    auto& t = times[m];
    std::sort(t.begin(), t.end());
    const std::size_t n = t.size();
    const double med = n == 0 ? 0.0 : (n % 2 ? t[n / 2] : 0.5 * (t[n / 2 - 1] + t[n / 2]));
    rows.push_back({methods[m].name, med, n});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// 2-D projection.

struct Projection {
  Matrix coords;              // n x 2
  Matrix axes;                // 2 x d principal directions
  bool rank_deficient = false;
};

inline Projection project_2d(const Matrix& states) {
  if (states.rows() < 3) throw std::invalid_argument("project_2d: needs at least 3 states");
  const Eigen::RowVectorXd mean = states.colwise().mean();
  const Matrix X = states.rowwise() - mean;
  const Matrix C = X.transpose() * X / static_cast<double>(X.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
  const Index d = states.cols();
  Projection p;
  p.axes = Matrix::Zero(2, d);
  const double top = std::max(es.eigenvalues()(d - 1), 0.0);
  const double tol = 1e-12 * std::max(1.0, top);
  for (int a = 0; a < 2 && a < d; ++a) {
    const double ev = es.eigenvalues()(d - 1 - a);
    if (ev <= tol) {
      p.rank_deficient = true;
      continue;
    }
    Eigen::RowVectorXd v = es.eigenvectors().col(d - 1 - a).transpose();
    for (Index j = 0; j < d; ++j) {
      if (std::abs(v(j)) > 1e-12) {
        if (v(j) < 0) v = -v;
        break;
      }
    }
    p.axes.row(a) = v;
  }
  if (d < 2) p.rank_deficient = true;
  p.coords = X * p.axes.transpose();
  return p;
}

// ---------------------------------------------------------------------------
// CSV writers (the plotting contract).

namespace detail {
inline std::ofstream open_csv(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  return out;
}
}  // namespace detail

inline void write_similarity_csv(const std::filesystem::path& path, const std::string& method, const SimilarityResult& s) {
  auto out = detail::open_csv(path);
  out << "query,method,cosine,valid\n";
  for (std::size_t i = 0; i < s.cosines.size(); ++i) {
    out << i << ',' << method << ',';
    if (s.valid[i]) out << s.cosines[i];
    out << ',' << (s.valid[i] ? 1 : 0) << '\n';
  }
}

inline void write_bias_csv(const std::filesystem::path& path, const std::string& method, const BiasReport& r) {
  auto out = detail::open_csv(path);
  out << "method,expected,emitted,count\n";
  for (int e = 0; e < kNumCategories; ++e) {
    for (int c = 0; c <= kNumCategories; ++c) {
      out << method << ',' << to_string(static_cast<AnswerCategory>(e)) << ','
          << (c == kNumCategories ? "meaningless" : to_string(static_cast<AnswerCategory>(c))) << ','
          << r.counts[static_cast<std::size_t>(e)][static_cast<std::size_t>(c)] << '\n';
    }
  }
}

struct FlopsRow {
  std::string method;
  std::int64_t seq_len = 0;
  FlopsBreakdown flops;
  std::optional<double> median_seconds;
};

inline void write_flops_csv(const std::filesystem::path& path, std::span<const FlopsRow> rows) {
  auto out = detail::open_csv(path);
  out << "# FLOPs counted as 2 per multiply-add\n";
  out << "method,seq_len,component,flops\n";
  for (const auto& r : rows) {
    for (int c = 0; c < static_cast<int>(MacComponent::kCount); ++c) {
      out << r.method << ',' << r.seq_len << ',' << to_string(static_cast<MacComponent>(c)) << ','
          << r.flops.flops[static_cast<std::size_t>(c)] << '\n';
    }
    out << r.method << ',' << r.seq_len << ",total," << r.flops.total() << '\n';
  }
}

inline void write_timing_csv(const std::filesystem::path& path, std::span<const TimingRow> rows) {
  auto out = detail::open_csv(path);
  out << "method,median_seconds,samples\n";
  for (const auto& r : rows) out << r.method << ',' << r.median_seconds << ',' << r.samples << '\n';
}

inline void write_projection_csv(const std::filesystem::path& path, const Projection& p, std::span<const std::string> labels,
                                 std::span<const std::string> methods) {
  if (labels.size() != static_cast<std::size_t>(p.coords.rows()) || methods.size() != labels.size()) {
    throw std::invalid_argument("write_projection_csv: label count mismatch");
  }
  auto out = detail::open_csv(path);
  out << "x,y,label,method\n";
  for (Index i = 0; i < p.coords.rows(); ++i) {
    out << p.coords(i, 0) << ',' << p.coords(i, 1) << ',' << labels[static_cast<std::size_t>(i)] << ','
        << methods[static_cast<std::size_t>(i)] << '\n';
  }
}

}  // namespace icvlab
