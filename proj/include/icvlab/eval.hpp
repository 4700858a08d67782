#pragma once

// Evaluation harness: exact-match accuracy of generated answers under a
// method (zero-shot, k-shot ICL, an intervention, or an unembedding adapter).

#include <cstdint>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "icvlab/model.hpp"
#include "icvlab/parallel.hpp"
#include "icvlab/tasks.hpp"

namespace icvlab {

struct Method {
  std::string name = "zero_shot";
  int k = 0;  // demonstrations in the prompt
  InterventionSpec intervention;
  std::optional<Matrix> unembed_delta;

  static Method zero_shot() { return {}; }
  static Method icl(int k) {
    Method m;
    m.name = "icl" + std::to_string(k);
    m.k = k;
    return m;
  }
  static Method with_intervention(std::string name, InterventionSpec iv) {
    Method m;
    m.name = std::move(name);
    m.intervention = std::move(iv);
    return m;
  }
  static Method with_unembed_delta(std::string name, Matrix delta) {
    Method m;
    m.name = std::move(name);
    m.unembed_delta = std::move(delta);
    return m;
  }
};

struct EvalResult {
  double accuracy = 0.0;  // fraction in [0, 1]
  std::vector<std::vector<int>> predictions;
  std::vector<bool> correct;
  std::size_t size() const { return correct.size(); }
};

inline DecodeConfig default_decode() {
  DecodeConfig d;
  d.max_new = 5;
  d.beams = 1;
  d.stop_token = tok::kSep;
  return d;
}

/// Prompt for eval query i under a method (demos only for ICL).
inline std::vector<int> eval_prompt(const Dataset& ds, const Method& m, std::uint64_t seed, std::size_t i,
                                    int max_seq_len) {
  Episode ep = sample_eval_episode(ds, m.k, seed, i);
  return render(ep, false, max_seq_len).tokens;
}

/// Accuracy over the first `limit` eval pairs (all when limit = 0). Per-query
/// work is independent, so results do not depend on the thread count.
inline EvalResult evaluate(const Parameters<double>& params, const Dataset& ds, const Method& m, std::uint64_t seed,
                           const DecodeConfig& dc = default_decode(), std::size_t limit = 0) {
  const std::size_t n = limit == 0 ? ds.eval.size() : std::min(limit, ds.eval.size());
  EvalResult r;
  r.predictions.resize(n);
  r.correct.resize(n);
  ForwardOptions fo;
  if (m.unembed_delta) fo.unembed_delta = &*m.unembed_delta;
  std::vector<char> ok(n, 0);
  parallel_for(n, [&](std::size_t i) {
    auto prompt = eval_prompt(ds, m, seed, i, params.config.max_seq_len);
    r.predictions[i] = generate(params, prompt, m.intervention, dc, fo);
    ok[i] = r.predictions[i] == ds.eval[i].answer ? 1 : 0;
  });
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    r.correct[i] = ok[i] != 0;
    hits += ok[i];
  }
  r.accuracy = n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
  return r;
}

}  // namespace icvlab
