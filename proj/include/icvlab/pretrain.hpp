#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "icvlab/model.hpp"
#include "icvlab/optim.hpp"
#include "icvlab/tasks.hpp"

namespace icvlab {

struct PretrainHyper {
  int steps = 3000;
  int batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double warmup_fraction = 0.05;
  int k_min = 0;  // demonstrations per episode, uniform in [k_min, k_max]
  int k_max = 16;
  int log_every = 100;
};

struct PretrainResult {
  std::vector<double> loss_curve;  // per-step batch loss

  /// Exponential moving average of the loss curve.
  std::vector<double> smoothed(double beta = 0.98) const {
    std::vector<double> out;
    double ema = 0.0;
    for (std::size_t i = 0; i < loss_curve.size(); ++i) {
      ema = beta * ema + (1 - beta) * loss_curve[i];
      out.push_back(ema / (1 - std::pow(beta, static_cast<double>(i + 1))));
    }
    return out;
  }
};

/// Tokens and next-token targets for one pretraining sequence: every demo
/// answer token, every demo-closing SEP, the query answer and its SEP.
struct TrainingSequence {
  std::vector<int> tokens;
  std::vector<int> positions;
  std::vector<int> targets;
};

inline TrainingSequence make_training_sequence(const Episode& ep, int max_seq_len) {
  Rendered r = render(ep, true, max_seq_len - 1);
  TrainingSequence s;
  s.tokens = r.tokens;
  s.tokens.push_back(tok::kSep);
  for (int p : r.demo_target_positions) s.positions.push_back(p);
  for (int p : r.answer_positions) s.positions.push_back(p);
  s.positions.push_back(static_cast<int>(r.tokens.size()) - 1);  // last answer token predicts SEP
  for (int p : s.positions) s.targets.push_back(s.tokens[static_cast<std::size_t>(p) + 1]);
  return s;
}

/// Next-token cross entropy restricted to answer positions, AdamW with
/// decoupled weight decay on weight matrices, warmup then cosine decay.
template <typename S>
PretrainResult pretrain(Parameters<S>& params, const std::function<Episode()>& episodes, const PretrainHyper& hyper,
                        const std::function<void(int step, double loss)>& on_log = {}) {
  std::vector<Tensor<S>*> decayed, plain;
  params.for_each([&](const std::string& name, Tensor<S>& t) {
    const bool is_matrix = name.find("w_") != std::string::npos || name == "unembed";
    (is_matrix ? decayed : plain).push_back(&t);
  });
  AdamW<S> opt({{decayed, hyper.lr, hyper.weight_decay}, {plain, hyper.lr, 0.0}});
  params.zero_grad();

  PretrainResult result;
  const auto total = static_cast<std::size_t>(std::max(0, hyper.steps));
  for (int step = 0; step < hyper.steps; ++step) {
    double batch_loss = 0.0;
    for (int b = 0; b < hyper.batch_size; ++b) {
      const Episode ep = episodes();
      const TrainingSequence seq = make_training_sequence(ep, params.config.max_seq_len);
      BasicTape<S> tape;
      auto pv = bind_trainable(tape, params);
      auto g = forward_graph(tape, pv, params.config, seq.tokens);
      Var<S> picked = gather_rows(g.logits, std::span<const int>(seq.positions));
      Var<S> loss = cross_entropy(picked, std::span<const int>(seq.targets));
      const double lv = static_cast<double>(loss.value()(0, 0));
      if (!std::isfinite(lv)) throw std::runtime_error("pretrain: loss diverged (non-finite) at step " + std::to_string(step));
      batch_loss += lv;
      tape.backward(loss);
    }
    batch_loss /= std::max(1, hyper.batch_size);
    result.loss_curve.push_back(batch_loss);
    opt.step(lr_multiplier(static_cast<std::size_t>(step), total, hyper.warmup_fraction, Schedule::kCosine),
             1.0 / std::max(1, hyper.batch_size));
    if (on_log && hyper.log_every > 0 && (step % hyper.log_every == 0 || step + 1 == hyper.steps)) on_log(step, batch_loss);
  }
  params.zero_grad();
  return result;
}

}  // namespace icvlab
