#pragma once

// Learnable per-layer shift vectors trained to make the demo-free model
// match its own k-shot output distribution.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "icvlab/eval.hpp"
#include "icvlab/model.hpp"
#include "icvlab/optim.hpp"
#include "icvlab/parallel.hpp"
#include "icvlab/seed.hpp"
#include "icvlab/tasks.hpp"

namespace icvlab {

struct LiveHyper {
  double lambda = 0.5;  // weight of the ground-truth term
  double lr_v = 1e-3;
  double lr_alpha = 1e-2;
  double weight_decay = 1e-3;
  double warmup_fraction = 0.1;
  int batch_size = 2;
  int accumulation = 8;
  int epochs = 10;
  int k = 32;
  std::uint64_t seed = 0;
  bool use_kl = true;   // L_d term
  bool use_gt = true;   // L_gt term
  bool shared_mode = false;
  int eval_limit = 0;   // > 0: evaluate on that many eval queries after each epoch

  void validate() const {
    if (lambda < 0) throw std::invalid_argument("live.lambda must be >= 0");
    if (lr_v < 0 || lr_alpha < 0) throw std::invalid_argument("live learning rates must be >= 0");
    if (batch_size < 1 || accumulation < 1) throw std::invalid_argument("live.batch_size and live.accumulation must be >= 1");
    if (epochs < 0) throw std::invalid_argument("live.epochs must be >= 0");
    if (k < 0) throw std::invalid_argument("live.k must be >= 0");
    if (!use_kl && !use_gt) throw std::invalid_argument("live: at least one loss term must be enabled");
  }
};

/// v ~ N(0, 0.01^2) per component, every gate 0.1.
inline ICVBundle init_live(const ModelConfig& cfg, std::uint64_t seed, bool shared_mode = false) {
  std::mt19937_64 rng(derive_seed(seed, "init-live"));
  std::normal_distribution<double> normal(0.0, 0.01);
  ICVBundle b;
  b.shared_mode = shared_mode;
  b.vectors.resize(shared_mode ? 1 : cfg.n_layers, cfg.d_model);
  for (Index i = 0; i < b.vectors.size(); ++i) b.vectors.data()[i] = normal(rng);
  b.alphas.assign(static_cast<std::size_t>(cfg.n_layers), 0.1);
  return b;
}

/// Next-token distributions (rows) at the query-answer positions of the
/// rendered episode, teacher-forced, under an intervention.
inline Matrix answer_distributions(const Parameters<double>& params, const Episode& ep, const InterventionSpec& iv) {
  const Rendered r = render(ep, true, params.config.max_seq_len);
  const auto out = forward(params, r.tokens, iv);
  Matrix p(static_cast<Index>(r.answer_positions.size()), params.config.vocab_size);
  for (std::size_t i = 0; i < r.answer_positions.size(); ++i) p.row(static_cast<Index>(i)) = out.logits.row(r.answer_positions[i]);
  return softmax_rows<double>(p);
}

/// Plain forward over demos + query; never differentiated.
inline Matrix teacher_distribution(const Parameters<double>& params, const Episode& ep) {
  return answer_distributions(params, ep, {});
}

inline Episode demo_free(const Episode& ep) {
  Episode q = ep;
  q.demos.clear();
  return q;
}

/// The demo-free query with the bundle applied.
inline Matrix student_distribution(const Parameters<double>& params, const Episode& ep, const ICVBundle& bundle) {
  return answer_distributions(params, demo_free(ep), InterventionSpec::add_per_layer(bundle));
}

struct LiveLoss {
  double total = 0.0;
  double l_d = 0.0;
  double l_gt = 0.0;
};

/// lambda * L_gt + L_d over answer positions (rows), each term a row mean.
inline LiveLoss live_loss(const Matrix& teacher, const Matrix& student, std::span<const int> gold, double lambda) {
  if (teacher.rows() != student.rows() || teacher.cols() != student.cols() ||
      static_cast<Index>(gold.size()) != teacher.rows()) {
    throw std::invalid_argument("live_loss: teacher, student and gold must cover the same positions");
  }
  LiveLoss l;
  const Index P = teacher.rows();
  for (Index r = 0; r < P; ++r) {
    const int g = gold[static_cast<std::size_t>(r)];
    if (g < 0 || g >= student.cols()) throw std::out_of_range("live_loss: gold token outside vocabulary");
    l.l_d += kl_divergence(std::span<const double>(teacher.row(r).data(), static_cast<std::size_t>(teacher.cols())),
                           std::span<const double>(student.row(r).data(), static_cast<std::size_t>(student.cols())));
    l.l_gt -= std::log(std::max(student(r, g), kKlFloor));
  }
  if (P > 0) {
    l.l_d /= static_cast<double>(P);
    l.l_gt /= static_cast<double>(P);
  }
  l.total = lambda * l.l_gt + l.l_d;
  return l;
}

namespace detail {

/// Hook adding alpha_l * v_l with V and alpha as differentiable vars.
inline LayerHook<double> live_hook(Var<double> V, Var<double> alpha, bool shared) {
  return [V, alpha, shared](Tape&, int l, DVar x) {
    DVar v = slice_rows(V, shared ? 0 : l, 1);
    DVar a = slice_cols(alpha, l, 1);
    count_macs(x.rows() * x.cols());
    return add_row(x, scale_by(v, a));
  };
}

}  // namespace detail

/// Differentiable student loss on a fresh tape; gradients land in V.grad and
/// alpha.grad. Returns the loss parts.
inline LiveLoss live_loss_backward(const Parameters<double>& params, const Episode& ep, const Matrix& teacher,
                                   Tensor<double>& V, Tensor<double>& alpha, bool shared, const LiveHyper& h) {
  const Rendered r = render(demo_free(ep), true, params.config.max_seq_len);
  Tape tape;
  auto pv = bind_frozen(tape, params);
  DVar vv = tape.leaf(V, true);
  DVar av = tape.leaf(alpha, true);
  GraphOptions<double> go;
  go.hook = detail::live_hook(vv, av, shared);
  auto g = forward_graph(tape, pv, params.config, r.tokens, go);
  DVar logits = gather_rows(g.logits, std::span<const int>(r.answer_positions));
  std::vector<int> gold(ep.query.answer.begin(), ep.query.answer.end());

  LiveLoss parts;
  DVar q = softmax_rows(logits);
  DVar l_d = kl_divergence(tape.constant(teacher), q);
  DVar l_gt = cross_entropy(logits, std::span<const int>(gold));
  parts.l_d = l_d.value()(0, 0);
  parts.l_gt = l_gt.value()(0, 0);
  DVar total;
  if (h.use_kl && h.use_gt) {
    total = add(scale(l_gt, h.lambda), l_d);
  } else if (h.use_kl) {
    total = l_d;
  } else {
    total = l_gt;
  }
  parts.total = total.value()(0, 0);
  tape.backward(total);
  return parts;
}

struct LiveMetric {
  int step = 0;
  double loss = 0.0;
  double l_d = 0.0;
  double l_gt = 0.0;
  std::optional<double> eval_acc;
  int epoch = -1;
};

struct LiveResult {
  ICVBundle bundle;
  std::vector<LiveMetric> metrics;
};

/// One optimizer step per batch_size * accumulation queries. Each epoch
/// visits the training queries in a fresh order with freshly drawn demos.
inline LiveResult train_live(const Parameters<double>& params, const Dataset& ds, const LiveHyper& h,
                             const std::function<void(const LiveMetric&)>& on_metric = {},
                             std::optional<ICVBundle> init = std::nullopt) {
  h.validate();
  if (ds.train.size() < static_cast<std::size_t>(h.batch_size)) throw std::invalid_argument("train_live: dataset smaller than batch");
  const auto& cfg = params.config;
  ICVBundle start = init ? *init : init_live(cfg, h.seed, h.shared_mode);
  start.validate(cfg.n_layers, cfg.d_model);

  Tensor<double> V(start.vectors);
  Matrix a0(1, cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) a0(0, l) = start.alphas[static_cast<std::size_t>(l)];
  Tensor<double> alpha(a0);
  AdamW<double> opt({{{&V}, h.lr_v, h.weight_decay}, {{&alpha}, h.lr_alpha, h.weight_decay}});

  const std::size_t n = ds.train.size();
  const std::size_t per_step = static_cast<std::size_t>(h.batch_size * h.accumulation);
  const std::size_t steps_per_epoch = (n + per_step - 1) / per_step;
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(h.epochs);

  auto current = [&] {
    ICVBundle b;
    b.shared_mode = start.shared_mode;
    b.vectors = V.values;
    b.alphas.assign(alpha.values.data(), alpha.values.data() + alpha.values.size());
    return b;
  };

  LiveResult res;
  int step = 0;
  for (int epoch = 0; epoch < h.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(derive_seed(h.seed, "live-order", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const std::uint64_t demo_seed = derive_seed(h.seed, "live-demos", static_cast<std::uint64_t>(epoch));

    for (std::size_t s0 = 0; s0 < n; s0 += per_step) {
      const std::size_t cnt = std::min(per_step, n - s0);
      std::vector<Episode> eps(cnt);
      std::vector<Matrix> teach(cnt);
      parallel_for(cnt, [&](std::size_t i) {
        eps[i] = sample_episode(ds, h.k, demo_seed, order[s0 + i]);
        if (h.use_kl) teach[i] = teacher_distribution(params, eps[i]);
      });
      LiveMetric m;
      m.step = step;
      for (std::size_t i = 0; i < cnt; ++i) {
        if (!h.use_kl) teach[i] = Matrix::Zero(static_cast<Index>(eps[i].query.answer.size()), cfg.vocab_size);
        const LiveLoss l = live_loss_backward(params, eps[i], teach[i], V, alpha, start.shared_mode, h);
        m.loss += l.total;
        m.l_d += l.l_d;
        m.l_gt += l.l_gt;
      }
      m.loss /= static_cast<double>(cnt);
      m.l_d /= static_cast<double>(cnt);
      m.l_gt /= static_cast<double>(cnt);
      if (!std::isfinite(m.loss)) throw std::runtime_error("train_live: loss diverged (non-finite) at step " + std::to_string(step));
      opt.step(lr_multiplier(static_cast<std::size_t>(step), total_steps, h.warmup_fraction, Schedule::kLinearDecay),
               1.0 / static_cast<double>(cnt));
      ++step;
      const bool epoch_end = s0 + per_step >= n;
      if (epoch_end) {
        m.epoch = epoch;
        if (h.eval_limit > 0) {
          m.eval_acc = evaluate(params, ds, Method::with_intervention("live", InterventionSpec::add_per_layer(current())),
                                derive_seed(h.seed, "live-eval"), default_decode(), static_cast<std::size_t>(h.eval_limit))
                           .accuracy;
        }
      }
      res.metrics.push_back(m);
      if (on_metric) on_metric(m);
    }
  }
  res.bundle = current();
  return res;
}

/// General LIVE: v_l = sum_i alpha_l^i v_l^i with the merged gates set to 1.
inline ICVBundle merge_live(std::span<const ICVBundle> bundles) {
  if (bundles.empty()) throw std::invalid_argument("merge_live: no bundles");
  const int L = bundles[0].n_layers();
  const Index d = bundles[0].dim();
  ICVBundle out;
  out.vectors = Matrix::Zero(L, d);
  out.alphas.assign(static_cast<std::size_t>(L), 1.0);
  for (const auto& b : bundles) {
    if (b.shared_mode) throw std::invalid_argument("merge_live: shared-mode bundles cannot be merged");
    if (b.n_layers() != L || b.dim() != d || b.vectors.rows() != L) throw std::invalid_argument("merge_live: shape mismatch");
    for (int l = 0; l < L; ++l) out.vectors.row(l) += b.shift(l);
  }
  return out;
}

}  // namespace icvlab
