#pragma once

// Miniature pre-norm decoder-only transformer with learned absolute
// positions, an untied unembedding matrix and per-layer intervention hooks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "icvlab/intervention.hpp"
#include "icvlab/tensor.hpp"

namespace icvlab {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_mlp = 256;
  int vocab_size = 128;
  int max_seq_len = 512;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw std::invalid_argument(std::string("model.") + name + " must be positive");
    };
    positive(n_layers, "n_layers");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(d_mlp, "d_mlp");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    if (d_model % n_heads != 0) throw std::invalid_argument("model.d_model must be divisible by model.n_heads");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename S>
struct LayerParams {
  Tensor<S> ln1_g, ln1_b;
  Tensor<S> w_qkv, b_qkv;  // d x 3d, columns [q | k | v], heads contiguous within each
  Tensor<S> w_o, b_o;      // d x d
  Tensor<S> ln2_g, ln2_b;
  Tensor<S> w_fc, b_fc;      // d x d_mlp
  Tensor<S> w_proj, b_proj;  // d_mlp x d
};

template <typename S>
struct Parameters {
  ModelConfig config;
  Tensor<S> tok_emb;  // N x d
  Tensor<S> pos_emb;  // max_seq_len x d
  std::vector<LayerParams<S>> layers;
  Tensor<S> lnf_g, lnf_b;
  Tensor<S> unembed;  // d x N

  /// Visits every tensor with a stable name, in checkpoint order.
  template <typename F>
  void for_each(F&& f) {
    f(std::string("tok_emb"), tok_emb);
    f(std::string("pos_emb"), pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& L = layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "ln1_g", L.ln1_g);
      f(p + "ln1_b", L.ln1_b);
      f(p + "w_qkv", L.w_qkv);
      f(p + "b_qkv", L.b_qkv);
      f(p + "w_o", L.w_o);
      f(p + "b_o", L.b_o);
      f(p + "ln2_g", L.ln2_g);
      f(p + "ln2_b", L.ln2_b);
      f(p + "w_fc", L.w_fc);
      f(p + "b_fc", L.b_fc);
      f(p + "w_proj", L.w_proj);
      f(p + "b_proj", L.b_proj);
    }
    f(std::string("lnf_g"), lnf_g);
    f(std::string("lnf_b"), lnf_b);
    f(std::string("unembed"), unembed);
  }

  template <typename F>
  void for_each(F&& f) const {
    const_cast<Parameters*>(this)->for_each([&](const std::string& n, Tensor<S>& t) { f(n, std::as_const(t)); });
  }

  std::size_t count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<S>& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  void zero_grad() {
    for_each([](const std::string&, Tensor<S>& t) { t.zero_grad(); });
  }
};

/// Closed-form parameter count for a config.
inline std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t m = static_cast<std::size_t>(c.d_mlp);
  const std::size_t per_layer = 4 * d            // two layer norms
                                + 3 * d * d + 3 * d  // qkv
                                + d * d + d          // output projection
                                + d * m + m          // fc
                                + m * d + d;         // proj
  return static_cast<std::size_t>(c.vocab_size) * d + static_cast<std::size_t>(c.max_seq_len) * d +
         static_cast<std::size_t>(c.n_layers) * per_layer + 2 * d + d * static_cast<std::size_t>(c.vocab_size);
}

/// Normal(0, 0.02) weights, zero biases, unit gains.
template <typename S = double>
Parameters<S> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  const int d = config.d_model;
  auto weight = [&](int r, int c) {
    Tensor<S> t(r, c);
    for (Index i = 0; i < t.values.size(); ++i) t.values.data()[i] = static_cast<S>(normal(rng));
    return t;
  };
  auto zeros = [](int r, int c) { return Tensor<S>(r, c); };
  auto ones = [](int c) { return Tensor<S>(MatrixX<S>::Ones(1, c)); };

  Parameters<S> p;
  p.config = config;
  p.tok_emb = weight(config.vocab_size, d);
  p.pos_emb = weight(config.max_seq_len, d);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& L : p.layers) {
    L.ln1_g = ones(d);
    L.ln1_b = zeros(1, d);
    L.w_qkv = weight(d, 3 * d);
    L.b_qkv = zeros(1, 3 * d);
    L.w_o = weight(d, d);
    L.b_o = zeros(1, d);
    L.ln2_g = ones(d);
    L.ln2_b = zeros(1, d);
    L.w_fc = weight(d, config.d_mlp);
    L.b_fc = zeros(1, config.d_mlp);
    L.w_proj = weight(config.d_mlp, d);
    L.b_proj = zeros(1, d);
  }
  p.lnf_g = ones(d);
  p.lnf_b = zeros(1, d);
  p.unembed = weight(d, config.vocab_size);
  return p;
}

template <typename To, typename From>
Parameters<To> cast_parameters(const Parameters<From>& src) {
  Parameters<To> dst;
  dst.config = src.config;
  auto cast = [](const Tensor<From>& t) { return Tensor<To>(t.values.template cast<To>()); };
  dst.tok_emb = cast(src.tok_emb);
  dst.pos_emb = cast(src.pos_emb);
  for (const auto& L : src.layers) {
    LayerParams<To> o;
    o.ln1_g = cast(L.ln1_g);
    o.ln1_b = cast(L.ln1_b);
    o.w_qkv = cast(L.w_qkv);
    o.b_qkv = cast(L.b_qkv);
    o.w_o = cast(L.w_o);
    o.b_o = cast(L.b_o);
    o.ln2_g = cast(L.ln2_g);
    o.ln2_b = cast(L.ln2_b);
    o.w_fc = cast(L.w_fc);
    o.b_fc = cast(L.b_fc);
    o.w_proj = cast(L.w_proj);
    o.b_proj = cast(L.b_proj);
    dst.layers.push_back(std::move(o));
  }
  dst.lnf_g = cast(src.lnf_g);
  dst.lnf_b = cast(src.lnf_b);
  dst.unembed = cast(src.unembed);
  return dst;
}

/// FNV-1a over the raw bytes of every parameter, in checkpoint order.
template <typename S>
std::uint64_t parameter_hash(const Parameters<S>& p) {
  std::uint64_t h = 1469598103934665603ULL;
  p.for_each([&](const std::string&, const Tensor<S>& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.values.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(t.values.size()) * sizeof(S); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  });
  return h;
}

// ---------------------------------------------------------------------------
// Forward graph.

template <typename S>
struct LayerVars {
  Var<S> ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
};

template <typename S>
struct ParamVars {
  Var<S> tok_emb, pos_emb;
  std::vector<LayerVars<S>> layers;
  Var<S> lnf_g, lnf_b, unembed;
};

namespace detail {
template <typename S, typename Bind>
ParamVars<S> bind_with(const Parameters<S>& p, Bind&& bind) {
  ParamVars<S> v;
  auto& P = const_cast<Parameters<S>&>(p);
  v.tok_emb = bind(P.tok_emb);
  v.pos_emb = bind(P.pos_emb);
  for (auto& L : P.layers) {
    v.layers.push_back({bind(L.ln1_g), bind(L.ln1_b), bind(L.w_qkv), bind(L.b_qkv), bind(L.w_o), bind(L.b_o),
                        bind(L.ln2_g), bind(L.ln2_b), bind(L.w_fc), bind(L.b_fc), bind(L.w_proj), bind(L.b_proj)});
  }
  v.lnf_g = bind(P.lnf_g);
  v.lnf_b = bind(P.lnf_b);
  v.unembed = bind(P.unembed);
  return v;
}
}  // namespace detail

/// Binds parameters as gradient-receiving leaves.
template <typename S>
ParamVars<S> bind_trainable(BasicTape<S>& tape, Parameters<S>& p) {
  return detail::bind_with(p, [&](Tensor<S>& t) { return tape.leaf(t, true); });
}

/// Binds parameters as frozen read-only views.
template <typename S>
ParamVars<S> bind_frozen(BasicTape<S>& tape, const Parameters<S>& p) {
  return detail::bind_with(p, [&](Tensor<S>& t) { return tape.view(t.values); });
}

/// Intermediate values of one attention head, kept when tracing.
template <typename S>
struct HeadTrace {
  MatrixX<S> q, k, v;   // T x head_dim (after projection)
  MatrixX<S> probs;     // T x T causal attention
  MatrixX<S> output;    // T x head_dim, probs * v (pre output projection)
};

/// Called on the post-block residual of each layer; returns the (possibly
/// modified) residual that feeds the next layer.
template <typename S>
using LayerHook = std::function<Var<S>(BasicTape<S>&, int layer, Var<S> residual)>;

template <typename S>
struct GraphOptions {
  LayerHook<S> hook;
  bool trace_heads = false;
  const MatrixX<S>* unembed_delta = nullptr;  // d x N, added to the unembedding
};

template <typename S>
struct Graph {
  Var<S> logits;                  // T x N
  Var<S> final_hidden;            // T x d after the final norm
  std::vector<Var<S>> residuals;  // per layer, post-block, after the hook
  std::vector<std::vector<HeadTrace<S>>> heads;  // [layer][head] when traced
};

template <typename S>
Graph<S> forward_graph(BasicTape<S>& tape, const ParamVars<S>& pv, const ModelConfig& cfg,
                       std::span<const int> tokens, const GraphOptions<S>& opts = {}) {
  const Index T = static_cast<Index>(tokens.size());
  if (T == 0) throw std::invalid_argument("forward: empty token sequence");
  if (T > cfg.max_seq_len) {
    throw std::out_of_range("forward: sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) throw std::out_of_range("forward: token id " + std::to_string(t) + " outside vocabulary");
  }
  const int H = cfg.n_heads;
  const Index dh = cfg.head_dim();
  const Index d = cfg.d_model;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));

  Graph<S> g;
  Var<S> x;
  {
    MacScope scope(MacComponent::kEmbeddings);
    x = add(gather_rows(pv.tok_emb, tokens), slice_rows(pv.pos_emb, 0, T));
  }
  if (opts.trace_heads) g.heads.resize(static_cast<std::size_t>(cfg.n_layers));

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& L = pv.layers[static_cast<std::size_t>(l)];
    Var<S> h = layer_norm(x, L.ln1_g, L.ln1_b);
    Var<S> qkv;
    {
      MacScope scope(MacComponent::kProjections);
      qkv = add_row(matmul(h, L.w_qkv), L.b_qkv);
    }
    std::vector<Var<S>> outs;
    outs.reserve(static_cast<std::size_t>(H));
    for (int hd = 0; hd < H; ++hd) {
      Var<S> q = slice_cols(qkv, hd * dh, dh);
      Var<S> k = slice_cols(qkv, d + hd * dh, dh);
      Var<S> v = slice_cols(qkv, 2 * d + hd * dh, dh);
      Var<S> scores;
      {
        MacScope scope(MacComponent::kAttentionScores);
        scores = scale(matmul_nt(q, k), inv_sqrt);
      }
      Var<S> probs = causal_softmax(scores);
      Var<S> o;
      {
        MacScope scope(MacComponent::kAttentionMix);
        o = matmul(probs, v);
      }
      if (opts.trace_heads) {
        g.heads[static_cast<std::size_t>(l)].push_back({q.value(), k.value(), v.value(), probs.value(), o.value()});
      }
      outs.push_back(o);
    }
    Var<S> attn;
    {
      MacScope scope(MacComponent::kProjections);
      attn = add_row(matmul(concat_cols<S>(outs), L.w_o), L.b_o);
    }
    x = add(x, attn);
    Var<S> h2 = layer_norm(x, L.ln2_g, L.ln2_b);
    Var<S> mlp;
    {
      MacScope scope(MacComponent::kMlp);
      mlp = add_row(matmul(gelu(add_row(matmul(h2, L.w_fc), L.b_fc)), L.w_proj), L.b_proj);
    }
    x = add(x, mlp);
    if (opts.hook) {
      MacScope scope(MacComponent::kIntervention);
      x = opts.hook(tape, l, x);
    }
    g.residuals.push_back(x);
  }
  g.final_hidden = layer_norm(x, pv.lnf_g, pv.lnf_b);
  {
    MacScope scope(MacComponent::kUnembedding);
    if (opts.unembed_delta) {
      Var<S> e = add(pv.unembed, tape.view(*opts.unembed_delta));
      g.logits = matmul(g.final_hidden, e);
    } else {
      g.logits = matmul(g.final_hidden, pv.unembed);
    }
  }
  return g;
}

/// Hook realizing an InterventionSpec with constant (non-trainable) vectors.
namespace detail {
inline Index target_row(const InterventionSpec& spec, Index rows) {
  const Index r = spec.position < 0 ? rows - 1 : spec.position;
  if (r >= rows) {
    throw std::out_of_range("intervention position " + std::to_string(r) + " outside sequence of " +
                            std::to_string(rows));
  }
  return r;
}
}  // namespace detail

template <typename S>
LayerHook<S> make_hook(const InterventionSpec& spec) {
  using K = InterventionSpec::Kind;
  switch (spec.kind) {
    case K::kNone:
      return {};
    case K::kAddPerLayer:
      return [spec](BasicTape<S>& tape, int l, Var<S> x) {
        MatrixX<S> shift = spec.bundle.shift(l).template cast<S>();
        detail::count_macs(x.rows() * x.cols());
        return add_row(x, tape.constant(std::move(shift)));
      };
    case K::kReplaceLastToken:
      return [spec](BasicTape<S>& tape, int l, Var<S> x) {
        if (l != spec.layer) return x;
        return set_row(x, detail::target_row(spec, x.rows()), tape.constant(spec.vectors.template cast<S>()));
      };
    case K::kAddLastToken:
      return [spec](BasicTape<S>& tape, int l, Var<S> x) {
        if (l != spec.layer) return x;
        detail::count_macs(x.cols());
        return add_to_row(x, detail::target_row(spec, x.rows()), tape.constant(spec.vectors.template cast<S>()));
      };
    case K::kAddAllTokens:
      return [spec](BasicTape<S>& tape, int l, Var<S> x) {
        Eigen::RowVectorXd dir = spec.vectors.row(l);
        const double n = dir.norm();
        if (n > 0) dir /= n;
        MatrixX<S> add_v = (spec.strength * dir).template cast<S>();
        const Index T = x.rows();
        const Index d = x.cols();
        detail::count_macs(T * d);
        if (!spec.renormalize) return add_row(x, tape.constant(std::move(add_v)));
        Eigen::Matrix<S, Eigen::Dynamic, 1> norms = x.value().rowwise().norm();
        Var<S> y = add_row(x, tape.constant(std::move(add_v)));
        // two norms and one rescale per row
        detail::count_macs(3 * T * d);
        return rescale_rows_to_norm(y, norms);
      };
  }
  return {};
}

struct CapturePoint {
  int layer = 0;
  int position = 0;  // negative counts from the end (-1 = last)
  auto operator<=>(const CapturePoint&) const = default;
};

struct ForwardOutput {
  Matrix logits;                                 // T x N
  std::map<CapturePoint, Eigen::RowVectorXd> captured;
  std::vector<std::vector<HeadTrace<double>>> heads;
  std::vector<Matrix> residuals;                 // per layer when capture_all_layers
  Matrix final_hidden;                           // T x d
};

struct ForwardOptions {
  bool trace_heads = false;
  bool keep_residuals = false;
  const Matrix* unembed_delta = nullptr;
};

/// Inference forward pass in double precision.
inline ForwardOutput forward(const Parameters<double>& params, std::span<const int> tokens,
                             const InterventionSpec& intervention = {}, std::span<const CapturePoint> capture = {},
                             const ForwardOptions& fo = {}) {
  const auto& cfg = params.config;
  intervention.validate(cfg.n_layers, cfg.d_model);
  const int T = static_cast<int>(tokens.size());
  for (const auto& c : capture) {
    const int pos = c.position < 0 ? T + c.position : c.position;
    if (c.layer < 0 || c.layer >= cfg.n_layers) throw std::out_of_range("capture layer " + std::to_string(c.layer) + " out of range");
    if (pos < 0 || pos >= T) throw std::out_of_range("capture position " + std::to_string(c.position) + " out of range");
  }
  Tape tape;
  auto pv = bind_frozen(tape, params);
  GraphOptions<double> go;
  go.hook = make_hook<double>(intervention);
  go.trace_heads = fo.trace_heads;
  go.unembed_delta = fo.unembed_delta;
  auto g = forward_graph(tape, pv, cfg, tokens, go);

  ForwardOutput out;
  out.logits = g.logits.value();
  out.final_hidden = g.final_hidden.value();
  for (const auto& c : capture) {
    const int pos = c.position < 0 ? T + c.position : c.position;
    out.captured[c] = g.residuals[static_cast<std::size_t>(c.layer)].value().row(pos);
  }
  if (fo.keep_residuals) {
    for (auto& r : g.residuals) out.residuals.push_back(r.value());
  }
  out.heads = std::move(g.heads);
  return out;
}

// ---------------------------------------------------------------------------
// Decoding.

struct DecodeConfig {
  int max_new = 5;
  int beams = 1;
  double length_penalty = 0.0;
  int min_new = 0;
  int stop_token = -1;  // not included in the returned answer
};

/// Per-step next-token logits for a prompt; injectable for tests.
using NextLogitsFn = std::function<Eigen::RowVectorXd(std::span<const int>)>;

/// Greedy (beams = 1) or beam search decoding over a next-logits function.
/// Ties break toward the lower token id.
inline std::vector<int> decode(const NextLogitsFn& next, std::vector<int> prompt, const DecodeConfig& cfg) {
  if (cfg.max_new <= 0) return {};
  if (cfg.beams < 1) throw std::invalid_argument("decode: beams must be >= 1");
  const std::size_t prompt_len = prompt.size();

  auto masked_log_probs = [&](std::span<const int> seq, int produced) {
    Eigen::RowVectorXd lg = next(seq);
    if (cfg.stop_token >= 0 && produced < cfg.min_new && cfg.stop_token < lg.size()) {
      lg(cfg.stop_token) = -std::numeric_limits<double>::infinity();
    }
    const double m = lg.maxCoeff();
    const double lse = m + std::log((lg.array() - m).exp().sum());
    return Eigen::RowVectorXd(lg.array() - lse);
  };

  if (cfg.beams == 1) {
    std::vector<int> seq = std::move(prompt);
    std::vector<int> answer;
    for (int step = 0; step < cfg.max_new; ++step) {
      Eigen::RowVectorXd lp = masked_log_probs(seq, step);
      Index best = 0;
      for (Index i = 1; i < lp.size(); ++i)
        if (lp(i) > lp(best)) best = i;
      const int tok = static_cast<int>(best);
      if (tok == cfg.stop_token) break;
      answer.push_back(tok);
      seq.push_back(tok);
    }
    return answer;
  }

  struct Hyp {
    std::vector<int> seq;
    double score = 0.0;
    bool done = false;
  };
  auto final_score = [&](const Hyp& h) {
    const double len = static_cast<double>(h.seq.size() - prompt_len);
    return cfg.length_penalty == 0.0 ? h.score : h.score / std::pow(std::max(1.0, len), cfg.length_penalty);
  };
  std::vector<Hyp> alive{{std::move(prompt), 0.0, false}};
  std::vector<Hyp> finished;
  for (int step = 0; step < cfg.max_new && !alive.empty(); ++step) {
    struct Cand {
      double score;
      std::size_t beam;
      int tok;
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < alive.size(); ++b) {
      Eigen::RowVectorXd lp = masked_log_probs(alive[b].seq, step);
      for (Index i = 0; i < lp.size(); ++i) {
        if (std::isfinite(lp(i))) cands.push_back({alive[b].score + lp(i), b, static_cast<int>(i)});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.beam != b.beam) return a.beam < b.beam;
      return a.tok < b.tok;
    });
    std::vector<Hyp> next_alive;
    for (const auto& c : cands) {
      if (static_cast<int>(next_alive.size()) >= cfg.beams) break;
      Hyp h{alive[c.beam].seq, c.score, false};
      if (c.tok == cfg.stop_token) {
        h.done = true;
        finished.push_back(std::move(h));
        continue;
      }
      h.seq.push_back(c.tok);
      next_alive.push_back(std::move(h));
    }
    alive = std::move(next_alive);
    // Stop once no alive beam can beat the best finished hypothesis.
    if (!finished.empty() && !alive.empty() && cfg.length_penalty == 0.0) {
      double best_done = -std::numeric_limits<double>::infinity();
      for (const auto& f : finished) best_done = std::max(best_done, f.score);
      bool any_better = false;
      for (const auto& a : alive) any_better = any_better || a.score > best_done;
      if (!any_better) break;
    }
  }
  for (auto& a : alive) finished.push_back(std::move(a));
  const Hyp* best = nullptr;
  for (const auto& h : finished) {
    if (!best || final_score(h) > final_score(*best)) best = &h;
  }
  return {best->seq.begin() + static_cast<std::ptrdiff_t>(prompt_len), best->seq.end()};
}

/// Autoregressive answer generation. The intervention is re-applied on every
/// step's forward; last-token modes stay pinned to the final prompt position,
/// as if that state had been patched once in a cached decode.
inline std::vector<int> generate(const Parameters<double>& params, std::span<const int> prompt,
                                 const InterventionSpec& iv, const DecodeConfig& cfg, const ForwardOptions& fo = {}) {
  InterventionSpec intervention = iv;
  if (intervention.position < 0) intervention.position = static_cast<int>(prompt.size()) - 1;
  if (static_cast<int>(prompt.size()) + std::max(0, cfg.max_new - 1) > params.config.max_seq_len) {
    throw std::out_of_range("generate: prompt of " + std::to_string(prompt.size()) + " tokens too long for max_seq_len " +
                            std::to_string(params.config.max_seq_len));
  }
  NextLogitsFn next = [&](std::span<const int> seq) {
    auto out = forward(params, seq, intervention, {}, fo);
    return Eigen::RowVectorXd(out.logits.row(out.logits.rows() - 1));
  };
  return decode(next, std::vector<int>(prompt.begin(), prompt.end()), cfg);
}

}  // namespace icvlab
