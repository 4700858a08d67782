#pragma once

// Dense rank-2 tensors and a define-by-run reverse-mode tape.
//
// Every value is a row-major matrix; vectors are 1 x n. A BasicTape records
// one node per operation in creation order, so the record list is already
// topologically sorted and backward() is a single reverse sweep.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace icvlab {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Matrix = MatrixX<double>;
using Index = Eigen::Index;

/// Floor applied to the second KL argument before taking its log.
inline constexpr double kKlFloor = 1e-12;

template <typename Scalar = double>
struct Tensor {
  MatrixX<Scalar> values;
  std::optional<MatrixX<Scalar>> grad;
  int node_id = -1;

  Tensor() = default;
  Tensor(Index rows, Index cols) : values(MatrixX<Scalar>::Zero(rows, cols)) {}
  explicit Tensor(MatrixX<Scalar> v) : values(std::move(v)) {}

  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }
  Index size() const { return values.size(); }
  std::array<Index, 2> shape() const { return {values.rows(), values.cols()}; }

  void zero_grad() { grad.reset(); }
};

// Multiply-add accounting. Ops add to the counter of the active component
// while a MacScope is alive on the current thread; otherwise nothing is
// recorded.
enum class MacComponent : int {
  kEmbeddings = 0,
  kAttentionScores,
  kAttentionMix,
  kProjections,
  kMlp,
  kUnembedding,
  kIntervention,
  kCount
};

struct MacTally {
  std::array<std::int64_t, static_cast<int>(MacComponent::kCount)> by_component{};
  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto v : by_component) t += v;
    return t;
  }
};

namespace detail {
struct MacState {
  MacTally* tally = nullptr;
  MacComponent component = MacComponent::kProjections;
};
inline MacState& mac_state() {
  thread_local MacState state;
  return state;
}
inline void count_macs(std::int64_t n) {
  auto& s = mac_state();
  if (s.tally) s.tally->by_component[static_cast<int>(s.component)] += n;
}
}  // namespace detail

/// Enables MAC counting into `tally` for the lifetime of the scope.
class MacCounter {
 public:
  explicit MacCounter(MacTally& tally) : prev_(detail::mac_state()) {
    detail::mac_state().tally = &tally;
  }
  ~MacCounter() { detail::mac_state() = prev_; }
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

 private:
  detail::MacState prev_;
};

/// Attributes MACs recorded inside the scope to `c`.
class MacScope {
 public:
  explicit MacScope(MacComponent c) : prev_(detail::mac_state().component) {
    detail::mac_state().component = c;
  }
  ~MacScope() { detail::mac_state().component = prev_; }
  MacScope(const MacScope&) = delete;
  MacScope& operator=(const MacScope&) = delete;

 private:
  MacComponent prev_;
};

template <typename Scalar>
class BasicTape;

/// Handle to a node on a tape.
template <typename Scalar>
struct Var {
  BasicTape<Scalar>* tape = nullptr;
  int id = -1;

  const MatrixX<Scalar>& value() const { return tape->value(id); }
  const MatrixX<Scalar>& grad() const { return tape->grad(id); }
  bool requires_grad() const { return tape->requires_grad(id); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

template <typename Scalar>
class BasicTape {
 public:
  using Mat = MatrixX<Scalar>;
  using BackwardFn = std::function<void(BasicTape&, const Mat& out_grad)>;

  BasicTape() { nodes_.reserve(256); }
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  /// Constant input; never receives a gradient.
  Var<Scalar> constant(Mat value) {
    Node n;
    n.own = std::move(value);
    return push(std::move(n));
  }

  /// Leaf bound to an external tensor. The tensor must outlive the tape.
  /// With requires_grad, backward() accumulates into tensor.grad.
  Var<Scalar> leaf(Tensor<Scalar>& t, bool requires_grad) {
    Node n;
    n.external = &t.values;
    n.requires_grad = requires_grad;
    n.bound = requires_grad ? &t : nullptr;
    auto v = push(std::move(n));
    t.node_id = v.id;
    return v;
  }

  /// Read-only leaf over an external matrix (no copy).
  Var<Scalar> view(const Mat& m) {
    Node n;
    n.external = &m;
    return push(std::move(n));
  }

  /// Records the result of an op. `backward` is stored only if some input
  /// requires a gradient.
  Var<Scalar> record(Mat value, bool requires_grad, BackwardFn backward) {
    Node n;
    n.own = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  const Mat& value(int id) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(id));
    return n.external ? *n.external : n.own;
  }

  const Mat& grad(int id) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (n.grad.size() == 0) {
      thread_local Mat empty;
      empty = Mat::Zero(value(id).rows(), value(id).cols());
      return empty;
    }
    return n.grad;
  }

  bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }

  /// Adds `g` into the gradient buffer of node `id` (no-op for constants).
  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar node. Bound leaves receive their gradient
  /// added into Tensor::grad.
  void backward(Var<Scalar> loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to another tape");
    const Mat& lv = value(loss.id);
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got " + std::to_string(lv.rows()) +
                                  "x" + std::to_string(lv.cols()));
    }
    if (!nodes_[static_cast<std::size_t>(loss.id)].requires_grad) return;
    accumulate(loss.id, Mat::Ones(1, 1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) {
        // The closure may accumulate into earlier nodes only.
        n.backward(*this, n.grad);
      }
      if (n.bound) {
        if (!n.bound->grad) {
          n.bound->grad = n.grad;
        } else {
          *n.bound->grad += n.grad;
        }
      }
    }
  }

 private:
  struct Node {
    Mat own;
    const Mat* external = nullptr;
    Mat grad;
    bool requires_grad = false;
    Tensor<Scalar>* bound = nullptr;
    BackwardFn backward;
  };

  Var<Scalar> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

using Tape = BasicTape<double>;
using DVar = Var<double>;

// ---------------------------------------------------------------------------
// Plain (tape-free) numerics shared by ops and diagnostics.

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

/// Row-wise softmax with max subtraction.
template <typename Scalar>
MatrixX<Scalar> softmax_rows(const MatrixX<Scalar>& x) {
  if (!x.allFinite()) throw std::invalid_argument("softmax_rows: non-finite input");
  MatrixX<Scalar> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

template <typename Scalar>
MatrixX<Scalar> log_softmax_rows(const MatrixX<Scalar>& x) {
  if (!x.allFinite()) throw std::invalid_argument("log_softmax_rows: non-finite input");
  MatrixX<Scalar> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    const Scalar lse = m + std::log((x.row(r).array() - m).exp().sum());
    y.row(r) = (x.row(r).array() - lse).matrix();
  }
  return y;
}

/// KL(p || q) = sum p ln(p / max(q, floor)), with 0 ln 0 = 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw std::invalid_argument("kl_divergence: length mismatch (" + std::to_string(p.size()) + " vs " +
                                std::to_string(q.size()) + ")");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    s += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kKlFloor)));
  }
  return s;
}

/// -ln softmax(logits)[target] via log-sum-exp.
inline double cross_entropy(std::span<const double> logits, int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
    throw std::out_of_range("cross_entropy: target " + std::to_string(target) + " outside vocabulary of " +
                            std::to_string(logits.size()));
  }
  double m = -std::numeric_limits<double>::infinity();
  for (double v : logits) {
    if (!std::isfinite(v)) throw std::invalid_argument("cross_entropy: non-finite input");
    m = std::max(m, v);
  }
  double s = 0.0;
  for (double v : logits) s += std::exp(v - m);
  return m + std::log(s) - logits[static_cast<std::size_t>(target)];
}

// ---------------------------------------------------------------------------
// Differentiable ops.

namespace detail {
template <typename S>
void check_same_tape(const Var<S>& a, const Var<S>& b) {
  if (a.tape != b.tape) throw std::invalid_argument("ops on vars from different tapes");
}
template <typename S>
bool any_grad(std::initializer_list<Var<S>> vs) {
  for (const auto& v : vs)
    if (v.requires_grad()) return true;
  return false;
}
}  // namespace detail

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.cols() != B.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " + std::to_string(A.rows()) + "x" +
                                std::to_string(A.cols()) + " * " + std::to_string(B.rows()) + "x" +
                                std::to_string(B.cols()));
  }
  detail::count_macs(static_cast<std::int64_t>(A.rows()) * A.cols() * B.cols());
  MatrixX<S> c(A.rows(), B.cols());
  c.noalias() = A * B;
  return a.tape->record(std::move(c), detail::any_grad({a, b}), [a, b](BasicTape<S>& t, const MatrixX<S>& g) {
    if (a.requires_grad()) t.accumulate(a.id, (g * b.value().transpose()).eval());
    if (b.requires_grad()) t.accumulate(b.id, (a.value().transpose() * g).eval());
  });
}

/// a * b^T
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.cols() != B.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  detail::count_macs(static_cast<std::int64_t>(A.rows()) * A.cols() * B.rows());
  MatrixX<S> c(A.rows(), B.rows());
  c.noalias() = A * B.transpose();
  return a.tape->record(std::move(c), detail::any_grad({a, b}), [a, b](BasicTape<S>& t, const MatrixX<S>& g) {
    if (a.requires_grad()) t.accumulate(a.id, (g * b.value()).eval());
    if (b.requires_grad()) t.accumulate(b.id, (g.transpose() * a.value()).eval());
  });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("add: shape mismatch");
  MatrixX<S> c = a.value() + b.value();
  return a.tape->record(std::move(c), detail::any_grad({a, b}), [a, b](BasicTape<S>& t, const MatrixX<S>& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("sub: shape mismatch");
  MatrixX<S> c = a.value() - b.value();
  return a.tape->record(std::move(c), detail::any_grad({a, b}), [a, b](BasicTape<S>& t, const MatrixX<S>& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, (-g).eval());
  });
}

/// Elementwise product.
template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("mul: shape mismatch");
  MatrixX<S> c = a.value().cwiseProduct(b.value());
  return a.tape->record(std::move(c), detail::any_grad({a, b}), [a, b](BasicTape<S>& t, const MatrixX<S>& g) {
    if (a.requires_grad()) t.accumulate(a.id, g.cwiseProduct(b.value()).eval());
    if (b.requires_grad()) t.accumulate(b.id, g.cwiseProduct(a.value()).eval());
  });
}

/// Adds a 1 x n row to every row of a.
template <typename S>
Var<S> add_row(Var<S> a, Var<S> row) {
  detail::check_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: bias shape mismatch");
  MatrixX<S> c = a.value().rowwise() + row.value().row(0);
  return a.tape->record(std::move(c), detail::any_grad({a, row}), [a, row](BasicTape<S>& t, const MatrixX<S>& g) {
    t.accumulate(a.id, g);
    if (row.requires_grad()) t.accumulate(row.id, g.colwise().sum().eval());
  });
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
  MatrixX<S> out = a.value() * c;
  return a.tape->record(std::move(out), a.requires_grad(),
                        [a, c](BasicTape<S>& t, const MatrixX<S>& g) { t.accumulate(a.id, (g * c).eval()); });
}

/// s * a where s is a 1 x 1 var.
template <typename S>
Var<S> scale_by(Var<S> a, Var<S> s) {
  detail::check_same_tape(a, s);
  if (s.rows() != 1 || s.cols() != 1) throw std::invalid_argument("scale_by: scale must be 1x1");
  MatrixX<S> out = a.value() * s.value()(0, 0);
  return a.tape->record(std::move(out), detail::any_grad({a, s}), [a, s](BasicTape<S>& t, const MatrixX<S>& g) {
    if (a.requires_grad()) t.accumulate(a.id, (g * s.value()(0, 0)).eval());
    if (s.requires_grad()) {
      MatrixX<S> gs(1, 1);
      gs(0, 0) = g.cwiseProduct(a.value()).sum();
      t.accumulate(s.id, gs);
    }
  });
}

/// tanh-approximation GELU.
template <typename S>
Var<S> gelu(Var<S> a) {
  constexpr S k0 = S(0.7978845608028654);  // sqrt(2/pi)
  constexpr S k1 = S(0.044715);
  const auto& x = a.value();
  MatrixX<S> u = (k0 * (x.array() + k1 * x.array().cube())).matrix();
  MatrixX<S> th = u.array().tanh().matrix();
  MatrixX<S> y = (S(0.5) * x.array() * (S(1) + th.array())).matrix();
  return a.tape->record(std::move(y), a.requires_grad(),
                        [a, th = std::move(th)](BasicTape<S>& t, const MatrixX<S>& g) {
                          const S k0 = S(0.7978845608028654);
                          const S k1 = S(0.044715);
                          const auto& x = a.value();
                          auto sech2 = S(1) - th.array().square();
                          auto dy = S(0.5) * (S(1) + th.array()) +
                                    S(0.5) * x.array() * sech2 * k0 * (S(1) + S(3) * k1 * x.array().square());
                          t.accumulate(a.id, (g.array() * dy).matrix().eval());
                        });
}

/// Per-row layer normalization with learned 1 x n gain and bias.
template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gain, Var<S> bias, S eps = S(1e-5)) {
  detail::check_same_tape(x, gain);
  detail::check_same_tape(x, bias);
  const auto& X = x.value();
  const Index n = X.cols();
  if (gain.cols() != n || bias.cols() != n) throw std::invalid_argument("layer_norm: parameter shape mismatch");
  MatrixX<S> xhat(X.rows(), n);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(X.rows());
  for (Index r = 0; r < X.rows(); ++r) {
    const S mean = X.row(r).mean();
    const S var = (X.row(r).array() - mean).square().mean();
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = ((X.row(r).array() - mean) * inv_std(r)).matrix();
  }
  MatrixX<S> y = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  y.rowwise() += bias.value().row(0);
  return x.tape->record(std::move(y), detail::any_grad({x, gain, bias}),
                        [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                            BasicTape<S>& t, const MatrixX<S>& g) {
                          if (gain.requires_grad()) t.accumulate(gain.id, g.cwiseProduct(xhat).colwise().sum().eval());
                          if (bias.requires_grad()) t.accumulate(bias.id, g.colwise().sum().eval());
                          if (x.requires_grad()) {
                            MatrixX<S> dxhat = (g.array().rowwise() * gain.value().row(0).array()).matrix();
                            MatrixX<S> dx(dxhat.rows(), dxhat.cols());
                            for (Index r = 0; r < dxhat.rows(); ++r) {
                              const S m1 = dxhat.row(r).mean();
                              const S m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                              dx.row(r) = ((dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r)).matrix();
                            }
                            t.accumulate(x.id, dx);
                          }
                        });
}

template <typename S>
Var<S> softmax_rows(Var<S> x) {
  MatrixX<S> y = softmax_rows<S>(x.value());
  MatrixX<S> saved = y;
  return x.tape->record(std::move(y), x.requires_grad(), [x, y = std::move(saved)](BasicTape<S>& t, const MatrixX<S>& g) {
    MatrixX<S> dx = y.cwiseProduct(g);
    const Eigen::Matrix<S, Eigen::Dynamic, 1> dots = dx.rowwise().sum();
    dx -= (y.array().colwise() * dots.array()).matrix();
    t.accumulate(x.id, dx);
  });
}

/// Row softmax where row i only sees columns j <= i + offset; masked entries
/// are exactly zero.
template <typename S>
Var<S> causal_softmax(Var<S> x, Index offset = 0) {
  const auto& X = x.value();
  if (!X.allFinite()) throw std::invalid_argument("causal_softmax: non-finite input");
  MatrixX<S> y = MatrixX<S>::Zero(X.rows(), X.cols());
  for (Index r = 0; r < X.rows(); ++r) {
    const Index n = std::min<Index>(X.cols(), r + offset + 1);
    if (n <= 0) continue;
    auto seg = X.row(r).head(n);
    const S m = seg.maxCoeff();
    y.row(r).head(n) = (seg.array() - m).exp().matrix();
    y.row(r).head(n) /= y.row(r).head(n).sum();
  }
  MatrixX<S> saved = y;
  return x.tape->record(std::move(y), x.requires_grad(), [x, y = std::move(saved)](BasicTape<S>& t, const MatrixX<S>& g) {
    MatrixX<S> dx = y.cwiseProduct(g);
    const Eigen::Matrix<S, Eigen::Dynamic, 1> dots = dx.rowwise().sum();
    dx -= (y.array().colwise() * dots.array()).matrix();
    t.accumulate(x.id, dx);
  });
}

template <typename S>
Var<S> log_softmax_rows(Var<S> x) {
  MatrixX<S> y = log_softmax_rows<S>(x.value());
  MatrixX<S> p = y.array().exp().matrix();
  return x.tape->record(std::move(y), x.requires_grad(), [x, p = std::move(p)](BasicTape<S>& t, const MatrixX<S>& g) {
    const Eigen::Matrix<S, Eigen::Dynamic, 1> sums = g.rowwise().sum();
    MatrixX<S> dx = g - (p.array().colwise() * sums.array()).matrix();
    t.accumulate(x.id, dx);
  });
}

/// Gathers rows of `table` (embedding lookup).
template <typename S>
Var<S> gather_rows(Var<S> table, std::span<const int> ids) {
  const auto& T = table.value();
  MatrixX<S> out(static_cast<Index>(ids.size()), T.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= T.rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(ids[i]) + " outside " +
                              std::to_string(T.rows()) + " rows");
    }
    out.row(static_cast<Index>(i)) = T.row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return table.tape->record(std::move(out), table.requires_grad(),
                            [table, idx = std::move(idx)](BasicTape<S>& t, const MatrixX<S>& g) {
                              MatrixX<S> d = MatrixX<S>::Zero(table.rows(), table.cols());
                              for (std::size_t i = 0; i < idx.size(); ++i) d.row(idx[i]) += g.row(static_cast<Index>(i));
                              t.accumulate(table.id, d);
                            });
}

template <typename S>
Var<S> slice_rows(Var<S> a, Index r0, Index n) {
  if (r0 < 0 || n < 0 || r0 + n > a.rows()) throw std::out_of_range("slice_rows: range outside matrix");
  MatrixX<S> out = a.value().middleRows(r0, n);
  return a.tape->record(std::move(out), a.requires_grad(), [a, r0, n](BasicTape<S>& t, const MatrixX<S>& g) {
    MatrixX<S> d = MatrixX<S>::Zero(a.rows(), a.cols());
    d.middleRows(r0, n) = g;
    t.accumulate(a.id, d);
  });
}

template <typename S>
Var<S> slice_cols(Var<S> a, Index c0, Index n) {
  if (c0 < 0 || n < 0 || c0 + n > a.cols()) throw std::out_of_range("slice_cols: range outside matrix");
  MatrixX<S> out = a.value().middleCols(c0, n);
  return a.tape->record(std::move(out), a.requires_grad(), [a, c0, n](BasicTape<S>& t, const MatrixX<S>& g) {
    MatrixX<S> d = MatrixX<S>::Zero(a.rows(), a.cols());
    d.middleCols(c0, n) = g;
    t.accumulate(a.id, d);
  });
}

template <typename S>
Var<S> concat_cols(std::span<const Var<S>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Index rows = parts[0].rows();
  Index cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    rg = rg || p.requires_grad();
  }
  MatrixX<S> out(rows, cols);
  Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var<S>> ps(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(out), rg, [ps = std::move(ps)](BasicTape<S>& t, const MatrixX<S>& g) {
    Index c = 0;
    for (const auto& p : ps) {
      if (p.requires_grad()) t.accumulate(p.id, g.middleCols(c, p.cols()).eval());
      c += p.cols();
    }
  });
}

template <typename S>
Var<S> concat_rows(std::span<const Var<S>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Index cols = parts[0].cols();
  Index rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
    rg = rg || p.requires_grad();
  }
  MatrixX<S> out(rows, cols);
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var<S>> ps(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(out), rg, [ps = std::move(ps)](BasicTape<S>& t, const MatrixX<S>& g) {
    Index r = 0;
    for (const auto& p : ps) {
      if (p.requires_grad()) t.accumulate(p.id, g.middleRows(r, p.rows()).eval());
      r += p.rows();
    }
  });
}

/// Copy of `a` with row `r` replaced by the 1 x n row `v`.
template <typename S>
Var<S> set_row(Var<S> a, Index r, Var<S> v) {
  detail::check_same_tape(a, v);
  if (r < 0 || r >= a.rows()) throw std::out_of_range("set_row: row outside matrix");
  if (v.rows() != 1 || v.cols() != a.cols()) throw std::invalid_argument("set_row: vector shape mismatch");
  MatrixX<S> out = a.value();
  out.row(r) = v.value().row(0);
  return a.tape->record(std::move(out), detail::any_grad({a, v}), [a, r, v](BasicTape<S>& t, const MatrixX<S>& g) {
    if (a.requires_grad()) {
      MatrixX<S> d = g;
      d.row(r).setZero();
      t.accumulate(a.id, d);
    }
    if (v.requires_grad()) t.accumulate(v.id, g.row(r).eval());
  });
}

/// Adds the 1 x n row `v` to row `r` only.
template <typename S>
Var<S> add_to_row(Var<S> a, Index r, Var<S> v) {
  detail::check_same_tape(a, v);
  if (r < 0 || r >= a.rows()) throw std::out_of_range("add_to_row: row outside matrix");
  if (v.rows() != 1 || v.cols() != a.cols()) throw std::invalid_argument("add_to_row: vector shape mismatch");
  MatrixX<S> out = a.value();
  out.row(r) += v.value().row(0);
  return a.tape->record(std::move(out), detail::any_grad({a, v}), [a, r, v](BasicTape<S>& t, const MatrixX<S>& g) {
    t.accumulate(a.id, g);
    if (v.requires_grad()) t.accumulate(v.id, g.row(r).eval());
  });
}

/// Rescales each row of x to the Euclidean norm given in `norms`.
template <typename S>
Var<S> rescale_rows_to_norm(Var<S> x, const Eigen::Matrix<S, Eigen::Dynamic, 1>& norms) {
  const auto& X = x.value();
  if (norms.size() != X.rows()) throw std::invalid_argument("rescale_rows_to_norm: norm count mismatch");
  Eigen::Matrix<S, Eigen::Dynamic, 1> cur = X.rowwise().norm();
  MatrixX<S> y(X.rows(), X.cols());
  for (Index r = 0; r < X.rows(); ++r) {
    y.row(r) = cur(r) > S(0) ? (X.row(r) * (norms(r) / cur(r))).eval() : X.row(r).eval();
  }
  return x.tape->record(std::move(y), x.requires_grad(), [x, norms, cur](BasicTape<S>& t, const MatrixX<S>& g) {
    const auto& X = x.value();
    MatrixX<S> d(X.rows(), X.cols());
    for (Index r = 0; r < X.rows(); ++r) {
      if (cur(r) <= S(0)) {
        d.row(r) = g.row(r);
        continue;
      }
      const S c = norms(r) / cur(r);
      const S proj = g.row(r).dot(X.row(r)) / (cur(r) * cur(r));
      d.row(r) = c * (g.row(r) - proj * X.row(r));
    }
    t.accumulate(x.id, d);
  });
}

template <typename S>
Var<S> sum(Var<S> a) {
  MatrixX<S> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->record(std::move(out), a.requires_grad(), [a](BasicTape<S>& t, const MatrixX<S>& g) {
    t.accumulate(a.id, MatrixX<S>::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

/// Mean over rows of the per-row cross entropy -ln softmax(logits_r)[target_r].
template <typename S>
Var<S> cross_entropy(Var<S> logits, std::span<const int> targets) {
  const auto& X = logits.value();
  if (static_cast<Index>(targets.size()) != X.rows()) throw std::invalid_argument("cross_entropy: target count mismatch");
  for (int tg : targets) {
    if (tg < 0 || tg >= X.cols()) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(tg) + " outside vocabulary of " +
                              std::to_string(X.cols()));
    }
  }
  MatrixX<S> lp = log_softmax_rows<S>(X);
  S total = 0;
  for (Index r = 0; r < X.rows(); ++r) total -= lp(r, targets[static_cast<std::size_t>(r)]);
  const S inv = X.rows() > 0 ? S(1) / S(X.rows()) : S(0);
  MatrixX<S> out(1, 1);
  out(0, 0) = total * inv;
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.tape->record(std::move(out), logits.requires_grad(),
                             [logits, lp = std::move(lp), tg = std::move(tg), inv](BasicTape<S>& t, const MatrixX<S>& g) {
                               MatrixX<S> d = lp.array().exp().matrix();
                               for (std::size_t r = 0; r < tg.size(); ++r) d(static_cast<Index>(r), tg[r]) -= S(1);
                               t.accumulate(logits.id, (d * (g(0, 0) * inv)).eval());
                             });
}

/// Mean over rows of KL(p_r || q_r). q is floored at kKlFloor; entries with
/// p = 0 contribute nothing.
template <typename S>
Var<S> kl_divergence(Var<S> p, Var<S> q) {
  detail::check_same_tape(p, q);
  const auto& P = p.value();
  const auto& Q = q.value();
  if (P.rows() != Q.rows() || P.cols() != Q.cols()) throw std::invalid_argument("kl_divergence: length mismatch");
  const S inv = P.rows() > 0 ? S(1) / S(P.rows()) : S(0);
  S total = 0;
  for (Index r = 0; r < P.rows(); ++r) {
    for (Index c = 0; c < P.cols(); ++c) {
      const S pv = P(r, c);
      if (pv <= S(0)) continue;
      total += pv * (std::log(pv) - std::log(std::max(Q(r, c), S(kKlFloor))));
    }
  }
  MatrixX<S> out(1, 1);
  out(0, 0) = total * inv;
  return p.tape->record(std::move(out), detail::any_grad({p, q}), [p, q, inv](BasicTape<S>& t, const MatrixX<S>& g) {
    const auto& P = p.value();
    const auto& Q = q.value();
    const S gs = g(0, 0) * inv;
    if (p.requires_grad()) {
      MatrixX<S> d = MatrixX<S>::Zero(P.rows(), P.cols());
      for (Index r = 0; r < P.rows(); ++r)
        for (Index c = 0; c < P.cols(); ++c)
          if (P(r, c) > S(0)) d(r, c) = gs * (std::log(P(r, c)) - std::log(std::max(Q(r, c), S(kKlFloor))) + S(1));
      t.accumulate(p.id, d);
    }
    if (q.requires_grad()) {
      MatrixX<S> d = MatrixX<S>::Zero(P.rows(), P.cols());
      for (Index r = 0; r < P.rows(); ++r)
        for (Index c = 0; c < P.cols(); ++c)
          if (P(r, c) > S(0) && Q(r, c) > S(kKlFloor)) d(r, c) = -gs * P(r, c) / Q(r, c);
      t.accumulate(q.id, d);
    }
  });
}

// ---------------------------------------------------------------------------
// Finite-difference checking.

/// Scalar computation over leaf vars, rebuilt on a fresh tape per call.
using ScalarFn = std::function<DVar(Tape&, std::span<const DVar>)>;

/// Max over all input components of
/// |analytic - (f(x+eps) - f(x-eps)) / (2 eps)| / max(1, |analytic|).
inline double grad_check(const ScalarFn& f, std::vector<Matrix> inputs, double eps = 1e-5) {
  if (eps <= 0) throw std::invalid_argument("grad_check: eps must be positive");
  std::vector<Tensor<double>> leaves;
  leaves.reserve(inputs.size());
  for (auto& m : inputs) leaves.emplace_back(m);

  {
    Tape tape;
    std::vector<DVar> vars;
    for (auto& l : leaves) vars.push_back(tape.leaf(l, true));
    DVar out = f(tape, vars);
    tape.backward(out);
  }

  auto eval = [&]() {
    Tape tape;
    std::vector<DVar> vars;
    for (auto& l : leaves) vars.push_back(tape.view(l.values));
    return f(tape, vars).value()(0, 0);
  };

  double worst = 0.0;
  for (auto& l : leaves) {
    const Matrix analytic = l.grad ? *l.grad : Matrix::Zero(l.rows(), l.cols());
    for (Index i = 0; i < l.values.size(); ++i) {
      double& x = l.values.data()[i];
      const double orig = x;
      x = orig + eps;
      const double fp = eval();
      x = orig - eps;
      const double fm = eval();
      x = orig;
      const double numeric = (fp - fm) / (2 * eps);
      const double a = analytic.data()[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

}  // namespace icvlab
