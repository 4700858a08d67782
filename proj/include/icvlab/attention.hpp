#pragma once

// Split of one attention row over [demo context, query context] into
// mu * h(demo) + (1 - mu) * h(query).

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>

#include "icvlab/model.hpp"

namespace icvlab {

struct AttentionInstance {
  Eigen::RowVectorXd query_token;  // x_i, 1 x d
  Matrix demo_context;             // l_c x d
  Matrix query_context;            // l_q x d
  double scale = 1.0;

  void validate() const {
    const Index d = query_token.size();
    if (d < 1) throw std::invalid_argument("AttentionInstance: empty query token");
    if (query_context.rows() < 1) throw std::invalid_argument("AttentionInstance: query context needs >= 1 row");
    if (query_context.cols() != d || (demo_context.rows() > 0 && demo_context.cols() != d)) {
      throw std::invalid_argument("AttentionInstance: width mismatch");
    }
    if (!query_token.allFinite() || !demo_context.allFinite() || !query_context.allFinite()) {
      throw std::invalid_argument("AttentionInstance: non-finite entry");
    }
  }
};

struct Decomposition {
  double mu = 0.0;
  Eigen::RowVectorXd h_demo;
  Eigen::RowVectorXd h_query;
  Eigen::RowVectorXd full;

  double residual() const { return (full - (mu * h_demo + (1.0 - mu) * h_query)).cwiseAbs().maxCoeff(); }
};

/// Decomposition of one score row whose keys split into two segments with
/// their own values.
inline Decomposition decompose_scores(const Eigen::RowVectorXd& demo_scores, const Matrix& demo_values,
                                      const Eigen::RowVectorXd& query_scores, const Matrix& query_values) {
  const Index dv = query_values.cols();
  // Each segment is normalized against its own max so that one segment
  // underflowing relative to the other never leaves a 0/0.
  const double mq = query_scores.maxCoeff();
  const Eigen::RowVectorXd eq = (query_scores.array() - mq).exp().matrix();
  const double z2 = eq.sum();
  Decomposition out;
  out.h_query = (eq * query_values) / z2;
  if (demo_scores.size() == 0) {
    out.mu = 0.0;
    out.h_demo = Eigen::RowVectorXd::Zero(dv);
    out.full = out.h_query;
    return out;
  }
  const double md = demo_scores.maxCoeff();
  const Eigen::RowVectorXd ed = (demo_scores.array() - md).exp().matrix();
  const double z1 = ed.sum();
  // mu = Z1 / (Z1 + Z2) with both sums rescaled to a common max.
  const double lz1 = md + std::log(z1), lz2 = mq + std::log(z2);
  out.mu = 1.0 / (1.0 + std::exp(lz2 - lz1));
  out.h_demo = (ed * demo_values) / z1;
  // The undecomposed softmax over the concatenated keys.
  const double m = std::max(md, mq);
  const Eigen::RowVectorXd fd = (demo_scores.array() - m).exp().matrix();
  const Eigen::RowVectorXd fq = (query_scores.array() - m).exp().matrix();
  out.full = (fd * demo_values + fq * query_values) / (fd.sum() + fq.sum());
  return out;
}

/// mu = Z1 / (Z1 + Z2) for raw dot-product attention of x_i over [X_D, x].
inline double mu_coefficient(const AttentionInstance& inst) {
  inst.validate();
  if (inst.demo_context.rows() == 0) return 0.0;
  const Eigen::RowVectorXd sd = inst.scale * (inst.query_token * inst.demo_context.transpose());
  const Eigen::RowVectorXd sq = inst.scale * (inst.query_token * inst.query_context.transpose());
  const double m = std::max(sd.maxCoeff(), sq.maxCoeff());
  const double z1 = (sd.array() - m).exp().sum();
  const double z2 = (sq.array() - m).exp().sum();
  return z1 / (z1 + z2);
}

/// Keys and values are the context rows themselves.
inline Decomposition decompose(const AttentionInstance& inst) {
  inst.validate();
  const Eigen::RowVectorXd sd = inst.demo_context.rows() > 0
                                    ? Eigen::RowVectorXd(inst.scale * (inst.query_token * inst.demo_context.transpose()))
                                    : Eigen::RowVectorXd();
  const Eigen::RowVectorXd sq = inst.scale * (inst.query_token * inst.query_context.transpose());
  return decompose_scores(sd, inst.demo_context, sq, inst.query_context);
}

/// Rebuilds head `head` of layer `layer` at `position` from its projected
/// queries, keys and values, with keys before `boundary` as demonstrations
/// and keys in [boundary, position] as query context. Returns the max abs
/// difference from the model's own head output (pre output projection).
inline double verify_on_model_head(const Parameters<double>& params, std::span<const int> tokens, int boundary,
                                   int layer, int head, int position) {
  const int T = static_cast<int>(tokens.size());
  if (boundary < 0 || boundary >= T) {
    throw std::out_of_range("verify_on_model_head: boundary " + std::to_string(boundary) + " outside sequence of " +
                            std::to_string(T));
  }
  if (position < boundary || position >= T) {
    throw std::out_of_range("verify_on_model_head: position " + std::to_string(position) + " not in the query region");
  }
  const auto& cfg = params.config;
  if (layer < 0 || layer >= cfg.n_layers || head < 0 || head >= cfg.n_heads) {
    throw std::out_of_range("verify_on_model_head: layer/head out of range");
  }
  ForwardOptions fo;
  fo.trace_heads = true;
  const auto out = forward(params, tokens, {}, {}, fo);
  const auto& tr = out.heads[static_cast<std::size_t>(layer)][static_cast<std::size_t>(head)];
  const double s = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  const Eigen::RowVectorXd qrow = tr.q.row(position);
  const Eigen::RowVectorXd sd = s * (qrow * tr.k.topRows(boundary).transpose());
  const Eigen::RowVectorXd sq = s * (qrow * tr.k.middleRows(boundary, position - boundary + 1).transpose());
  const auto dec = decompose_scores(sd, tr.v.topRows(boundary), sq, tr.v.middleRows(boundary, position - boundary + 1));
  return std::max(dec.residual(), (dec.full - tr.output.row(position)).cwiseAbs().maxCoeff());
}

/// Max residual over every layer, head and query position (one traced forward).
inline double verify_model(const Parameters<double>& params, std::span<const int> tokens, int boundary) {
  const int T = static_cast<int>(tokens.size());
  if (boundary < 0 || boundary >= T) throw std::out_of_range("verify_model: boundary outside sequence");
  ForwardOptions fo;
  fo.trace_heads = true;
  const auto out = forward(params, tokens, {}, {}, fo);
  const double s = 1.0 / std::sqrt(static_cast<double>(params.config.head_dim()));
  double worst = 0.0;
  for (const auto& layer : out.heads) {
    for (const auto& tr : layer) {
      for (int p = boundary; p < T; ++p) {
        const Eigen::RowVectorXd qrow = tr.q.row(p);
        const Eigen::RowVectorXd sd = s * (qrow * tr.k.topRows(boundary).transpose());
        const Eigen::RowVectorXd sq = s * (qrow * tr.k.middleRows(boundary, p - boundary + 1).transpose());
        const auto dec = decompose_scores(sd, tr.v.topRows(boundary), sq, tr.v.middleRows(boundary, p - boundary + 1));
        worst = std::max({worst, dec.residual(), (dec.full - tr.output.row(p)).cwiseAbs().maxCoeff()});
      }
    }
  }
  return worst;
}

}  // namespace icvlab
