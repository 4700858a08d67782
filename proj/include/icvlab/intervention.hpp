#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "icvlab/tensor.hpp"

namespace icvlab {

/// Per-layer shift vectors and their scalar gates. In shared mode a single
/// vector is broadcast to every layer (one gate per layer is still kept).
struct ICVBundle {
  Matrix vectors;              // L x d, or 1 x d in shared mode
  std::vector<double> alphas;  // L
  bool shared_mode = false;

  int n_layers() const { return static_cast<int>(alphas.size()); }
  Index dim() const { return vectors.cols(); }

  /// Row of the vector applied at `layer`.
  auto vector_for(int layer) const { return vectors.row(shared_mode ? 0 : layer); }

  /// The effective shift alpha_l * v_l added at `layer`.
  Eigen::RowVectorXd shift(int layer) const { return alphas.at(static_cast<std::size_t>(layer)) * vector_for(layer); }

  void validate(int n_layers, Index d) const {
    if (static_cast<int>(alphas.size()) != n_layers) {
      throw std::invalid_argument("ICVBundle: expected " + std::to_string(n_layers) + " gates, got " +
                                  std::to_string(alphas.size()));
    }
    const Index want_rows = shared_mode ? 1 : n_layers;
    if (vectors.rows() != want_rows || vectors.cols() != d) {
      throw std::invalid_argument("ICVBundle: vectors must be " + std::to_string(want_rows) + "x" + std::to_string(d));
    }
    if (!vectors.allFinite()) throw std::invalid_argument("ICVBundle: non-finite vector entry");
    for (double a : alphas)
      if (!std::isfinite(a)) throw std::invalid_argument("ICVBundle: non-finite gate");
  }

  std::size_t trainable_count() const { return static_cast<std::size_t>(vectors.size()) + alphas.size(); }
};

/// How a vector modifies the forward pass. All modes act on the post-block
/// residual stream of a layer.
struct InterventionSpec {
  enum class Kind { kNone, kAddPerLayer, kReplaceLastToken, kAddLastToken, kAddAllTokens };

  Kind kind = Kind::kNone;
  ICVBundle bundle;          // kAddPerLayer
  int layer = 0;             // kReplaceLastToken / kAddLastToken
  int position = -1;         // last-token modes: target row, -1 = last row of the input
  Matrix vectors;            // 1 x d for last-token modes, L x d for kAddAllTokens
  double strength = 0.0;     // kAddAllTokens
  bool renormalize = true;   // kAddAllTokens

  static InterventionSpec none() { return {}; }

  static InterventionSpec add_per_layer(ICVBundle b) {
    InterventionSpec s;
    s.kind = Kind::kAddPerLayer;
    s.bundle = std::move(b);
    return s;
  }

  static InterventionSpec replace_last_token(int layer, Matrix v) {
    InterventionSpec s;
    s.kind = Kind::kReplaceLastToken;
    s.layer = layer;
    s.vectors = std::move(v);
    return s;
  }

  static InterventionSpec add_last_token(int layer, Matrix v) {
    InterventionSpec s;
    s.kind = Kind::kAddLastToken;
    s.layer = layer;
    s.vectors = std::move(v);
    return s;
  }

  static InterventionSpec add_all_tokens(Matrix per_layer, double strength, bool renormalize) {
    InterventionSpec s;
    s.kind = Kind::kAddAllTokens;
    s.vectors = std::move(per_layer);
    s.strength = strength;
    s.renormalize = renormalize;
    return s;
  }

  void validate(int n_layers, Index d) const {
    switch (kind) {
      case Kind::kNone:
        return;
      case Kind::kAddPerLayer:
        bundle.validate(n_layers, d);
        return;
      case Kind::kReplaceLastToken:
      case Kind::kAddLastToken:
        if (layer < 0 || layer >= n_layers) {
          throw std::out_of_range("intervention layer " + std::to_string(layer) + " outside [0, " +
                                  std::to_string(n_layers) + ")");
        }
        if (vectors.rows() != 1 || vectors.cols() != d) {
          throw std::invalid_argument("intervention vector must be 1x" + std::to_string(d));
        }
        return;
      case Kind::kAddAllTokens:
        if (vectors.rows() != n_layers || vectors.cols() != d) {
          throw std::invalid_argument("add_all_tokens needs one vector per layer");
        }
        return;
    }
  }
};

inline const char* to_string(InterventionSpec::Kind k) {
  switch (k) {
    case InterventionSpec::Kind::kNone:
      return "none";
    case InterventionSpec::Kind::kAddPerLayer:
      return "add_per_layer";
    case InterventionSpec::Kind::kReplaceLastToken:
      return "replace_last_token";
    case InterventionSpec::Kind::kAddLastToken:
      return "add_last_token";
    case InterventionSpec::Kind::kAddAllTokens:
      return "add_all_tokens";
  }
  return "?";
}

}  // namespace icvlab
