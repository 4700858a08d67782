#include <gtest/gtest.h>

#include <random>

#include "icvlab/attention.hpp"
#include "icvlab/tasks.hpp"

using namespace icvlab;

namespace {

Matrix randn(Index r, Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Plain softmax attention over the stacked context, computed directly.
Eigen::RowVectorXd direct_attention(const AttentionInstance& a) {
  Matrix all(a.demo_context.rows() + a.query_context.rows(), a.query_token.size());
  if (a.demo_context.rows() > 0) all.topRows(a.demo_context.rows()) = a.demo_context;
  all.bottomRows(a.query_context.rows()) = a.query_context;
  Eigen::RowVectorXd s = a.scale * (a.query_token * all.transpose());
  s = (s.array() - s.maxCoeff()).exp().matrix();
  s /= s.sum();
  return s * all;
}

AttentionInstance random_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(0, 12), qlen(1, 8), dim(1, 16);
  std::uniform_real_distribution<double> sc(0.05, 3.0);
  const int d = dim(rng);
  AttentionInstance a;
  a.query_token = randn(1, d, rng).row(0);
  a.demo_context = randn(len(rng), d, rng);
  a.query_context = randn(qlen(rng), d, rng);
  a.scale = sc(rng);
  return a;
}

}  // namespace

TEST(Decompose, IdentityOnThousandRandomInstances) {
  std::mt19937_64 rng(42);
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_instance(rng);
    const auto dec = decompose(a);
    EXPECT_LE(dec.residual(), 1e-10) << "instance " << i;
    EXPECT_LE((dec.full - direct_attention(a)).cwiseAbs().maxCoeff(), 1e-10) << "instance " << i;
    EXPECT_GE(dec.mu, 0.0);
    EXPECT_LE(dec.mu, 1.0);
  }
}

TEST(Decompose, MuMatchesMassOnDemonstrations) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    auto a = random_instance(rng);
    if (a.demo_context.rows() == 0) continue;
    Eigen::RowVectorXd sd = a.scale * (a.query_token * a.demo_context.transpose());
    Eigen::RowVectorXd sq = a.scale * (a.query_token * a.query_context.transpose());
    long double z1 = 0, z2 = 0;
    for (Index j = 0; j < sd.size(); ++j) z1 += std::exp(static_cast<long double>(sd(j)));
    for (Index j = 0; j < sq.size(); ++j) z2 += std::exp(static_cast<long double>(sq(j)));
    EXPECT_NEAR(mu_coefficient(a), static_cast<double>(z1 / (z1 + z2)), 1e-12);
    EXPECT_NEAR(decompose(a).mu, mu_coefficient(a), 1e-15);
  }
}

TEST(Decompose, HandCheckableCase) {
  // Two orthogonal keys with equal scores: mu = 1/2 and the output is the mean.
  AttentionInstance a;
  a.query_token = Eigen::RowVectorXd::Zero(2);
  a.demo_context = Matrix(1, 2);
  a.demo_context << 1, 0;
  a.query_context = Matrix(1, 2);
  a.query_context << 0, 1;
  const auto dec = decompose(a);
  EXPECT_DOUBLE_EQ(dec.mu, 0.5);
  EXPECT_DOUBLE_EQ(dec.full(0), 0.5);
  EXPECT_DOUBLE_EQ(dec.full(1), 0.5);
}

TEST(Decompose, NoDemonstrationsGivesZeroMu) {
  std::mt19937_64 rng(9);
  AttentionInstance a;
  a.query_token = randn(1, 4, rng).row(0);
  a.demo_context = Matrix(0, 4);
  a.query_context = randn(3, 4, rng);
  const auto dec = decompose(a);
  EXPECT_EQ(dec.mu, 0.0);
  EXPECT_EQ(mu_coefficient(a), 0.0);
  EXPECT_LE((dec.full - dec.h_query).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Decompose, ExtremeScoresStayFinite) {
  AttentionInstance a;
  a.query_token = Eigen::RowVectorXd::Constant(1, 100.0);
  a.demo_context = Matrix::Constant(2, 1, 10.0);
  a.query_context = Matrix::Constant(2, 1, -10.0);
  const auto dec = decompose(a);
  EXPECT_TRUE(dec.full.allFinite());
  EXPECT_LE(dec.residual(), 1e-10);
}

TEST(Decompose, RejectsBadInstances) {
  AttentionInstance a;
  a.query_token = Eigen::RowVectorXd::Zero(3);
  a.query_context = Matrix(0, 3);
  EXPECT_THROW(decompose(a), std::invalid_argument);
  a.query_context = Matrix::Zero(1, 2);
  EXPECT_THROW(decompose(a), std::invalid_argument);
}

TEST(ModelHead, MatchesForwardOnEveryHeadAndPosition) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_mlp = 32;
  cfg.vocab_size = 64;
  cfg.max_seq_len = 128;
  const auto params = init_model<double>(cfg, 7);
  TaskSpec spec;
  spec.n_symbols = 6;
  spec.family_size = 3;
  spec.train_size = 60;
  spec.eval_size = 20;
  const auto ds = gen_simple(spec, 1);
  const auto ep = sample_eval_episode(ds, 3, 5, 0);
  const auto r = render(ep, true, cfg.max_seq_len);
  EXPECT_LE(verify_model(params, r.tokens, r.boundary), 1e-8);
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int h = 0; h < cfg.n_heads; ++h)
      EXPECT_LE(verify_on_model_head(params, r.tokens, r.boundary, l, h, static_cast<int>(r.tokens.size()) - 1), 1e-8);
}

TEST(ModelHead, RejectsPositionsOutsideQuery) {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_mlp = 8;
  cfg.vocab_size = 16;
  cfg.max_seq_len = 16;
  const auto params = init_model<double>(cfg, 1);
  const std::vector<int> tokens{0, 1, 2, 3, 4};
  EXPECT_THROW(verify_on_model_head(params, tokens, 3, 0, 0, 1), std::out_of_range);
  EXPECT_THROW(verify_on_model_head(params, tokens, 7, 0, 0, 4), std::out_of_range);
  EXPECT_THROW(verify_on_model_head(params, tokens, 2, 1, 0, 4), std::out_of_range);
}
