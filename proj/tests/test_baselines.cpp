#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "icvlab/baselines.hpp"

using namespace icvlab;

namespace {

struct Fixture {
  ModelConfig cfg;
  Parameters<double> params;
  Dataset ds;
};

Fixture make_fixture() {
  Fixture f;
  TaskSpec spec;
  spec.n_symbols = 6;
  spec.family_size = 3;
  spec.input_len = 2;
  spec.train_size = 24;
  spec.eval_size = 6;
  f.cfg.n_layers = 2;
  f.cfg.d_model = 16;
  f.cfg.n_heads = 2;
  f.cfg.d_mlp = 32;
  f.cfg.vocab_size = spec.vocab_used();
  f.cfg.max_seq_len = 64;
  f.params = init_model<double>(f.cfg, 11);
  f.ds = gen_simple(spec, 1);
  return f;
}

/// Leading eigenvector by power iteration, independent of the eigensolver.
Eigen::RowVectorXd power_iteration(const Matrix& D) {
  const Matrix M = D.transpose() * D;
  Eigen::VectorXd v = Eigen::VectorXd::Ones(M.rows());
  for (int i = 0; i < 5000; ++i) v = (M * v).normalized();
  return v.transpose();
}

}  // namespace

TEST(Extraction, EpisodesAreDeterministicWithRequestedShots) {
  const auto f = make_fixture();
  const auto a = extraction_episodes(f.ds, 4, 5, 3);
  const auto b = extraction_episodes(f.ds, 4, 5, 3);
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].demos.size(), 4u);
    EXPECT_EQ(a[i].demos, b[i].demos);
    EXPECT_EQ(a[i].query, b[i].query);
  }
}

TEST(TaskVector, IsMeanOfLastPositionStates) {
  const auto f = make_fixture();
  const auto eps = extraction_episodes(f.ds, 3, 4, 2);
  const Matrix states = task_vector_states(f.params, eps);
  for (int l = 0; l < f.cfg.n_layers; ++l) {
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(f.cfg.d_model);
    for (const auto& ep : eps) {
      const auto tokens = render(ep, false).tokens;
      const auto out = forward(f.params, tokens, {}, {}, ForwardOptions{false, true, nullptr});
      mean += out.residuals[static_cast<std::size_t>(l)].row(static_cast<Index>(tokens.size()) - 1);
    }
    mean /= static_cast<double>(eps.size());
    EXPECT_LE((states.row(l) - mean).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_THROW(extract_task_vector(f.params, eps, f.cfg.n_layers), std::out_of_range);
  EXPECT_THROW(task_vector_states(f.params, {}), std::invalid_argument);
}

TEST(TaskVector, ReplacementLandsInTheResidual) {
  const auto f = make_fixture();
  const auto eps = extraction_episodes(f.ds, 3, 4, 2);
  const auto iv = extract_task_vector(f.params, eps, 1);
  Episode q;
  q.query = f.ds.eval[0];
  const auto tokens = render(q, false).tokens;
  const std::vector<CapturePoint> cap{{1, -1}};
  const auto out = forward(f.params, tokens, iv, cap);
  EXPECT_LE((out.captured.at({1, -1}) - iv.vectors.row(0)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Sweep, ArgmaxTakesEarliestTie) {
  const auto t = make_sweep({{0, 0.2}, {1, 0.5}, {2, 0.5}, {3, 0.1}});
  EXPECT_EQ(t.best, 1u);
  EXPECT_EQ(t.best_setting(), 1.0);
  EXPECT_EQ(t.best_accuracy(), 0.5);
  const auto path = std::filesystem::temp_directory_path() / "icvlab_sweep.csv";
  write_sweep_csv(path, "layer", t);
  std::ifstream in(path);
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  EXPECT_EQ(header, "layer,accuracy");
  EXPECT_EQ(first, "0,0.20000000000000001");
  std::filesystem::remove(path);
}

TEST(Sweep, LayerSweepCoversEveryLayer) {
  const auto f = make_fixture();
  const auto eps = extraction_episodes(f.ds, 2, 3, 1);
  const auto t = sweep_layers(f.params, [&](int l) { return extract_task_vector(f.params, eps, l); }, f.ds, 4, 3);
  ASSERT_EQ(t.rows.size(), 2u);
  for (std::size_t i = 0; i < t.rows.size(); ++i) EXPECT_EQ(t.rows[i].setting, static_cast<double>(i));
}

TEST(FunctionVector, ScoresEveryHeadAndSumsTopN) {
  const auto f = make_fixture();
  const auto eps = extraction_episodes(f.ds, 3, 4, 5);
  const std::span<const Pair> dev(f.ds.train.data(), 4);
  const auto means = head_mean_outputs(f.params, eps);
  const auto fv = extract_function_vector(f.params, eps, dev, 2);
  ASSERT_EQ(fv.scores.size(), 4u);
  for (std::size_t i = 1; i < fv.scores.size(); ++i) EXPECT_GE(fv.scores[i - 1].accuracy_delta, fv.scores[i].accuracy_delta);
  const Eigen::RowVectorXd want = means[static_cast<std::size_t>(fv.scores[0].layer)][static_cast<std::size_t>(fv.scores[0].head)] +
                                  means[static_cast<std::size_t>(fv.scores[1].layer)][static_cast<std::size_t>(fv.scores[1].head)];
  EXPECT_LE((fv.spec.vectors.row(0) - want).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(fv.spec.layer, fv.scores[0].layer);
  EXPECT_EQ(fv.spec.kind, InterventionSpec::Kind::kAddLastToken);
  EXPECT_LE(extract_function_vector(f.params, eps, dev, 0).spec.vectors.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(extract_function_vector(f.params, eps, dev, 5), std::invalid_argument);
}

TEST(FunctionVector, HeadMeansSumToAttentionOutput) {
  // The head slices of the output projection add up to the attention
  // block's contribution, minus its bias.
  const auto f = make_fixture();
  const auto eps = extraction_episodes(f.ds, 2, 1, 9);
  const auto means = head_mean_outputs(f.params, eps);
  const auto tokens = render(eps[0], false).tokens;
  ForwardOptions fo;
  fo.trace_heads = true;
  const auto out = forward(f.params, tokens, {}, {}, fo);
  for (int l = 0; l < f.cfg.n_layers; ++l) {
    const auto& heads = out.heads[static_cast<std::size_t>(l)];
    Eigen::RowVectorXd concat(f.cfg.d_model);
    for (int h = 0; h < f.cfg.n_heads; ++h)
      concat.segment(h * f.cfg.head_dim(), f.cfg.head_dim()) = heads[static_cast<std::size_t>(h)].output.bottomRows(1);
    const Eigen::RowVectorXd direct = concat * f.params.layers[static_cast<std::size_t>(l)].w_o.values;
    Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(f.cfg.d_model);
    for (const auto& v : means[static_cast<std::size_t>(l)]) sum += v;
    EXPECT_LE((sum - direct).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Pca, PrincipalDirectionMatchesPowerIteration) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix D(20, 5);
    for (Index i = 0; i < D.size(); ++i) D.data()[i] = n(rng);
    D.col(trial % 5).array() += 3.0;
    const auto v = principal_direction(D);
    auto w = power_iteration(D);
    if (w.dot(v) < 0) w = -w;
    EXPECT_LE((v - w).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_GE(v.dot(D.colwise().mean()), 0.0);
    EXPECT_NEAR(v.norm(), 1.0, 1e-12);
  }
}

TEST(Pca, ExtractionBuildsUnitDirections) {
  const auto f = make_fixture();
  const std::span<const Pair> demos(f.ds.train.data(), 6);
  const auto iv = extract_pca_icv(f.params, demos, 0.01);
  EXPECT_EQ(iv.kind, InterventionSpec::Kind::kAddAllTokens);
  EXPECT_EQ(iv.strength, 0.01);
  EXPECT_TRUE(iv.renormalize);
  for (int l = 0; l < f.cfg.n_layers; ++l) EXPECT_NEAR(iv.vectors.row(l).norm(), 1.0, 1e-12);
  EXPECT_THROW(extract_pca_icv(f.params, demos.first(1), 0.01), std::invalid_argument);
  const std::vector<double> strengths{0.1, 0.01};
  EXPECT_EQ(sweep_strengths(f.params, iv, strengths, f.ds, 2, 2).rows.size(), 2u);
}

TEST(Lora, CountRankZeroAndTrainingReducesLoss) {
  const auto f = make_fixture();
  EXPECT_EQ(lora_trainable_count(f.cfg, 4), static_cast<std::size_t>(4 * (16 + f.cfg.vocab_size)));
  LoraHyper h;
  h.rank = 0;
  EXPECT_EQ(train_lora_head(f.params, f.ds, h).delta().cwiseAbs().maxCoeff(), 0.0);
  h.rank = 4;
  h.lr = 2e-2;
  h.epochs = 6;
  h.seed = 3;
  std::vector<double> losses;
  const auto head = train_lora_head(f.params, f.ds, h, [&](int, double l) { losses.push_back(l); });
  EXPECT_EQ(head.trainable_count(), lora_trainable_count(f.cfg, 4));
  ASSERT_EQ(losses.size(), 6u * 12u);
  double first = 0, last = 0;
  for (int i = 0; i < 12; ++i) first += losses[static_cast<std::size_t>(i)], last += losses[losses.size() - 1 - static_cast<std::size_t>(i)];
  EXPECT_LT(last, first);
  const auto again = train_lora_head(f.params, f.ds, h);
  EXPECT_EQ(again.A, head.A);
  EXPECT_EQ(again.B, head.B);
  h.rank = 17;
  EXPECT_THROW(train_lora_head(f.params, f.ds, h), std::invalid_argument);
}

TEST(Lora, DeltaShiftsLogitsByHiddenTimesDelta) {
  const auto f = make_fixture();
  LoraHyper h;
  h.rank = 3;
  h.epochs = 1;
  h.lr = 1e-2;
  const auto head = train_lora_head(f.params, f.ds, h);
  const auto tokens = render(sample_episode(f.ds, 0, 1, 0), false).tokens;
  const auto base = forward(f.params, tokens);
  const Matrix delta = head.delta();
  ForwardOptions fo;
  fo.unembed_delta = &delta;
  const auto shifted = forward(f.params, tokens, {}, {}, fo);
  EXPECT_LE((shifted.logits - base.logits - base.final_hidden * delta).cwiseAbs().maxCoeff(), 1e-12);
}
