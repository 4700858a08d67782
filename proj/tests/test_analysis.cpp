#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "icvlab/analysis.hpp"

using namespace icvlab;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 3;
  c.d_model = 12;
  c.n_heads = 3;
  c.d_mlp = 20;
  c.vocab_size = 30;
  c.max_seq_len = 48;
  return c;
}

std::vector<int> tokens_of(int n) {
  std::vector<int> t(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) t[static_cast<std::size_t>(i)] = (7 * i + 3) % 30;
  return t;
}

std::string first_line(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::string s;
  std::getline(in, s);
  return s;
}

}  // namespace

TEST(Similarity, HandCasesAndDegenerateQueries) {
  std::vector<ShiftRecord> recs(3);
  Eigen::RowVectorXd z = Eigen::RowVectorXd::Zero(2);
  recs[0] = {z, (Eigen::RowVectorXd(2) << 1, 0).finished(), (Eigen::RowVectorXd(2) << 1, 1).finished()};
  recs[1] = {z, (Eigen::RowVectorXd(2) << 0, 2).finished(), (Eigen::RowVectorXd(2) << 0, -5).finished()};
  recs[2] = {z, z, (Eigen::RowVectorXd(2) << 1, 0).finished()};
  const auto s = shift_similarity(recs);
  EXPECT_NEAR(s.cosines[0], 1 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(s.cosines[1], -1.0, 1e-15);
  EXPECT_TRUE(std::isnan(s.cosines[2]));
  EXPECT_FALSE(s.valid[2]);
  EXPECT_EQ(s.degenerate, 1u);
  EXPECT_NEAR(s.mean, (1 / std::sqrt(2.0) - 1) / 2, 1e-15);
  EXPECT_THROW(shift_similarity(std::span(recs).subspan(2)), std::invalid_argument);
}

TEST(Similarity, MethodEqualToIclGivesOne) {
  const auto cfg = tiny_config();
  const auto params = init_model<double>(cfg, 2);
  const auto prompt = tokens_of(9);
  const auto base = first_answer_state(params, prompt, {});
  ICVBundle b;
  b.vectors = Matrix::Constant(cfg.n_layers, cfg.d_model, 0.3);
  b.alphas.assign(3, 1.0);
  const auto shifted = first_answer_state(params, prompt, InterventionSpec::add_per_layer(b));
  const std::vector<ShiftRecord> recs{{base, shifted, shifted}};
  EXPECT_NEAR(shift_similarity(recs).mean, 1.0, 1e-12);
}

TEST(Decode, SoftmaxOfUnembeddedVector) {
  const auto cfg = tiny_config();
  const auto params = init_model<double>(cfg, 4);
  Eigen::RowVectorXd v = Eigen::RowVectorXd::LinSpaced(cfg.d_model, -1, 1) * 20;
  const auto d = decode_vector(v, params, 5);
  std::vector<double> logits(static_cast<std::size_t>(cfg.vocab_size));
  double z = 0;
  for (int t = 0; t < cfg.vocab_size; ++t) {
    double s = 0;
    for (int i = 0; i < cfg.d_model; ++i) s += v(i) * params.unembed.values(i, t);
    logits[static_cast<std::size_t>(t)] = s;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  for (double l : logits) z += std::exp(l - mx);
  for (int t = 0; t < cfg.vocab_size; ++t) EXPECT_NEAR(d.probs(t), std::exp(logits[static_cast<std::size_t>(t)] - mx) / z, 1e-12);
  ASSERT_EQ(d.top.size(), 5u);
  for (std::size_t i = 1; i < d.top.size(); ++i) EXPECT_GE(d.top[i - 1].second, d.top[i].second);
  EXPECT_THROW(decode_vector(Eigen::RowVectorXd::Zero(3), params, 1), std::invalid_argument);
}

TEST(Bias, CountsHallucinationsAndMeaninglessOutputs) {
  TaskSpec s;
  s.kind = TaskKind::kMixedVqa;
  s.n_symbols = 4;
  s.scene_len = 5;
  s.family_size = 2;
  const std::vector<std::vector<int>> preds{
      {s.digit_token(0, 3)}, {s.yesno_token(1, 0)}, {tok::kSep}, {}, {s.symbol_answer_token(0, 2)}};
  using C = AnswerCategory;
  const std::vector<std::optional<C>> expected{C::kNumber, C::kNumber, C::kSymbol, C::kYesNo, C::kYesNo};
  const auto r = bias_report(s, preds, expected);
  EXPECT_EQ(r.hallucination, 1);
  EXPECT_EQ(r.meaningless, 2);
  EXPECT_EQ(r.total(), 5);
  EXPECT_EQ(r.counts[static_cast<int>(C::kNumber)][static_cast<int>(C::kNumber)], 1);
  EXPECT_EQ(r.counts[static_cast<int>(C::kYesNo)][static_cast<int>(C::kSymbol)], 1);
  EXPECT_EQ(r.counts[static_cast<int>(C::kSymbol)][kNumCategories], 1);
  EXPECT_THROW(bias_report(s, std::span(preds).first(2), expected), std::invalid_argument);
}

TEST(Bias, ExpectedCategoriesFollowSubtasks) {
  TaskSpec s;
  s.kind = TaskKind::kMixedVqa;
  s.n_symbols = 4;
  s.scene_len = 5;
  s.family_size = 2;
  s.train_size = 100;
  s.eval_size = 40;
  const auto ds = gen_mixed(s, 3);
  const auto cats = expected_categories(ds, 100);
  ASSERT_EQ(cats.size(), 40u);
  for (std::size_t i = 0; i < cats.size(); ++i) EXPECT_EQ(*cats[i], *s.category_of_token(ds.eval[i].answer[0]));
}

TEST(Flops, ClosedFormEqualsInstrumentedCounts) {
  const auto cfg = tiny_config();
  const auto params = init_model<double>(cfg, 1);
  ICVBundle b;
  b.vectors = Matrix::Constant(cfg.n_layers, cfg.d_model, 0.1);
  b.alphas.assign(3, 0.5);
  const Matrix one = Matrix::Constant(1, cfg.d_model, 0.2);
  const Matrix per = Matrix::Constant(cfg.n_layers, cfg.d_model, 0.2);
  using K = InterventionSpec::Kind;
  const std::vector<std::pair<InterventionSpec, bool>> cases{
      {InterventionSpec::none(), true},
      {InterventionSpec::add_per_layer(b), true},
      {InterventionSpec::replace_last_token(1, one), true},
      {InterventionSpec::add_last_token(2, one), true},
      {InterventionSpec::add_all_tokens(per, 0.1, true), true},
      {InterventionSpec::add_all_tokens(per, 0.1, false), false},
  };
  for (int T : {1, 5, 17, 48}) {
    const auto toks = tokens_of(T);
    for (const auto& [iv, renorm] : cases) {
      const auto est = flops_estimate(cfg, T, iv.kind, renorm);
      const auto got = instrumented_macs(params, toks, iv);
      for (int c = 0; c < static_cast<int>(MacComponent::kCount); ++c)
        EXPECT_EQ(est.flops[static_cast<std::size_t>(c)], 2 * got.by_component[static_cast<std::size_t>(c)])
            << "T=" << T << " kind=" << to_string(iv.kind) << " component=" << to_string(static_cast<MacComponent>(c));
    }
    EXPECT_EQ(flops_estimate(cfg, T, K::kAddPerLayer).total() - flops_estimate(cfg, T).total(),
              2 * cfg.n_layers * cfg.d_model * T);
  }
  EXPECT_THROW(flops_estimate(cfg, 49), std::out_of_range);
}

TEST(Flops, HandCountForOneToken) {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 2;
  c.n_heads = 1;
  c.d_mlp = 3;
  c.vocab_size = 5;
  c.max_seq_len = 4;
  // scores 2, mix 2, qkv 12, out 4, mlp 12, unembed 10 -> 42 MACs.
  EXPECT_EQ(flops_estimate(c, 1).total(), 84);
}

TEST(Timing, RowsPerMethodAndRepeatFloor) {
  const auto cfg = tiny_config();
  const auto params = init_model<double>(cfg, 1);
  const std::vector<std::vector<int>> prompts{tokens_of(6), tokens_of(8)};
  const std::vector<Method> methods{Method::zero_shot(), Method::with_intervention("shift", InterventionSpec::none())};
  const auto rows = timing_benchmark(params, prompts, methods, nullptr, 1, 3);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].method, "shift");
  EXPECT_EQ(rows[0].samples, 6u);
  EXPECT_GT(rows[0].median_seconds, 0.0);
  EXPECT_THROW(timing_benchmark(params, prompts, methods, nullptr, 1, 2), std::invalid_argument);
  const std::vector<Method> icl{Method::icl(2)};
  EXPECT_THROW(timing_benchmark(params, prompts, icl, nullptr, 1, 3), std::invalid_argument);
}

TEST(Projection, RecoversDominantAxes) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix X(200, 3);
  for (Index i = 0; i < X.rows(); ++i) X.row(i) << 0.1 * n(rng), 5 * n(rng), 1 * n(rng);
  const auto p = project_2d(X);
  EXPECT_FALSE(p.rank_deficient);
  EXPECT_NEAR(std::abs(p.axes(0, 1)), 1.0, 1e-2);
  EXPECT_NEAR(std::abs(p.axes(1, 2)), 1.0, 1e-2);
  const Matrix centred = X.rowwise() - X.colwise().mean();
  EXPECT_LE((p.coords - centred * p.axes.transpose()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Projection, CollinearStatesAreFlagged) {
  Matrix X(4, 3);
  for (int i = 0; i < 4; ++i) X.row(i) << i, 2 * i, 0;
  const auto p = project_2d(X);
  EXPECT_TRUE(p.rank_deficient);
  EXPECT_EQ(p.axes.row(1).norm(), 0.0);
  EXPECT_THROW(project_2d(Matrix::Zero(2, 3)), std::invalid_argument);
}

TEST(Csv, HeadersMatchThePlottingContract) {
  const auto dir = std::filesystem::temp_directory_path() / "icvlab_csv";
  std::filesystem::remove_all(dir);
  SimilarityResult s;
  s.cosines = {0.5};
  s.valid = {true};
  write_similarity_csv(dir / "sim.csv", "live", s);
  EXPECT_EQ(first_line(dir / "sim.csv"), "query,method,cosine,valid");
  write_bias_csv(dir / "bias.csv", "live", BiasReport{});
  EXPECT_EQ(first_line(dir / "bias.csv"), "method,expected,emitted,count");
  const std::vector<FlopsRow> fr{{"zero_shot", 4, flops_estimate(tiny_config(), 4), std::nullopt}};
  write_flops_csv(dir / "flops.csv", fr);
  EXPECT_EQ(first_line(dir / "flops.csv"), "# FLOPs counted as 2 per multiply-add");
  const std::vector<TimingRow> tr{{"live", 0.001, 5}};
  write_timing_csv(dir / "timing.csv", tr);
  EXPECT_EQ(first_line(dir / "timing.csv"), "method,median_seconds,samples");
  Projection p;
  p.coords = Matrix::Zero(1, 2);
  const std::vector<std::string> labels{"a"}, methods{"icl"};
  write_projection_csv(dir / "proj.csv", p, labels, methods);
  EXPECT_EQ(first_line(dir / "proj.csv"), "x,y,label,method");
  const std::vector<std::string> two{"a", "b"};
  EXPECT_THROW(write_projection_csv(dir / "proj.csv", p, two, methods), std::invalid_argument);
  std::filesystem::remove_all(dir);
}
