#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "icvlab/tasks.hpp"

using namespace icvlab;

namespace {

TaskSpec mixed_spec() {
  TaskSpec s;
  s.kind = TaskKind::kMixedVqa;
  s.n_symbols = 5;
  s.scene_len = 7;
  s.family_size = 3;
  s.instance = 17;
  s.train_size = 700;
  s.eval_size = 300;
  return s;
}

/// Reads a mixed pair back from raw token ids and answers it from scratch.
int oracle_answer(const TaskSpec& s, const Pair& p) {
  const int sym0 = tok::kFirstFree + kNumSubtasks;
  const int idx0 = sym0 + s.n_symbols;
  std::vector<int> scene;
  for (int i = 0; i < s.scene_len; ++i) scene.push_back(p.input[static_cast<std::size_t>(i)] - sym0);
  const int sub = p.input.back() - tok::kFirstFree;
  const int arg_tok = p.input.size() > static_cast<std::size_t>(s.scene_len) + 1 ? p.input[static_cast<std::size_t>(s.scene_len)] : -1;
  int inst = s.instance, fmt = 0;
  for (int i = 0; i <= sub; ++i) {
    fmt = inst % s.family_size;
    inst /= s.family_size;
  }
  const int sym_ans0 = idx0 + s.scene_len;
  const int dig0 = sym_ans0 + s.family_size * s.n_symbols;
  const int yn0 = dig0 + s.family_size * 10;
  std::map<int, int> hist;
  for (int x : scene) hist[x]++;
  switch (sub) {
    case 0:  // symbol at an index
      return sym_ans0 + fmt * s.n_symbols + scene[static_cast<std::size_t>(arg_tok - idx0)];
    case 1:
      return dig0 + fmt * 10 + hist[arg_tok - sym0];
    case 2:
      return yn0 + fmt * 2 + (hist.count(arg_tok - sym0) ? 0 : 1);
    default: {
      int best = -1, best_n = -1;
      for (auto [k, v] : hist)
        if (v > best_n) best = k, best_n = v;
      return sym_ans0 + fmt * s.n_symbols + best;
    }
  }
}

}  // namespace

TEST(Scene, HandCheckedExamples) {
  const std::vector<int> scene{0, 1, 0};
  EXPECT_EQ(interpret_scene(scene, Subtask::kCount, 0), std::pair(AnswerCategory::kNumber, 2));
  EXPECT_EQ(interpret_scene(scene, Subtask::kExist, 2), std::pair(AnswerCategory::kYesNo, 0));
  EXPECT_EQ(interpret_scene(scene, Subtask::kIdent, 1), std::pair(AnswerCategory::kSymbol, 1));
  EXPECT_EQ(interpret_scene(scene, Subtask::kMajority, -1), std::pair(AnswerCategory::kSymbol, 0));
}

TEST(Mixed, ThousandPairsMatchIndependentInterpreter) {
  const auto s = mixed_spec();
  const auto ds = gen_mixed(s, 4);
  ASSERT_EQ(ds.train.size() + ds.eval.size(), 1000u);
  for (const auto* split : {&ds.train, &ds.eval})
    for (const auto& p : *split) {
      ASSERT_EQ(p.answer.size(), 1u);
      EXPECT_EQ(p.answer[0], oracle_answer(s, p));
    }
}

TEST(Mixed, SplitsDisjointAndSizes) {
  const auto s = mixed_spec();
  const auto ds = gen_mixed(s, 4);
  EXPECT_EQ(ds.train.size(), 700u);
  EXPECT_EQ(ds.eval.size(), 300u);
  const auto keys = input_keys(ds.train);
  for (const auto& p : ds.eval) EXPECT_FALSE(keys.contains(input_key(p)));
}

TEST(Mixed, AnswerSpacesDisjointAndCategorised) {
  const auto s = mixed_spec();
  const auto ds = gen_mixed(s, 2);
  std::set<int> by_cat[kNumCategories];
  for (const auto& p : ds.train) {
    const auto cat = s.category_of_token(p.answer[0]);
    ASSERT_TRUE(cat.has_value());
    EXPECT_EQ(*cat, category_of(static_cast<Subtask>(p.subtask)));
    by_cat[static_cast<int>(*cat)].insert(p.answer[0]);
  }
  for (int a = 0; a < kNumCategories; ++a)
    for (int b = a + 1; b < kNumCategories; ++b)
      for (int t : by_cat[a]) EXPECT_FALSE(by_cat[b].contains(t));
  EXPECT_FALSE(s.category_of_token(tok::kSep).has_value());
  EXPECT_LE(s.vocab_used(), 128);
}

TEST(Mixed, EverySubtaskAppears) {
  const auto ds = gen_mixed(mixed_spec(), 9);
  std::map<int, int> n;
  for (const auto& p : ds.train) n[p.subtask]++;
  EXPECT_EQ(n.size(), 4u);
  for (auto [k, v] : n) EXPECT_GT(v, 100) << k;
}

TEST(Mixed, SceneLengthLimitedByDigits) {
  auto s = mixed_spec();
  s.scene_len = 10;
  EXPECT_THROW(s.validate(1000), std::invalid_argument);
}

TEST(Simple, CiphersAreBijectionsIntoOwnAlphabets) {
  TaskSpec s;
  s.n_symbols = 6;
  s.family_size = 4;
  const auto fam = cipher_family(s);
  ASSERT_EQ(fam.size(), 4u);
  for (const auto& perm : fam) EXPECT_EQ(std::set<int>(perm.begin(), perm.end()).size(), 6u);
  std::set<int> seen;
  for (int f = 0; f < 4; ++f)
    for (int x = 0; x < 6; ++x) EXPECT_TRUE(seen.insert(s.simple_answer_token(f, x)).second);
}

TEST(Simple, TokenwiseMapping) {
  TaskSpec s;
  s.n_symbols = 6;
  s.family_size = 4;
  s.instance = 2;
  s.train_size = 100;
  s.eval_size = 50;
  const auto ds = gen_simple(s, 3);
  const auto fam = cipher_family(s);
  for (const auto& p : ds.train) {
    ASSERT_EQ(p.input.size(), p.answer.size());
    for (std::size_t i = 0; i < p.input.size(); ++i) {
      const int x = p.input[i] - s.symbol_token(0);
      EXPECT_EQ(p.answer[i], s.simple_answer_token(2, fam[2][static_cast<std::size_t>(x)]));
    }
  }
}

TEST(Simple, DomainTooSmall) {
  TaskSpec s;
  s.n_symbols = 3;
  s.input_len = 2;
  s.train_size = 8;
  s.eval_size = 2;
  EXPECT_THROW(gen_simple(s, 1), std::invalid_argument);
}

TEST(Episodes, DemosExcludeQueryAndAreDeterministic) {
  const auto ds = gen_mixed(mixed_spec(), 1);
  const auto a = sample_episode(ds, 8, 5, 10);
  const auto b = sample_episode(ds, 8, 5, 10);
  EXPECT_EQ(a.demos, b.demos);
  for (const auto& d : a.demos) EXPECT_NE(d, ds.train[10]);
  std::set<std::vector<int>> uniq;
  for (const auto& d : a.demos) uniq.insert(d.input);
  EXPECT_EQ(uniq.size(), 8u);
  EXPECT_THROW(sample_episode(ds, static_cast<int>(ds.train.size()), 5, 0), std::invalid_argument);
}

TEST(Render, LayoutAndMasks) {
  Episode ep;
  ep.demos.push_back({{10, 11}, {20}, -1, 0});
  ep.query = {{12}, {21, 22}, -1, 0};
  const auto r = render(ep, true);
  EXPECT_EQ(r.tokens, (std::vector<int>{tok::kBos, tok::kQ, 10, 11, tok::kA, 20, tok::kSep, tok::kQ, 12, tok::kA, 21, 22}));
  EXPECT_EQ(r.boundary, 7);
  EXPECT_EQ(r.answer_positions, (std::vector<int>{9, 10}));
  EXPECT_EQ(r.demo_target_positions, (std::vector<int>{4, 5}));
  EXPECT_EQ(render(ep, false).tokens.size(), 10u);
  EXPECT_THROW(render(ep, true, 11), std::length_error);
}

TEST(Render, LengthBoundIsTight) {
  const auto s = mixed_spec();
  const auto ds = gen_mixed(s, 1);
  int longest = 0;
  for (std::size_t i = 0; i < 50; ++i)
    longest = std::max(longest, static_cast<int>(render(sample_episode(ds, 4, 2, i), true).tokens.size()));
  EXPECT_LE(longest, rendered_length(s, 4, true));
  EXPECT_GE(longest, rendered_length(s, 4, true) - 4);
}

TEST(Jsonl, RoundTrip) {
  const auto s = mixed_spec();
  const auto ds = gen_mixed(s, 6);
  const auto path = (std::filesystem::temp_directory_path() / "icvlab_tasks.jsonl").string();
  write_jsonl(ds, path);
  const auto back = read_jsonl(path, s);
  EXPECT_EQ(back.train, ds.train);
  EXPECT_EQ(back.eval, ds.eval);
  std::filesystem::remove(path);
}

TEST(Stream, RespectsExclusionsAndShotRange) {
  const auto s = mixed_spec();
  const auto ds = gen_mixed(s, 1);
  const auto excluded = input_keys(ds.eval);
  EpisodeStream st(s, 3, 2, 5, excluded);
  for (int i = 0; i < 200; ++i) {
    const auto ep = st.next();
    EXPECT_GE(ep.demos.size(), 2u);
    EXPECT_LE(ep.demos.size(), 5u);
    EXPECT_FALSE(excluded.contains(input_key(ep.query)));
    EXPECT_LT(ep.task_id, s.instance_count());
  }
}
