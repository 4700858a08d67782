#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "icvlab/tensor.hpp"

using namespace icvlab;

namespace {

constexpr int kSeeds = 20;
constexpr double kTol = 1e-5;

Matrix randn(Index r, Index c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Matrix random_probs(Index r, Index c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  for (Index i = 0; i < r; ++i) m.row(i) /= m.row(i).sum();
  return m;
}

/// sum(y .* W) for a fixed random W, so every output entry matters.
DVar weighted(Tape& t, DVar y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, t.constant(randn(y.rows(), y.cols(), rng))));
}

template <typename F>
void check_over_seeds(const char* name, F make) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(1000 + s);
    auto [fn, inputs] = make(rng, s);
    const double err = grad_check(fn, inputs);
    EXPECT_LE(err, kTol) << name << " seed " << s;
  }
}

}  // namespace

TEST(GradCheck, Matmul) {
  check_over_seeds("matmul", [](std::mt19937_64& rng, int s) {
    ScalarFn f = [s](Tape& t, std::span<const DVar> v) { return weighted(t, matmul(v[0], v[1]), s); };
    return std::pair{f, std::vector<Matrix>{randn(3, 4, rng), randn(4, 2, rng)}};
  });
}

TEST(GradCheck, MatmulNT) {
  check_over_seeds("matmul_nt", [](std::mt19937_64& rng, int s) {
    ScalarFn f = [s](Tape& t, std::span<const DVar> v) { return weighted(t, matmul_nt(v[0], v[1]), s); };
    return std::pair{f, std::vector<Matrix>{randn(3, 4, rng), randn(5, 4, rng)}};
  });
}

TEST(GradCheck, Elementwise) {
  check_over_seeds("add/sub/mul", [](std::mt19937_64& rng, int s) {
    ScalarFn f = [s](Tape& t, std::span<const DVar> v) {
      return weighted(t, mul(add(v[0], v[1]), sub(v[0], v[1])), s);
    };
    return std::pair{f, std::vector<Matrix>{randn(3, 3, rng), randn(3, 3, rng)}};
  });
}

TEST(GradCheck, AddRowScale) {
  check_over_seeds("add_row/scale/scale_by", [](std::mt19937_64& rng, int s) {
    ScalarFn f = [s](Tape& t, std::span<const DVar> v) {
      return weighted(t, scale_by(scale(add_row(v[0], v[1]), 0.7), v[2]), s);
    };
    return std::pair{f, std::vector<Matrix>{randn(4, 3, rng), randn(1, 3, rng), randn(1, 1, rng)}};
  });
}

TEST(GradCheck, Gelu) {
  check_over_seeds("gelu", [](std::mt19937_64& rng, int s) {
    ScalarFn f = [s](Tape& t, std::span<const DVar> v) { return weighted(t, gelu(v[0]), s); };
    return std::pair{f, std::vector<Matrix>{randn(3, 5, rng, 2.0)}};
  });
}

TEST(GradCheck, LayerNorm) {
  check_over_seeds("layer_norm", [](std::mt19937_64& rng, int s) {
    ScalarFn f = [s](Tape& t, std::span<const DVar> v) { return weighted(t, layer_norm(v[0], v[1], v[2]), s); };
    return std::pair{f, std::vector<Matrix>{randn(3, 6, rng), randn(1, 6, rng), randn(1, 6, rng)}};
  });
}

TEST(GradCheck, Softmaxes) {
  check_over_seeds("softmax/causal/log_softmax", [](std::mt19937_64& rng, int s) {
    ScalarFn f = [s](Tape& t, std::span<const DVar> v) {
      DVar a = weighted(t, softmax_rows(v[0]), s);
      DVar b = weighted(t, causal_softmax(v[0], 1), s + 1);
      DVar c = weighted(t, log_softmax_rows(v[0]), s + 2);
      return add(add(a, b), c);
    };
    return std::pair{f, std::vector<Matrix>{randn(4, 5, rng)}};
  });
}

TEST(GradCheck, Indexing) {
  check_over_seeds("gather/slice/concat/set/add_to_row", [](std::mt19937_64& rng, int s) {
    ScalarFn f = [s](Tape& t, std::span<const DVar> v) {
      const std::vector<int> ids{2, 0, 2, 1};
      DVar g = gather_rows(v[0], std::span<const int>(ids));
      DVar sr = slice_rows(g, 1, 2);
      DVar sc = slice_cols(v[0], 1, 2);
      std::vector<DVar> cols{sr, sc.rows() == sr.rows() ? sc : slice_rows(sc, 0, sr.rows())};
      DVar cc = concat_cols(std::span<const DVar>(cols));
      std::vector<DVar> rows{cc, cc};
      DVar cr = concat_rows(std::span<const DVar>(rows));
      DVar st = set_row(cr, 1, v[1]);
      DVar ar = add_to_row(st, 3, v[1]);
      return weighted(t, ar, s);
    };
    return std::pair{f, std::vector<Matrix>{randn(3, 3, rng), randn(1, 5, rng)}};
  });
}

TEST(GradCheck, RescaleRowsToNorm) {
  check_over_seeds("rescale_rows_to_norm", [](std::mt19937_64& rng, int s) {
    Eigen::VectorXd norms = randn(3, 1, rng).cwiseAbs().array() + 0.5;
    ScalarFn f = [s, norms](Tape& t, std::span<const DVar> v) { return weighted(t, rescale_rows_to_norm(v[0], norms), s); };
    return std::pair{f, std::vector<Matrix>{randn(3, 4, rng)}};
  });
}

TEST(GradCheck, CrossEntropy) {
  check_over_seeds("cross_entropy", [](std::mt19937_64& rng, int) {
    ScalarFn f = [](Tape&, std::span<const DVar> v) {
      const std::vector<int> tg{0, 3, 2};
      return cross_entropy(v[0], std::span<const int>(tg));
    };
    return std::pair{f, std::vector<Matrix>{randn(3, 4, rng)}};
  });
}

TEST(GradCheck, KlDivergence) {
  check_over_seeds("kl_divergence", [](std::mt19937_64& rng, int) {
    ScalarFn f = [](Tape&, std::span<const DVar> v) { return kl_divergence(softmax_rows(v[0]), softmax_rows(v[1])); };
    return std::pair{f, std::vector<Matrix>{randn(2, 5, rng), randn(2, 5, rng)}};
  });
}

// ---------------------------------------------------------------------------
// Values against independent hand computations.

TEST(Values, GeluReference) {
  Tape t;
  Matrix x(1, 3);
  x << 0.0, 1.0, -2.0;
  const Matrix y = gelu(t.constant(x)).value();
  // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))), evaluated in closed form.
  EXPECT_NEAR(y(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(y(0, 1), 0.8411919906082768, 1e-12);
  EXPECT_NEAR(y(0, 2), -0.04540230591222639, 1e-12);
}

TEST(Values, LayerNormZeroMeanUnitVariance) {
  Tape t;
  Matrix x(1, 4);
  x << 1, 2, 3, 4;
  const Matrix y = layer_norm(t.constant(x), t.constant(Matrix::Ones(1, 4)), t.constant(Matrix::Zero(1, 4)), 0.0).value();
  // mean 2.5, variance 1.25
  EXPECT_NEAR(y(0, 0), -1.5 / std::sqrt(1.25), 1e-12);
  EXPECT_NEAR(y(0, 3), 1.5 / std::sqrt(1.25), 1e-12);
  EXPECT_NEAR(y.sum(), 0.0, 1e-12);
}

TEST(Values, CausalSoftmaxMasksFuture) {
  Tape t;
  const Matrix y = causal_softmax(t.constant(Matrix::Zero(3, 3))).value();
  EXPECT_DOUBLE_EQ(y(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(y(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(y(1, 1), 0.5);
  EXPECT_DOUBLE_EQ(y(1, 2), 0.0);
  EXPECT_NEAR(y(2, 2), 1.0 / 3.0, 1e-15);
}

TEST(Values, KlKnownPair) {
  const std::vector<double> p{0.5, 0.5}, q{0.25, 0.75};
  // 0.5 ln 2 + 0.5 ln(2/3)
  EXPECT_NEAR(kl_divergence(p, q), 0.14384103622589045, 1e-14);
  EXPECT_DOUBLE_EQ(kl_divergence(p, p), 0.0);
  const std::vector<double> z{1.0, 0.0}, w{0.0, 1.0};
  EXPECT_NEAR(kl_divergence(z, w), -std::log(kKlFloor), 1e-9);
  EXPECT_THROW(kl_divergence(p, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(Values, KlNonNegativeRandom) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const Matrix p = random_probs(1, 7, rng), q = random_probs(1, 7, rng);
    const std::span<const double> ps(p.data(), 7), qs(q.data(), 7);
    EXPECT_GE(kl_divergence(ps, qs), 0.0);
    EXPECT_NEAR(kl_divergence(ps, ps), 0.0, 1e-15);
  }
}

TEST(Values, CrossEntropyScalar) {
  const std::vector<double> logits{0.0, std::log(3.0)};
  EXPECT_NEAR(cross_entropy(logits, 1), std::log(4.0 / 3.0), 1e-14);
  EXPECT_THROW(cross_entropy(logits, 2), std::out_of_range);
}

TEST(Values, SoftmaxStableForLargeLogits) {
  Tape t;
  Matrix x(1, 3);
  x << 1000.0, 1000.0, -1000.0;
  const Matrix y = softmax_rows(t.constant(x)).value();
  EXPECT_TRUE(y.allFinite());
  EXPECT_NEAR(y(0, 0), 0.5, 1e-15);
}

TEST(Tape, RejectsNonScalarLoss) {
  Tape t;
  Tensor<double> a(Matrix::Ones(2, 2));
  DVar v = t.leaf(a, true);
  EXPECT_THROW(t.backward(v), std::invalid_argument);
}

TEST(Tape, GradientsAccumulateAcrossUses) {
  Tape t;
  Tensor<double> a(Matrix::Constant(1, 1, 3.0));
  DVar v = t.leaf(a, true);
  t.backward(sum(mul(v, v)));
  ASSERT_TRUE(a.grad.has_value());
  EXPECT_DOUBLE_EQ((*a.grad)(0, 0), 6.0);
}

TEST(Macs, MatmulCountsOnlyInsideCounter) {
  MacTally tally;
  Tape t;
  {
    MacCounter c(tally);
    MacScope s(MacComponent::kMlp);
    (void)matmul(t.constant(Matrix::Ones(3, 4)), t.constant(Matrix::Ones(4, 5)));
    (void)matmul_nt(t.constant(Matrix::Ones(2, 4)), t.constant(Matrix::Ones(6, 4)));
  }
  (void)matmul(t.constant(Matrix::Ones(3, 4)), t.constant(Matrix::Ones(4, 5)));
  EXPECT_EQ(tally.by_component[static_cast<int>(MacComponent::kMlp)], 3 * 4 * 5 + 2 * 4 * 6);
  EXPECT_EQ(tally.total(), 3 * 4 * 5 + 2 * 4 * 6);
}

TEST(Errors, ShapeMismatch) {
  Tape t;
  EXPECT_THROW((void)matmul(t.constant(Matrix::Ones(2, 3)), t.constant(Matrix::Ones(2, 3))), std::invalid_argument);
  const std::vector<int> tg{9};
  EXPECT_THROW((void)cross_entropy(t.constant(Matrix::Ones(1, 3)), std::span<const int>(tg)), std::out_of_range);
}
