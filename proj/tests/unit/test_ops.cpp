#include <gtest/gtest.h>

#include <cmath>

#include "dive/error.hpp"
#include "dive/gradcheck.hpp"
#include "dive/ops.hpp"
#include "dive/rng.hpp"
#include "test_support.hpp"

namespace dive {
namespace {

using testing::naive_attention;
using testing::random_tensor;

Parameter param(const std::string& name, Tensor value) {
  Parameter p(name, value.shape());
  p.value = std::move(value);
  return p;
}

TEST(Linear, IdentityWeights) {
  Rng rng(1);
  const Tensor x = random_tensor({4, 3}, rng);
  Parameter w = param("w", Tensor::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
  Parameter b("b", {3});
  EXPECT_EQ(linear(x, w, b), x);
}

TEST(Linear, HandArithmetic) {
  Parameter w = param("w", Tensor::from_rows({{1}, {1}}));
  Parameter b("b", {1});
  EXPECT_EQ(linear(Tensor::from_rows({{1, 2}}), w, b), Tensor::from_rows({{3}}));
}

TEST(Linear, ShapeMismatchNamesBothShapes) {
  Parameter w("w", {3, 2});
  Parameter b("b", {2});
  try {
    linear(Tensor({1, 4}), w, b);
    FAIL() << "expected a shape error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
    const std::string what = e.what();
    EXPECT_NE(what.find("[1,4]"), std::string::npos) << what;
    EXPECT_NE(what.find("[3,2]"), std::string::npos) << what;
  }
}

TEST(Linear, GradientBelowOneInAMillion) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    Parameter x = param("x", random_tensor({3, 4}, rng));
    Parameter w = param("w", random_tensor({4, 2}, rng));
    Parameter b = param("b", random_tensor({2}, rng));
    const Tensor probe = random_tensor({3, 2}, rng);
    auto f = [&] {
      const Tensor y = linear(x.value, w, b);
      double acc = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) acc += probe[i] * y[i];
      return acc;
    };
    auto g = [&] {
      zero_grads({&x, &w, &b});
      x.grad = linear_backward(x.value, w, b, probe);
    };
    EXPECT_LE(grad_check(f, g, {&x, &w, &b}).max_rel_error, 1e-6);
  }
}

TEST(LayerNorm, ConstantRowNormalizesToZero) {
  Parameter g = param("g", Tensor({3}, 1.0));
  Parameter b("b", {3});
  const Tensor y = layer_norm(Tensor::from_rows({{2.5, 2.5, 2.5}}), g, b);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, HandEvaluation) {
  Parameter g = param("g", Tensor({3}, 1.0));
  Parameter b("b", {3});
  const Tensor y = layer_norm(Tensor::from_rows({{1, 2, 3}}), g, b, 0.0);
  EXPECT_NEAR(y[0], -1.2247, 1e-4);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
  EXPECT_NEAR(y[2], 1.2247, 1e-4);
}

TEST(LayerNorm, GradientBelowOneInAMillion) {
  Rng rng(3);
  Parameter x = param("x", random_tensor({2, 5}, rng));
  Parameter g = param("g", random_tensor({5}, rng));
  Parameter b = param("b", random_tensor({5}, rng));
  const Tensor probe = random_tensor({2, 5}, rng);
  auto f = [&] {
    const Tensor y = layer_norm(x.value, g, b);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += probe[i] * y[i];
    return acc;
  };
  auto bw = [&] {
    zero_grads({&x, &g, &b});
    LayerNormCache c;
    layer_norm(x.value, g, b, kLayerNormEps, &c);
    x.grad = layer_norm_backward(c, g, b, probe);
  };
  EXPECT_LE(grad_check(f, bw, {&x, &g, &b}).max_rel_error, 1e-6);
}

TEST(Attention, SingleKeyReturnsItsValue) {
  Rng rng(4);
  const Tensor q = random_tensor({3, 4}, rng);
  const Tensor k = random_tensor({1, 4}, rng);
  const Tensor v = random_tensor({1, 2}, rng);
  const Tensor out = attention_core(q, k, v);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(out.at(i, 0), v[0]);
    EXPECT_EQ(out.at(i, 1), v[1]);
  }
}

TEST(Attention, IdenticalKeysAverageValues) {
  Rng rng(5);
  const Tensor q = random_tensor({2, 3}, rng);
  const Tensor row = random_tensor({1, 3}, rng);
  Tensor k({4, 3});
  for (std::size_t i = 0; i < 4; ++i) std::copy_n(row.data(), 3, k.row(i));
  const Tensor v = random_tensor({4, 2}, rng);
  const Tensor out = attention_core(q, k, v);
  for (std::size_t c = 0; c < 2; ++c) {
    const double mean = (v.at(0, c) + v.at(1, c) + v.at(2, c) + v.at(3, c)) / 4.0;
    EXPECT_NEAR(out.at(0, c), mean, 1e-14);
    EXPECT_NEAR(out.at(1, c), mean, 1e-14);
  }
}

TEST(Attention, MatchesBruteForceOnAllSmallShapes) {
  Rng rng(6);
  for (std::size_t n = 1; n <= 16; n += 3) {
    for (std::size_t m = 1; m <= 16; m += 3) {
      const Tensor q = random_tensor({n, 4}, rng);
      const Tensor k = random_tensor({m, 4}, rng);
      const Tensor v = random_tensor({m, 5}, rng);
      EXPECT_LE(max_abs_diff(attention_core(q, k, v), naive_attention(q, k, v)), 1e-10) << n << "x" << m;
    }
  }
}

TEST(Attention, StableForLargeLogits) {
  const Tensor q = Tensor::from_rows({{1000.0}});
  const Tensor k = Tensor::from_rows({{1000.0}, {999.0}});
  const Tensor v = Tensor::from_rows({{1.0}, {0.0}});
  const Tensor out = attention_core(q, k, v);
  EXPECT_TRUE(out.all_finite());
  EXPECT_NEAR(out[0], 1.0, 1e-12);
}

TEST(Attention, Deterministic) {
  Rng rng(7);
  const Tensor q = random_tensor({5, 4}, rng), k = random_tensor({6, 4}, rng), v = random_tensor({6, 4}, rng);
  EXPECT_EQ(attention_core(q, k, v), attention_core(q, k, v));
}

TEST(Fourier, ZeroInput) {
  const Tensor y = fourier_features(Tensor({1}, 0.0), 2);
  EXPECT_EQ(y.values()[0], 0.0);
  EXPECT_EQ(y.values()[1], 1.0);
  EXPECT_EQ(y.values()[2], 0.0);
  EXPECT_EQ(y.values()[3], 1.0);
}

TEST(Fourier, HalfInput) {
  const Tensor y = fourier_features(Tensor({1}, 0.5), 2);
  const double expected[] = {1.0, 0.0, 0.0, -1.0};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(y[i], expected[i], 1e-12);
}

TEST(Fourier, PeriodTwo) {
  Rng rng(8);
  const Tensor x = random_tensor({3, 2}, rng);
  Tensor shifted = x;
  for (double& v : shifted.storage()) v += 2.0;
  EXPECT_LE(max_abs_diff(fourier_features(x, 4), fourier_features(shifted, 4)), 1e-12);
}

TEST(Fourier, OutputWidth) {
  EXPECT_EQ(fourier_features(Tensor({2, 3}), 4).shape(), (Shape{2, 24}));
}

TEST(Silu, KnownValues) {
  const Tensor y = silu(Tensor::from_rows({{0.0, 1.0, -1.0}}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(y[2], -1.0 / (1.0 + std::exp(1.0)), 1e-15);
}

TEST(GradCheck, SquareAtThree) {
  Parameter x("x", {1});
  x.value[0] = 3.0;
  const GradCheckReport r = grad_check([&] { return x.value[0] * x.value[0]; }, [&] { x.grad[0] = 2.0 * x.value[0]; },
                                       {&x});
  EXPECT_LE(r.max_rel_error, 1e-8);
  EXPECT_EQ(r.entries_checked, 1u);
}

TEST(GradCheck, DetectsWrongGradient) {
  Parameter x("x", {1});
  x.value[0] = 3.0;
  const GradCheckReport r = grad_check([&] { return x.value[0] * x.value[0]; }, [&] { x.grad[0] = 5.0; }, {&x});
  EXPECT_GT(r.max_rel_error, 0.1);
  EXPECT_EQ(r.worst, "x[0]");
}

TEST(GradCheck, SmallWrongGradientStillFlagged) {
  Parameter x("x", {1});
  x.value[0] = 1.0;
  auto f = [&] { return 1e-6 * x.value[0]; };
  auto g = [&] { x.grad[0] = 2e-6; };
  EXPECT_GT(grad_check(f, g, {&x}).max_rel_error, 0.4);
}

TEST(GradCheck, NonFiniteObjectiveThrows) {
  Parameter x("x", {1});
  try {
    grad_check([&] { return std::log(x.value[0]); }, [&] {}, {&x});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFinite);
  }
}

TEST(Mlp, ShapesAndZeroOutputWeights) {
  Mlp mlp = make_mlp("m", 3, 5, 2);
  Rng rng(9);
  init_glorot(mlp.w1, rng);
  const Tensor y = mlp_forward(mlp, random_tensor({4, 3}, rng));
  EXPECT_EQ(y.shape(), (Shape{4, 2}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Init, GlorotBounds) {
  Parameter w("w", {20, 30});
  Rng rng(10);
  init_glorot(w, rng);
  const double limit = std::sqrt(6.0 / 50.0);
  double mx = 0.0;
  for (double v : w.value.values()) mx = std::max(mx, std::abs(v));
  EXPECT_LE(mx, limit);
  EXPECT_GT(mx, 0.5 * limit);
}

}  // namespace
}  // namespace dive
