#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "oracles.hpp"
#include "utnet/gradcheck.hpp"
#include "utnet/ops.hpp"
#include "utnet/serialize.hpp"

using namespace utnet;

namespace {

Tensor randn(const Shape& s, uint64_t seed, double stddev = 1.0) {
  SplitMix64 rng(seed);
  return Tensor::randn(s, rng, stddev);
}

// Random values kept away from zero so kinked ops (relu, max) have stable
// finite differences.
Tensor randn_nonzero(const Shape& s, uint64_t seed, double margin = 0.1) {
  Tensor t = randn(s, seed);
  for (int64_t i = 0; i < t.numel(); ++i) {
    const double v = t.at(i);
    t.at(i) = v >= 0 ? v + margin : v - margin;
  }
  return t;
}

double max_abs_diff(const Tensor& t, const std::vector<double>& ref) {
  EXPECT_EQ(size_t(t.numel()), ref.size());
  double m = 0.0;
  for (int64_t i = 0; i < t.numel(); ++i)
    m = std::max(m, std::abs(t.at(i) - ref[size_t(i)]));
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TEST(Matmul, IdentityPassthrough) {
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i * 3 + i) = 1.0;
  Tensor b = randn({3, 4}, 11);
  Tensor c = matmul(eye, b);
  EXPECT_EQ(max_abs_diff(c, *b.data), 0.0);
}

TEST(Matmul, ZeroTimesAnything) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = randn({3, 4}, 12);
  Tensor c = matmul(a, b);
  for (int64_t i = 0; i < c.numel(); ++i) EXPECT_EQ(c.at(i), 0.0);
  EXPECT_EQ(c.shape, (Shape{2, 4}));
}

TEST(Matmul, MatchesTripleLoopOracle) {
  for (uint64_t seed : {1, 2, 3, 4, 5}) {
    Tensor a = randn({3, 3}, seed);
    Tensor b = randn({3, 3}, seed + 100);
    Tensor c = matmul(a, b);
    auto ref = oracle::matmul(*a.data, *b.data, 3, 3, 3);
    EXPECT_LT(max_abs_diff(c, ref), 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a = randn({2, 3}, 1), b = randn({4, 2}, 2);
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
  }
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

TEST(Softmax, ConstantVectorIsUniform) {
  Tensor x = Tensor::full({5}, 3.25);
  Tensor y = softmax(x, 0);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(y.at(i), 0.2, 1e-15);
}

TEST(Softmax, ShiftInvariance) {
  Tensor x = randn({4, 6}, 21);
  Tensor xs = add_scalar(x, 17.5);
  Tensor a = softmax(x, 1), b = softmax(xs, 1);
  EXPECT_LT(max_abs_diff(a, *b.data), 1e-12);
}

TEST(Softmax, AnalyticTwoEntry) {
  Tensor x = Tensor::from({2}, {0.0, std::log(2.0)});
  Tensor y = softmax(x, 0);
  EXPECT_NEAR(y.at(0), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(y.at(1), 2.0 / 3.0, 1e-15);
}

TEST(Softmax, SimplexProperty) {
  Tensor x = randn({3, 7, 2}, 22, 4.0);
  for (int axis = 0; axis < 3; ++axis) {
    Tensor y = softmax(x, axis);
    for (int64_t i = 0; i < y.numel(); ++i) EXPECT_GE(y.at(i), 0.0);
    // sum along axis == 1
    std::vector<int> other;
    for (int ax = 0; ax < 3; ++ax)
      if (ax == axis) other.push_back(ax);
    Tensor s = sum_axes(y, other);
    for (int64_t i = 0; i < s.numel(); ++i) EXPECT_NEAR(s.at(i), 1.0, 1e-9);
  }
}

TEST(Softmax, InvalidAxisThrows) {
  Tensor x = randn({2, 2}, 23);
  EXPECT_THROW(softmax(x, 2), ShapeError);
  EXPECT_THROW(softmax(x, -1), ShapeError);
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

TEST(Conv2d, IdentityChannelMatrix) {
  const int C = 3;
  Tensor x = randn({2, C, 4, 5}, 31);
  Tensor w = Tensor::zeros({C, C, 1, 1});
  for (int c = 0; c < C; ++c) w.at(c * C + c) = 1.0;
  Tensor y = conv2d(x, w);
  EXPECT_EQ(max_abs_diff(y, *x.data), 0.0);
}

TEST(Conv2d, ZeroKernel) {
  Tensor x = randn({1, 2, 6, 6}, 32);
  Tensor w = Tensor::zeros({4, 2, 3, 3});
  Tensor y = conv2d(x, w, /*stride=*/1, /*pad=*/1);
  for (int64_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.at(i), 0.0);
}

TEST(Conv2d, MatchesSlidingWindowOracle) {
  Tensor x = randn({1, 4, 5, 5}, 33);
  Tensor w = randn({3, 4, 3, 3}, 34);
  Tensor y = conv2d(x, w, 1, 1);
  auto ref = oracle::conv2d(*x.data, 1, 4, 5, 5, *w.data, 3, 3, 3, 1, 1);
  EXPECT_LT(max_abs_diff(y, ref), 1e-12);
}

TEST(Conv2d, StridedWithBiasMatchesOracle) {
  Tensor x = randn({2, 3, 8, 8}, 35);
  Tensor w = randn({5, 3, 3, 3}, 36);
  Tensor b = randn({5}, 37);
  Tensor y = conv2d(x, w, b, 2, 1);
  EXPECT_EQ(y.shape, (Shape{2, 5, 4, 4}));
  auto ref = oracle::conv2d(*x.data, 2, 3, 8, 8, *w.data, 5, 3, 3, 2, 1, *b.data);
  EXPECT_LT(max_abs_diff(y, ref), 1e-12);
}

TEST(Conv2d, PointwiseMatchesOracle) {
  Tensor x = randn({2, 6, 4, 4}, 38);
  Tensor w = randn({3, 6, 1, 1}, 39);
  Tensor b = randn({3}, 40);
  Tensor y = conv2d(x, w, b);
  auto ref = oracle::conv2d(*x.data, 2, 6, 4, 4, *w.data, 3, 1, 1, 1, 0, *b.data);
  EXPECT_LT(max_abs_diff(y, ref), 1e-12);
}

TEST(Conv2d, FloorConventionHalvesEvenSizes) {
  Tensor x = randn({1, 1, 8, 8}, 41);
  Tensor w = randn({1, 1, 3, 3}, 42);
  EXPECT_EQ(conv2d(x, w, 2, 1).shape, (Shape{1, 1, 4, 4}));
  Tensor w1 = randn({1, 1, 1, 1}, 43);
  EXPECT_EQ(conv2d(x, w1, 2, 0).shape, (Shape{1, 1, 4, 4}));
}

TEST(Conv2d, EmptyOutputThrows) {
  Tensor x = randn({1, 1, 2, 2}, 44);
  Tensor w = randn({1, 1, 3, 3}, 45);
  EXPECT_THROW(conv2d(x, w, 1, 0), ShapeError);
}

// ---------------------------------------------------------------------------
// bilinear_resize
// ---------------------------------------------------------------------------

TEST(Bilinear, SameSizeIsIdentity) {
  Tensor x = randn({2, 3, 5, 7}, 51);
  Tensor y = bilinear_resize(x, 5, 7);
  EXPECT_LT(max_abs_diff(y, *x.data), 1e-12);
}

TEST(Bilinear, ConstantImageStaysConstant) {
  Tensor x = Tensor::full({1, 2, 4, 4}, 0.625);
  Tensor y = bilinear_resize(x, 9, 3);
  for (int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.at(i), 0.625, 1e-12);
}

TEST(Bilinear, HandEvaluatedUpsample2x2To4x4) {
  Tensor x = Tensor::from({1, 1, 2, 2}, {0, 1, 2, 3});
  Tensor y = bilinear_resize(x, 4, 4);
  // out[oy][ox] = fx + 2*fy with f in {0, 0.25, 0.75, 1} per axis
  const double expect[16] = {0.0, 0.25, 0.75, 1.0,  0.5, 0.75, 1.25, 1.5,
                             1.5, 1.75, 2.25, 2.5,  2.0, 2.25, 2.75, 3.0};
  for (int i = 0; i < 16; ++i) EXPECT_NEAR(y.at(i), expect[i], 1e-12) << "i=" << i;
}

TEST(Bilinear, MatchesClosedFormOracleOnRandom) {
  Tensor x = randn({1, 3, 7, 9}, 52);
  Tensor y = bilinear_resize(x, 13, 4);
  auto ref = oracle::bilinear(*x.data, 1, 3, 7, 9, 13, 4);
  EXPECT_LT(max_abs_diff(y, ref), 1e-12);
}

TEST(Bilinear, Linearity) {
  Tensor x = randn({1, 2, 5, 5}, 53), y = randn({1, 2, 5, 5}, 54);
  const double a = 1.7, b = -0.4;
  Tensor lhs = bilinear_resize(add(scale(x, a), scale(y, b)), 8, 8);
  Tensor rhs = add(scale(bilinear_resize(x, 8, 8), a),
                   scale(bilinear_resize(y, 8, 8), b));
  EXPECT_LT(max_abs_diff(lhs, *rhs.data), 1e-10);
}

// ---------------------------------------------------------------------------
// backward / tape
// ---------------------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  Tensor x = randn({3, 4}, 61).set_requires_grad();
  Graph g;
  GraphScope scope(g);
  g.backward(sum(x));
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ((*x.grad)[size_t(i)], 1.0);
}

TEST(Backward, QuadraticGivesTwoX) {
  Tensor x = randn({5}, 62).set_requires_grad();
  Graph g;
  GraphScope scope(g);
  g.backward(sum(mul(x, x)));
  for (int64_t i = 0; i < 5; ++i)
    EXPECT_NEAR((*x.grad)[size_t(i)], 2.0 * x.at(i), 1e-14);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x = randn({4}, 63).set_requires_grad();
  {
    Graph g;
    GraphScope scope(g);
    g.backward(sum(x));
  }
  {
    Graph g;
    GraphScope scope(g);
    g.backward(sum(x));
  }
  for (int64_t i = 0; i < 4; ++i) EXPECT_EQ((*x.grad)[size_t(i)], 2.0);
  x.zero_grad();
  for (int64_t i = 0; i < 4; ++i) EXPECT_EQ((*x.grad)[size_t(i)], 0.0);
}

TEST(Backward, NonScalarLossThrows) {
  Tensor x = randn({3}, 64).set_requires_grad();
  Graph g;
  GraphScope scope(g);
  Tensor y = mul(x, x);
  EXPECT_THROW(g.backward(y), Error);
}

TEST(Backward, OffGraphLossThrows) {
  Tensor x = randn({1}, 65);
  Graph g;
  EXPECT_THROW(g.backward(x), Error);
}

TEST(Backward, CompositeConvSoftmaxSumMatchesFiniteDifferences) {
  Tensor x = randn({1, 2, 4, 4}, 66);
  Tensor w = randn({3, 2, 3, 3}, 67, 0.5);
  const double err = grad_check(
      [](const std::vector<Tensor>& in) {
        Tensor y = conv2d(in[0], in[1], 1, 1);
        Tensor p = softmax(y, 1);
        return sum(mul(p, p));
      },
      {x, w});
  EXPECT_LT(err, 1e-5);
}

TEST(Backward, SharedLeafAcrossTwoPathsDedupes) {
  // x used twice: loss = sum(x*x + x) => grad = 2x + 1
  Tensor x = randn({4}, 68).set_requires_grad();
  Graph g;
  GraphScope scope(g);
  g.backward(sum(add(mul(x, x), x)));
  for (int64_t i = 0; i < 4; ++i)
    EXPECT_NEAR((*x.grad)[size_t(i)], 2.0 * x.at(i) + 1.0, 1e-14);
}

// ---------------------------------------------------------------------------
// grad_check across every primitive
// ---------------------------------------------------------------------------

TEST(GradCheck, SumIsExactUpToQuotientRounding) {
  // d(sum)/dx is exactly 1; the only residual is the rounding of the
  // finite-difference quotient itself (~1e-11 at eps 1e-5).
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    const double err = grad_check(
        [](const std::vector<Tensor>& in) { return sum(in[0]); },
        {randn({3, 3}, seed)});
    EXPECT_LT(err, 1e-9);
  }
}

TEST(GradCheck, ElementwiseOps) {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Tensor a = randn({2, 5}, seed), b = randn_nonzero({2, 5}, seed + 10, 0.5);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return sum(mul(add(in[0], in[1]), sub(in[0], in[1])));
              },
              {a, b}),
              1e-5) << "seed " << seed;
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return sum(mul(div(in[0], in[1]), div(in[0], in[1])));
              },
              {a, b}),
              1e-5) << "seed " << seed;
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return sum(add_scalar(scale(in[0], -1.3), 0.7));
              },
              {a}),
              1e-5) << "seed " << seed;
  }
}

TEST(GradCheck, Activations) {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Tensor a = randn_nonzero({3, 4}, seed);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return sum(mul(relu(in[0]), relu(in[0])));
              },
              {a}),
              1e-5);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                return sum(mul(gelu(in[0]), gelu(in[0])));
              },
              {randn({3, 4}, seed + 20)}),
              1e-5);
  }
}

TEST(GradCheck, MatmulAndSoftmax) {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                Tensor y = matmul(in[0], in[1]);
                return sum(mul(y, y));
              },
              {randn({3, 4}, seed), randn({4, 2}, seed + 30)}),
              1e-5);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                Tensor p = softmax(in[0], 1);
                return sum(mul(p, p));
              },
              {randn({4, 5}, seed + 40, 2.0)}),
              1e-5);
  }
}

TEST(GradCheck, ConvVariants) {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Tensor x = randn({2, 2, 4, 4}, seed);
    Tensor w = randn({3, 2, 3, 3}, seed + 50, 0.5);
    Tensor w1 = randn({3, 2, 1, 1}, seed + 60, 0.5);
    Tensor b = randn({3}, seed + 70);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                Tensor y = conv2d(in[0], in[1], in[2], 1, 1);
                return sum(mul(y, y));
              },
              {x, w, b}),
              1e-5);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                Tensor y = conv2d(in[0], in[1], in[2], 2, 1);
                return sum(mul(y, y));
              },
              {x, w, b}),
              1e-5);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                Tensor y = conv2d(in[0], in[1], in[2]);
                return sum(mul(y, y));
              },
              {x, w1, b}),
              1e-5);
  }
}

TEST(GradCheck, ResizeAndPooling) {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                Tensor y = bilinear_resize(in[0], 7, 3);
                return sum(mul(y, y));
              },
              {randn({1, 2, 4, 5}, seed)}),
              1e-5);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                Tensor y = max_pool_2d(in[0]);
                return sum(mul(y, y));
              },
              {randn({1, 2, 4, 4}, seed + 80)}),
              1e-5);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                Tensor y = block_max_pool(in[0], 3, 3);
                return sum(mul(y, y));
              },
              {randn({1, 2, 7, 7}, seed + 90)}),
              1e-5);
  }
}

TEST(GradCheck, Normalizations) {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Tensor x = randn({2, 3, 4, 4}, seed);
    Tensor gamma = randn_nonzero({3}, seed + 100, 0.5);
    Tensor beta = randn({3}, seed + 110);
    // train mode: batch statistics carry gradient
    EXPECT_LT(grad_check(
                  [](const std::vector<Tensor>& in) {
                    Tensor rm = Tensor::zeros({3});
                    Tensor rv = Tensor::full({3}, 1.0);
                    Tensor y =
                        batch_norm_2d(in[0], in[1], in[2], rm, rv, true);
                    return sum(mul(y, y));
                  },
                  {x, gamma, beta}),
              1e-5);
    // eval mode: fixed running stats
    EXPECT_LT(grad_check(
                  [](const std::vector<Tensor>& in) {
                    Tensor rm = Tensor::from({3}, {0.1, -0.2, 0.3});
                    Tensor rv = Tensor::from({3}, {1.1, 0.9, 1.4});
                    Tensor y =
                        batch_norm_2d(in[0], in[1], in[2], rm, rv, false);
                    return sum(mul(y, y));
                  },
                  {x, gamma, beta}),
              1e-5);
    EXPECT_LT(grad_check(
                  [](const std::vector<Tensor>& in) {
                    Tensor y = layer_norm_channels(in[0], in[1], in[2]);
                    return sum(mul(y, y));
                  },
                  {x, gamma, beta}),
              1e-5);
  }
}

TEST(GradCheck, ShapeOps) {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                Tensor y = reshape(in[0], {6, 2});
                return sum(mul(y, y));
              },
              {randn({3, 4}, seed)}),
              1e-5);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                Tensor y = transpose(in[0], {2, 0, 1});
                return sum(mul(y, y));
              },
              {randn({2, 3, 4}, seed + 120)}),
              1e-5);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                Tensor y = concat({in[0], in[1]}, 1);
                return sum(mul(y, y));
              },
              {randn({2, 3}, seed + 130), randn({2, 2}, seed + 140)}),
              1e-5);
    EXPECT_LT(grad_check([](const std::vector<Tensor>& in) {
                Tensor y = sum_axes(in[0], {0, 2});
                return sum(mul(y, y));
              },
              {randn({2, 3, 4}, seed + 150)}),
              1e-5);
  }
}

TEST(GradCheck, CrossEntropy) {
  LabelMask m;
  m.h = 4;
  m.w = 4;
  m.v = {0, 1, 2, 3, 3, 2, 1, 0, 0, 0, 1, 1, 2, 2, 3, 3};
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    EXPECT_LT(grad_check(
                  [m](const std::vector<Tensor>& in) {
                    return cross_entropy_with_logits(in[0], {m});
                  },
                  {randn({1, 4, 4, 4}, seed, 2.0)}),
              1e-5);
  }
}

// ---------------------------------------------------------------------------
// misc op semantics
// ---------------------------------------------------------------------------

TEST(Ops, TransposeRoundTrip) {
  Tensor x = randn({2, 3, 4}, 71);
  Tensor y = transpose(transpose(x, {1, 2, 0}), {2, 0, 1});
  EXPECT_EQ(max_abs_diff(y, *x.data), 0.0);
}

TEST(Ops, ConcatSplitsGradientCorrectly) {
  Tensor a = randn({2, 2}, 72).set_requires_grad();
  Tensor b = randn({2, 3}, 73).set_requires_grad();
  Graph g;
  GraphScope scope(g);
  Tensor y = concat({a, b}, 1);
  g.backward(sum(scale(y, 3.0)));
  for (int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ((*a.grad)[size_t(i)], 3.0);
  for (int64_t i = 0; i < b.numel(); ++i) EXPECT_EQ((*b.grad)[size_t(i)], 3.0);
}

TEST(Ops, MaxPoolPicksMaxAndRoutesGradient) {
  Tensor x = Tensor::from({1, 1, 2, 2}, {1.0, 5.0, 2.0, 3.0}).set_requires_grad();
  Graph g;
  GraphScope scope(g);
  Tensor y = max_pool_2d(x);
  EXPECT_EQ(y.numel(), 1);
  EXPECT_EQ(y.at(0), 5.0);
  g.backward(sum(y));
  EXPECT_EQ((*x.grad)[1], 1.0);
  EXPECT_EQ((*x.grad)[0] + (*x.grad)[2] + (*x.grad)[3], 0.0);
}

TEST(Ops, BlockMaxPoolMatchesOracle) {
  Tensor x = randn({2, 3, 7, 5}, 74);
  Tensor y = block_max_pool(x, 3, 2);
  auto ref = oracle::block_max(*x.data, 2, 3, 7, 5, 3, 2);
  EXPECT_EQ(max_abs_diff(y, ref), 0.0);
}

TEST(Ops, BlockMaxPoolPowerOfTwoEqualsRepeated2x2) {
  Tensor x = randn({1, 2, 8, 8}, 75);
  Tensor a = block_max_pool(x, 2, 2);
  Tensor b = max_pool_2d(max_pool_2d(x));
  EXPECT_EQ(max_abs_diff(a, *b.data), 0.0);
}

TEST(Ops, BatchNormNormalizesBatch) {
  Tensor x = randn({4, 2, 3, 3}, 76, 3.0);
  Tensor gamma = Tensor::full({2}, 1.0), beta = Tensor::zeros({2});
  Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
  Tensor y = batch_norm_2d(x, gamma, beta, rm, rv, true);
  for (int c = 0; c < 2; ++c) {
    double m = 0.0, v = 0.0;
    int64_t cnt = 0;
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 9; ++i, ++cnt) m += y.at(((b * 2 + c) * 9) + i);
    m /= double(cnt);
    for (int b = 0; b < 4; ++b)
      for (int i = 0; i < 9; ++i) {
        const double d = y.at(((b * 2 + c) * 9) + i) - m;
        v += d * d;
      }
    v /= double(cnt);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-5);  // off from 1 by eps/(var+eps)
  }
  // running stats moved toward the batch stats
  EXPECT_NE(rm.at(0), 0.0);
  EXPECT_NE(rv.at(0), 1.0);
}

TEST(Ops, LayerNormNormalizesChannelsPerPosition) {
  Tensor x = randn({1, 8, 2, 2}, 77, 2.0);
  Tensor gamma = Tensor::full({8}, 1.0), beta = Tensor::zeros({8});
  Tensor y = layer_norm_channels(x, gamma, beta);
  for (int i = 0; i < 4; ++i) {
    double m = 0.0;
    for (int c = 0; c < 8; ++c) m += y.at(c * 4 + i);
    EXPECT_NEAR(m / 8.0, 0.0, 1e-12);
  }
}

TEST(Ops, CrossEntropyMatchesManualComputation) {
  Tensor logits = randn({1, 3, 2, 2}, 78, 2.0);
  LabelMask m;
  m.h = 2;
  m.w = 2;
  m.v = {0, 2, 1, 1};
  Tensor loss = cross_entropy_with_logits(logits, {m});
  double want = 0.0;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> row(3);
    for (int k = 0; k < 3; ++k) row[size_t(k)] = logits.at(k * 4 + i);
    auto p = oracle::softmax_vec(row);
    want -= std::log(p[m.v[size_t(i)]]);
  }
  EXPECT_NEAR(loss.scalar(), want / 4.0, 1e-12);
}

TEST(Ops, OneHotRoundTrip) {
  LabelMask m;
  m.h = 2;
  m.w = 2;
  m.v = {0, 3, 1, 2};
  Tensor oh = one_hot({m}, 4);
  EXPECT_EQ(oh.shape, (Shape{1, 4, 2, 2}));
  EXPECT_EQ(sum(oh).scalar(), 4.0);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(oh.at(m.v[size_t(i)] * 4 + i), 1.0);
}

TEST(Ops, NonFiniteForwardIsDiagnosed) {
  Tensor a = Tensor::from({2}, {1.0, 1.0});
  Tensor b = Tensor::from({2}, {1.0, 0.0});
  try {
    div(a, b);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("div"), std::string::npos);
  }
  {
    NanCheckGuard off(false);
    Tensor y = div(a, b);  // allowed when scanning disabled
    EXPECT_TRUE(std::isinf(y.at(1)));
  }
}

// ---------------------------------------------------------------------------
// determinism + rng
// ---------------------------------------------------------------------------

TEST(Determinism, FixedSeedForwardIsBitIdentical) {
  auto run = [] {
    Tensor x = randn({1, 3, 8, 8}, 91);
    Tensor w = randn({4, 3, 3, 3}, 92, 0.3);
    Tensor y = softmax(conv2d(x, w, 1, 1), 1);
    return y;
  };
  Tensor a = run(), b = run();
  ASSERT_EQ(a.numel(), b.numel());
  EXPECT_EQ(std::memcmp(a.ptr(), b.ptr(), size_t(a.numel()) * sizeof(double)), 0);
}

TEST(Rng, KnownSequenceAndRanges) {
  SplitMix64 r1(42), r2(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(r1.next_u64(), r2.next_u64());
  SplitMix64 r3(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = r3.next_double();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    const uint64_t k = r3.next_below(17);
    EXPECT_LT(k, 17u);
  }
  // normals: crude sanity on mean/var over many draws
  SplitMix64 r4(9);
  double m = 0.0, v = 0.0;
  const int N = 20000;
  for (int i = 0; i < N; ++i) {
    const double z = r4.normal();
    m += z;
    v += z * z;
  }
  m /= N;
  v = v / N - m * m;
  EXPECT_NEAR(m, 0.0, 0.05);
  EXPECT_NEAR(v, 1.0, 0.05);
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

TEST(Serialize, RoundTripIsBitExact) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "utnet_serialize_test";
  fs::remove_all(dir);
  Tensor t = randn({3, 5, 2}, 101);
  save_tensor(dir, "weights", t);
  Tensor u = load_tensor(dir, "weights");
  EXPECT_EQ(u.shape, t.shape);
  EXPECT_EQ(std::memcmp(t.ptr(), u.ptr(), size_t(t.numel()) * sizeof(double)), 0);
  fs::remove_all(dir);
}

TEST(Serialize, SizeMismatchIsDataError) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "utnet_serialize_bad";
  fs::remove_all(dir);
  Tensor t = randn({4}, 102);
  save_tensor(dir, "w", t);
  // corrupt the sidecar shape
  json meta = load_json(dir / "w.json");
  meta["shape"] = {5};
  save_json(dir / "w.json", meta);
  EXPECT_THROW(load_tensor(dir, "w"), DataError);
  EXPECT_THROW(load_tensor(dir, "missing"), DataError);
  fs::remove_all(dir);
}
