#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "lrnet/layers.hpp"
#include "test_support.hpp"

namespace lrnet {
namespace {

using test::dot;
using test::max_rel_error;
using test::numeric_gradient;
using test::random_tensor;

constexpr double kFdTol = 1e-6;

template <typename Real>
ConvParams<Real> random_conv(std::size_t out, std::size_t in, std::size_t k, std::mt19937_64& rng,
                             std::size_t stride = 1, std::size_t pad = 0) {
  return {random_tensor<Real>({out, in, k, k}, rng), random_tensor<Real>(rows(1, out), rng),
          stride, pad};
}

TEST(Conv2d, LeNetShapes) {
  std::mt19937_64 rng(1);
  auto c1 = random_conv<float>(20, 1, 5, rng);
  EXPECT_EQ(conv2d_forward(Tensor<float>({2, 1, 28, 28}), c1).shape(), (Shape{2, 20, 24, 24}));
  auto c2 = random_conv<float>(50, 20, 5, rng);
  EXPECT_EQ(conv2d_forward(Tensor<float>({2, 20, 12, 12}), c2).shape(), (Shape{2, 50, 8, 8}));
}

TEST(Conv2d, HandConvolution) {
  ConvParams<double> p{Tensor<double>({1, 1, 2, 2}, 1.0), Tensor<double>(rows(1, 1)), 1, 0};
  auto y = conv2d_forward(Tensor<double>({1, 1, 3, 3}, 1.0), p);
  EXPECT_EQ(y, Tensor<double>({1, 1, 2, 2}, 4.0));
}

TEST(Conv2d, CrossCorrelationNotFlipped) {
  // Kernel picks the top-left tap; a true convolution would pick bottom-right.
  ConvParams<double> p{Tensor<double>({1, 1, 2, 2}, {1, 0, 0, 0}), Tensor<double>(rows(1, 1)), 1,
                       0};
  Tensor<double> x({1, 1, 2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(conv2d_forward(x, p)[0], 5.0);
}

TEST(Conv2d, ChannelMismatchThrows) {
  std::mt19937_64 rng(2);
  auto p = random_conv<float>(4, 3, 3, rng);
  EXPECT_THROW(conv2d_forward(Tensor<float>({1, 2, 5, 5}), p), Error);
  EXPECT_THROW(conv2d_forward(Tensor<float>({1, 3, 2, 2}), p), Error);
}

TEST(Conv2d, ZeroUpstreamGivesZeroGrads) {
  std::mt19937_64 rng(3);
  auto p = random_conv<double>(2, 2, 3, rng);
  auto x = random_tensor<double>({2, 2, 5, 5}, rng);
  auto g = conv2d_backward(x, p, Tensor<double>({2, 2, 3, 3}));
  for (auto* t : {&g.weights, &g.bias, &g.input})
    for (double v : t->data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, SinglePixelUpstreamOneByOneKernel) {
  ConvParams<double> p{Tensor<double>({1, 1, 1, 1}, 0.7), Tensor<double>(rows(1, 1)), 1, 0};
  Tensor<double> x({1, 1, 3, 3}, 1.0);
  Tensor<double> up({1, 1, 3, 3});
  up(0, 0, 1, 2) = 2.0;
  auto g = conv2d_backward(x, p, up);
  Tensor<double> expected({1, 1, 3, 3});
  expected(0, 0, 1, 2) = 2.0 * 0.7;
  EXPECT_EQ(g.input, expected);
}

TEST(Conv2d, MatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 0}, {2, 1}, {1, 2}}) {
    auto p = random_conv<double>(3, 2, 3, rng, stride, pad);
    auto x = random_tensor<double>({2, 2, 7, 7}, rng);
    const Shape out = p.output_shape(x.shape());
    auto w = random_tensor<double>(out, rng);
    auto g = conv2d_backward(x, p, w);
    auto f = [&] { return dot(conv2d_forward(x, p), w); };
    EXPECT_LT(max_rel_error(g.input, numeric_gradient(f, x)), kFdTol);
    EXPECT_LT(max_rel_error(g.weights, numeric_gradient(f, p.weights)), kFdTol);
    EXPECT_LT(max_rel_error(g.bias, numeric_gradient(f, p.bias)), kFdTol);
  }
}

TEST(MaxPool, LeNetShape) {
  auto r = maxpool_forward(Tensor<float>({2, 20, 24, 24}), 2, 2);
  EXPECT_EQ(r.output.shape(), (Shape{2, 20, 12, 12}));
}

TEST(MaxPool, HandMax) {
  auto r = maxpool_forward(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}), 2, 2);
  EXPECT_EQ(r.output[0], 4.0);
  EXPECT_EQ(r.record.argmax[0], 3u);
}

TEST(MaxPool, ConstantInputTiesBreakToFirst) {
  auto r = maxpool_forward(Tensor<double>({1, 1, 4, 4}, 2.5), 2, 2);
  for (double v : r.output.data()) EXPECT_EQ(v, 2.5);
  EXPECT_EQ(r.record.argmax, (std::vector<std::size_t>{0, 2, 8, 10}));
}

TEST(MaxPool, WindowLargerThanInputThrows) {
  EXPECT_THROW(maxpool_forward(Tensor<double>({1, 1, 2, 2}), 3, 1), Error);
}

TEST(MaxPool, BackwardRoutesToArgmax) {
  auto r = maxpool_forward(Tensor<double>({1, 1, 2, 2}, {1, 5, 3, 4}), 2, 2);
  auto zeros = maxpool_backward(r.record, Tensor<double>({1, 1, 1, 1}));
  for (double v : zeros.data()) EXPECT_EQ(v, 0.0);
  auto g = maxpool_backward(r.record, Tensor<double>({1, 1, 1, 1}, 1.0));
  EXPECT_EQ(g, Tensor<double>({1, 1, 2, 2}, {0, 1, 0, 0}));
  EXPECT_THROW(maxpool_backward(r.record, Tensor<double>({1, 1, 2, 1})), Error);
}

TEST(MaxPool, MatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  // Continuous random input has no ties almost surely.
  auto x = random_tensor<double>({2, 3, 6, 6}, rng);
  auto r = maxpool_forward(x, 2, 2);
  auto w = random_tensor<double>(r.output.shape(), rng);
  auto g = maxpool_backward(r.record, w);
  auto f = [&] { return dot(maxpool_forward(x, 2, 2).output, w); };
  EXPECT_LT(max_rel_error(g, numeric_gradient(f, x)), kFdTol);
}

TEST(Dense, IdentityPassthrough) {
  DenseParams<double> p{Tensor<double>({3, 3, 1, 1}, {1, 0, 0, 0, 1, 0, 0, 0, 1}),
                        Tensor<double>(rows(1, 3))};
  Tensor<double> x({2, 3, 1, 1}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(dense_forward(x, p), x);
}

TEST(Dense, LeNetWidth) {
  DenseParams<float> p{Tensor<float>({500, 800, 1, 1}), Tensor<float>(rows(1, 500))};
  EXPECT_EQ(dense_forward(Tensor<float>({3, 50, 4, 4}), p).shape(), rows(3, 500));
  EXPECT_THROW(dense_forward(Tensor<float>({3, 50, 4, 3}), p), Error);
}

TEST(Dense, HandMatmulAndOuterProduct) {
  DenseParams<double> p{Tensor<double>({2, 2, 1, 1}, {1, 2, 3, 4}), Tensor<double>(rows(1, 2))};
  Tensor<double> x(rows(1, 2), {1, 1});
  EXPECT_EQ(dense_forward(x, p), Tensor<double>(rows(1, 2), {3, 7}));

  Tensor<double> up(rows(1, 2), {2, -1});
  auto g = dense_backward(x, p, up);
  EXPECT_EQ(g.weights, Tensor<double>({2, 2, 1, 1}, {2, 2, -1, -1}));
  EXPECT_EQ(g.bias, Tensor<double>(rows(1, 2), {2, -1}));
  EXPECT_EQ(g.input, Tensor<double>(rows(1, 2), {2 - 3, 4 - 4}));

  auto z = dense_backward(x, p, Tensor<double>(rows(1, 2)));
  for (double v : z.weights.data()) EXPECT_EQ(v, 0.0);
}

TEST(Dense, MatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  DenseParams<double> p{random_tensor<double>({4, 12, 1, 1}, rng),
                        random_tensor<double>(rows(1, 4), rng)};
  auto x = random_tensor<double>({3, 3, 2, 2}, rng);
  auto w = random_tensor<double>(rows(3, 4), rng);
  auto g = dense_backward(x, p, w);
  auto f = [&] { return dot(dense_forward(x, p), w); };
  EXPECT_LT(max_rel_error(g.input, numeric_gradient(f, x)), kFdTol);
  EXPECT_LT(max_rel_error(g.weights, numeric_gradient(f, p.weights)), kFdTol);
  EXPECT_LT(max_rel_error(g.bias, numeric_gradient(f, p.bias)), kFdTol);
}

TEST(Relu, Definition) {
  EXPECT_EQ(relu_forward(Tensor<double>(rows(1, 2), {-1, 2}), 0.0),
            Tensor<double>(rows(1, 2), {0, 2}));
  Tensor<double> pos(rows(1, 3), {0.5, 1, 2});
  EXPECT_EQ(relu_forward(pos, 0.0), pos);
  EXPECT_DOUBLE_EQ(relu_forward(Tensor<double>(rows(1, 1), -10.0), 0.1)[0], -1.0);
}

TEST(Relu, MatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  auto x = random_tensor<double>({2, 3, 3, 3}, rng);
  auto w = random_tensor<double>(x.shape(), rng);
  for (double slope : {0.0, 0.1}) {
    auto g = relu_backward(x, w, slope);
    auto f = [&] { return dot(relu_forward(x, slope), w); };
    EXPECT_LT(max_rel_error(g, numeric_gradient(f, x)), kFdTol);
  }
}

TEST(Softmax, SymmetricAndHandCases) {
  auto p = softmax(Tensor<double>(rows(1, 10), 3.0));
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 0.1);

  auto q = softmax(Tensor<double>(rows(1, 2), {0.0, std::log(3.0)}));
  EXPECT_NEAR(q[0], 0.25, 1e-15);
  EXPECT_NEAR(q[1], 0.75, 1e-15);
}

TEST(Softmax, ShiftInvariantAndOnSimplex) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto z = random_tensor<double>(rows(4, 10), rng, -30, 30);
    auto shifted = z;
    for (auto& v : shifted.data()) v += 123.0;
    auto p = softmax(z);
    auto ps = softmax(shifted);
    for (std::size_t n = 0; n < 4; ++n) {
      double sum = 0;
      for (std::size_t j = 0; j < 10; ++j) {
        EXPECT_GT(p(n, j), 0.0);
        EXPECT_NEAR(p(n, j), ps(n, j), 1e-12);
        sum += p(n, j);
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, LargeLogitsStayFinite) {
  auto p = softmax(Tensor<float>(rows(1, 3), std::vector<float>{1000.f, 999.f, -1000.f}));
  EXPECT_TRUE(all_finite(p));
  EXPECT_NEAR(p[0] + p[1] + p[2], 1.0f, 1e-6f);
}

TEST(Softmax, RejectsNonFinite) {
  Tensor<double> z(rows(1, 3));
  z[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(softmax(z), Error);
}

TEST(SoftmaxBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  auto z = random_tensor<double>(rows(3, 5), rng, -2, 2);
  auto w = random_tensor<double>(rows(3, 5), rng);
  auto g = softmax_backward(softmax(z), w);
  auto f = [&] { return dot(softmax(z), w); };
  EXPECT_LT(max_rel_error(g, numeric_gradient(f, z)), kFdTol);
}

TEST(CrossEntropy, Cases) {
  Tensor<double> certain(rows(1, 3), {0, 1, 0});
  std::vector<int> one{1};
  EXPECT_EQ(cross_entropy(certain, one).loss, 0.0);

  Tensor<double> uniform(rows(2, 10), 0.1);
  std::vector<int> labels{3, 7};
  auto ce = cross_entropy(uniform, labels);
  EXPECT_NEAR(ce.loss, std::log(10.0), 1e-12);
  EXPECT_NEAR(ce.loss, 2.3026, 1e-4);
  for (std::size_t n = 0; n < 2; ++n) {
    double sum = 0;
    for (std::size_t j = 0; j < 10; ++j) sum += ce.grad_logits(n, j);
    EXPECT_NEAR(sum, 0.0, 1e-15);
  }
  EXPECT_DOUBLE_EQ(ce.grad_logits(0, 3), (0.1 - 1.0) / 2);
}

TEST(CrossEntropy, RejectsBadLabels) {
  Tensor<double> p(rows(1, 3), 1.0 / 3);
  std::vector<int> bad{3};
  EXPECT_THROW(cross_entropy(p, bad), Error);
  std::vector<int> neg{-1};
  EXPECT_THROW(cross_entropy(p, neg), Error);
}

TEST(CrossEntropy, LogitGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  auto z = random_tensor<double>(rows(4, 6), rng, -3, 3);
  std::vector<int> labels{0, 5, 2, 2};
  auto g = cross_entropy(softmax(z), labels).grad_logits;
  auto f = [&] { return cross_entropy(softmax(z), labels).loss; };
  EXPECT_LT(max_rel_error(g, numeric_gradient(f, z)), kFdTol);
}

}  // namespace
}  // namespace lrnet
