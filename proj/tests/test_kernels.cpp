#include "caf/kernels.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace caf;
using testutil::rand_int;
using testutil::rand_tensor;

TEST(Conv2d, IdentityPointwiseReturnsInput) {
  std::mt19937_64 rng(1);
  auto x = rand_tensor<double>({2, 5, 4, 3}, rng);
  auto id = identity_pointwise<double>(5);
  EXPECT_EQ(conv2d(x, id), x);
}

TEST(Conv2d, AllOnesKernelSumsNeighbourhood) {
  auto x = Tensor4d::constant({1, 1, 3, 3}, 1.0);
  auto w = Tensor4d::constant({1, 1, 3, 3}, 1.0);
  ConvGeometry g;
  g.padding = {1, 1};
  auto y = conv2d<double>(x, w, nullptr, g);
  EXPECT_DOUBLE_EQ(y(0, 0, 1, 1), 9.0);
  EXPECT_DOUBLE_EQ(y(0, 0, 0, 0), 4.0);
}

TEST(Conv2d, DilatedMatchesLoopReference) {
  std::mt19937_64 rng(2);
  auto x = rand_tensor<double>({4, 3, 8, 8}, rng);
  auto w = rand_tensor<double>({5, 3, 3, 3}, rng);
  auto b = rand_tensor<double>({1, 5, 1, 1}, rng);
  ConvGeometry g;
  g.padding = {2, 2};
  g.dilation = {2, 2};
  auto y = conv2d(x, w, &b, g);
  auto ref = oracle::conv2d(x, w, &b, 1, 1, 2, 2, 2, 2, 1);
  EXPECT_LT(max_abs_diff(y, ref), 1e-12);
}

template <typename S>
void random_conv2d_cases(std::uint64_t seed, int cases, double tol) {
  std::mt19937_64 rng(seed);
  for (int k = 0; k < cases; ++k) {
    const Index groups = rand_int(rng, 1, 3);
    const Index in = groups * rand_int(rng, 1, 3);
    const Index out = groups * rand_int(rng, 1, 3);
    const Index kh = rand_int(rng, 1, 3), kw = rand_int(rng, 1, 3);
    ConvGeometry g;
    g.groups = groups;
    g.stride = {rand_int(rng, 1, 2), rand_int(rng, 1, 2)};
    g.dilation = {rand_int(rng, 1, 3), rand_int(rng, 1, 3)};
    g.padding = {rand_int(rng, 0, 3), rand_int(rng, 0, 3)};
    const Index h = rand_int(rng, 1, 9) + g.dilation.y * (kh - 1);
    const Index w = rand_int(rng, 1, 9) + g.dilation.x * (kw - 1);
    auto x = rand_tensor<S>({rand_int(rng, 1, 3), in, h, w}, rng);
    auto wt = rand_tensor<S>({out, in / groups, kh, kw}, rng);
    auto b = rand_tensor<S>({1, out, 1, 1}, rng);
    const bool with_bias = rng() & 1;
    auto y = conv2d(x, wt, with_bias ? &b : nullptr, g);
    auto ref = oracle::conv2d(x, wt, with_bias ? &b : nullptr, g.stride.y, g.stride.x, g.padding.y, g.padding.x,
                              g.dilation.y, g.dilation.x, groups);
    ASSERT_EQ(y.shape(), ref.shape()) << "case " << k;
    ASSERT_LT(static_cast<double>(max_abs_diff(y, ref)), tol) << "case " << k;
  }
}

TEST(Conv2d, RandomCasesMatchLoopReference) {
  random_conv2d_cases<double>(3, 150, 1e-12);
  random_conv2d_cases<float>(4, 150, 1e-5);
}

TEST(Conv2d, ZeroWeightsGiveBias) {
  std::mt19937_64 rng(5);
  auto x = rand_tensor<double>({1, 2, 5, 5}, rng);
  Tensor4d w({3, 2, 3, 3});
  auto b = rand_tensor<double>({1, 3, 1, 1}, rng);
  ConvGeometry g;
  g.padding = {1, 1};
  auto y = conv2d(x, w, &b, g);
  for (Index c = 0; c < 3; ++c)
    for (Index i = 0; i < 5; ++i)
      for (Index j = 0; j < 5; ++j) EXPECT_EQ(y(0, c, i, j), b(0, c, 0, 0));
}

TEST(Conv2d, ShapeErrorsNameTheDimension) {
  Tensor4d x({1, 3, 4, 4});
  Tensor4d w({2, 2, 3, 3});
  try {
    conv2d<double>(x, w, nullptr, ConvGeometry{});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
  Tensor4d big({1, 3, 9, 9});
  EXPECT_THROW(conv2d<double>(x, Tensor4d({1, 3, 9, 9}), nullptr, ConvGeometry{}), ShapeError);
  (void)big;
}

template <typename S>
void random_conv3_cases(std::uint64_t seed, int cases, double tol) {
  std::mt19937_64 rng(seed);
  for (int k = 0; k < cases; ++k) {
    const Index groups = rand_int(rng, 1, 3);
    const Index in = groups * rand_int(rng, 1, 3);
    const Index out = groups * rand_int(rng, 1, 3);
    Conv3Geometry g;
    g.groups = groups;
    g.padding = {rand_int(rng, 0, 2), rand_int(rng, 0, 2)};
    const Index h = rand_int(rng, 3, 8), w = rand_int(rng, 3, 8);
    auto x = rand_tensor<S>({rand_int(rng, 1, 2), in, h, w}, rng);
    auto wt = rand_tensor<S>({out, (in / groups) * 3, 3, 3}, rng);
    auto b = rand_tensor<S>({1, out, 1, 1}, rng);
    std::vector<S> k5(wt.values().begin(), wt.values().end());
    auto y = conv3d_singleton(x, wt, &b, g);
    auto ref = oracle::conv3d(x, k5, out, &b, 1, g.padding.y, g.padding.x, groups);
    ASSERT_EQ(y.shape(), ref.shape()) << "case " << k;
    ASSERT_LT(static_cast<double>(max_abs_diff(y, ref)), tol) << "case " << k;
  }
}

TEST(Conv3d, RandomCasesMatchRank5Reference) {
  random_conv3_cases<double>(6, 120, 1e-12);
  random_conv3_cases<float>(7, 120, 1e-5);
}

TEST(Conv3d, ZeroWeightsGiveBias) {
  std::mt19937_64 rng(8);
  auto x = rand_tensor<double>({1, 2, 4, 4}, rng);
  Tensor4d w({2, 6, 3, 3});
  auto b = rand_tensor<double>({1, 2, 1, 1}, rng);
  auto y = conv3d_singleton(x, w, &b, Conv3Geometry{});
  for (Index i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], b(0, i / 16, 0, 0));
}

TEST(ChannelShuffle, Examples) {
  EXPECT_EQ(shuffle_permutation(4, 2), (std::vector<Index>{0, 2, 1, 3}));
  EXPECT_EQ(shuffle_permutation(6, 1), (std::vector<Index>{0, 1, 2, 3, 4, 5}));
  EXPECT_EQ(shuffle_permutation(6, 6), (std::vector<Index>{0, 1, 2, 3, 4, 5}));
  EXPECT_THROW(shuffle_permutation(6, 4), ShapeError);
}

TEST(ChannelShuffle, IsABijectionMatchingReshapeTranspose) {
  std::mt19937_64 rng(9);
  for (int k = 0; k < 100; ++k) {
    const Index g = rand_int(rng, 1, 4);
    const Index c = g * rand_int(rng, 1, 5);
    auto x = rand_tensor<double>({2, c, 3, 2}, rng);
    auto y = channel_shuffle(x, g);
    EXPECT_EQ(y, oracle::channel_shuffle(x, g));
    const auto perm = shuffle_permutation(c, g);
    EXPECT_EQ(std::set<Index>(perm.begin(), perm.end()).size(), static_cast<std::size_t>(c));
    EXPECT_EQ(unpermute_channels(y, perm), x);
  }
}

TEST(Softmax, ExamplesAndShiftInvariance) {
  auto c = Tensor4d::constant({1, 1, 1, 4}, 3.0);
  auto s = softmax_lastdim(c);
  for (Index i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(s[i], 0.25);

  Tensor4d big({1, 1, 1, 2});
  big[0] = 1000.0;
  auto sb = softmax_lastdim(big);
  EXPECT_NEAR(sb[0], 1.0, 1e-12);
  EXPECT_NEAR(sb[1], 0.0, 1e-12);
  EXPECT_TRUE(sb.all_finite());

  std::mt19937_64 rng(10);
  auto x = rand_tensor<double>({2, 3, 4, 7}, rng, -5, 5);
  auto y = softmax_lastdim(x);
  Tensor4d shifted = x;
  for (Index r = 0; r < 2 * 3 * 4; ++r)
    for (Index j = 0; j < 7; ++j) shifted[r * 7 + j] += static_cast<double>(r) * 3.5 - 10;
  auto ys = softmax_lastdim(shifted);
  EXPECT_LT(max_abs_diff(y, ys), 1e-12);
  for (Index r = 0; r < 2 * 3 * 4; ++r) {
    double sum = 0;
    for (Index j = 0; j < 7; ++j) sum += y[r * 7 + j];
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(LayerNorm, MatchesLoopReference) {
  std::mt19937_64 rng(11);
  for (int k = 0; k < 100; ++k) {
    const Shape4 s{rand_int(rng, 1, 3), rand_int(rng, 1, 8), rand_int(rng, 1, 6), rand_int(rng, 1, 6)};
    auto x = rand_tensor<double>(s, rng, -3, 3);
    auto g = rand_tensor<double>({1, s.c, 1, 1}, rng);
    auto b = rand_tensor<double>({1, s.c, 1, 1}, rng);
    ASSERT_LT(max_abs_diff(layer_norm_channels(x, g, b, 1e-5), oracle::layer_norm(x, g, b, 1e-5)), 1e-12);
    auto xf = x.cast<float>();
    auto yf = layer_norm_channels(xf, g.cast<float>(), b.cast<float>(), 1e-5f);
    ASSERT_LT(max_abs_diff(yf, oracle::layer_norm(xf, g.cast<float>(), b.cast<float>(), 1e-5)), 1e-5f);
  }
}

TEST(LayerNorm, ConstantVectorNormalisesToZero) {
  auto x = Tensor4d::constant({1, 4, 2, 2}, 3.25);
  auto y = layer_norm_channels(x, Tensor4d::constant({1, 4, 1, 1}, 1.0), Tensor4d({1, 4, 1, 1}), 1e-5);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, UnitGammaZeroBetaStatistics) {
  std::mt19937_64 rng(12);
  auto x = rand_tensor<double>({2, 6, 3, 3}, rng, -4, 4);
  auto y = layer_norm_channels(x, Tensor4d::constant({1, 6, 1, 1}, 1.0), Tensor4d({1, 6, 1, 1}), 1e-8);
  for (Index n = 0; n < 2; ++n)
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 3; ++j) {
        double m = 0, v = 0;
        for (Index c = 0; c < 6; ++c) m += y(n, c, i, j) / 6;
        for (Index c = 0; c < 6; ++c) v += (y(n, c, i, j) - m) * (y(n, c, i, j) - m) / 6;
        EXPECT_LT(std::abs(m), 1e-6);
        EXPECT_NEAR(v, 1.0, 1e-4);
      }
}

TEST(Elementwise, Examples) {
  Tensor4d x({1, 1, 1, 3});
  x[0] = -1, x[1] = 0, x[2] = 2;
  auto r = relu(x);
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 0.0);
  EXPECT_EQ(r[2], 2.0);
  EXPECT_EQ(mul(x, Tensor4d(x.shape())), Tensor4d(x.shape()));
  EXPECT_THROW(add(x, Tensor4d({1, 1, 3, 1})), ShapeError);

  std::mt19937_64 rng(13);
  auto a = rand_tensor<double>({1, 1, 2, 2}, rng);
  Tensor4d eye({1, 1, 2, 2});
  eye[0] = eye[3] = 1;
  EXPECT_EQ(matmul(eye, a), a);
}

TEST(Elementwise, MatmulTransposeSlice) {
  std::mt19937_64 rng(14);
  auto a = rand_tensor<double>({2, 3, 4, 5}, rng);
  auto b = rand_tensor<double>({2, 3, 5, 2}, rng);
  auto p = matmul(a, b);
  ASSERT_EQ(p.shape(), (Shape4{2, 3, 4, 2}));
  for (Index n = 0; n < 2; ++n)
    for (Index c = 0; c < 3; ++c)
      for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 2; ++j) {
          double s = 0;
          for (Index k = 0; k < 5; ++k) s += a(n, c, i, k) * b(n, c, k, j);
          EXPECT_NEAR(p(n, c, i, j), s, 1e-12);
        }
  auto t = transpose_last2(a);
  EXPECT_EQ(t(1, 2, 4, 3), a(1, 2, 3, 4));
  EXPECT_EQ(transpose_last2(t), a);
  auto s = slice_channels(a, 1, 2);
  EXPECT_EQ(s.shape(), (Shape4{2, 2, 4, 5}));
  EXPECT_EQ(s(1, 0, 2, 3), a(1, 1, 2, 3));
  EXPECT_THROW(slice_channels(a, 2, 2), ShapeError);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Kernels, Deterministic) {
  std::mt19937_64 rng(15);
  auto x = rand_tensor<float>({2, 4, 7, 7}, rng);
  auto w = rand_tensor<float>({4, 2, 3, 3}, rng);
  ConvGeometry g;
  g.groups = 2;
  g.padding = {1, 1};
  EXPECT_EQ(conv2d<float>(x, w, nullptr, g), conv2d<float>(x, w, nullptr, g));
}
