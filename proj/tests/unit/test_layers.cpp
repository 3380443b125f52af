#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "atmodist/nn/blocks.hpp"
#include "atmodist/nn/layers.hpp"

using namespace atmodist;
using namespace atmodist::nn;

namespace {

Tensor<double> random_tensor(int c, int n, int h, int w, std::mt19937_64& rng) {
  Tensor<double> t(c, n, h, w);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : t.storage()) v = nd(rng);
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

double rel_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-4}); }

// Central differences of L = <layer(x), R> against backward(), for the input
// and every parameter element.
double max_gradient_error(Layer<double>& layer, Tensor<double> x, Mode mode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Tensor<double> y0 = layer.forward(x, mode);
  const Tensor<double> r = random_tensor(y0.channels(), y0.batch(), y0.height(), y0.width(), rng);
  std::vector<Param<double>*> params;
  layer.collect_params(params);
  for (auto* p : params) p->zero_grad();
  layer.forward(x, mode);
  const Tensor<double> dx = layer.backward(r);

  const double eps = 1e-6;
  auto loss = [&] { return dot(layer.forward(x, mode), r); };
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + eps;
    const double lp = loss();
    x.data()[i] = keep - eps;
    const double lm = loss();
    x.data()[i] = keep;
    worst = std::max(worst, rel_error(dx.data()[i], (lp - lm) / (2 * eps)));
  }
  for (auto* p : params)
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double keep = p->value[i];
      p->value[i] = keep + eps;
      const double lp = loss();
      p->value[i] = keep - eps;
      const double lm = loss();
      p->value[i] = keep;
      worst = std::max(worst, rel_error(p->grad[i], (lp - lm) / (2 * eps)));
    }
  return worst;
}

template <typename L>
void randomise(L& layer, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Param<double>*> params;
  layer.collect_params(params);
  std::normal_distribution<double> nd(0.0, 0.5);
  for (auto* p : params)
    for (auto& v : p->value) v = nd(rng);
}

}  // namespace

TEST(Conv2d, OutputSizeFormula) {
  EXPECT_EQ(conv_output_size(32, 8, 2, 3), 16);
  EXPECT_EQ(conv_output_size(16, 3, 2, 1), 8);
  EXPECT_EQ(conv_output_size(5, 3, 1, 1), 5);
}

TEST(Conv2d, CentreTapKernelIsIdentity) {
  Conv2d<double> conv(2, 2, 3, 1, 1, false, "c");
  auto& w = conv.weight().value;
  std::fill(w.begin(), w.end(), 0.0);
  w[0 * 18 + 0 * 9 + 4] = 1.0;  // out 0 <- in 0 centre
  w[1 * 18 + 1 * 9 + 4] = 1.0;  // out 1 <- in 1 centre
  std::mt19937_64 rng(1);
  const auto x = random_tensor(2, 3, 5, 5, rng);
  const auto y = conv.forward(x, Mode::infer);
  ASSERT_TRUE(y.same_shape(x));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, MatchesDirectSummation) {
  Conv2d<double> conv(3, 4, 3, 2, 1, true, "c");
  randomise(conv, 4);
  std::mt19937_64 rng(2);
  const auto x = random_tensor(3, 2, 7, 6, rng);
  const auto y = conv.forward(x, Mode::infer);
  ASSERT_EQ(y.height(), 4);
  ASSERT_EQ(y.width(), 3);
  const auto& w = conv.weight().value;
  for (int o = 0; o < 4; ++o)
    for (int n = 0; n < 2; ++n)
      for (int oy = 0; oy < 4; ++oy)
        for (int ox = 0; ox < 3; ++ox) {
          double s = conv.bias().value[o];
          for (int c = 0; c < 3; ++c)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = oy * 2 + ky - 1, ix = ox * 2 + kx - 1;
                if (iy >= 0 && iy < 7 && ix >= 0 && ix < 6) s += w[((o * 3 + c) * 3 + ky) * 3 + kx] * x(c, n, iy, ix);
              }
          EXPECT_NEAR(y(o, n, oy, ox), s, 1e-12);
        }
}

TEST(PixelShuffle, ChannelToSubpixelMapping) {
  PixelShuffle<double> ps(2);
  Tensor<double> x(8, 1, 1, 1);
  for (int c = 0; c < 8; ++c) x(c, 0, 0, 0) = c;
  const auto y = ps.forward(x, Mode::infer);
  ASSERT_EQ(y.channels(), 2);
  ASSERT_EQ(y.height(), 2);
  EXPECT_EQ(y(0, 0, 0, 0), 0);
  EXPECT_EQ(y(0, 0, 0, 1), 1);
  EXPECT_EQ(y(0, 0, 1, 0), 2);
  EXPECT_EQ(y(0, 0, 1, 1), 3);
  EXPECT_EQ(y(1, 0, 1, 0), 6);
}

TEST(BatchNorm2d, TrainModeNormalisesInferUsesRunningStats) {
  BatchNorm2d<double> bn(2, "bn", 1.0);  // momentum 1: running stats = last batch
  std::mt19937_64 rng(3);
  auto x = random_tensor(2, 4, 3, 3, rng);
  for (std::size_t i = 0; i < x.row_size(); ++i) x.data()[i] = 5.0 + 2.0 * x.data()[i];
  const auto y = bn.forward(x, Mode::train);
  double m = 0, v = 0;
  for (std::size_t i = 0; i < y.row_size(); ++i) m += y.data()[i];
  m /= y.row_size();
  for (std::size_t i = 0; i < y.row_size(); ++i) v += (y.data()[i] - m) * (y.data()[i] - m);
  EXPECT_NEAR(m, 0.0, 1e-12);
  EXPECT_NEAR(v / y.row_size(), 1.0, 1e-3);
  const auto z = bn.forward(x, Mode::infer);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(z.data()[i], y.data()[i], 0.02 * std::abs(y.data()[i]) + 1e-6);
}

TEST(MaxPool2d, PicksWindowMaximum) {
  MaxPool2d<double> pool(3, 2, 1);
  Tensor<double> x(1, 1, 4, 4);
  for (int i = 0; i < 16; ++i) x.data()[i] = i;
  const auto y = pool.forward(x, Mode::infer);
  ASSERT_EQ(y.height(), 2);
  EXPECT_EQ(y(0, 0, 0, 0), 5);
  EXPECT_EQ(y(0, 0, 0, 1), 7);
  EXPECT_EQ(y(0, 0, 1, 1), 15);
}

TEST(GradientCheck, Conv2dStridedPadded) {
  Conv2d<double> conv(2, 3, 3, 2, 1, true, "c");
  randomise(conv, 5);
  std::mt19937_64 rng(6);
  EXPECT_LE(max_gradient_error(conv, random_tensor(2, 2, 5, 5, rng), Mode::train, 7), 1e-6);
}

TEST(GradientCheck, BatchNormTrainMode) {
  BatchNorm2d<double> bn(3, "bn");
  randomise(bn, 8);
  std::mt19937_64 rng(9);
  EXPECT_LE(max_gradient_error(bn, random_tensor(3, 4, 2, 2, rng), Mode::train, 10), 1e-5);
}

TEST(GradientCheck, LinearLeakyReluPoolFlattenShuffle) {
  std::mt19937_64 rng(11);
  Linear<double> fc(6, 4, "fc");
  randomise(fc, 12);
  EXPECT_LE(max_gradient_error(fc, random_tensor(6, 3, 1, 1, rng), Mode::train, 13), 1e-6);
  LeakyReLU<double> lrelu(0.2);
  EXPECT_LE(max_gradient_error(lrelu, random_tensor(2, 2, 3, 3, rng), Mode::train, 14), 1e-6);
  MaxPool2d<double> pool(3, 2, 1);
  EXPECT_LE(max_gradient_error(pool, random_tensor(2, 2, 5, 5, rng), Mode::train, 15), 1e-6);
  GlobalAvgPool<double> gap;
  EXPECT_LE(max_gradient_error(gap, random_tensor(3, 2, 3, 4, rng), Mode::train, 16), 1e-6);
  Flatten<double> flat;
  EXPECT_LE(max_gradient_error(flat, random_tensor(2, 3, 2, 2, rng), Mode::train, 17), 1e-6);
  PixelShuffle<double> ps(2);
  EXPECT_LE(max_gradient_error(ps, random_tensor(8, 2, 2, 3, rng), Mode::train, 18), 1e-6);
}

TEST(GradientCheck, ResidualBlockWithProjection) {
  ResidualBlock<double> blk(2, 3, 2, "b");
  std::mt19937_64 init(19);
  blk.init_he(init);
  std::mt19937_64 rng(20);
  EXPECT_LE(max_gradient_error(blk, random_tensor(2, 3, 4, 4, rng), Mode::train, 21), 1e-4);
}

TEST(GradientCheck, PlainResidualBlock) {
  PlainResidualBlock<double> blk(3, 0.2, "p");
  std::mt19937_64 init(22);
  blk.init_he(init);
  std::mt19937_64 rng(23);
  EXPECT_LE(max_gradient_error(blk, random_tensor(3, 2, 4, 4, rng), Mode::train, 24), 1e-5);
}

TEST(HeNormal, StandardDeviationMatchesFanIn) {
  std::vector<double> w(200000);
  std::mt19937_64 rng(25);
  he_normal(w, 50, rng);
  double s2 = 0;
  for (double v : w) s2 += v * v;
  EXPECT_NEAR(std::sqrt(s2 / w.size()), std::sqrt(2.0 / 50), 2e-3);
}
