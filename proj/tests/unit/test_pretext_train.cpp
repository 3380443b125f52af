#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "atmodist/pretext_train.hpp"
#include "gradcheck.hpp"
#include "test_support.hpp"

using namespace atmodist;

namespace {

struct TinySetup {
  FieldSeries series = atmodist::testing::gaussian_series(16, 32, 32, 2, 77);
  TransformSpec spec = fit_transform(series);
  SamplerConfig sampler = [] {
    SamplerConfig c;
    c.patch_size = 8;
    c.max_lag_steps = 3;
    c.pairs_per_timestep = 4;
    return c;
  }();
  TrainConfig train = [] {
    TrainConfig c;
    c.batch_size = 4;
    c.curriculum_epochs = 3;
    c.curriculum_batches = 2;
    c.epochs = 3;
    c.batches_per_epoch = 2;
    c.eval_pairs = 12;
    c.plateau_patience = 1;
    c.learning_rate = 0.05;
    return c;
  }();

  PairSampler train_stream() const { return PairSampler(series, spec, sampler, 0, 10, 101); }
  PairSampler eval_stream() const { return PairSampler(series, spec, sampler, 10, 16, 202); }
};

}  // namespace

TEST(CrossEntropy, UniformLogitsGiveLogN) {
  const std::vector<float> logits(23, 0.3f);
  for (int label : {0, 11, 22}) EXPECT_NEAR(cross_entropy<float>(logits, label), std::log(23.0), 1e-6);
}

TEST(CrossEntropy, MatchesBruteForceLogSumExp) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(0.0, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> z(7);
    for (auto& v : z) v = nd(rng);
    double s = 0;
    for (double v : z) s += std::exp(v);
    const int label = trial % 7;
    EXPECT_NEAR(cross_entropy<double>(z, label), std::log(s) - z[label], 1e-6);
  }
  EXPECT_THROW(cross_entropy<double>(std::vector<double>{1.0, 2.0}, 2), InputError);
}

TEST(CrossEntropy, BatchGradientIsSoftmaxMinusOneHot) {
  Tensor<double> logits(3, 2, 1, 1);
  const double z[3][2] = {{0.1, 2.0}, {-1.0, 0.5}, {0.7, 0.0}};
  for (int c = 0; c < 3; ++c)
    for (int n = 0; n < 2; ++n) logits(c, n, 0, 0) = z[c][n];
  const std::vector<int> labels{2, 0};
  const auto ce = cross_entropy(logits, std::span<const int>(labels));
  EXPECT_EQ(ce.correct, 2);
  for (int n = 0; n < 2; ++n) {
    const double s = std::exp(z[0][n]) + std::exp(z[1][n]) + std::exp(z[2][n]);
    for (int c = 0; c < 3; ++c)
      EXPECT_NEAR(ce.grad(c, n, 0, 0), (std::exp(z[c][n]) / s - (c == labels[n])) / 2.0, 1e-12);
  }
}

TEST(GradientClipping, RescalesOnlyAboveThreshold) {
  std::vector<double> g{6.0, 8.0};  // norm 10
  EXPECT_DOUBLE_EQ(clip_gradient<double>(g, 5.0), 10.0);
  EXPECT_NEAR(std::hypot(g[0], g[1]), 5.0, 1e-12);
  EXPECT_NEAR(g[0] / 5.0 * 0.6 + g[1] / 5.0 * 0.8, 1.0, 1e-12);  // direction unchanged

  std::vector<double> h{1.8, 2.4};  // norm 3
  clip_gradient<double>(h, 5.0);
  EXPECT_EQ(h, (std::vector<double>{1.8, 2.4}));

  std::vector<double> bad{1.0, std::numeric_limits<double>::quiet_NaN()};
  EXPECT_THROW(clip_gradient<double>(bad, 5.0), DivergenceError);
}

TEST(GradientClipping, JointNormAcrossParameters) {
  nn::Param<double> a("a", 1, true), b("b", 1, true);
  a.grad = {6.0};
  b.grad = {8.0};
  EXPECT_DOUBLE_EQ(clip_gradient(std::vector<nn::Param<double>*>{&a, &b}, 5.0), 10.0);
  EXPECT_NEAR(a.grad[0], 3.0, 1e-12);
  EXPECT_NEAR(b.grad[0], 4.0, 1e-12);
}

TEST(PlateauScheduler, DividesByTenAndRespectsFloor) {
  PlateauScheduler s(0.1, 1e-5, 0.1, 3, 1e-4);
  EXPECT_DOUBLE_EQ(s.step(1.0), 0.1);
  EXPECT_DOUBLE_EQ(s.step(0.99995), 0.1);  // within threshold: no improvement
  EXPECT_DOUBLE_EQ(s.step(1.0), 0.1);
  EXPECT_NEAR(s.step(1.0), 0.01, 1e-15);
  EXPECT_NEAR(s.step(0.5), 0.01, 1e-15);  // improvement resets the count
  for (int i = 0; i < 30; ++i) s.step(0.5);
  EXPECT_DOUBLE_EQ(s.learning_rate(), 1e-5);
  EXPECT_THROW(PlateauScheduler(1e-3, 1e-2), ConfigError);
}

TEST(SgdMomentum, WeightDecaySkipsExemptParameters) {
  nn::Param<double> w("w", 1, true), beta("beta", 1, false);
  w.value = {2.0};
  beta.value = {2.0};
  SgdMomentum<double> opt({&w, &beta}, 0.1, 0.9, 0.01);
  opt.step();
  EXPECT_DOUBLE_EQ(w.value[0], 2.0 - 0.1 * 0.01 * 2.0);
  EXPECT_EQ(beta.value[0], 2.0);
}

TEST(SgdMomentum, HeavyBallRecursion) {
  nn::Param<double> p("p", 1, false);
  p.grad = {1.0};
  SgdMomentum<double> opt({&p}, 0.5, 0.9, 0.0);
  opt.step();  // v = 1,   w = -0.5
  opt.step();  // v = 1.9, w = -1.45
  EXPECT_NEAR(p.value[0], -1.45, 1e-12);
  opt.reset_state();
  opt.step();  // v = 1 again
  EXPECT_NEAR(p.value[0], -1.95, 1e-12);
}

TEST(TrainPretext, CurriculumRepeatsOneFixedSubset) {
  TinySetup s;
  RepresentationModel<float> model(atmodist::testing::tiny_repnet(), 5);
  auto tr = s.train_stream();
  auto ev = s.eval_stream();
  const auto log = train_pretext(model, tr, ev, s.train);
  ASSERT_EQ(log.epochs.size(), 6u);
  const auto digest = log.epochs[0].data_digest;
  EXPECT_NE(digest, 0u);
  for (int e = 0; e < 3; ++e) {
    EXPECT_TRUE(log.epochs[e].curriculum);
    EXPECT_EQ(log.epochs[e].data_digest, digest);
  }
  for (int e = 3; e < 6; ++e) EXPECT_FALSE(log.epochs[e].curriculum);
}

TEST(TrainPretext, SameSeedsSameLog) {
  TinySetup s;
  auto run = [&] {
    RepresentationModel<float> model(atmodist::testing::tiny_repnet(), 5);
    auto tr = s.train_stream();
    auto ev = s.eval_stream();
    auto log = train_pretext(model, tr, ev, s.train);
    return std::make_pair(log, model.params().front()->value);
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(TrainPretext, LearningRateResetsThenNeverIncreases) {
  TinySetup s;
  s.train.curriculum_epochs = 4;
  s.train.epochs = 4;
  RepresentationModel<float> model(atmodist::testing::tiny_repnet(), 6);
  auto tr = s.train_stream();
  auto ev = s.eval_stream();
  const auto log = train_pretext(model, tr, ev, s.train);
  EXPECT_DOUBLE_EQ(log.epochs[0].lr, s.train.learning_rate);
  EXPECT_DOUBLE_EQ(log.epochs[4].lr, s.train.learning_rate);
  for (std::size_t e = 1; e < log.epochs.size(); ++e) {
    if (e == 4) continue;
    EXPECT_LE(log.epochs[e].lr, log.epochs[e - 1].lr);
    EXPECT_GE(log.epochs[e].lr, s.train.lr_min);
  }
}

TEST(TrainPretext, RestoresBestEvalCheckpoint) {
  TinySetup s;
  RepresentationModel<float> model(atmodist::testing::tiny_repnet(), 7);
  auto tr = s.train_stream();
  auto ev = s.eval_stream();
  const auto log = train_pretext(model, tr, ev, s.train);
  double lowest = INFINITY;
  for (const auto& e : log.epochs) lowest = std::min(lowest, e.eval_loss);
  EXPECT_EQ(log.best_eval_loss, lowest);
  EXPECT_EQ(log.epochs[log.best_epoch].eval_loss, lowest);

  auto ev2 = s.eval_stream();
  const auto eval_set = ev2.take(s.train.eval_pairs);
  EXPECT_NEAR(evaluate(model, eval_set, s.train.batch_size).first, lowest, 1e-9);
}

TEST(TrainPretext, NonFiniteInputIsDivergence) {
  TinySetup s;
  RepresentationModel<float> model(atmodist::testing::tiny_repnet(), 8);
  model.params().front()->value[0] = std::numeric_limits<float>::quiet_NaN();
  auto tr = s.train_stream();
  auto ev = s.eval_stream();
  EXPECT_THROW(train_pretext(model, tr, ev, s.train), DivergenceError);
}

TEST(TrainPretext, InvalidConfig) {
  TrainConfig c;
  c.lr_min = 1.0;
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  c.clip_norm = 0.0;
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  EXPECT_EQ(train_config_from_json(to_json(c)).curriculum_batches, c.curriculum_batches);
}
