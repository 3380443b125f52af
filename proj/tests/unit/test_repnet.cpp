#include <cmath>
#include <fstream>
#include <numeric>

#include <gtest/gtest.h>

#include "atmodist/losses.hpp"
#include "atmodist/optim.hpp"
#include "atmodist/repnet.hpp"
#include "gradcheck.hpp"
#include "test_support.hpp"

using namespace atmodist;

namespace {

RepNetConfig config_from_file(const std::string& name) {
  std::ifstream is(std::string(ATMODIST_CONFIG_DIR) + "/" + name);
  return repnet_from_json(nlohmann::json::parse(is).at("repnet"));
}

bool all_finite(const std::vector<float>& v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

}  // namespace

TEST(RepNet, SameSeedBitIdenticalParameters) {
  const RepNetConfig cfg;
  RepresentationModel<float> a(cfg, 42), b(cfg, 42), c(cfg, 43);
  const auto pa = a.params(), pb = b.params(), pc = c.params();
  ASSERT_EQ(pa.size(), pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
    differs |= pa[i]->value != pc[i]->value;
  }
  EXPECT_TRUE(differs);
}

TEST(RepNet, ParameterCountIsAPureFunctionOfConfig) {
  const RepNetConfig cfg;
  RepresentationModel<float> a(cfg, 1), b(cfg, 2);
  EXPECT_EQ(a.parameter_count(), b.parameter_count());
}

TEST(RepNet, ParameterCountMatchesHandCount) {
  // 16x16 input: stem 8x8/2 -> 8, pool -> 4, stage 1 -> 4, stage 2 -> 2.
  RepNetConfig c;
  c.input_size = 16;
  c.stem_channels = 4;
  c.stages = {{1, 4}, {1, 8}};
  c.head_hidden = {10};
  c.num_classes = 5;
  const std::size_t stem = 2 * 4 * 64 + 2 * 4;
  const std::size_t block0 = 4 * 4 * 9 + 8 + 4 * 4 * 9 + 8;
  const std::size_t block1 = 4 * 8 * 9 + 16 + 8 * 8 * 9 + 16 + 4 * 8 + 16;
  const std::size_t head = (16 * 2 * 2) * 10 + 10 + 10 * 5 + 5;
  RepresentationModel<float> m(c, 0);
  EXPECT_EQ(m.feature_map(), 2);
  EXPECT_EQ(m.parameter_count(), stem + block0 + block1 + head);
}

TEST(RepNet, PaperScaleParameterCount) {
  const auto cfg = config_from_file("full.json");
  EXPECT_EQ(cfg.input_size, 160);
  EXPECT_EQ(cfg.num_classes, 23);
  RepresentationModel<float> m(cfg, 0);
  const double n = static_cast<double>(m.parameter_count());
  EXPECT_NEAR(n / 2.27e6, 1.0, 0.05) << n;
}

TEST(RepNet, DeskForwardIsFinite) {
  const auto cfg = config_from_file("desk.json");
  RepresentationModel<float> m(cfg, 3);
  std::mt19937_64 rng(4);
  const auto a = atmodist::testing::random_patch(32, 32, 2, rng);
  const auto b = atmodist::testing::random_patch(32, 32, 2, rng);
  const auto logits = m.classify_pair(a, b);
  EXPECT_EQ(logits.size(), 8u);
  EXPECT_TRUE(all_finite(logits));
  EXPECT_TRUE(all_finite(m.represent(a)));
}

TEST(RepNet, SoftmaxOfLogitsSumsToOne) {
  RepresentationModel<float> m(RepNetConfig{}, 3);
  std::mt19937_64 rng(5);
  const auto logits =
      m.classify_pair(atmodist::testing::random_patch(32, 32, 2, rng), atmodist::testing::random_patch(32, 32, 2, rng));
  const auto p = softmax<float>(logits);
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-6);
}

TEST(RepNet, RepresentIsPureAndBranchIndependent) {
  RepresentationModel<float> m(RepNetConfig{}, 6);
  std::mt19937_64 rng(7);
  const auto x = atmodist::testing::random_patch(32, 32, 2, rng);
  const auto y = atmodist::testing::random_patch(32, 32, 2, rng);
  const auto e1 = m.represent(x);
  EXPECT_EQ(m.represent(x), e1);
  EXPECT_EQ(e1.size(), static_cast<std::size_t>(m.metric_dim()));

  // x through branch a and through branch b of a batched pair evaluation. A
  // different batch size may change GEMM blocking, hence the tolerance there.
  const auto xa = to_batch<float>(std::vector<Patch<float>>{x, y});
  const auto xb = to_batch<float>(std::vector<Patch<float>>{y, x});
  const auto ea = m.embed(xa, nn::Mode::infer);
  const auto eb = m.embed(xb, nn::Mode::infer);
  for (int c = 0; c < ea.channels(); ++c) {
    EXPECT_FLOAT_EQ(ea(c, 0, 0, 0), eb(c, 1, 0, 0));
    EXPECT_NEAR(ea(c, 0, 0, 0), e1[c], 1e-5f * (1 + std::abs(e1[c])));
  }
}

TEST(RepNet, ZeroInputGivesFiniteNonZeroActivations) {
  RepNetConfig cfg;
  RepresentationModel<float> m(cfg, 8);
  // Give batch-norm shifts a value so a zero input still activates units.
  for (auto* p : m.params())
    if (p->name.find("beta") != std::string::npos) std::fill(p->value.begin(), p->value.end(), 0.1f);
  const auto e = m.represent(Patch<float>(32, 32, 2));
  EXPECT_TRUE(all_finite(e));
  EXPECT_TRUE(std::any_of(e.begin(), e.end(), [](float v) { return v != 0.0f; }));
}

TEST(RepNet, ShapeMismatchIsInputError) {
  RepresentationModel<float> m(RepNetConfig{}, 9);
  EXPECT_THROW(m.represent(Patch<float>(16, 16, 2)), InputError);
  EXPECT_THROW(m.classify_pair(Patch<float>(32, 32, 2), Patch<float>(32, 32, 3)), InputError);
  EXPECT_THROW(m.forward_pairs(Tensor<float>(2, 2, 32, 32), Tensor<float>(2, 3, 32, 32), nn::Mode::infer),
               InputError);
}

TEST(RepNet, OverDeepStagesAreConfigError) {
  // 16 -> stem 8 -> pool 4 -> stages 4, 2, 1, then nothing left to halve.
  RepNetConfig c;
  c.input_size = 16;
  c.stages = {{1, 8}, {1, 8}, {1, 8}};
  EXPECT_EQ(feature_map_size(c), 1);
  c.stages.push_back({1, 8});
  EXPECT_THROW(RepresentationModel<float>(c, 0), ConfigError);
  c.stages = {{1, 8}};
  c.input_size = 1;
  EXPECT_THROW(feature_map_size(c), ConfigError);
  RepNetConfig d;
  d.stages.clear();
  EXPECT_THROW(RepresentationModel<float>(d, 0), ConfigError);
}

TEST(RepNet, AnalyticGradientsMatchFiniteDifferences) {
  const auto r = atmodist::testing::check_repnet_gradients(atmodist::testing::tiny_repnet(), 11);
  EXPECT_GT(r.checked, 100u);
  EXPECT_LE(r.max_rel_error, 1e-3);
}

TEST(RepNet, GradientCheckWithProjectionStage) {
  auto cfg = atmodist::testing::tiny_repnet();
  cfg.input_size = 16;
  cfg.stages = {{1, 4}, {1, 6}};
  cfg.head_reduce_channels = 3;
  const auto r = atmodist::testing::check_repnet_gradients(cfg, 12);
  EXPECT_LE(r.max_rel_error, 1e-3);
}

TEST(RepNet, OneStepMovesBothBranchesIdentically) {
  RepresentationModel<float> m(RepNetConfig{}, 13);
  std::mt19937_64 rng(14);
  const auto a = to_batch<float>(std::vector<Patch<float>>{atmodist::testing::random_patch(32, 32, 2, rng),
                                                           atmodist::testing::random_patch(32, 32, 2, rng)});
  const auto b = to_batch<float>(std::vector<Patch<float>>{atmodist::testing::random_patch(32, 32, 2, rng),
                                                           atmodist::testing::random_patch(32, 32, 2, rng)});
  const std::vector<int> labels{1, 2};
  m.zero_grad();
  auto ce = cross_entropy(m.forward_pairs(a, b, nn::Mode::train), std::span<const int>(labels));
  m.backward_pairs(ce.grad);
  SgdMomentum<float> opt(m.params(), 0.1, 0.9, 0.0);
  opt.step();
  // One parameter set: swapping the branches permutes the stacked maps only.
  const auto x = atmodist::testing::random_patch(32, 32, 2, rng);
  const auto y = atmodist::testing::random_patch(32, 32, 2, rng);
  const auto ex = m.represent(x);
  const auto both = m.embed(to_batch<float>(std::vector<Patch<float>>{y, x}), nn::Mode::infer);
  for (int c = 0; c < both.channels(); ++c) EXPECT_NEAR(both(c, 1, 0, 0), ex[c], 1e-5f * (1 + std::abs(ex[c])));
  EXPECT_EQ(m.params().size(), m.representation_params().size() + 4);  // head: fc + logits (w, b each)
}

TEST(RepNet, JsonRoundTrip) {
  const auto cfg = config_from_file("full.json");
  EXPECT_EQ(repnet_from_json(to_json(cfg)), cfg);
}
