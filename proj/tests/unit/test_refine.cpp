#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "dhr/random.hpp"
#include "dhr/refine.hpp"
#include "dhr/toy.hpp"

using namespace dhr;

namespace {

std::shared_ptr<const PerceptualOracle> pyramid() { return std::make_shared<PyramidOracle<float>>(); }

// Target = clean toy image with a noise square; mask = that square out.
RefineSession patch_session(const GeneratorState& s, std::uint64_t seed, RefineConfig cfg,
                            std::shared_ptr<const PerceptualOracle> oracle = pyramid()) {
  auto inst = make_toy_instance(s, seed);
  auto rng = make_rng(seed + 1);
  // Start near, not at, the true latent so the in-domain branch has work to do.
  auto w = inst.w_true;
  for (auto& v : w.values()) v += static_cast<float>(std::normal_distribution<>(0, 0.15)(rng));
  return make_session(s, w.lifted(s.n_layers()), inst.target, inst.patch, cfg, std::move(oracle));
}

Image filled(std::size_t n, std::vector<float> plane) {
  Image img(n, n);
  for (std::size_t c = 0; c < 3; ++c) {
    std::size_t i = 0;
    for (float v : plane) img(c, i / n, i % n) = v, ++i;
  }
  return img;
}

}  // namespace

// --- masked loss -----------------------------------------------------------------

TEST(MaskedLoss, ZeroForIdenticalImages) {
  auto o = pyramid();
  auto img = filled(4, std::vector<float>(16, 0.3f));
  img(1, 2, 2) = -0.5f;
  DomainMask m(4, 4);
  m.set(0, false);
  for (auto r : {Region::in, Region::out}) EXPECT_EQ(masked_loss(img, img, m, r, o.get(), 1.0).value, 0.0);
}

TEST(MaskedLoss, DifferenceOutsideRegionIsIgnored) {
  auto a = filled(2, {0, 0, 0, 0}), b = filled(2, {0, 0, 5, 7});
  DomainMask m(2, 2);
  m.set(1, 0, false), m.set(1, 1, false);
  EXPECT_EQ(masked_loss(a, b, m, Region::in, nullptr, 0.0).value, 0.0);
  EXPECT_GT(masked_loss(a, b, m, Region::out, nullptr, 0.0).value, 0.0);
}

TEST(MaskedLoss, TwoByTwoExample) {
  // Same difference in every channel, so the channel mean of diff^2 is diff^2.
  auto a = filled(2, {1, 2, 3, 4}), b = filled(2, {0, 0, 0, 0});
  DomainMask m(2, 2);
  m.set(1, 0, false), m.set(1, 1, false);
  EXPECT_DOUBLE_EQ(masked_loss(a, b, m, Region::in, nullptr, 0.0).value, 2.5);
  EXPECT_DOUBLE_EQ(masked_loss(a, b, m, Region::out, nullptr, 0.0).value, 12.5);
}

TEST(MaskedLoss, EmptyRegionIsDegenerate) {
  Image a(2, 2);
  EXPECT_THROW(masked_loss(a, a, DomainMask(2, 2, 1), Region::out, nullptr, 0.0), DegenerateRegionError);
  EXPECT_THROW(masked_loss(a, a, DomainMask(2, 2, 0), Region::in, nullptr, 0.0), DegenerateRegionError);
  EXPECT_THROW(masked_loss(a, Image(4, 4), DomainMask(2, 2), Region::in, nullptr, 0.0), ArgumentError);
}

TEST(MaskedLoss, GradientMatchesFiniteDifferences) {
  auto rng = make_rng(1);
  BasicImage<double> a(8, 8), b(8, 8);
  auto va = normal_vector<double>(rng, a.size(), 0.3), vb = normal_vector<double>(rng, b.size(), 0.3);
  std::copy(va.begin(), va.end(), a.values().begin());
  std::copy(vb.begin(), vb.end(), b.values().begin());
  DomainMask m(8, 8);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < 64; ++i) m.set(i, coin(rng));
  PyramidOracle<double> o;
  for (auto r : {Region::in, Region::out}) {
    auto g = masked_loss(a, b, m, r, &o, 0.7, true).gradient;
    for (std::size_t i = 0; i < a.size(); i += 5) {
      auto ap = a, am = a;
      ap[i] += 1e-6, am[i] -= 1e-6;
      const double fd = (masked_loss(ap, b, m, r, &o, 0.7).value - masked_loss(am, b, m, r, &o, 0.7).value) / 2e-6;
      EXPECT_NEAR(g[i], fd, 1e-7 + 1e-4 * std::abs(fd));
    }
  }
}

// --- mask downsampling -----------------------------------------------------------

TEST(DownsampleMask, AllOnesStaysAllOnes) {
  for (std::size_t r : {1u, 2u, 4u, 8u, 16u}) EXPECT_EQ(downsample_mask(DomainMask(16, 16, 1), r, r).count_out(), 0u);
}

TEST(DownsampleMask, CheckerboardTiesGoOut) {
  DomainMask m(8, 8);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) m.set(y, x, (x + y) % 2 == 0);
  EXPECT_EQ(downsample_mask(m, 4, 4).count_in(), 0u);
}

TEST(DownsampleMask, MatchesBlockVoteOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto rng = make_rng(seed);
    std::bernoulli_distribution coin(0.5);
    DomainMask m(8, 8);
    for (std::size_t i = 0; i < 64; ++i) m.set(i, coin(rng));
    for (std::size_t r : {1u, 2u, 4u, 8u}) {
      auto d = downsample_mask(m, r, r);
      const std::size_t f = 8 / r;
      for (std::size_t y = 0; y < r; ++y)
        for (std::size_t x = 0; x < r; ++x) {
          int ones = 0;
          for (std::size_t i = 0; i < f * f; ++i) ones += m(y * f + i / f, x * f + i % f);
          EXPECT_EQ(d(y, x), ones * 2 > static_cast<int>(f * f) ? 1 : 0);
        }
    }
  }
}

TEST(DownsampleMask, NonDivisibleIsArgumentError) {
  EXPECT_THROW(downsample_mask(DomainMask(8, 8), 3, 3), ArgumentError);
  EXPECT_THROW(downsample_mask(DomainMask(8, 8), 0, 8), ArgumentError);
}

// --- refine ----------------------------------------------------------------------

TEST(Refine, AllInMaskDegeneratesToWeightTuning) {
  auto s = GeneratorState::toy();
  auto rng = make_rng(2);
  auto w = sample_w(s, rng);
  auto w2 = w;
  // Closer targets make Adam's first fixed-size step overshoot at this rate.
  for (auto& v : w2.values()) v += static_cast<float>(std::normal_distribution<>(0, 0.5)(rng));
  RefineConfig cfg;
  cfg.steps_feature = 10;
  cfg.steps_theta = 10;
  cfg.lambda = 0;
  auto sess = make_session(s, w, synthesize(s, w2), DomainMask(32, 32, 1), cfg, pyramid());
  const auto feature0 = sess.feature;
  auto r = refine(sess);
  EXPECT_EQ(r.feature, feature0);
  ASSERT_EQ(r.history.size(), 10u);
  for (std::size_t i = 1; i < r.history.size(); ++i) {
    EXPECT_FALSE(r.history[i].loss_out.has_value());
    EXPECT_LT(*r.history[i].loss_in, *r.history[i - 1].loss_in) << "step " << i;
  }
}

TEST(Refine, AllOutMaskLeavesWeightsExactlyZero) {
  auto s = GeneratorState::toy();
  auto inst = make_toy_instance(s, 3);
  RefineConfig cfg;
  cfg.steps_feature = 10;
  cfg.steps_theta = 10;
  auto r = refine(make_session(s, inst.w_true, inst.target, DomainMask(32, 32, 0), cfg, pyramid()));
  EXPECT_TRUE(r.state.delta_is_zero());
  EXPECT_LT(*r.final_losses.loss_out, *r.history.front().loss_out);
  EXPECT_FALSE(r.final_losses.loss_in.has_value());
}

TEST(Refine, WeightsFreezeAfterThetaSteps) {
  auto s = GeneratorState::toy();
  RefineConfig cfg;
  cfg.steps_feature = 12;
  cfg.steps_theta = 5;
  auto sess = patch_session(s, 4, cfg);
  auto at5 = sess;
  at5.config.steps_feature = 5;
  auto r5 = refine(at5);
  auto r12 = refine(sess);
  EXPECT_EQ(r12.history.size(), 12u);
  EXPECT_FALSE(r5.state.delta_is_zero());
  EXPECT_EQ(r12.state.delta_checksum(), r5.state.delta_checksum());
  EXPECT_NE(r12.feature, r5.feature);
}

TEST(Refine, DeterministicAndLatentFrozen) {
  auto s = GeneratorState::toy();
  RefineConfig cfg;
  cfg.steps_feature = 8;
  cfg.steps_theta = 4;
  auto sess = patch_session(s, 5, cfg);
  auto a = refine(sess), b = refine(sess);
  EXPECT_EQ(a.state.delta_checksum(), b.state.delta_checksum());
  EXPECT_EQ(a.feature, b.feature);
  EXPECT_EQ(a.image, b.image);
  // The session's own generator copy is untouched.
  EXPECT_TRUE(sess.state.delta_is_zero());
  EXPECT_TRUE(s.delta_is_zero());
}

TEST(Refine, OutOfDomainFeatureIndependentOfLatentAfterRefinement) {
  auto s = GeneratorState::toy();
  RefineConfig cfg;
  cfg.steps_feature = 10;
  cfg.steps_theta = 5;
  auto sess = patch_session(s, 6, cfg);
  auto r = refine(sess);
  auto rng = make_rng(7);
  auto base = blended_feature(r.state, sess.w, r.feature, sess.mask_feat);
  for (int k = 0; k < 3; ++k) {
    auto other = sample_w(s, rng).lifted(s.n_layers());
    auto f = blended_feature(r.state, other, r.feature, sess.mask_feat);
    const std::size_t plane = f.plane_size();
    for (std::size_t i = 0; i < f.size(); ++i)
      if (!sess.mask_feat[i % plane]) ASSERT_EQ(f[i], base[i]);
  }
}

TEST(Refine, NonFiniteLossAbortsWithStepAndBranch) {
  auto s = GeneratorState::toy();
  RefineConfig cfg;
  cfg.steps_feature = 3;
  cfg.steps_theta = 3;
  auto sess = patch_session(s, 8, cfg);
  sess.target(0, 0, 0) = std::numeric_limits<float>::quiet_NaN();
  sess.mask_image.set(0, 0, false);
  try {
    refine(sess);
    FAIL() << "expected NonFiniteLossError";
  } catch (const NonFiniteLossError& e) {
    EXPECT_EQ(e.step(), 0u);
    EXPECT_EQ(e.branch(), "feature");
  }
}

TEST(Refine, ConfigValidation) {
  RefineConfig bad;
  bad.steps_theta = 101;
  EXPECT_THROW(bad.validate(), ConfigurationError);
  RefineConfig neg;
  neg.lr_feature = 0;
  EXPECT_THROW(neg.validate(), ConfigurationError);
  auto s = GeneratorState::toy();
  EXPECT_THROW(make_session(s, LatentCode::zeros(LatentSpace::W, 1, 64), Image(16, 16), DomainMask(16, 16), RefineConfig{},
                            pyramid()),
               ArgumentError);
  EXPECT_THROW(make_session(s, LatentCode::zeros(LatentSpace::Wplus, 3, 64), Image(32, 32), DomainMask(32, 32),
                            RefineConfig{}, pyramid()),
               ConfigurationError);
}

TEST(Refine, WeightOnlyBaselineTunesWholeImage) {
  auto s = GeneratorState::toy();
  auto inst = make_toy_instance(s, 9);
  auto r = refine_weights_only(s, inst.w_true, inst.target, 10, 0.0015, 0.0, pyramid());
  EXPECT_EQ(r.history.size(), 10u);
  EXPECT_FALSE(r.state.delta_is_zero());
  EXPECT_LT(*r.final_losses.loss_in, *r.history.front().loss_in);
}

// --- gradient routing ------------------------------------------------------------

TEST(GradientSplit, ExactIsolationWithoutPerceptualTerm) {
  auto s = GeneratorState::toy();
  RefineConfig cfg;
  cfg.lambda = 0;
  auto rep = gradient_split_check(patch_session(s, 10, cfg), 60, 1);
  EXPECT_TRUE(rep.ok()) << rep.summary();
  EXPECT_GE(rep.fd_coordinates, 50u);
  EXPECT_TRUE(rep.mismatches.empty()) << rep.summary();
}

TEST(GradientSplit, ExactIsolationWithPointwiseOracle) {
  auto s = GeneratorState::toy();
  RefineConfig cfg;
  cfg.lambda = 1.0;
  auto rep = gradient_split_check(patch_session(s, 11, cfg, std::make_shared<PointwiseOracle<float>>()), 20, 2);
  EXPECT_TRUE(rep.ok()) << rep.summary();
}

TEST(GradientSplit, FiniteDifferencesHoldWithPyramidTerm) {
  auto s = GeneratorState::toy();
  RefineConfig cfg;
  cfg.lambda = 1.0;
  auto rep = gradient_split_check(patch_session(s, 12, cfg), 20, 3);
  EXPECT_TRUE(rep.fd_ok) << rep.summary();
  EXPECT_TRUE(rep.zero_residual_zero_gradients);
}

TEST(GradientSplit, ReportsSingleRegionMask) {
  auto s = GeneratorState::toy();
  auto inst = make_toy_instance(s, 13);
  auto sess = make_session(s, inst.w_true, inst.target, DomainMask(32, 32, 1), RefineConfig{}, pyramid());
  EXPECT_FALSE(gradient_split_check(sess).ok());
}
