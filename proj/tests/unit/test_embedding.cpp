#include <gtest/gtest.h>

#include <algorithm>

#include "../golden_support.hpp"
#include "dhr/embedding.hpp"
#include "dhr/random.hpp"

using namespace dhr;

namespace {

LatentCode random_w(const GeneratorState& s, std::uint64_t seed) {
  auto rng = make_rng(seed);
  return map_latent(s, LatentCode::vector(LatentSpace::Z, normal_vector<float>(rng, s.d_latent())));
}

std::string trace_checksum(const std::vector<double>& t) {
  std::vector<float> f(t.begin(), t.end());
  return hex64(checksum(std::span<const float>(f)));
}

const PyramidOracle<float> kOracle;

}  // namespace

TEST(CoarseInvert, ZeroStepsOnMeanImageHasZeroLoss) {
  auto s = GeneratorState::toy();
  CoarseConfig cfg{.steps = 0};
  auto target = synthesize(s, mean_latent(s, cfg.mean_samples, cfg.seed));
  auto r = coarse_invert(s, target, cfg, kOracle);
  ASSERT_EQ(r.loss_trace.size(), 1u);
  EXPECT_NEAR(r.loss_trace[0], 0.0, 1e-6);
  EXPECT_EQ(r.latent.space(), LatentSpace::W);
}

TEST(CoarseInvert, FortyStepsReduceLoss) {
  auto s = GeneratorState::toy();
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    auto target = synthesize(s, random_w(s, seed));
    auto r = coarse_invert(s, target, CoarseConfig{}, kOracle);
    ASSERT_EQ(r.loss_trace.size(), 41u);
    EXPECT_LT(r.loss_trace.back(), r.loss_trace.front()) << "seed " << seed;
    EXPECT_LE(*std::min_element(r.loss_trace.begin(), r.loss_trace.end()), r.loss_trace.front());
  }
}

TEST(CoarseInvert, CoarseImageIsSynthesisOfLatent) {
  auto s = GeneratorState::toy();
  auto target = synthesize(s, random_w(s, 14));
  auto r = coarse_invert(s, target, CoarseConfig{.steps = 5}, kOracle);
  EXPECT_EQ(r.coarse_image, synthesize(s, r.latent));
}

TEST(CoarseInvert, LeavesGeneratorUntouched) {
  auto s = GeneratorState::toy();
  const auto before = s.delta_checksum();
  const auto fp = s.fingerprint();
  coarse_invert(s, synthesize(s, random_w(s, 15)), CoarseConfig{.steps = 3}, kOracle);
  EXPECT_EQ(s.delta_checksum(), before);
  EXPECT_EQ(s.fingerprint(), fp);
}

TEST(CoarseInvert, ShorterRunIsExactPrefix) {
  auto s = GeneratorState::toy();
  auto target = synthesize(s, random_w(s, 16));
  auto a = coarse_invert(s, target, CoarseConfig{.steps = 10}, kOracle);
  auto b = coarse_invert(s, target, CoarseConfig{.steps = 20}, kOracle);
  ASSERT_EQ(a.loss_trace.size(), 11u);
  for (std::size_t i = 0; i < a.loss_trace.size(); ++i) EXPECT_EQ(a.loss_trace[i], b.loss_trace[i]);
}

TEST(CoarseInvert, GoldenTraceChecksum) {
  auto s = GeneratorState::toy();
  auto target = synthesize(s, random_w(s, 17));
  auto r = coarse_invert(s, target, CoarseConfig{}, kOracle);
  auto again = coarse_invert(s, target, CoarseConfig{}, kOracle);
  EXPECT_EQ(r.loss_trace, again.loss_trace);
  const auto actual = trace_checksum(r.loss_trace);
  EXPECT_EQ(actual, golden::golden_value("toy_seed7_coarse_trace_w17_default", actual));
}

TEST(CoarseInvert, ResolutionMismatchIsArgumentError) {
  auto s = GeneratorState::toy();
  EXPECT_THROW(coarse_invert(s, Image(16, 16), CoarseConfig{}, kOracle), ArgumentError);
}

TEST(Embed, StubEncoderCodeReturnedUnchanged) {
  auto s = GeneratorState::toy();
  auto rng = make_rng(18);
  LatentCode code(LatentSpace::Wplus, s.n_layers(), s.d_latent(), normal_vector<float>(rng, s.n_layers() * s.d_latent()));
  EncoderOracle enc = [&](const Image&) { return code; };
  auto e = embed(&enc, s, Image(32, 32), CoarseConfig{}, kOracle);
  EXPECT_EQ(e.latent, code);
  EXPECT_FALSE(e.coarse.has_value());
}

TEST(Embed, AbsentEncoderReplicatesCoarseLatent) {
  auto s = GeneratorState::toy();
  auto target = synthesize(s, random_w(s, 19));
  auto e = embed(nullptr, s, target, CoarseConfig{.steps = 5}, kOracle);
  ASSERT_TRUE(e.coarse.has_value());
  ASSERT_EQ(e.latent.space(), LatentSpace::Wplus);
  ASSERT_EQ(e.latent.rows(), s.n_layers());
  for (std::size_t r = 0; r < e.latent.rows(); ++r)
    EXPECT_TRUE(std::ranges::equal(e.latent.row(r), e.coarse->latent.values()));
}

TEST(Embed, WrongEncoderShapeIsConfigurationError) {
  auto s = GeneratorState::toy();
  EncoderOracle rows = [&](const Image&) { return LatentCode::zeros(LatentSpace::Wplus, 3, s.d_latent()); };
  EncoderOracle dim = [&](const Image&) { return LatentCode::zeros(LatentSpace::Wplus, s.n_layers(), 5); };
  EXPECT_THROW(embed(&rows, s, Image(32, 32), CoarseConfig{}, kOracle), ConfigurationError);
  EXPECT_THROW(embed(&dim, s, Image(32, 32), CoarseConfig{}, kOracle), ConfigurationError);
}

TEST(Embed, RegistryResolvesNamesAndRejectsUnknown) {
  auto& reg = EncoderRegistry::instance();
  EXPECT_FALSE(static_cast<bool>(reg.resolve("none", "/tmp")));
  EXPECT_THROW(reg.resolve("e4e", "/tmp"), ConfigurationError);
  reg.add("zeros", [] { return EncoderOracle([](const Image&) { return LatentCode::zeros(LatentSpace::W, 1, 64); }); });
  auto enc = reg.resolve("zeros", "/tmp");
  auto s = GeneratorState::toy();
  auto e = embed(&enc, s, Image(32, 32), CoarseConfig{}, kOracle);
  EXPECT_EQ(e.latent, LatentCode::zeros(LatentSpace::Wplus, s.n_layers(), 64));
}
