#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "../golden_support.hpp"
#include "dhr/generator.hpp"
#include "dhr/random.hpp"
#include "dhr/selfcheck.hpp"

using namespace dhr;

namespace {

template <class T>
BasicLatentCode<T> random_w(const BasicGeneratorState<T>& s, std::uint64_t seed, LatentSpace space = LatentSpace::W) {
  auto rng = make_rng(seed);
  const std::size_t rows = space == LatentSpace::Wplus ? s.n_layers() : 1;
  return BasicLatentCode<T>(space, rows, s.d_latent(), normal_vector<T>(rng, rows * s.d_latent(), 0.7));
}

DomainMask random_mask(std::size_t h, std::size_t w, std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::bernoulli_distribution coin(0.5);
  DomainMask m(h, w);
  for (std::size_t i = 0; i < m.size(); ++i) m.set(i, coin(rng));
  return m;
}

template <class T>
double weighted_sum(const Tensor<T>& img, const Tensor<T>& r) {
  double s = 0;
  for (std::size_t i = 0; i < img.size(); ++i) s += static_cast<double>(img[i]) * static_cast<double>(r[i]);
  return s;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-10}); }

}  // namespace

TEST(Blend, TwoByTwoSingleChannel) {
  Tensor<float> fl(1, 2, 2), f(1, 2, 2);
  fl.values()[0] = 1, fl.values()[1] = 2, fl.values()[2] = 3, fl.values()[3] = 4;
  f.values()[0] = 5, f.values()[1] = 6, f.values()[2] = 7, f.values()[3] = 8;
  DomainMask m(2, 2);
  m.set(0, 0, true), m.set(0, 1, false), m.set(1, 0, false), m.set(1, 1, true);
  auto out = kernels::blend(fl, f, m);
  EXPECT_EQ(out(0, 0, 0), 1);
  EXPECT_EQ(out(0, 0, 1), 6);
  EXPECT_EQ(out(0, 1, 0), 7);
  EXPECT_EQ(out(0, 1, 1), 4);
}

TEST(Blend, AlgebraHoldsElementwise) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto rng = make_rng(seed);
    Tensor<float> fl(4, 8, 8), f(4, 8, 8);
    auto a = normal_vector<float>(rng, fl.size()), b = normal_vector<float>(rng, f.size());
    std::copy(a.begin(), a.end(), fl.values().begin());
    std::copy(b.begin(), b.end(), f.values().begin());
    auto m = random_mask(8, 8, seed + 100);
    auto out = kernels::blend(fl, f, m);
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t p = 0; p < 64; ++p) {
        const std::size_t i = c * 64 + p;
        EXPECT_EQ(out[i], m[p] ? fl[i] : f[i]);
      }
  }
}

TEST(Generator, ArchitectureMatchesDeclaration) {
  auto s = GeneratorState::toy();
  EXPECT_EQ(s.n_layers(), 8u);
  EXPECT_EQ(s.d_latent(), 64u);
  EXPECT_EQ(s.output_resolution(), 32u);
  EXPECT_EQ(s.inject_layer(), 7u);
  EXPECT_EQ(s.feature_resolution(), 32u);
  EXPECT_EQ(s.layer_resolutions(), (std::vector<std::size_t>{4, 8, 16, 32, 32, 32, 32, 32}));
  EXPECT_TRUE(s.delta_is_zero());
}

TEST(Generator, SynthesizeIsDeterministic) {
  auto s = GeneratorState::toy();
  auto w = random_w(s, 3);
  auto a = synthesize(s, w), b = synthesize(s, w);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.height(), 32u);
  EXPECT_TRUE(a.all_finite());
}

TEST(Generator, ZeroDeviationIsIdentity) {
  auto s = GeneratorState::toy();
  auto w = random_w(s, 4);
  auto other = GeneratorState::toy();
  EXPECT_EQ(synthesize(s, w), synthesize(other, w));
  EXPECT_EQ(synthesize(s, w), synthesize(s.fresh(), w));
}

TEST(Generator, NonZeroDeviationChangesOutput) {
  auto s = GeneratorState::toy();
  auto w = random_w(s, 4);
  auto before = synthesize(s, w);
  s.delta().at(names::conv_bias(7)).values[0] = 0.25f;
  EXPECT_NE(synthesize(s, w), before);
  EXPECT_FALSE(s.delta_is_zero());
}

TEST(Generator, ZeroLatentGoldenImage) {
  auto s = GeneratorState::toy();
  auto img = synthesize(s, LatentCode::zeros(LatentSpace::W, 1, 64));
  const auto sum = hex64(checksum(img.values()));
  EXPECT_EQ(sum, golden::golden_value("toy_seed7_zero_image", sum));
}

TEST(Generator, DimensionMismatchIsConfigurationError) {
  auto s = GeneratorState::toy();
  EXPECT_THROW(synthesize(s, LatentCode::zeros(LatentSpace::W, 1, 32)), ConfigurationError);
  EXPECT_THROW(synthesize(s, LatentCode::zeros(LatentSpace::Wplus, 5, 64)), ConfigurationError);
  EXPECT_THROW(s.set_inject_layer(8), ConfigurationError);
}

TEST(Generator, WplusWithEqualRowsMatchesW) {
  auto s = GeneratorState::toy();
  auto w = random_w(s, 5);
  EXPECT_EQ(synthesize(s, w), synthesize(s, w.lifted(8)));
}

TEST(Injection, AllOnesMaskReproducesSynthesize) {
  auto s = GeneratorState::toy();
  auto w = random_w(s, 6);
  auto rng = make_rng(1);
  FeatureMap f{7, Tensor<float>(16, 32, 32)};
  auto v = normal_vector<float>(rng, f.values.size());
  std::copy(v.begin(), v.end(), f.values.values().begin());
  EXPECT_EQ(synthesize_with_injection(s, w, f, DomainMask(32, 32, 1)), synthesize(s, w));
}

TEST(Injection, TappedFeatureWithZeroMaskReproducesSynthesize) {
  auto s = GeneratorState::toy();
  auto w = random_w(s, 7);
  auto f = tap_feature(s, w);
  EXPECT_EQ(f.layer, 7u);
  EXPECT_EQ(f.values.height(), 32u);
  EXPECT_EQ(synthesize_with_injection(s, w, f, DomainMask(32, 32, 0)), synthesize(s, w));
  EXPECT_EQ(tap_feature(s, w), f);
}

TEST(Injection, WorksAtEveryLayer) {
  auto s = GeneratorState::toy();
  auto w = random_w(s, 8);
  for (std::size_t l = 0; l < s.n_layers(); ++l) {
    s.set_inject_layer(l);
    auto f = tap_feature(s, w);
    const auto r = s.feature_resolution();
    EXPECT_EQ(f.values.height(), r);
    EXPECT_EQ(synthesize_with_injection(s, w, f, random_mask(r, r, l)), synthesize(s, w)) << "layer " << l;
  }
}

TEST(Injection, ShapeMismatchIsConfigurationError) {
  auto s = GeneratorState::toy();
  auto w = random_w(s, 9);
  auto f = tap_feature(s, w);
  EXPECT_THROW(synthesize_with_injection(s, w, f, DomainMask(16, 16)), ConfigurationError);
  auto wrong = f;
  wrong.layer = 3;
  EXPECT_THROW(synthesize_with_injection(s, w, wrong, DomainMask(32, 32)), ConfigurationError);
}

TEST(Injection, OutOfDomainSliceIndependentOfLatent) {
  auto s = GeneratorState::toy();
  auto f = tap_feature(s, random_w(s, 10));
  auto m = random_mask(32, 32, 11);
  auto base = blended_feature(s, random_w(s, 12), f, m);
  for (std::uint64_t seed = 13; seed < 18; ++seed) {
    auto other = blended_feature(s, random_w(s, seed, LatentSpace::Wplus), f, m);
    for (std::size_t c = 0; c < 16; ++c)
      for (std::size_t p = 0; p < 1024; ++p)
        if (!m[p]) EXPECT_EQ(other[c * 1024 + p], base[c * 1024 + p]);
  }
}

TEST(MeanLatent, SingleSampleEqualsMappedSeed) {
  auto s = GeneratorState::toy();
  auto rng = make_rng(42);
  auto z = LatentCode::vector(LatentSpace::Z, normal_vector<float>(rng, 64));
  EXPECT_EQ(mean_latent(s, 1, 42), map_latent(s, z));
}

TEST(MeanLatent, IdentityMappingMeanNearZero) {
  ToyArchitecture arch;
  arch.mapping = MappingKind::identity;
  auto s = GeneratorState::toy(arch);
  const std::size_t n = 4000;
  auto m = mean_latent(s, n, 3);
  const double bound = 3.0 / std::sqrt(double(n));
  std::size_t outside = 0;
  for (float v : m.values()) outside += std::abs(v) > bound;
  // 3 sigma per coordinate: expect ~0.3% of 64 coordinates outside.
  EXPECT_LE(outside, 2u);
}

TEST(MeanLatent, ZeroSamplesIsArgumentError) {
  auto s = GeneratorState::toy();
  EXPECT_THROW(mean_latent(s, 0, 1), ArgumentError);
}

TEST(MeanLatent, GoldenChecksum) {
  auto s = GeneratorState::toy();
  auto a = mean_latent(s, 1000, 0);
  EXPECT_EQ(a, mean_latent(s, 1000, 0));
  const auto sum = hex64(checksum(a.values()));
  EXPECT_EQ(sum, golden::golden_value("toy_seed7_mean_latent_n1000_seed0", sum));
}

TEST(TapFeature, GoldenChecksumAtMeanLatent) {
  auto s = GeneratorState::toy();
  auto f = tap_feature(s, mean_latent(s, 1000, 0));
  const auto sum = hex64(checksum(f.values.values()));
  EXPECT_EQ(sum, golden::golden_value("toy_seed7_tap_layer7_mean_latent", sum));
}

// Analytic gradients of J = <r, G(w, f, m; theta)> against central finite
// differences in double precision.
class GradientCheck : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
  using D = double;
  auto s = BasicGeneratorState<D>::toy();
  s.set_inject_layer(GetParam());
  auto rng = make_rng(100 + GetParam());
  // Perturb the deviation so the check does not sit at theta_delta = 0 only.
  for (auto& [n, a] : s.delta())
    for (auto& v : a.values) v = normal_vector<D>(rng, 1, 0.01)[0];
  auto w = random_w(s, 200, LatentSpace::Wplus);
  auto f = tap_feature(s, w);
  for (auto& v : f.values.values()) v += normal_vector<D>(rng, 1, 0.3)[0];
  const auto r_feat = s.feature_resolution();
  auto m = random_mask(r_feat, r_feat, 300 + GetParam());
  Tensor<D> r(3, 32, 32);
  {
    auto rv = normal_vector<D>(rng, r.size());
    std::copy(rv.begin(), rv.end(), r.values().begin());
  }

  auto J = [&](const BasicGeneratorState<D>& st, const std::vector<D>& wp, const Tensor<D>& feat) {
    auto tr = forward(st, st.effective(), wp, InjectionInput<D>{&feat, &m});
    return weighted_sum(tr.outputs.back(), r);
  };

  auto wp = to_wplus(s, w);
  auto weights = s.effective();
  auto tr = forward(s, weights, wp, InjectionInput<D>{&f.values, &m});
  auto g = backward(s, weights, tr, r, GradientRequest{true, true, true}, &m);

  const D h = 1e-4;
  std::uniform_int_distribution<std::size_t> pick_w(0, wp.size() - 1), pick_f(0, f.values.size() - 1);
  for (int k = 0; k < 12; ++k) {
    const auto i = pick_w(rng);
    auto p = wp, q = wp;
    p[i] += h, q[i] -= h;
    const double fd = (J(s, p, f.values) - J(s, q, f.values)) / (2 * h);
    EXPECT_LT(rel_err(g.wplus[i], fd), 1e-3) << "w+ " << i << " analytic " << g.wplus[i] << " fd " << fd;
  }
  for (int k = 0; k < 12; ++k) {
    const auto i = pick_f(rng);
    auto p = f.values, q = f.values;
    p[i] += h, q[i] -= h;
    const double fd = (J(s, wp, p) - J(s, wp, q)) / (2 * h);
    if (m[i % f.values.plane_size()]) {
      EXPECT_EQ(g.feature[i], 0.0);
      EXPECT_NEAR(fd, 0.0, 1e-9);
    } else {
      EXPECT_LT(rel_err(g.feature[i], fd), 1e-3) << "f " << i;
    }
  }
  for (const auto& name : s.tunable_names()) {
    auto& delta = s.delta().at(name).values;
    std::uniform_int_distribution<std::size_t> pick(0, delta.size() - 1);
    for (int k = 0; k < 3; ++k) {
      const auto i = pick(rng);
      const D orig = delta[i];
      delta[i] = orig + h;
      const double jp = J(s, wp, f.values);
      delta[i] = orig - h;
      const double jm = J(s, wp, f.values);
      delta[i] = orig;
      const double fd = (jp - jm) / (2 * h);
      const double an = g.theta.at(name).values[i];
      if (std::abs(fd) < 1e-9 && std::abs(an) < 1e-9) continue;
      EXPECT_LT(rel_err(an, fd), 1e-3) << name << "[" << i << "] analytic " << an << " fd " << fd;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(InjectLayers, GradientCheck, ::testing::Values(1, 3, 4, 7));

TEST(Gradient, StyleAffinesWhenEnabled) {
  using D = double;
  auto s = BasicGeneratorState<D>::toy();
  s.set_tune_style_affines(true);
  auto w = random_w(s, 21, LatentSpace::Wplus);
  auto wp = to_wplus(s, w);
  Tensor<D> r(3, 32, 32, 0.5);
  auto weights = s.effective();
  auto tr = forward(s, weights, wp);
  auto g = backward(s, weights, tr, r, GradientRequest{false, true, false});
  auto J = [&] { return weighted_sum(forward(s, s.effective(), wp).outputs.back(), r); };
  for (std::size_t layer : {0u, 5u, 7u}) {
    auto& d = s.delta().at(names::style_weight(layer)).values;
    const std::size_t i = 17;
    const D h = 1e-4, orig = d[i];
    d[i] = orig + h;
    const double jp = J();
    d[i] = orig - h;
    const double jm = J();
    d[i] = orig;
    EXPECT_LT(rel_err(g.theta.at(names::style_weight(layer)).values[i], (jp - jm) / (2 * h)), 1e-3);
  }
}

TEST(Generator, FloatAndDoubleAgree) {
  auto sf = GeneratorState::toy();
  auto sd = sf.cast<double>();
  auto w = random_w(sf, 31);
  auto a = synthesize(sf, w);
  auto b = synthesize(sd, w.cast<double>());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-4);
}

TEST(MaskAlgebra, RandomizedCasesHold) {
  auto rep = mask_algebra_check(GeneratorState::toy(), 20, 4);
  EXPECT_EQ(rep.cases, 20u);
  EXPECT_TRUE(rep.ok()) << rep.summary();
}
