#ifndef DHR_SELFCHECK_HPP
#define DHR_SELFCHECK_HPP

// Randomized structural checks run by `dhr selfcheck` and the acceptance suite.

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dhr/generator.hpp"
#include "dhr/random.hpp"
#include "dhr/refine.hpp"
#include "dhr/toy.hpp"

namespace dhr {

struct MaskAlgebraReport {
  std::size_t cases = 0;
  std::size_t all_ones_mismatches = 0;  // m = 1 did not reproduce the base output
  std::size_t slice_mismatches = 0;     // f' differs from f outside m, or from f_l inside
  std::vector<std::string> notes;

  bool ok() const { return cases > 0 && all_ones_mismatches == 0 && slice_mismatches == 0; }

  std::string summary() const {
    std::ostringstream os;
    os << cases << " cases, " << all_ones_mismatches << " all-ones mismatches, " << slice_mismatches
       << " blended-slice mismatches\n";
    for (const auto& n : notes) os << "  " << n << '\n';
    return os.str();
  }
};

// Each case draws a latent, a nonzero weight deviation, an inject layer, a
// feature and a mask, then checks both blending identities bit-exactly.
inline MaskAlgebraReport mask_algebra_check(const GeneratorState& base, std::size_t cases = 100,
                                            std::uint64_t seed = 0) {
  MaskAlgebraReport rep;
  std::vector<std::size_t> layers;
  for (std::size_t l = 0; l < base.n_layers(); ++l) {
    try {
      auto probe = base.fresh();
      probe.set_inject_layer(l);
      layers.push_back(l);
    } catch (const ConfigurationError&) {
    }
  }
  if (layers.empty()) {
    rep.notes.push_back("generator has no valid inject layer");
    return rep;
  }
  auto rng = make_rng(seed);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t k = 0; k < cases; ++k) {
    auto state = base.fresh();
    state.set_inject_layer(layers[std::uniform_int_distribution<std::size_t>(0, layers.size() - 1)(rng)]);
    auto delta = state.delta();
    for (auto& [name, a] : delta) a.values = normal_vector<float>(rng, a.values.size(), 0.01);
    state.set_delta(std::move(delta));
    auto w = LatentCode::vector(LatentSpace::W, normal_vector<float>(rng, state.d_latent()));
    const std::size_t r = state.feature_resolution();
    FeatureMap f{state.inject_layer(), Tensor<float>(state.feature_channels(), r, r)};
    const auto fv = normal_vector<float>(rng, f.values.size());
    std::copy(fv.begin(), fv.end(), f.values.values().begin());
    DomainMask m(r, r);
    for (std::size_t i = 0; i < m.size(); ++i) m.set(i, coin(rng));
    ++rep.cases;

    if (synthesize_with_injection(state, w, f, DomainMask(r, r, 1)) != synthesize(state, w)) {
      ++rep.all_ones_mismatches;
      rep.notes.push_back("case " + std::to_string(k) + ": all-ones mask changed the output");
    }
    const auto blended = blended_feature(state, w, f, m);
    const auto tapped = tap_feature(state, w).values;
    bool same = true;
    for (std::size_t c = 0; c < f.values.channels(); ++c)
      for (std::size_t i = 0; i < m.size(); ++i) {
        const auto y = i / r, x = i % r;
        const float expect = m[i] ? tapped(c, y, x) : f.values(c, y, x);
        if (blended(c, y, x) != expect) same = false;
      }
    if (!same) {
      ++rep.slice_mismatches;
      rep.notes.push_back("case " + std::to_string(k) + ": blended feature slice differs");
    }
  }
  return rep;
}

// Gradient routing on a patched toy instance. lambda = 0 makes the
// perturbation checks exact for any oracle.
inline GradientSplitReport toy_gradient_split_check(const GeneratorState& state, std::uint64_t seed = 0,
                                                    std::size_t fd_coordinates = 60, double lambda = 0.0) {
  auto inst = make_toy_instance(state, seed);
  auto rng = make_rng(seed + 1);
  auto w = inst.w_true;
  for (auto& v : w.values()) v += static_cast<float>(std::normal_distribution<>(0, 0.15)(rng));
  RefineConfig cfg;
  cfg.lambda = lambda;
  auto session = make_session(state, w.lifted(state.n_layers()), inst.target, inst.patch, cfg,
                              std::make_shared<PyramidOracle<float>>());
  return gradient_split_check(session, fd_coordinates, seed);
}

}  // namespace dhr

#endif  // DHR_SELFCHECK_HPP
