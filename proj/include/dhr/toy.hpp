#ifndef DHR_TOY_HPP
#define DHR_TOY_HPP

// Synthetic instances for the toy generator: generator-reachable images with
// a pasted out-of-distribution noise square, and two-point edit directions.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dhr/generator.hpp"
#include "dhr/random.hpp"

namespace dhr {

struct ToyInstance {
  LatentCode w_true;      // W code that generated the clean image
  Image clean;            // synthesize(state, w_true)
  Image target;           // clean with the noise patch pasted in
  DomainMask patch;       // 0 inside the pasted square
  std::size_t patch_y = 0, patch_x = 0, patch_side = 0;
};

inline LatentCode sample_w(const GeneratorState& state, Rng& rng) {
  return map_latent(state, LatentCode::vector(LatentSpace::Z, normal_vector<float>(rng, state.d_latent())));
}

// patch_fraction of the image area (rounded to a square side) is replaced by
// uniform noise in [-1, 1]. patch_fraction = 0 leaves the clean image.
inline ToyInstance make_toy_instance(const GeneratorState& state, std::uint64_t seed, double patch_fraction = 0.2) {
  auto rng = make_rng(seed);
  ToyInstance inst;
  inst.w_true = sample_w(state, rng);
  inst.clean = synthesize(state, inst.w_true);
  inst.target = inst.clean;
  const std::size_t r = state.output_resolution();
  inst.patch = DomainMask(r, r);
  inst.patch_side = static_cast<std::size_t>(std::lround(std::sqrt(patch_fraction) * static_cast<double>(r)));
  if (inst.patch_side == 0) return inst;
  std::uniform_int_distribution<std::size_t> pos(0, r - inst.patch_side);
  inst.patch_y = pos(rng);
  inst.patch_x = pos(rng);
  std::uniform_real_distribution<double> noise(-1.0, 1.0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = inst.patch_y; y < inst.patch_y + inst.patch_side; ++y)
      for (std::size_t x = inst.patch_x; x < inst.patch_x + inst.patch_side; ++x)
        inst.target(c, y, x) = static_cast<float>(noise(rng));
  for (std::size_t y = inst.patch_y; y < inst.patch_y + inst.patch_side; ++y)
    for (std::size_t x = inst.patch_x; x < inst.patch_x + inst.patch_side; ++x) inst.patch.set(y, x, false);
  return inst;
}

// W-space direction between two mapped samples, rescaled to unit norm.
struct ToyDirection {
  std::string name;
  std::vector<float> vector;
};

inline std::vector<ToyDirection> make_toy_directions(const GeneratorState& state, std::uint64_t seed,
                                                     std::size_t count = 5) {
  static const char* names[] = {"smile", "young", "exposure", "lipstick", "pose"};
  auto rng = make_rng(seed);
  std::vector<ToyDirection> out;
  for (std::size_t k = 0; k < count; ++k) {
    auto a = sample_w(state, rng), b = sample_w(state, rng);
    std::vector<float> d(state.d_latent());
    double norm = 0;
    for (std::size_t j = 0; j < d.size(); ++j) {
      d[j] = b.values()[j] - a.values()[j];
      norm += static_cast<double>(d[j]) * d[j];
    }
    norm = std::sqrt(norm);
    for (auto& v : d) v = static_cast<float>(v / norm);
    out.push_back({k < 5 ? names[k] : "dir" + std::to_string(k), std::move(d)});
  }
  return out;
}

}  // namespace dhr

#endif  // DHR_TOY_HPP
