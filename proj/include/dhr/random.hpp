#ifndef DHR_RANDOM_HPP
#define DHR_RANDOM_HPP

#include <cstdint>
#include <random>
#include <vector>

namespace dhr {

// Every seeded draw in the library goes through this engine so a seed fully
// determines a run on a given toolchain.
using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

template <class T>
std::vector<T> normal_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(dist(rng) * scale);
  return out;
}

template <class T>
std::vector<T> uniform_vector(Rng& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(dist(rng));
  return out;
}

}  // namespace dhr

#endif  // DHR_RANDOM_HPP
