#ifndef DHR_PERCEPTUAL_HPP
#define DHR_PERCEPTUAL_HPP

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "dhr/error.hpp"
#include "dhr/tensor.hpp"

namespace dhr {

template <class T>
struct PerceptualEvaluation {
  double scalar = 0;  // mean of map
  Grid<T> map;        // per-pixel distance at image resolution
};

// Pluggable perceptual distance. Implementations expose a spatial map (so
// losses can be masked) and the gradient of a weighted sum of that map with
// respect to the first image.
template <class T>
class BasicPerceptualOracle {
 public:
  virtual ~BasicPerceptualOracle() = default;
  virtual std::string name() const = 0;
  virtual PerceptualEvaluation<T> evaluate(const BasicImage<T>& a, const BasicImage<T>& b) const = 0;
  // d/da sum_p weights(p) * map(a, b)(p)
  virtual BasicImage<T> gradient(const BasicImage<T>& a, const BasicImage<T>& b, const Grid<T>& weights) const = 0;
};

using PerceptualOracle = BasicPerceptualOracle<float>;

namespace detail {

template <class T>
void require_same(const BasicImage<T>& a, const BasicImage<T>& b) {
  if (!a.same_shape(b)) throw ArgumentError("perceptual oracle: image shapes differ");
}

template <class T>
double grid_mean(const Grid<T>& g) {
  double s = 0;
  for (T v : g.values()) s += static_cast<double>(v);
  return g.empty() ? 0.0 : s / static_cast<double>(g.size());
}

}  // namespace detail

// Channel-mean squared error per pixel. Receptive field of one pixel, so
// masked losses built on it isolate regions exactly.
template <class T>
class PointwiseOracle final : public BasicPerceptualOracle<T> {
 public:
  std::string name() const override { return "pointwise"; }

  PerceptualEvaluation<T> evaluate(const BasicImage<T>& a, const BasicImage<T>& b) const override {
    detail::require_same(a, b);
    PerceptualEvaluation<T> out{0, Grid<T>(a.height(), a.width())};
    const std::size_t plane = a.plane_size(), ch = a.channels();
    for (std::size_t p = 0; p < plane; ++p) {
      T s = 0;
      for (std::size_t c = 0; c < ch; ++c) {
        const T d = a[c * plane + p] - b[c * plane + p];
        s += d * d;
      }
      out.map[p] = s / static_cast<T>(ch);
    }
    out.scalar = detail::grid_mean(out.map);
    return out;
  }

  BasicImage<T> gradient(const BasicImage<T>& a, const BasicImage<T>& b, const Grid<T>& weights) const override {
    detail::require_same(a, b);
    BasicImage<T> g(a.height(), a.width());
    const std::size_t plane = a.plane_size(), ch = a.channels();
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t p = 0; p < plane; ++p)
        g[c * plane + p] = weights[p] * T(2) * (a[c * plane + p] - b[c * plane + p]) / static_cast<T>(ch);
    return g;
  }
};

// Desk stand-in for a learned perceptual metric. A low-pass pyramid of the
// two images is compared level by level; each level's map is the 3x3 local
// energy of the squared difference passed through e / (e + kappa), which
// saturates on content the other image cannot explain (the way deep-feature
// distances do). Level maps are upsampled to full resolution and averaged.
template <class T>
class PyramidOracle final : public BasicPerceptualOracle<T> {
 public:
  explicit PyramidOracle(std::size_t levels = 3, double kappa = 0.01) : levels_(levels), kappa_(kappa) {
    if (levels_ == 0) throw ArgumentError("pyramid oracle needs at least one level");
    if (!(kappa_ > 0)) throw ArgumentError("pyramid oracle kappa must be positive");
  }

  std::string name() const override { return "pyramid"; }
  std::size_t levels() const noexcept { return levels_; }
  double kappa() const noexcept { return kappa_; }

  PerceptualEvaluation<T> evaluate(const BasicImage<T>& a, const BasicImage<T>& b) const override {
    check(a, b);
    PerceptualEvaluation<T> out{0, Grid<T>(a.height(), a.width())};
    const T kappa = static_cast<T>(kappa_);
    const T inv_levels = T(1) / static_cast<T>(levels_);
    for (std::size_t k = 0; k < levels_; ++k) {
      const std::size_t f = std::size_t{1} << k;
      auto e = box3(sqdiff(pool(a, f), pool(b, f)));
      for (std::size_t y = 0; y < a.height(); ++y)
        for (std::size_t x = 0; x < a.width(); ++x) {
          const T ev = e(y / f, x / f);
          out.map(y, x) += inv_levels * ev / (ev + kappa);
        }
    }
    out.scalar = detail::grid_mean(out.map);
    return out;
  }

  BasicImage<T> gradient(const BasicImage<T>& a, const BasicImage<T>& b, const Grid<T>& weights) const override {
    check(a, b);
    if (weights.height() != a.height() || weights.width() != a.width())
      throw ArgumentError("pyramid oracle: weight grid shape mismatch");
    BasicImage<T> g(a.height(), a.width());
    const T kappa = static_cast<T>(kappa_);
    const T inv_levels = T(1) / static_cast<T>(levels_);
    const std::size_t ch = a.channels();
    for (std::size_t k = 0; k < levels_; ++k) {
      const std::size_t f = std::size_t{1} << k;
      const auto pa = pool(a, f), pb = pool(b, f);
      const auto e = box3(sqdiff(pa, pb));
      const std::size_t h = e.height(), w = e.width();
      Grid<T> ge(h, w);
      for (std::size_t y = 0; y < a.height(); ++y)
        for (std::size_t x = 0; x < a.width(); ++x) ge(y / f, x / f) += weights(y, x) * inv_levels;
      for (std::size_t i = 0; i < ge.size(); ++i) {
        const T den = e[i] + kappa;
        ge[i] *= kappa / (den * den);
      }
      const auto gs = box3_adjoint(ge);
      const T pool_scale = T(1) / static_cast<T>(f * f);
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t y = 0; y < a.height(); ++y)
          for (std::size_t x = 0; x < a.width(); ++x) {
            const std::size_t qy = y / f, qx = x / f;
            g(c, y, x) += gs(qy, qx) * T(2) * (pa(c, qy, qx) - pb(c, qy, qx)) / static_cast<T>(ch) * pool_scale;
          }
    }
    return g;
  }

 private:
  void check(const BasicImage<T>& a, const BasicImage<T>& b) const {
    detail::require_same(a, b);
    const std::size_t f = std::size_t{1} << (levels_ - 1);
    if (a.height() % f != 0 || a.width() % f != 0)
      throw ArgumentError("pyramid oracle: image size must be divisible by " + std::to_string(f));
  }

  static Tensor<T> pool(const Tensor<T>& x, std::size_t f) {
    if (f == 1) return x;
    Tensor<T> out(x.channels(), x.height() / f, x.width() / f);
    const T scale = T(1) / static_cast<T>(f * f);
    for (std::size_t c = 0; c < x.channels(); ++c)
      for (std::size_t y = 0; y < x.height(); ++y)
        for (std::size_t xx = 0; xx < x.width(); ++xx) out(c, y / f, xx / f) += x(c, y, xx) * scale;
    return out;
  }

  static Grid<T> sqdiff(const Tensor<T>& a, const Tensor<T>& b) {
    Grid<T> out(a.height(), a.width());
    const std::size_t plane = a.plane_size();
    for (std::size_t c = 0; c < a.channels(); ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const T d = a[c * plane + p] - b[c * plane + p];
        out[p] += d * d;
      }
    for (auto& v : out.values()) v /= static_cast<T>(a.channels());
    return out;
  }

  static std::size_t clampi(long v, std::size_t n) {
    if (v < 0) return 0;
    if (v >= static_cast<long>(n)) return n - 1;
    return static_cast<std::size_t>(v);
  }

  // 3x3 mean with replicated borders.
  static Grid<T> box3(const Grid<T>& s) {
    Grid<T> out(s.height(), s.width());
    const T ninth = T(1) / T(9);
    for (std::size_t y = 0; y < s.height(); ++y)
      for (std::size_t x = 0; x < s.width(); ++x) {
        T acc = 0;
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx)
            acc += s(clampi(static_cast<long>(y) + dy, s.height()), clampi(static_cast<long>(x) + dx, s.width()));
        out(y, x) = acc * ninth;
      }
    return out;
  }

  static Grid<T> box3_adjoint(const Grid<T>& g) {
    Grid<T> out(g.height(), g.width());
    const T ninth = T(1) / T(9);
    for (std::size_t y = 0; y < g.height(); ++y)
      for (std::size_t x = 0; x < g.width(); ++x)
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx)
            out(clampi(static_cast<long>(y) + dy, g.height()), clampi(static_cast<long>(x) + dx, g.width())) +=
                g(y, x) * ninth;
    return out;
  }

  std::size_t levels_;
  double kappa_;
};

template <class T>
std::shared_ptr<const BasicPerceptualOracle<T>> make_oracle(const std::string& name) {
  if (name == "pyramid") return std::make_shared<PyramidOracle<T>>();
  if (name == "pointwise") return std::make_shared<PointwiseOracle<T>>();
  // "lpips" is a declared slot for a network-backed metric; not available hermetically.
  throw ConfigurationError("unknown perceptual oracle '" + name + "'");
}

}  // namespace dhr

#endif  // DHR_PERCEPTUAL_HPP
