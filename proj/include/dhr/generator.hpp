#ifndef DHR_GENERATOR_HPP
#define DHR_GENERATOR_HPP

// Layered style-based generator: latent -> per-layer styles -> staged
// synthesis, with a feature tap and a masked feature injection point.
//
// The toy architecture used throughout the tests:
//   layer 0        3x3 modulated conv on a learned 4x4 constant
//   layers 1..3    nearest x2 upsample + 3x3 modulated conv (8, 16, 32)
//   layers 4..6    3x3 modulated conv at 32x32
//   layer 7        styled 1x1 projection to RGB (no nonlinearity)
// Every layer consumes one W+ row. Conv layers use tanh so the whole map is
// smooth, which keeps finite-difference checks clean.

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dhr/error.hpp"
#include "dhr/latent.hpp"
#include "dhr/random.hpp"
#include "dhr/tensor.hpp"

namespace dhr {

enum class MappingKind { mlp, identity };

struct ToyArchitecture {
  std::size_t d_latent = 64;
  std::size_t channels = 16;
  std::size_t base_resolution = 4;
  // One entry per style-consuming layer; true = x2 upsample before the conv.
  std::vector<bool> upsample = {false, true, true, true, false, false, false, false};
  MappingKind mapping = MappingKind::mlp;
  std::uint64_t seed = 7;
  std::size_t default_inject_layer = 7;

  std::size_t n_layers() const noexcept { return upsample.size(); }
  bool is_rgb_layer(std::size_t i) const noexcept { return i + 1 == n_layers(); }
  std::size_t kernel(std::size_t i) const noexcept { return is_rgb_layer(i) ? 1 : 3; }
  std::size_t out_channels(std::size_t i) const noexcept { return is_rgb_layer(i) ? 3 : channels; }

  // Spatial size of each layer's output.
  std::vector<std::size_t> layer_resolutions() const {
    std::vector<std::size_t> res;
    std::size_t r = base_resolution;
    for (bool up : upsample) {
      if (up) r *= 2;
      res.push_back(r);
    }
    return res;
  }
  std::size_t output_resolution() const { return layer_resolutions().back(); }

  // Resolution of the feature entering layer l (the output of the first l layers).
  std::size_t feature_resolution(std::size_t l) const {
    if (l == 0) return base_resolution;
    return layer_resolutions().at(l - 1);
  }

  void validate() const {
    if (n_layers() < 2) throw ConfigurationError("generator needs at least two layers");
    if (d_latent == 0 || channels == 0 || base_resolution == 0) throw ConfigurationError("empty generator dimension");
    if (default_inject_layer >= n_layers()) throw ConfigurationError("inject layer out of range");
  }

  bool operator==(const ToyArchitecture&) const = default;
};

template <class T>
struct ParamArray {
  std::vector<std::size_t> shape;
  std::vector<T> values;

  bool operator==(const ParamArray&) const = default;
};

template <class T>
using ParameterSet = std::map<std::string, ParamArray<T>>;

namespace names {
inline std::string conv_weight(std::size_t i) { return "layer" + std::to_string(i) + ".conv.weight"; }
inline std::string conv_bias(std::size_t i) { return "layer" + std::to_string(i) + ".conv.bias"; }
inline std::string style_weight(std::size_t i) { return "layer" + std::to_string(i) + ".style.weight"; }
inline std::string style_bias(std::size_t i) { return "layer" + std::to_string(i) + ".style.bias"; }
inline const std::string constant = "const";
inline const std::string map0_weight = "mapping.0.weight";
inline const std::string map0_bias = "mapping.0.bias";
inline const std::string map1_weight = "mapping.1.weight";
inline const std::string map1_bias = "mapping.1.bias";
}  // namespace names

template <class T>
ParameterSet<T> init_toy_parameters(const ToyArchitecture& arch) {
  arch.validate();
  auto rng = make_rng(arch.seed);
  const std::size_t d = arch.d_latent, c = arch.channels;
  ParameterSet<T> p;
  p[names::constant] = {{c, arch.base_resolution, arch.base_resolution},
                        normal_vector<T>(rng, c * arch.base_resolution * arch.base_resolution)};
  for (std::size_t i = 0; i < arch.n_layers(); ++i) {
    const std::size_t cin = c, cout = arch.out_channels(i), k = arch.kernel(i);
    p[names::style_weight(i)] = {{cin, d}, normal_vector<T>(rng, cin * d, 0.5 / std::sqrt(double(d)))};
    p[names::style_bias(i)] = {{cin}, std::vector<T>(cin, T(1))};
    const double gain = arch.is_rgb_layer(i) ? 0.5 / std::sqrt(double(cin)) : 1.6 / std::sqrt(double(cin * k * k));
    p[names::conv_weight(i)] = {{cout, cin, k, k}, normal_vector<T>(rng, cout * cin * k * k, gain)};
    p[names::conv_bias(i)] = {{cout}, std::vector<T>(cout, T(0))};
  }
  p[names::map0_weight] = {{d, d}, normal_vector<T>(rng, d * d, 1.0 / std::sqrt(double(d)))};
  p[names::map0_bias] = {{d}, std::vector<T>(d, T(0))};
  p[names::map1_weight] = {{d, d}, normal_vector<T>(rng, d * d, 1.0 / std::sqrt(double(d)))};
  p[names::map1_bias] = {{d}, std::vector<T>(d, T(0))};
  return p;
}

// Intermediate activation at a given layer boundary, C x H x W.
template <class T>
struct BasicFeatureMap {
  std::size_t layer = 0;
  Tensor<T> values;

  template <class U>
  BasicFeatureMap<U> cast() const {
    return {layer, values.template cast<U>()};
  }
  bool operator==(const BasicFeatureMap&) const = default;
};

using FeatureMap = BasicFeatureMap<float>;

// Base weights (shared, immutable) plus a trainable deviation owned by one
// refinement session at a time. Effective weights are base + delta.
template <class T>
class BasicGeneratorState {
 public:
  BasicGeneratorState(std::shared_ptr<const ToyArchitecture> arch, std::shared_ptr<const ParameterSet<T>> base,
                      std::size_t inject_layer, bool tune_style_affines = false)
      : arch_(std::move(arch)), base_(std::move(base)), tune_style_affines_(tune_style_affines) {
    arch_->validate();
    check_base();
    set_inject_layer(inject_layer);
    reset_delta();
  }

  static BasicGeneratorState toy(const ToyArchitecture& arch = {}) {
    auto a = std::make_shared<const ToyArchitecture>(arch);
    auto p = std::make_shared<const ParameterSet<T>>(init_toy_parameters<T>(arch));
    return BasicGeneratorState(a, p, arch.default_inject_layer);
  }

  const ToyArchitecture& arch() const noexcept { return *arch_; }
  std::shared_ptr<const ToyArchitecture> arch_ptr() const noexcept { return arch_; }
  const ParameterSet<T>& base() const noexcept { return *base_; }
  std::shared_ptr<const ParameterSet<T>> base_ptr() const noexcept { return base_; }
  const ParameterSet<T>& delta() const noexcept { return delta_; }
  ParameterSet<T>& delta() noexcept { return delta_; }

  std::size_t n_layers() const noexcept { return arch_->n_layers(); }
  std::size_t d_latent() const noexcept { return arch_->d_latent; }
  std::vector<std::size_t> layer_resolutions() const { return arch_->layer_resolutions(); }
  std::size_t output_resolution() const { return arch_->output_resolution(); }
  std::size_t inject_layer() const noexcept { return inject_layer_; }
  std::size_t feature_resolution() const { return arch_->feature_resolution(inject_layer_); }
  std::size_t feature_channels() const noexcept { return arch_->channels; }
  bool tune_style_affines() const noexcept { return tune_style_affines_; }

  void set_inject_layer(std::size_t l) {
    if (l >= n_layers()) throw ConfigurationError("inject layer " + std::to_string(l) + " out of range");
    if (output_resolution() % arch_->feature_resolution(l) != 0)
      throw ConfigurationError("inject layer resolution must divide the output resolution");
    inject_layer_ = l;
  }

  void set_tune_style_affines(bool on) {
    tune_style_affines_ = on;
    reset_delta();
  }

  std::vector<std::string> tunable_names() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n_layers(); ++i) {
      out.push_back(names::conv_weight(i));
      out.push_back(names::conv_bias(i));
      if (tune_style_affines_) {
        out.push_back(names::style_weight(i));
        out.push_back(names::style_bias(i));
      }
    }
    return out;
  }

  void reset_delta() {
    delta_.clear();
    for (const auto& n : tunable_names()) {
      const auto& b = base_->at(n);
      delta_[n] = {b.shape, std::vector<T>(b.values.size(), T(0))};
    }
  }

  void set_delta(ParameterSet<T> delta) {
    for (const auto& n : tunable_names()) {
      auto it = delta.find(n);
      if (it == delta.end() || it->second.shape != base_->at(n).shape)
        throw ConfigurationError("theta delta does not match generator array '" + n + "'");
    }
    if (delta.size() != tunable_names().size()) throw ConfigurationError("theta delta has unexpected arrays");
    delta_ = std::move(delta);
  }

  ParameterSet<T> effective() const {
    ParameterSet<T> out = *base_;
    for (const auto& [n, d] : delta_) {
      auto& v = out.at(n).values;
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += d.values[i];
    }
    return out;
  }

  bool delta_is_zero() const {
    for (const auto& [n, d] : delta_)
      for (T v : d.values)
        if (v != T(0)) return false;
    return true;
  }

  std::uint64_t delta_checksum() const { return hash_set(delta_); }
  std::uint64_t fingerprint() const { return hash_set(*base_); }

  // Same base, fresh zero deviation.
  BasicGeneratorState fresh() const { return BasicGeneratorState(arch_, base_, inject_layer_, tune_style_affines_); }

  template <class U>
  BasicGeneratorState<U> cast() const {
    auto conv = [](const ParameterSet<T>& s) {
      ParameterSet<U> o;
      for (const auto& [n, a] : s) o[n] = {a.shape, std::vector<U>(a.values.begin(), a.values.end())};
      return o;
    };
    BasicGeneratorState<U> out(arch_, std::make_shared<const ParameterSet<U>>(conv(*base_)), inject_layer_,
                               tune_style_affines_);
    out.set_delta(conv(delta_));
    return out;
  }

 private:
  static std::uint64_t hash_set(const ParameterSet<T>& s) {
    Fnv1a h;
    for (const auto& [n, a] : s) {
      h.update(n);
      h.update(std::span<const T>(a.values));
    }
    return h.digest();
  }

  void check_base() const {
    const std::size_t d = arch_->d_latent, c = arch_->channels;
    auto expect = [&](const std::string& n, std::vector<std::size_t> shape) {
      auto it = base_->find(n);
      if (it == base_->end()) throw ConfigurationError("generator weights missing '" + n + "'");
      if (it->second.shape != shape) throw ConfigurationError("generator array '" + n + "' has wrong shape");
      std::size_t count = 1;
      for (auto s : shape) count *= s;
      if (it->second.values.size() != count) throw ConfigurationError("generator array '" + n + "' has wrong size");
    };
    expect(names::constant, {c, arch_->base_resolution, arch_->base_resolution});
    for (std::size_t i = 0; i < n_layers(); ++i) {
      const std::size_t k = arch_->kernel(i);
      expect(names::style_weight(i), {c, d});
      expect(names::style_bias(i), {c});
      expect(names::conv_weight(i), {arch_->out_channels(i), c, k, k});
      expect(names::conv_bias(i), {arch_->out_channels(i)});
    }
    expect(names::map0_weight, {d, d});
    expect(names::map0_bias, {d});
    expect(names::map1_weight, {d, d});
    expect(names::map1_bias, {d});
  }

  std::shared_ptr<const ToyArchitecture> arch_;
  std::shared_ptr<const ParameterSet<T>> base_;
  ParameterSet<T> delta_;
  std::size_t inject_layer_ = 0;
  bool tune_style_affines_ = false;
};

using GeneratorState = BasicGeneratorState<float>;

// ---------------------------------------------------------------------------
// Kernels

namespace kernels {

// y[co] = bias[co] + sum_ci conv(x[ci], w[co, ci]) with zero padding k/2.
template <class T>
void conv2d(const Tensor<T>& x, std::span<const T> w, std::span<const T> bias, std::size_t cout, std::size_t k,
            Tensor<T>& y) {
  const std::size_t cin = x.channels(), h = x.height(), wd = x.width();
  const long p = static_cast<long>(k / 2);
  y = Tensor<T>(cout, h, wd);
  for (std::size_t co = 0; co < cout; ++co) {
    auto out = y.channel(co);
    std::fill(out.begin(), out.end(), bias[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      auto in = x.channel(ci);
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long dy = static_cast<long>(ky) - p;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long dx = static_cast<long>(kx) - p;
          const T wv = w[((co * cin + ci) * k + ky) * k + kx];
          const std::size_t y0 = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
          const std::size_t y1 = dy > 0 ? h - static_cast<std::size_t>(dy) : h;
          const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
          const std::size_t x1 = dx > 0 ? wd - static_cast<std::size_t>(dx) : wd;
          for (std::size_t yy = y0; yy < y1; ++yy) {
            T* orow = out.data() + yy * wd;
            const T* irow = in.data() + static_cast<std::size_t>(static_cast<long>(yy) + dy) * wd + dx;
            for (std::size_t xx = x0; xx < x1; ++xx) orow[xx] += wv * irow[xx];
          }
        }
      }
    }
  }
}

// Adjoint of conv2d. Accumulates into dw/db when they are non-empty; writes dx
// when it is non-null.
template <class T>
void conv2d_backward(const Tensor<T>& x, std::span<const T> w, const Tensor<T>& dy, std::size_t k, Tensor<T>* dx,
                     std::span<T> dw, std::span<T> db) {
  const std::size_t cin = x.channels(), cout = dy.channels(), h = x.height(), wd = x.width();
  const long p = static_cast<long>(k / 2);
  if (dx) *dx = Tensor<T>(cin, h, wd);
  for (std::size_t co = 0; co < cout; ++co) {
    auto g = dy.channel(co);
    if (!db.empty()) {
      T s = 0;
      for (T v : g) s += v;
      db[co] += s;
    }
    for (std::size_t ci = 0; ci < cin; ++ci) {
      auto in = x.channel(ci);
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long oy = static_cast<long>(ky) - p;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long ox = static_cast<long>(kx) - p;
          const std::size_t widx = ((co * cin + ci) * k + ky) * k + kx;
          const std::size_t y0 = oy < 0 ? static_cast<std::size_t>(-oy) : 0;
          const std::size_t y1 = oy > 0 ? h - static_cast<std::size_t>(oy) : h;
          const std::size_t x0 = ox < 0 ? static_cast<std::size_t>(-ox) : 0;
          const std::size_t x1 = ox > 0 ? wd - static_cast<std::size_t>(ox) : wd;
          T acc = 0;
          const T wv = w[widx];
          for (std::size_t yy = y0; yy < y1; ++yy) {
            const T* grow = g.data() + yy * wd;
            const std::size_t iy = static_cast<std::size_t>(static_cast<long>(yy) + oy);
            const T* irow = in.data() + iy * wd + ox;
            if (!dw.empty())
              for (std::size_t xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx];
            if (dx) {
              T* drow = dx->channel(ci).data() + iy * wd + ox;
              for (std::size_t xx = x0; xx < x1; ++xx) drow[xx] += wv * grow[xx];
            }
          }
          if (!dw.empty()) dw[widx] += acc;
        }
      }
    }
  }
}

template <class T>
Tensor<T> upsample2(const Tensor<T>& x) {
  Tensor<T> y(x.channels(), x.height() * 2, x.width() * 2);
  for (std::size_t c = 0; c < x.channels(); ++c)
    for (std::size_t yy = 0; yy < y.height(); ++yy)
      for (std::size_t xx = 0; xx < y.width(); ++xx) y(c, yy, xx) = x(c, yy / 2, xx / 2);
  return y;
}

template <class T>
Tensor<T> upsample2_backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.channels(), dy.height() / 2, dy.width() / 2);
  for (std::size_t c = 0; c < dy.channels(); ++c)
    for (std::size_t yy = 0; yy < dy.height(); ++yy)
      for (std::size_t xx = 0; xx < dy.width(); ++xx) dx(c, yy / 2, xx / 2) += dy(c, yy, xx);
  return dx;
}

// f' = f_l * m + f * (1 - m), mask broadcast over channels.
template <class T>
Tensor<T> blend(const Tensor<T>& tapped, const Tensor<T>& feature, const DomainMask& mask) {
  if (!tapped.same_shape(feature)) throw ConfigurationError("blend: feature shape mismatch");
  if (mask.height() != feature.height() || mask.width() != feature.width())
    throw ConfigurationError("blend: mask shape mismatch");
  Tensor<T> out(feature.channels(), feature.height(), feature.width());
  const std::size_t plane = feature.plane_size();
  for (std::size_t c = 0; c < feature.channels(); ++c)
    for (std::size_t i = 0; i < plane; ++i)
      out[c * plane + i] = mask[i] ? tapped[c * plane + i] : feature[c * plane + i];
  return out;
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Forward / backward

template <class T>
struct ForwardTrace {
  std::vector<T> wplus;                 // n_layers x d_latent
  std::vector<Tensor<T>> inputs;        // per layer, after upsample/blend, before modulation
  std::vector<std::vector<T>> styles;   // per layer, per input channel
  std::vector<Tensor<T>> outputs;       // per layer, after activation
  Tensor<T> tapped;                     // output of the first l layers (f_l)
  Tensor<T> blended;                    // f' when injection was active
  bool injected = false;
  std::size_t inject_layer = 0;

  BasicImage<T> image() const { return BasicImage<T>(outputs.back()); }
};

template <class T>
struct InjectionInput {
  const Tensor<T>* feature = nullptr;
  const DomainMask* mask = nullptr;
};

// Maps a latent of any space to W+ rows.
template <class T>
std::vector<T> to_wplus(const BasicGeneratorState<T>& state, const BasicLatentCode<T>& w) {
  const std::size_t d = state.d_latent(), n = state.n_layers();
  if (w.dim() != d) throw ConfigurationError("latent dimension " + std::to_string(w.dim()) + " != generator " +
                                             std::to_string(d));
  std::vector<T> row;
  switch (w.space()) {
    case LatentSpace::Wplus: {
      if (w.rows() != n) throw ConfigurationError("W+ code has " + std::to_string(w.rows()) + " rows, generator has " +
                                                  std::to_string(n) + " layers");
      return std::vector<T>(w.values().begin(), w.values().end());
    }
    case LatentSpace::W: row.assign(w.values().begin(), w.values().end()); break;
    case LatentSpace::Z: {
      if (state.arch().mapping == MappingKind::identity) {
        row.assign(w.values().begin(), w.values().end());
        break;
      }
      const auto& p = state.base();
      const auto& a0 = p.at(names::map0_weight).values;
      const auto& b0 = p.at(names::map0_bias).values;
      const auto& a1 = p.at(names::map1_weight).values;
      const auto& b1 = p.at(names::map1_bias).values;
      std::vector<T> hidden(d);
      for (std::size_t i = 0; i < d; ++i) {
        T s = b0[i];
        for (std::size_t j = 0; j < d; ++j) s += a0[i * d + j] * w.values()[j];
        hidden[i] = std::tanh(s);
      }
      row.resize(d);
      for (std::size_t i = 0; i < d; ++i) {
        T s = b1[i];
        for (std::size_t j = 0; j < d; ++j) s += a1[i * d + j] * hidden[j];
        row[i] = s;
      }
      break;
    }
  }
  std::vector<T> out;
  out.reserve(n * d);
  for (std::size_t r = 0; r < n; ++r) out.insert(out.end(), row.begin(), row.end());
  return out;
}

// Runs layers [0, stop_layer). With stop_layer == n_layers the trace holds the image.
template <class T>
ForwardTrace<T> forward(const BasicGeneratorState<T>& state, const ParameterSet<T>& weights, std::vector<T> wplus,
                        InjectionInput<T> injection = {}, std::size_t stop_layer = static_cast<std::size_t>(-1)) {
  const auto& arch = state.arch();
  const std::size_t n = arch.n_layers(), d = arch.d_latent, l = state.inject_layer();
  if (wplus.size() != n * d) throw ConfigurationError("W+ buffer size mismatch");
  if (stop_layer > n) stop_layer = n;
  ForwardTrace<T> tr;
  tr.wplus = std::move(wplus);
  tr.inject_layer = l;
  const auto& c = weights.at(names::constant);
  Tensor<T> x(arch.channels, arch.base_resolution, arch.base_resolution);
  std::copy(c.values.begin(), c.values.end(), x.values().begin());

  for (std::size_t i = 0; i < stop_layer; ++i) {
    if (i == l) {
      tr.tapped = x;
      if (injection.feature) {
        x = kernels::blend(x, *injection.feature, *injection.mask);
        tr.blended = x;
        tr.injected = true;
      }
    }
    if (arch.upsample[i]) x = kernels::upsample2(x);
    // Style s = A w_i + b, one scale per input channel.
    const auto& sa = weights.at(names::style_weight(i)).values;
    const auto& sb = weights.at(names::style_bias(i)).values;
    const std::size_t cin = x.channels();
    std::vector<T> s(cin);
    const T* wi = tr.wplus.data() + i * d;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      T acc = sb[ci];
      for (std::size_t j = 0; j < d; ++j) acc += sa[ci * d + j] * wi[j];
      s[ci] = acc;
    }
    Tensor<T> xm = x;
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (auto& v : xm.channel(ci)) v *= s[ci];
    Tensor<T> y;
    kernels::conv2d<T>(xm, weights.at(names::conv_weight(i)).values, weights.at(names::conv_bias(i)).values,
                       arch.out_channels(i), arch.kernel(i), y);
    if (!arch.is_rgb_layer(i))
      for (auto& v : y.values()) v = std::tanh(v);
    tr.inputs.push_back(std::move(x));
    tr.styles.push_back(std::move(s));
    tr.outputs.push_back(y);
    x = std::move(y);
  }
  if (stop_layer == l) tr.tapped = x;
  return tr;
}

template <class T>
struct GeneratorGradients {
  std::vector<T> wplus;     // empty unless requested
  ParameterSet<T> theta;    // keyed by tunable name; empty unless requested
  Tensor<T> feature;        // empty unless requested and injection active
};

struct GradientRequest {
  bool latent = false;
  bool theta = false;
  bool feature = false;
};

// Backpropagates d(image) through a trace produced by forward(). The
// injection mask routes dL/df' into the feature (1 - m) and into f_l (m).
template <class T>
GeneratorGradients<T> backward(const BasicGeneratorState<T>& state, const ParameterSet<T>& weights,
                               const ForwardTrace<T>& tr, const Tensor<T>& d_image, GradientRequest req,
                               const DomainMask* inject_mask = nullptr) {
  const auto& arch = state.arch();
  const std::size_t n = arch.n_layers(), d = arch.d_latent;
  if (tr.outputs.size() != n) throw InternalError("backward needs a full forward trace");
  if (!d_image.same_shape(tr.outputs.back())) throw InternalError("backward: gradient shape mismatch");
  if (req.feature && !tr.injected) throw InternalError("feature gradient requested without injection");

  GeneratorGradients<T> g;
  if (req.latent) g.wplus.assign(n * d, T(0));
  if (req.theta)
    for (const auto& name : state.tunable_names()) {
      g.theta[name] = {weights.at(name).shape, std::vector<T>(weights.at(name).values.size(), T(0))};
    }
  const bool need_below_injection = req.latent || req.theta;

  Tensor<T> dout = d_image;
  for (std::size_t ii = n; ii-- > 0;) {
    const std::size_t i = ii;
    const Tensor<T>& x = tr.inputs[i];
    const auto& s = tr.styles[i];
    const Tensor<T>& out = tr.outputs[i];
    Tensor<T> dy = dout;
    if (!arch.is_rgb_layer(i))
      for (std::size_t k = 0; k < dy.size(); ++k) dy[k] *= T(1) - out[k] * out[k];

    Tensor<T> xm = x;
    for (std::size_t ci = 0; ci < x.channels(); ++ci)
      for (auto& v : xm.channel(ci)) v *= s[ci];

    std::span<T> dw, db;
    if (req.theta) {
      dw = g.theta.at(names::conv_weight(i)).values;
      db = g.theta.at(names::conv_bias(i)).values;
    }
    Tensor<T> dxm;
    kernels::conv2d_backward<T>(xm, weights.at(names::conv_weight(i)).values, dy, arch.kernel(i), &dxm, dw, db);

    const std::size_t cin = x.channels();
    std::vector<T> ds(cin, T(0));
    for (std::size_t ci = 0; ci < cin; ++ci) {
      auto a = dxm.channel(ci);
      auto b = x.channel(ci);
      T acc = 0;
      for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
      ds[ci] = acc;
    }
    const auto& sa = weights.at(names::style_weight(i)).values;
    const T* wi = tr.wplus.data() + i * d;
    if (req.latent) {
      T* gw = g.wplus.data() + i * d;
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t j = 0; j < d; ++j) gw[j] += sa[ci * d + j] * ds[ci];
    }
    if (req.theta && state.tune_style_affines()) {
      auto& gsa = g.theta.at(names::style_weight(i)).values;
      auto& gsb = g.theta.at(names::style_bias(i)).values;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        gsb[ci] += ds[ci];
        for (std::size_t j = 0; j < d; ++j) gsa[ci * d + j] += ds[ci] * wi[j];
      }
    }
    Tensor<T> dx = std::move(dxm);
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (auto& v : dx.channel(ci)) v *= s[ci];
    if (arch.upsample[i]) dx = kernels::upsample2_backward(dx);

    if (tr.injected && i == tr.inject_layer) {
      if (!inject_mask) throw InternalError("backward: injection mask required");
      const std::size_t plane = dx.plane_size();
      if (req.feature) {
        g.feature = Tensor<T>(dx.channels(), dx.height(), dx.width());
        for (std::size_t c = 0; c < dx.channels(); ++c)
          for (std::size_t k = 0; k < plane; ++k)
            if (!(*inject_mask)[k]) g.feature[c * plane + k] = dx[c * plane + k];
      }
      if (!need_below_injection) break;
      for (std::size_t c = 0; c < dx.channels(); ++c)
        for (std::size_t k = 0; k < plane; ++k)
          if (!(*inject_mask)[k]) dx[c * plane + k] = T(0);
    }
    if (i == 0) break;
    dout = std::move(dx);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Public operations

template <class T>
BasicImage<T> synthesize(const BasicGeneratorState<T>& state, const BasicLatentCode<T>& w) {
  return forward(state, state.effective(), to_wplus(state, w)).image();
}

template <class T>
void check_injection(const BasicGeneratorState<T>& state, const BasicFeatureMap<T>& f, const DomainMask& m_feat) {
  const std::size_t r = state.feature_resolution();
  if (f.layer != state.inject_layer())
    throw ConfigurationError("feature layer " + std::to_string(f.layer) + " != inject layer " +
                             std::to_string(state.inject_layer()));
  if (f.values.channels() != state.feature_channels() || f.values.height() != r || f.values.width() != r)
    throw ConfigurationError("feature shape does not match the generator at the inject layer");
  if (m_feat.height() != r || m_feat.width() != r) throw ConfigurationError("feature mask resolution mismatch");
}

template <class T>
BasicImage<T> synthesize_with_injection(const BasicGeneratorState<T>& state, const BasicLatentCode<T>& w,
                                        const BasicFeatureMap<T>& f, const DomainMask& m_feat) {
  check_injection(state, f, m_feat);
  return forward(state, state.effective(), to_wplus(state, w), InjectionInput<T>{&f.values, &m_feat}).image();
}

// f_l = output of the first l layers, as a detached copy.
template <class T>
BasicFeatureMap<T> tap_feature(const BasicGeneratorState<T>& state, const BasicLatentCode<T>& w) {
  auto tr = forward(state, state.effective(), to_wplus(state, w), {}, state.inject_layer());
  return {state.inject_layer(), tr.tapped};
}

// Blended feature f' at the inject layer, as seen by the remaining layers.
template <class T>
Tensor<T> blended_feature(const BasicGeneratorState<T>& state, const BasicLatentCode<T>& w,
                          const BasicFeatureMap<T>& f, const DomainMask& m_feat) {
  check_injection(state, f, m_feat);
  auto tapped = tap_feature(state, w);
  return kernels::blend(tapped.values, f.values, m_feat);
}

// Empirical mean of n mapped standard-normal Z samples, as a W code.
template <class T>
BasicLatentCode<T> mean_latent(const BasicGeneratorState<T>& state, std::size_t n_samples, std::uint64_t seed) {
  if (n_samples == 0) throw ArgumentError("mean_latent needs at least one sample");
  const std::size_t d = state.d_latent();
  auto rng = make_rng(seed);
  std::vector<double> acc(d, 0.0);
  for (std::size_t s = 0; s < n_samples; ++s) {
    auto z = BasicLatentCode<T>::vector(LatentSpace::Z, normal_vector<T>(rng, d));
    auto w = to_wplus(state, z);
    for (std::size_t j = 0; j < d; ++j) acc[j] += static_cast<double>(w[j]);
  }
  std::vector<T> mean(d);
  for (std::size_t j = 0; j < d; ++j) mean[j] = static_cast<T>(acc[j] / static_cast<double>(n_samples));
  return BasicLatentCode<T>::vector(LatentSpace::W, std::move(mean));
}

// Maps one Z code to W.
template <class T>
BasicLatentCode<T> map_latent(const BasicGeneratorState<T>& state, const BasicLatentCode<T>& z) {
  if (z.space() != LatentSpace::Z) throw ArgumentError("map_latent expects a Z code");
  auto wp = to_wplus(state, z);
  wp.resize(state.d_latent());
  return BasicLatentCode<T>::vector(LatentSpace::W, std::move(wp));
}

// Adapter contract an external checkpoint (e.g. a StyleGAN2 loader) has to
// satisfy to be driven by the embedding, segmentation and refinement code.
template <class S>
concept SynthesisGenerator = requires(const S& s, const BasicLatentCode<float>& w, const BasicFeatureMap<float>& f,
                                      const DomainMask& m) {
  { s.n_layers() } -> std::convertible_to<std::size_t>;
  { s.layer_resolutions() } -> std::convertible_to<std::vector<std::size_t>>;
  { s.inject_layer() } -> std::convertible_to<std::size_t>;
  { synthesize(s, w) } -> std::convertible_to<Image>;
  { tap_feature(s, w) } -> std::convertible_to<FeatureMap>;
  { synthesize_with_injection(s, w, f, m) } -> std::convertible_to<Image>;
};

static_assert(SynthesisGenerator<GeneratorState>);

}  // namespace dhr

#endif  // DHR_GENERATOR_HPP
