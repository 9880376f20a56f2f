#ifndef DHR_REFINE_HPP
#define DHR_REFINE_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <type_traits>
#include <string>
#include <vector>

#include "dhr/adam.hpp"
#include "dhr/error.hpp"
#include "dhr/generator.hpp"
#include "dhr/perceptual.hpp"
#include "dhr/random.hpp"

namespace dhr {

enum class Region { in, out };

inline std::size_t region_size(const DomainMask& m, Region r) { return r == Region::in ? m.count_in() : m.count_out(); }

template <class T>
struct MaskedLoss {
  double value = 0;
  BasicImage<T> gradient;  // d value / d output; empty unless requested
};

// Per-pixel field: channel-mean squared error + lambda * oracle map, averaged
// over the pixels of one region.
template <class T>
MaskedLoss<T> masked_loss(const BasicImage<T>& output, const BasicImage<T>& target, const DomainMask& mask,
                          Region region, std::type_identity_t<const BasicPerceptualOracle<T>*> oracle, double lambda,
                          bool with_gradient = false) {
  if (!output.same_shape(target)) throw ArgumentError("masked_loss: image shapes differ");
  if (mask.height() != output.height() || mask.width() != output.width())
    throw ArgumentError("masked_loss: mask resolution differs from the image");
  const std::size_t n = region_size(mask, region);
  if (n == 0) throw DegenerateRegionError(std::string("masked_loss: ") + (region == Region::in ? "in" : "out") +
                                          "-domain region is empty");
  const std::size_t plane = output.plane_size(), ch = output.channels();
  Grid<T> mu(output.height(), output.width());
  const T inv_n = T(1) / static_cast<T>(n);
  for (std::size_t p = 0; p < plane; ++p) mu[p] = ((mask[p] != 0) == (region == Region::in)) ? inv_n : T(0);

  MaskedLoss<T> out;
  double acc = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    if (mu[p] == T(0)) continue;
    double s = 0;
    for (std::size_t c = 0; c < ch; ++c) {
      const double d = static_cast<double>(output[c * plane + p]) - static_cast<double>(target[c * plane + p]);
      s += d * d;
    }
    acc += s / static_cast<double>(ch);
  }
  const bool perceptual = lambda != 0 && oracle;
  if (perceptual) {
    auto ev = oracle->evaluate(output, target);
    for (std::size_t p = 0; p < plane; ++p)
      if (mu[p] != T(0)) acc += lambda * static_cast<double>(ev.map[p]);
  }
  out.value = acc / static_cast<double>(n);
  if (with_gradient) {
    out.gradient = BasicImage<T>(output.height(), output.width());
    const T scale = T(2) / static_cast<T>(ch);
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t p = 0; p < plane; ++p)
        out.gradient[c * plane + p] = mu[p] * scale * (output[c * plane + p] - target[c * plane + p]);
    if (perceptual) {
      auto g = oracle->gradient(output, target, mu);
      const T l = static_cast<T>(lambda);
      for (std::size_t i = 0; i < g.size(); ++i) out.gradient[i] += l * g[i];
    }
  }
  return out;
}

// Block vote: a coarse cell is in-domain only if strictly more than half of
// its pixels are; ties go out-of-domain.
inline DomainMask downsample_mask(const DomainMask& mask, std::size_t h, std::size_t w) {
  if (h == 0 || w == 0 || mask.height() % h != 0 || mask.width() % w != 0)
    throw ArgumentError("downsample_mask: target size must divide the mask size");
  const std::size_t fy = mask.height() / h, fx = mask.width() / w;
  DomainMask out(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t in = 0;
      for (std::size_t dy = 0; dy < fy; ++dy)
        for (std::size_t dx = 0; dx < fx; ++dx) in += mask(y * fy + dy, x * fx + dx);
      out.set(y, x, 2 * in > fy * fx);
    }
  return out;
}

struct RefineConfig {
  double lr_theta = 0.0015;
  double lr_feature = 0.09;
  std::size_t steps_feature = 100;
  std::size_t steps_theta = 50;
  double lambda = 1.0;

  void validate() const {
    if (!(lr_theta > 0) || !(lr_feature > 0)) throw ConfigurationError("refine learning rates must be positive");
    if (steps_theta > steps_feature) throw ConfigurationError("steps_theta must not exceed steps_feature");
    if (!(lambda >= 0) || !std::isfinite(lambda)) throw ConfigurationError("lambda must be finite and non-negative");
  }
};

template <class T>
struct BasicRefineSession {
  BasicGeneratorState<T> state;  // owns theta_delta
  BasicLatentCode<T> w;          // frozen
  BasicFeatureMap<T> feature;    // trainable, starts at the tapped feature
  DomainMask mask_image;
  DomainMask mask_feat;
  BasicImage<T> target;
  RefineConfig config;
  std::shared_ptr<const BasicPerceptualOracle<T>> oracle;
};

using RefineSession = BasicRefineSession<float>;

// Binds a fresh copy of the generator deviation to one image.
template <class T>
BasicRefineSession<T> make_session(const BasicGeneratorState<T>& state, const BasicLatentCode<T>& w,
                                   const BasicImage<T>& target, const DomainMask& mask_image, RefineConfig config,
                                   std::type_identity_t<std::shared_ptr<const BasicPerceptualOracle<T>>> oracle) {
  config.validate();
  const std::size_t r = state.output_resolution();
  if (target.height() != r || target.width() != r) throw ArgumentError("target resolution differs from the generator");
  if (mask_image.height() != r || mask_image.width() != r) throw ArgumentError("mask resolution differs from the image");
  BasicRefineSession<T> s{state, w, {}, mask_image, {}, target, config, std::move(oracle)};
  to_wplus(s.state, w);  // validates the latent against the generator
  s.feature = tap_feature(s.state, w);
  const std::size_t fr = s.state.feature_resolution();
  s.mask_feat = downsample_mask(mask_image, fr, fr);
  return s;
}

struct RefineStep {
  std::optional<double> loss_in;   // absent when the region is empty
  std::optional<double> loss_out;
};

template <class T>
struct BasicRefineResult {
  BasicGeneratorState<T> state;
  BasicFeatureMap<T> feature;
  std::vector<RefineStep> history;  // losses before each update
  RefineStep final_losses;          // losses of the returned (state, feature)
  BasicImage<T> image;              // output of the returned (state, feature)
};

using RefineResult = BasicRefineResult<float>;

template <class T>
struct BranchGradients {
  BasicImage<T> image;
  RefineStep losses;
  Tensor<T> feature;      // from L_out; empty if that branch is skipped
  ParameterSet<T> theta;  // from L_in; empty if that branch is skipped
};

// One shared forward pass, then L_out backpropagated into the feature only
// and L_in into the weights only.
template <class T>
BranchGradients<T> branch_gradients(const BasicRefineSession<T>& s, bool want_feature, bool want_theta,
                                    std::size_t step = 0) {
  const auto weights = s.state.effective();
  const auto tr = forward(s.state, weights, to_wplus(s.state, s.w), InjectionInput<T>{&s.feature.values, &s.mask_feat});
  BranchGradients<T> g;
  g.image = tr.image();
  const bool has_in = s.mask_image.count_in() > 0, has_out = s.mask_image.count_out() > 0;
  const auto* oracle = s.oracle.get();
  if (has_out) {
    auto l = masked_loss(g.image, s.target, s.mask_image, Region::out, oracle, s.config.lambda, want_feature);
    if (!std::isfinite(l.value)) throw NonFiniteLossError(step, "feature", l.value);
    g.losses.loss_out = l.value;
    if (want_feature) g.feature = backward(s.state, weights, tr, l.gradient, GradientRequest{.feature = true}, &s.mask_feat).feature;
  }
  if (has_in) {
    auto l = masked_loss(g.image, s.target, s.mask_image, Region::in, oracle, s.config.lambda, want_theta);
    if (!std::isfinite(l.value)) throw NonFiniteLossError(step, "weight", l.value);
    g.losses.loss_in = l.value;
    if (want_theta) g.theta = backward(s.state, weights, tr, l.gradient, GradientRequest{.theta = true}, &s.mask_feat).theta;
  }
  return g;
}

template <class T>
BasicRefineResult<T> refine(BasicRefineSession<T> s) {
  s.config.validate();
  check_injection(s.state, s.feature, s.mask_feat);
  const bool has_in = s.mask_image.count_in() > 0, has_out = s.mask_image.count_out() > 0;
  Adam<T> feature_opt(s.feature.values.size(), AdamConfig{s.config.lr_feature});
  std::map<std::string, Adam<T>> theta_opt;
  for (const auto& [name, a] : s.state.delta()) theta_opt.emplace(name, Adam<T>(a.values.size(), AdamConfig{s.config.lr_theta}));

  BasicRefineResult<T> res{s.state, s.feature, {}, {}, {}};
  res.history.reserve(s.config.steps_feature);
  for (std::size_t step = 0; step < s.config.steps_feature; ++step) {
    const bool do_theta = has_in && step < s.config.steps_theta;
    auto g = branch_gradients(s, has_out, do_theta, step);
    res.history.push_back(g.losses);
    if (has_out) feature_opt.step(s.feature.values.values(), std::span<const T>(g.feature.values()));
    if (do_theta)
      for (auto& [name, a] : s.state.delta()) theta_opt.at(name).step(a.values, g.theta.at(name).values);
  }
  auto last = branch_gradients(s, false, false, s.config.steps_feature);
  res.final_losses = last.losses;
  res.image = std::move(last.image);
  res.state = std::move(s.state);
  res.feature = std::move(s.feature);
  return res;
}

// PTI-style baseline: whole image treated as in-domain, only weights tuned.
template <class T>
BasicRefineResult<T> refine_weights_only(const BasicGeneratorState<T>& state, const BasicLatentCode<T>& w,
                                         const BasicImage<T>& target, std::size_t steps, double lr, double lambda,
                                         std::type_identity_t<std::shared_ptr<const BasicPerceptualOracle<T>>> oracle) {
  RefineConfig cfg;
  cfg.lr_theta = lr;
  cfg.steps_feature = steps;
  cfg.steps_theta = steps;
  cfg.lambda = lambda;
  const std::size_t r = state.output_resolution();
  return refine(make_session(state, w, target, DomainMask(r, r, 1), cfg, std::move(oracle)));
}

// ---------------------------------------------------------------------------
// Gradient routing check

struct GradientSplitReport {
  bool feature_ignores_in_region = false;  // target change inside m leaves the feature update unchanged
  bool theta_ignores_out_region = false;   // target change outside m leaves the weight update unchanged
  bool zero_residual_zero_gradients = false;
  std::size_t fd_coordinates = 0;
  double fd_max_rel_error = 0;
  bool fd_ok = false;
  std::vector<std::string> mismatches;

  bool ok() const { return feature_ignores_in_region && theta_ignores_out_region && zero_residual_zero_gradients && fd_ok; }

  std::string summary() const {
    std::ostringstream os;
    os << "feature ignores in-domain target: " << (feature_ignores_in_region ? "yes" : "NO") << '\n'
       << "weights ignore out-of-domain target: " << (theta_ignores_out_region ? "yes" : "NO") << '\n'
       << "zero residual gives zero gradients: " << (zero_residual_zero_gradients ? "yes" : "NO") << '\n'
       << "finite differences: " << fd_coordinates << " coordinates, max rel error " << fd_max_rel_error
       << (fd_ok ? "" : " (FAILED)") << '\n';
    for (const auto& m : mismatches) os << "  " << m << '\n';
    return os.str();
  }
};

namespace detail {

template <class T>
bool same_theta(const ParameterSet<T>& a, const ParameterSet<T>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [n, x] : a)
    if (!b.count(n) || b.at(n).values != x.values) return false;
  return true;
}

template <class T>
bool all_zero(const Tensor<T>& t) {
  for (T v : t.values())
    if (v != T(0)) return false;
  return true;
}

template <class T>
bool all_zero(const ParameterSet<T>& s) {
  for (const auto& [n, a] : s)
    for (T v : a.values)
      if (v != T(0)) return false;
  return true;
}

}  // namespace detail

// Verifies that each optimizer sees only its own region's gradient. The
// perturbation checks are exact when lambda = 0 or the oracle is pointwise.
// Finite differences run on a double-precision copy of the session.
inline GradientSplitReport gradient_split_check(const RefineSession& session, std::size_t fd_coordinates = 64,
                                                std::uint64_t seed = 0, double fd_step = 1e-4,
                                                double fd_tolerance = 1e-3) {
  GradientSplitReport rep;
  const auto& m = session.mask_image;
  if (m.count_in() == 0 || m.count_out() == 0) {
    rep.mismatches.push_back("mask must contain both regions");
    return rep;
  }
  auto rng = make_rng(seed);
  std::normal_distribution<double> noise(0.0, 0.3);
  const auto base = branch_gradients(session, true, true);

  auto perturbed = [&](bool inside) {
    auto s = session;
    const std::size_t plane = s.target.plane_size();
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < plane; ++p)
        if ((m[p] != 0) == inside) s.target[c * plane + p] += static_cast<float>(noise(rng));
    return branch_gradients(s, true, true);
  };
  const auto in_pert = perturbed(true);
  rep.feature_ignores_in_region = in_pert.feature == base.feature;
  if (!rep.feature_ignores_in_region) rep.mismatches.push_back("feature update changed under an in-domain target perturbation");
  if (detail::same_theta(in_pert.theta, base.theta)) rep.mismatches.push_back("weight update did not react to in-domain target");
  const auto out_pert = perturbed(false);
  rep.theta_ignores_out_region = detail::same_theta(out_pert.theta, base.theta);
  if (!rep.theta_ignores_out_region) rep.mismatches.push_back("weight update changed under an out-of-domain target perturbation");
  if (out_pert.feature == base.feature) rep.mismatches.push_back("feature update did not react to out-of-domain target");

  {
    auto s = session;
    s.target = synthesize_with_injection(s.state, s.w, s.feature, s.mask_feat);
    const auto z = branch_gradients(s, true, true);
    rep.zero_residual_zero_gradients = detail::all_zero(z.feature) && detail::all_zero(z.theta);
    if (!rep.zero_residual_zero_gradients) rep.mismatches.push_back("non-zero gradient at zero residual");
  }

  // Finite differences of the two masked losses in double precision.
  BasicRefineSession<double> d{session.state.cast<double>(),
                               session.w.cast<double>(),
                               session.feature.cast<double>(),
                               session.mask_image,
                               session.mask_feat,
                               BasicImage<double>(session.target.cast<double>()),
                               session.config,
                               session.oracle ? make_oracle<double>(session.oracle->name()) : nullptr};
  const auto dg = branch_gradients(d, true, true);
  auto loss = [&](const BasicRefineSession<double>& s, Region r) {
    auto img = synthesize_with_injection(s.state, s.w, s.feature, s.mask_feat);
    return masked_loss(img, s.target, s.mask_image, r, s.oracle.get(), s.config.lambda).value;
  };
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); };

  std::vector<std::size_t> out_coords;
  const std::size_t fplane = d.feature.values.plane_size();
  for (std::size_t i = 0; i < d.feature.values.size(); ++i)
    if (!d.mask_feat[i % fplane]) out_coords.push_back(i);
  const auto names = d.state.tunable_names();
  std::size_t checked = 0;
  for (std::size_t k = 0; k < fd_coordinates; ++k) {
    if (k % 2 == 0) {
      const std::size_t i = out_coords[std::uniform_int_distribution<std::size_t>(0, out_coords.size() - 1)(rng)];
      auto sp = d, sm = d;
      sp.feature.values[i] += fd_step;
      sm.feature.values[i] -= fd_step;
      const double fd = (loss(sp, Region::out) - loss(sm, Region::out)) / (2 * fd_step);
      const double e = rel(dg.feature[i], fd);
      rep.fd_max_rel_error = std::max(rep.fd_max_rel_error, e);
      if (e > fd_tolerance)
        rep.mismatches.push_back("feature[" + std::to_string(i) + "]: analytic " + std::to_string(dg.feature[i]) +
                                 " vs fd " + std::to_string(fd));
    } else {
      const auto& name = names[std::uniform_int_distribution<std::size_t>(0, names.size() - 1)(rng)];
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, d.state.delta().at(name).values.size() - 1)(rng);
      auto sp = d, sm = d;
      sp.state.delta().at(name).values[i] += fd_step;
      sm.state.delta().at(name).values[i] -= fd_step;
      const double fd = (loss(sp, Region::in) - loss(sm, Region::in)) / (2 * fd_step);
      const double a = dg.theta.at(name).values[i];
      const double e = rel(a, fd);
      rep.fd_max_rel_error = std::max(rep.fd_max_rel_error, e);
      if (e > fd_tolerance)
        rep.mismatches.push_back(name + "[" + std::to_string(i) + "]: analytic " + std::to_string(a) + " vs fd " +
                                 std::to_string(fd));
    }
    ++checked;
  }
  rep.fd_coordinates = checked;
  rep.fd_ok = rep.fd_max_rel_error <= fd_tolerance;
  return rep;
}

}  // namespace dhr

#endif  // DHR_REFINE_HPP
