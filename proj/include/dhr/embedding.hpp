#ifndef DHR_EMBEDDING_HPP
#define DHR_EMBEDDING_HPP

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dhr/adam.hpp"
#include "dhr/archive.hpp"
#include "dhr/error.hpp"
#include "dhr/generator.hpp"
#include "dhr/image_io.hpp"
#include "dhr/perceptual.hpp"

namespace dhr {

struct CoarseConfig {
  std::size_t steps = 40;
  double lr = 0.05;
  std::uint64_t seed = 0;
  std::size_t mean_samples = 1000;
};

template <class T>
struct BasicEmbeddingResult {
  BasicLatentCode<T> latent;
  BasicImage<T> coarse_image;
  // loss_trace[k] is the loss before update k; the last entry is the loss of
  // the returned latent, so the trace has steps + 1 entries.
  std::vector<double> loss_trace;
};

using EmbeddingResult = BasicEmbeddingResult<float>;

template <class T>
void require_output_resolution(const BasicGeneratorState<T>& state, const BasicImage<T>& img) {
  const std::size_t r = state.output_resolution();
  if (img.height() != r || img.width() != r)
    throw ArgumentError("image is " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                        ", generator outputs " + std::to_string(r) + "x" + std::to_string(r));
}

// W-space optimization from the mean latent against the perceptual oracle.
// Generator weights are read, never written.
template <class T>
BasicEmbeddingResult<T> coarse_invert(const BasicGeneratorState<T>& state, const BasicImage<T>& target,
                                      const CoarseConfig& cfg, const BasicPerceptualOracle<T>& oracle) {
  require_output_resolution(state, target);
  const std::size_t d = state.d_latent(), n = state.n_layers();
  auto w = mean_latent(state, cfg.mean_samples, cfg.seed);
  std::vector<T> params(w.values().begin(), w.values().end());
  Adam<T> opt(d, AdamConfig{cfg.lr});
  const auto weights = state.effective();
  const std::size_t npx = target.plane_size();
  const Grid<T> uniform(target.height(), target.width(), T(1) / static_cast<T>(npx));

  BasicEmbeddingResult<T> res;
  res.loss_trace.reserve(cfg.steps + 1);
  auto lift = [&](const std::vector<T>& row) {
    std::vector<T> wp;
    wp.reserve(n * d);
    for (std::size_t r = 0; r < n; ++r) wp.insert(wp.end(), row.begin(), row.end());
    return wp;
  };
  for (std::size_t step = 0;; ++step) {
    auto tr = forward(state, weights, lift(params));
    auto img = tr.image();
    const double loss = oracle.evaluate(img, target).scalar;
    if (!std::isfinite(loss)) throw NonFiniteLossError(step, "coarse", loss);
    res.loss_trace.push_back(loss);
    if (step == cfg.steps) {
      res.coarse_image = std::move(img);
      break;
    }
    auto d_img = oracle.gradient(img, target, uniform);
    auto g = backward(state, weights, tr, d_img, GradientRequest{.latent = true});
    std::vector<T> grad(d, T(0));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) grad[j] += g.wplus[r * d + j];
    opt.step(params, grad);
  }
  res.latent = BasicLatentCode<T>::vector(LatentSpace::W, std::move(params));
  return res;
}

// Maps an image to a W+ code. Implementations must be deterministic.
using EncoderOracle = std::function<LatentCode(const Image&)>;

// Encoder output if one is bound, otherwise the coarse W code replicated
// across layers. The coarse result is returned alongside when it was computed.
struct Embedding {
  LatentCode latent;
  std::optional<EmbeddingResult> coarse;
};

inline Embedding embed(const EncoderOracle* encoder, const GeneratorState& state, const Image& target,
                       const CoarseConfig& cfg, const PerceptualOracle& oracle) {
  require_output_resolution(state, target);
  if (encoder && *encoder) {
    auto code = (*encoder)(target);
    if (code.dim() != state.d_latent())
      throw ConfigurationError("encoder latent dimension " + std::to_string(code.dim()) + " != generator " +
                               std::to_string(state.d_latent()));
    if (code.space() == LatentSpace::Z) throw ConfigurationError("encoder must return a W or W+ code");
    if (code.space() == LatentSpace::Wplus && code.rows() != state.n_layers())
      throw ConfigurationError("encoder returned " + std::to_string(code.rows()) + " rows, generator has " +
                               std::to_string(state.n_layers()) + " layers");
    return {code.lifted(state.n_layers()), std::nullopt};
  }
  auto res = coarse_invert(state, target, cfg, oracle);
  auto lifted = res.latent.lifted(state.n_layers());
  return {std::move(lifted), std::move(res)};
}

// Encoders are selected by name from the run configuration. "exec:<program>"
// runs `<program> <input.png> <output.dhra>` and reads back a latent archive.
inline EncoderOracle exec_encoder(const std::string& program, const std::filesystem::path& scratch_dir) {
  return [program, scratch_dir](const Image& img) {
    std::filesystem::create_directories(scratch_dir);
    const auto in = scratch_dir / "encoder_input.png";
    const auto out = scratch_dir / "encoder_output.dhra";
    std::filesystem::remove(out);
    write_image(in, img);
    auto quote = [](const std::string& s) {
      std::string q = "'";
      for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
      return q + "'";
    };
    const std::string cmd = quote(program) + " " + quote(in.string()) + " " + quote(out.string());
    if (std::system(cmd.c_str()) != 0) throw ConfigurationError("encoder program failed: " + program);
    return load_latent(out).code;
  };
}

class EncoderRegistry {
 public:
  using Factory = std::function<EncoderOracle()>;

  static EncoderRegistry& instance() {
    static EncoderRegistry r;
    return r;
  }

  void add(const std::string& name, Factory f) { factories_[name] = std::move(f); }

  // Empty name or "none" means no encoder.
  EncoderOracle resolve(const std::string& name, const std::filesystem::path& scratch_dir) const {
    if (name.empty() || name == "none") return {};
    if (name.rfind("exec:", 0) == 0) return exec_encoder(name.substr(5), scratch_dir);
    auto it = factories_.find(name);
    if (it == factories_.end()) throw ConfigurationError("unknown encoder '" + name + "'");
    return it->second();
  }

 private:
  std::map<std::string, Factory> factories_;
};

}  // namespace dhr

#endif  // DHR_EMBEDDING_HPP
