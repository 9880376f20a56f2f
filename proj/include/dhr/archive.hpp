#ifndef DHR_ARCHIVE_HPP
#define DHR_ARCHIVE_HPP

// Binary archive of named float32 arrays with a JSON manifest.
//
//   bytes 0-3   "DHRA"
//   bytes 4-7   format version, u32 little-endian
//   bytes 8-15  manifest length in bytes, u64 little-endian
//   manifest    UTF-8 JSON {"kind", "meta", "arrays": [{name, shape, offset, count}]}
//   payload     float32 little-endian, offsets counted in elements

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dhr/error.hpp"
#include "dhr/generator.hpp"
#include "dhr/latent.hpp"
#include "dhr/tensor.hpp"

namespace dhr {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

struct Archive {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  ParameterSet<float> arrays;

  const ParamArray<float>& array(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw IoError(kind + " archive lacks array '" + name + "'");
    return it->second;
  }
};

inline constexpr std::uint32_t kArchiveVersion = 1;

inline void write_archive(const std::filesystem::path& path, const Archive& ar) {
  nlohmann::json manifest;
  manifest["kind"] = ar.kind;
  manifest["meta"] = ar.meta;
  manifest["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, a] : ar.arrays) {
    std::size_t count = 1;
    for (auto s : a.shape) count *= s;
    if (count != a.values.size()) throw InternalError("archive array '" + name + "' shape/size mismatch");
    manifest["arrays"].push_back({{"name", name}, {"shape", a.shape}, {"offset", offset}, {"count", count}});
    offset += count;
  }
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  const std::uint64_t len = text.size();
  out.write("DHRA", 4);
  out.write(reinterpret_cast<const char*>(&kArchiveVersion), 4);
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, a] : ar.arrays)
    out.write(reinterpret_cast<const char*>(a.values.data()), static_cast<std::streamsize>(a.values.size() * 4));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&len), 8);
  if (!in || std::memcmp(magic, "DHRA", 4) != 0) throw IoError("'" + path.string() + "' is not a DHRA archive");
  if (version != kArchiveVersion) throw IoError("unsupported archive version " + std::to_string(version));
  if (len > (std::uint64_t{1} << 30)) throw IoError("archive manifest too large");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated archive manifest in '" + path.string() + "'");
  Archive ar;
  std::vector<float> payload;
  try {
    const auto manifest = nlohmann::json::parse(text);
    ar.kind = manifest.at("kind").get<std::string>();
    ar.meta = manifest.at("meta");
    std::uint64_t total = 0;
    for (const auto& e : manifest.at("arrays")) total = std::max<std::uint64_t>(total, e.at("offset").get<std::uint64_t>() + e.at("count").get<std::uint64_t>());
    payload.resize(total);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(total * 4));
    if (!in) throw IoError("truncated archive payload in '" + path.string() + "'");
    for (const auto& e : manifest.at("arrays")) {
      ParamArray<float> a;
      a.shape = e.at("shape").get<std::vector<std::size_t>>();
      const auto off = e.at("offset").get<std::size_t>(), count = e.at("count").get<std::size_t>();
      std::size_t expect = 1;
      for (auto s : a.shape) expect *= s;
      if (expect != count) throw IoError("archive array '" + e.at("name").get<std::string>() + "' shape/count mismatch");
      a.values.assign(payload.begin() + static_cast<std::ptrdiff_t>(off),
                      payload.begin() + static_cast<std::ptrdiff_t>(off + count));
      ar.arrays[e.at("name").get<std::string>()] = std::move(a);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed archive manifest in '" + path.string() + "': " + e.what());
  }
  return ar;
}

inline Archive expect_kind(Archive ar, const std::string& kind) {
  if (ar.kind != kind) throw IoError("expected a '" + kind + "' archive, found '" + ar.kind + "'");
  return ar;
}

// --- generator checkpoint ---------------------------------------------------

inline void save_generator(const std::filesystem::path& path, const GeneratorState& state) {
  const auto& a = state.arch();
  Archive ar;
  ar.kind = "generator";
  ar.meta = {{"n_layers", a.n_layers()},
             {"d_latent", a.d_latent},
             {"channels", a.channels},
             {"base_resolution", a.base_resolution},
             {"upsample", a.upsample},
             {"resolutions", a.layer_resolutions()},
             {"mapping", a.mapping == MappingKind::mlp ? "mlp" : "identity"},
             {"seed", a.seed},
             {"inject_layer", state.inject_layer()},
             {"tune_style_affines", state.tune_style_affines()},
             {"fingerprint", hex64(state.fingerprint())}};
  ar.arrays = state.base();
  write_archive(path, ar);
}

inline GeneratorState load_generator(const std::filesystem::path& path) {
  auto ar = expect_kind(read_archive(path), "generator");
  try {
    ToyArchitecture a;
    a.d_latent = ar.meta.at("d_latent").get<std::size_t>();
    a.channels = ar.meta.at("channels").get<std::size_t>();
    a.base_resolution = ar.meta.at("base_resolution").get<std::size_t>();
    a.upsample = ar.meta.at("upsample").get<std::vector<bool>>();
    const auto mapping = ar.meta.at("mapping").get<std::string>();
    if (mapping != "mlp" && mapping != "identity") throw IoError("unknown mapping head '" + mapping + "'");
    a.mapping = mapping == "mlp" ? MappingKind::mlp : MappingKind::identity;
    a.seed = ar.meta.at("seed").get<std::uint64_t>();
    const auto layer = ar.meta.at("inject_layer").get<std::size_t>();
    a.default_inject_layer = layer;
    if (ar.meta.at("n_layers").get<std::size_t>() != a.n_layers()) throw IoError("checkpoint n_layers inconsistent");
    if (ar.meta.at("resolutions").get<std::vector<std::size_t>>() != a.layer_resolutions())
      throw IoError("checkpoint resolutions inconsistent");
    return GeneratorState(std::make_shared<const ToyArchitecture>(a),
                          std::make_shared<const ParameterSet<float>>(std::move(ar.arrays)), layer,
                          ar.meta.value("tune_style_affines", false));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed generator checkpoint: " + std::string(e.what()));
  }
}

// --- latent codes -------------------------------------------------------------

inline void save_latent(const std::filesystem::path& path, const LatentCode& w, std::uint64_t generator_fingerprint) {
  Archive ar;
  ar.kind = "latent";
  ar.meta = {{"space", to_string(w.space())}, {"generator", hex64(generator_fingerprint)}};
  ar.arrays["values"] = {{w.rows(), w.dim()}, std::vector<float>(w.values().begin(), w.values().end())};
  write_archive(path, ar);
}

struct StoredLatent {
  LatentCode code;
  std::string generator;  // fingerprint hex
};

inline StoredLatent load_latent(const std::filesystem::path& path) {
  auto ar = expect_kind(read_archive(path), "latent");
  const auto& v = ar.array("values");
  if (v.shape.size() != 2) throw IoError("latent array must be 2-D");
  return {LatentCode(parse_latent_space(ar.meta.at("space").get<std::string>()), v.shape[0], v.shape[1], v.values),
          ar.meta.value("generator", std::string())};
}

// --- weight deviation ---------------------------------------------------------

inline void save_theta_delta(const std::filesystem::path& path, const GeneratorState& state) {
  Archive ar;
  ar.kind = "theta_delta";
  ar.meta = {{"generator", hex64(state.fingerprint())}, {"tune_style_affines", state.tune_style_affines()}};
  ar.arrays = state.delta();
  write_archive(path, ar);
}

// Applies a stored deviation to a state bound to the same base weights.
inline void load_theta_delta(const std::filesystem::path& path, GeneratorState& state) {
  auto ar = expect_kind(read_archive(path), "theta_delta");
  if (ar.meta.value("generator", std::string()) != hex64(state.fingerprint()))
    throw ConfigurationError("theta delta was produced for a different generator");
  if (ar.meta.value("tune_style_affines", false) != state.tune_style_affines())
    state.set_tune_style_affines(ar.meta.value("tune_style_affines", false));
  state.set_delta(std::move(ar.arrays));
}

// --- feature maps -------------------------------------------------------------

inline void save_feature(const std::filesystem::path& path, const FeatureMap& f) {
  Archive ar;
  ar.kind = "feature";
  ar.meta = {{"layer", f.layer}};
  ar.arrays["values"] = {{f.values.channels(), f.values.height(), f.values.width()},
                         std::vector<float>(f.values.values().begin(), f.values.values().end())};
  write_archive(path, ar);
}

inline FeatureMap load_feature(const std::filesystem::path& path) {
  auto ar = expect_kind(read_archive(path), "feature");
  const auto& v = ar.array("values");
  if (v.shape.size() != 3) throw IoError("feature array must be 3-D");
  FeatureMap f{ar.meta.at("layer").get<std::size_t>(), Tensor<float>(v.shape[0], v.shape[1], v.shape[2])};
  std::copy(v.values.begin(), v.values.end(), f.values.values().begin());
  if (!f.values.all_finite()) throw IoError("feature archive holds non-finite values");
  return f;
}

}  // namespace dhr

#endif  // DHR_ARCHIVE_HPP
