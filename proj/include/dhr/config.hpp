#ifndef DHR_CONFIG_HPP
#define DHR_CONFIG_HPP

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dhr/domain_seg.hpp"
#include "dhr/embedding.hpp"
#include "dhr/error.hpp"
#include "dhr/metrics.hpp"
#include "dhr/refine.hpp"

namespace dhr {

// Every tunable of a run. Serialized as "key = value" lines in a fixed order.
struct RunConfig {
  // generator
  std::string generator = "toy";  // "toy" or a generator archive path
  std::uint64_t toy_seed = 7;
  std::int64_t layer = -1;  // inject layer; -1 keeps the generator default
  bool tune_style_affines = false;
  std::string oracle = "pyramid";
  std::string encoder = "none";

  // coarse inversion
  std::uint64_t seed = 0;
  std::size_t coarse_steps = 40;
  double coarse_lr = 0.05;
  std::size_t mean_samples = 1000;

  // segmentation
  std::size_t k = 100;
  double compactness = 10.0;
  std::size_t slic_iters = 10;
  double tau1 = 0.7;
  double tau2 = 0.8;
  double range_floor = 0.5;
  // auto: "<stem>.labels.png" + "<stem>.labels.txt" beside the image if
  // present, otherwise every pixel gets parsing_label.
  std::string parsing = "auto";
  std::int64_t parsing_label = 1;

  // refinement
  std::size_t steps_f = 100;
  std::size_t steps_w = 50;
  double lr_f = 0.09;
  double lr_w = 0.0015;
  double lambda = 1.0;

  CoarseConfig coarse_config() const { return {coarse_steps, coarse_lr, seed, mean_samples}; }

  SegmentConfig segment_config() const {
    return {SlicConfig{k, compactness, slic_iters}, coarse_config(), tau1, tau2, range_floor};
  }

  RefineConfig refine_config() const { return {lr_w, lr_f, steps_f, steps_w, lambda}; }

  void validate() const {
    if (generator.empty()) throw ConfigurationError("generator must be 'toy' or an archive path");
    if (k == 0) throw ConfigurationError("k must be positive");
    if (!(compactness > 0)) throw ConfigurationError("compactness must be positive");
    if (mean_samples == 0) throw ConfigurationError("mean_samples must be positive");
    if (!(coarse_lr > 0)) throw ConfigurationError("coarse_lr must be positive");
    if (!(range_floor >= 0)) throw ConfigurationError("range_floor must be non-negative");
    if (!(tau1 >= 0) || !(tau2 >= 0)) throw ConfigurationError("thresholds must be non-negative");
    if (parsing != "auto" && parsing != "uniform" && parsing != "sidecar")
      throw ConfigurationError("parsing must be auto, uniform or sidecar");
    if (parsing_label < 0 || parsing_label > 255) throw ConfigurationError("parsing_label must be in 0..255");
    if (layer < -1) throw ConfigurationError("layer must be -1 or a layer index");
    refine_config().validate();
  }

  std::string serialize() const;
  static RunConfig parse(const std::string& text);
  // Applies one "key=value" override.
  void set(const std::string& key, const std::string& value);
  std::string fingerprint() const {
    Fnv1a h;
    h.update(serialize());
    return hex64(h.digest());
  }

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string to_text(const std::string& v) { return v; }
inline std::string to_text(bool v) { return v ? "true" : "false"; }
inline std::string to_text(double v) { return format_real(v); }
template <class I>
  requires std::is_integral_v<I>
std::string to_text(I v) {
  return std::to_string(v);
}

inline void from_text(const std::string& s, std::string& out) { out = s; }
inline void from_text(const std::string& s, bool& out) {
  if (s == "true" || s == "1") out = true;
  else if (s == "false" || s == "0") out = false;
  else throw ConfigurationError("expected true/false, got '" + s + "'");
}
inline void from_text(const std::string& s, double& out) {
  try {
    out = parse_real(s);
  } catch (const ArgumentError&) {
    throw ConfigurationError("expected a number, got '" + s + "'");
  }
  if (!std::isfinite(out)) throw ConfigurationError("expected a finite number, got '" + s + "'");
}
template <class I>
  requires std::is_integral_v<I>
void from_text(const std::string& s, I& out) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
    throw ConfigurationError("expected an integer, got '" + s + "'");
}

struct ConfigField {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class M>
ConfigField field(const char* key, M RunConfig::*member) {
  return {key, [member](const RunConfig& c) { return to_text(c.*member); },
          [member](RunConfig& c, const std::string& s) { from_text(s, c.*member); }};
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      field("generator", &RunConfig::generator),
      field("toy_seed", &RunConfig::toy_seed),
      field("layer", &RunConfig::layer),
      field("tune_style_affines", &RunConfig::tune_style_affines),
      field("oracle", &RunConfig::oracle),
      field("encoder", &RunConfig::encoder),
      field("seed", &RunConfig::seed),
      field("coarse_steps", &RunConfig::coarse_steps),
      field("coarse_lr", &RunConfig::coarse_lr),
      field("mean_samples", &RunConfig::mean_samples),
      field("k", &RunConfig::k),
      field("compactness", &RunConfig::compactness),
      field("slic_iters", &RunConfig::slic_iters),
      field("tau1", &RunConfig::tau1),
      field("tau2", &RunConfig::tau2),
      field("range_floor", &RunConfig::range_floor),
      field("parsing", &RunConfig::parsing),
      field("parsing_label", &RunConfig::parsing_label),
      field("steps_f", &RunConfig::steps_f),
      field("steps_w", &RunConfig::steps_w),
      field("lr_f", &RunConfig::lr_f),
      field("lr_w", &RunConfig::lr_w),
      field("lambda", &RunConfig::lambda),
  };
  return fields;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

inline std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& f : detail::config_fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

inline void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields())
    if (key == f.key) {
      try {
        f.set(*this, value);
      } catch (const ConfigurationError& e) {
        throw ConfigurationError("config key '" + key + "': " + e.what());
      }
      return;
    }
  throw ConfigurationError("unknown config key '" + key + "'");
}

// Lines are "key = value"; blank lines and '#' comments are skipped. Keys
// not present keep their defaults.
inline RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  std::set<std::string> seen;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigurationError("config line " + std::to_string(lineno) + " has no '='");
    const auto key = detail::trim(t.substr(0, eq));
    if (!seen.insert(key).second) throw ConfigurationError("config key '" + key + "' repeated");
    c.set(key, detail::trim(t.substr(eq + 1)));
  }
  return c;
}

inline RunConfig read_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return RunConfig::parse(ss.str());
}

inline void write_config(const std::filesystem::path& path, const RunConfig& c) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << c.serialize();
}

}  // namespace dhr

#endif  // DHR_CONFIG_HPP
