#ifndef DHR_METRICS_HPP
#define DHR_METRICS_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <string>

#include "dhr/error.hpp"
#include "dhr/tensor.hpp"

namespace dhr {

// Mean squared difference after clamping to [-1, 1] and rescaling to [0, 1].
template <class T>
double mse(const BasicImage<T>& a, const BasicImage<T>& b) {
  if (!a.same_shape(b)) throw ArgumentError("mse: image shapes differ");
  if (a.empty()) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = std::clamp(static_cast<double>(a[i]), -1.0, 1.0);
    const double y = std::clamp(static_cast<double>(b[i]), -1.0, 1.0);
    const double d = (x - y) * 0.5;
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

// +infinity when the error is exactly zero.
inline double psnr_from_mse(double m) {
  if (m <= 0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(m);
}

template <class T>
double psnr(const BasicImage<T>& a, const BasicImage<T>& b) {
  return psnr_from_mse(mse(a, b));
}

// Shortest text form that parses back to the same double; "inf"/"nan" as is.
inline std::string format_real(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline double parse_real(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ArgumentError("not a number: '" + s + "'");
  return v;
}

struct EvalRecord {
  std::string id;
  double mse = 0;
  double psnr = 0;
  double perceptual = 0;
  double wall_time = 0;  // seconds
  std::string config;    // fingerprint

  bool consistent() const {
    const double expect = psnr_from_mse(mse);
    if (std::isinf(expect)) return std::isinf(psnr) && psnr > 0;
    return std::abs(expect - psnr) <= 1e-9 * std::max(1.0, std::abs(expect));
  }

  // One record per line: space-separated key=value pairs.
  std::string to_line() const {
    std::ostringstream os;
    os << "id=" << id << " mse=" << format_real(mse) << " psnr=" << format_real(psnr)
       << " perceptual=" << format_real(perceptual) << " wall_time=" << format_real(wall_time) << " config=" << config;
    return os.str();
  }

  static EvalRecord parse(const std::string& line) {
    std::map<std::string, std::string> kv;
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) {
      auto eq = tok.find('=');
      if (eq == std::string::npos) throw ArgumentError("malformed eval record token '" + tok + "'");
      kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    auto get = [&](const char* k) {
      auto it = kv.find(k);
      if (it == kv.end()) throw ArgumentError(std::string("eval record lacks '") + k + "'");
      return it->second;
    };
    return {get("id"), parse_real(get("mse")), parse_real(get("psnr")), parse_real(get("perceptual")),
            parse_real(get("wall_time")), get("config")};
  }

  bool operator==(const EvalRecord&) const = default;
};

}  // namespace dhr

#endif  // DHR_METRICS_HPP
