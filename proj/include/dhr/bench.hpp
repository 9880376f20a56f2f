#ifndef DHR_BENCH_HPP
#define DHR_BENCH_HPP

// Time-versus-quality sweep over refinement step budgets.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "dhr/metrics.hpp"
#include "dhr/pipeline.hpp"

namespace dhr {

struct BenchInstance {
  std::string id;
  Image target;
  ParsingOracle parser;
};

struct BenchRow {
  std::size_t steps = 0;
  double wall_time = 0;  // mean seconds per instance
  double psnr = 0;       // mean over successful instances
  double mse = 0;
  std::size_t failures = 0;
  std::vector<std::string> errors;
};

// A budget b runs b feature steps and b/2 weight steps (the default 2:1
// split). The stage cache is bypassed so every point pays the full pipeline.
inline std::vector<BenchRow> benchmark(const std::vector<std::size_t>& budgets,
                                       const std::vector<BenchInstance>& instances, const RunConfig& base) {
  if (instances.empty()) throw ArgumentError("benchmark needs at least one instance");
  std::vector<BenchRow> rows;
  for (std::size_t b : budgets) {
    RunConfig cfg = base;
    cfg.steps_f = b;
    cfg.steps_w = b / 2;
    const auto ctx = PipelineContext::make(cfg, RunOptions{false, std::nullopt});
    BenchRow row;
    row.steps = b;
    std::size_t ok = 0;
    for (const auto& inst : instances) {
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const auto inv = invert_image(ctx, inst.target, inst.parser);
        row.wall_time += seconds_since(t0);
        const double m = mse(inv.refined.image, inst.target);
        row.mse += m;
        row.psnr += psnr_from_mse(m);
        ++ok;
      } catch (const std::exception& e) {
        ++row.failures;
        row.errors.push_back(inst.id + ": " + e.what());
      }
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    row.wall_time = ok ? row.wall_time / static_cast<double>(ok) : nan;
    row.mse = ok ? row.mse / static_cast<double>(ok) : nan;
    row.psnr = ok ? row.psnr / static_cast<double>(ok) : nan;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_bench_table(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "steps wall_time psnr mse failures\n";
  for (const auto& r : rows)
    os << r.steps << ' ' << format_real(r.wall_time) << ' ' << format_real(r.psnr) << ' ' << format_real(r.mse) << ' '
       << r.failures << '\n';
  return os.str();
}

// PSNR (vertical) against wall time (horizontal): axes, a polyline through
// the points in budget order, and a square marker per point.
inline Image render_bench_curve(const std::vector<BenchRow>& rows, std::size_t height = 240, std::size_t width = 320) {
  Image img(height, width, 1.0f);
  auto put = [&](long y, long x, float r, float g, float b) {
    if (y < 0 || x < 0 || y >= static_cast<long>(height) || x >= static_cast<long>(width)) return;
    img(0, y, x) = r;
    img(1, y, x) = g;
    img(2, y, x) = b;
  };
  const long margin = 24;
  const long x0 = margin, x1 = static_cast<long>(width) - margin;
  const long y0 = static_cast<long>(height) - margin, y1 = margin;
  for (long x = x0; x <= x1; ++x) put(y0, x, -1, -1, -1);
  for (long y = y1; y <= y0; ++y) put(y, x0, -1, -1, -1);

  std::vector<std::pair<double, double>> pts;
  for (const auto& r : rows)
    if (std::isfinite(r.wall_time) && std::isfinite(r.psnr)) pts.emplace_back(r.wall_time, r.psnr);
  if (pts.empty()) return img;
  const auto tmax = std::max_element(pts.begin(), pts.end(), [](auto& a, auto& b) { return a.first < b.first; });
  auto [pmin, pmax] = std::minmax_element(pts.begin(), pts.end(), [](auto& a, auto& b) { return a.second < b.second; });
  const double t_lo = 0, t_hi = tmax->first > 0 ? tmax->first * 1.05 : 1.0;
  double p_lo = pmin->second, p_hi = pmax->second;
  if (p_hi - p_lo < 1e-9) {
    p_lo -= 1;
    p_hi += 1;
  }
  const double pad = 0.05 * (p_hi - p_lo);
  p_lo -= pad;
  p_hi += pad;
  auto px = [&](double t) { return x0 + static_cast<long>(std::lround((t - t_lo) / (t_hi - t_lo) * (x1 - x0))); };
  auto py = [&](double p) { return y0 - static_cast<long>(std::lround((p - p_lo) / (p_hi - p_lo) * (y0 - y1))); };

  for (std::size_t i = 1; i < pts.size(); ++i) {
    const long ax = px(pts[i - 1].first), ay = py(pts[i - 1].second);
    const long bx = px(pts[i].first), by = py(pts[i].second);
    const long n = std::max({std::abs(bx - ax), std::abs(by - ay), 1L});
    for (long s = 0; s <= n; ++s)
      put(ay + (by - ay) * s / n, ax + (bx - ax) * s / n, -0.6f, -0.4f, 0.8f);
  }
  for (const auto& [t, p] : pts)
    for (long dy = -2; dy <= 2; ++dy)
      for (long dx = -2; dx <= 2; ++dx) put(py(p) + dy, px(t) + dx, 0.8f, -0.8f, -0.8f);
  return img;
}

}  // namespace dhr

#endif  // DHR_BENCH_HPP
