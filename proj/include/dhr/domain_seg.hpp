#ifndef DHR_DOMAIN_SEG_HPP
#define DHR_DOMAIN_SEG_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dhr/embedding.hpp"
#include "dhr/error.hpp"
#include "dhr/image_io.hpp"
#include "dhr/perceptual.hpp"
#include "dhr/tensor.hpp"

namespace dhr {

// ---------------------------------------------------------------------------
// Superpixels

struct SuperpixelPartition {
  Grid<std::int32_t> labels;
  std::size_t count = 0;

  std::vector<std::size_t> areas() const {
    std::vector<std::size_t> a(count, 0);
    for (auto l : labels.values()) ++a[static_cast<std::size_t>(l)];
    return a;
  }
  bool operator==(const SuperpixelPartition&) const = default;
};

namespace detail {

inline double srgb_to_linear(double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); }

inline double lab_f(double t) {
  constexpr double e = 216.0 / 24389.0, k = 24389.0 / 27.0;
  return t > e ? std::cbrt(t) : (k * t + 16.0) / 116.0;
}

// [-1, 1] sRGB -> CIE Lab under D65.
inline std::array<double, 3> to_lab(double r, double g, double b) {
  auto lin = [](double v) { return srgb_to_linear(std::clamp((v + 1.0) * 0.5, 0.0, 1.0)); };
  const double R = lin(r), G = lin(g), B = lin(b);
  const double X = (0.412453 * R + 0.357580 * G + 0.180423 * B) / 0.950456;
  const double Y = 0.212671 * R + 0.715160 * G + 0.072169 * B;
  const double Z = (0.019334 * R + 0.119193 * G + 0.950227 * B) / 1.088754;
  const double fx = lab_f(X), fy = lab_f(Y), fz = lab_f(Z);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

// Splits labels into 4-connected components. Returns component count.
inline std::size_t connected_components(const Grid<std::int32_t>& labels, Grid<std::int32_t>& comp) {
  const std::size_t h = labels.height(), w = labels.width();
  comp = Grid<std::int32_t>(h, w, -1);
  std::int32_t next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < labels.size(); ++start) {
    if (comp[start] >= 0) continue;
    comp[start] = next;
    stack.assign(1, start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t y = p / w, x = p % w;
      auto visit = [&](std::size_t q) {
        if (comp[q] < 0 && labels[q] == labels[p]) {
          comp[q] = next;
          stack.push_back(q);
        }
      };
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
      if (x > 0) visit(p - 1);
      if (x + 1 < w) visit(p + 1);
    }
    ++next;
  }
  return static_cast<std::size_t>(next);
}

// Renumbers labels 0..S-1 in raster order of first appearance.
inline std::size_t relabel_consecutive(Grid<std::int32_t>& labels) {
  std::map<std::int32_t, std::int32_t> remap;
  for (auto& l : labels.values()) {
    auto [it, inserted] = remap.try_emplace(l, static_cast<std::int32_t>(remap.size()));
    l = it->second;
  }
  return remap.size();
}

}  // namespace detail

// Fragments smaller than min_area are absorbed into the 4-neighbouring
// component sharing the longest boundary (ties: smaller component id).
inline SuperpixelPartition enforce_connectivity(const Grid<std::int32_t>& labels, std::size_t min_area) {
  const std::size_t w = labels.width(), h = labels.height();
  Grid<std::int32_t> comp;
  const std::size_t n = detail::connected_components(labels, comp);
  std::vector<std::vector<std::size_t>> pixels(n);
  for (std::size_t p = 0; p < comp.size(); ++p) pixels[static_cast<std::size_t>(comp[p])].push_back(p);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pixels[a].size() < pixels[b].size(); });

  for (std::size_t c : order) {
    if (pixels[c].empty() || pixels[c].size() >= min_area) continue;
    std::map<std::int32_t, std::size_t> border;
    for (std::size_t p : pixels[c]) {
      const std::size_t y = p / w, x = p % w;
      auto look = [&](std::size_t q) {
        if (comp[q] != static_cast<std::int32_t>(c)) ++border[comp[q]];
      };
      if (y > 0) look(p - w);
      if (y + 1 < h) look(p + w);
      if (x > 0) look(p - 1);
      if (x + 1 < w) look(p + 1);
    }
    if (border.empty()) continue;  // sole component
    std::int32_t best = -1;
    std::size_t best_len = 0;
    for (const auto& [id, len] : border)
      if (len > best_len) best = id, best_len = len;
    auto& dst = pixels[static_cast<std::size_t>(best)];
    for (std::size_t p : pixels[c]) comp[p] = best;
    dst.insert(dst.end(), pixels[c].begin(), pixels[c].end());
    pixels[c].clear();
  }
  SuperpixelPartition part{std::move(comp), 0};
  part.count = detail::relabel_consecutive(part.labels);
  return part;
}

struct SlicConfig {
  std::size_t k_target = 100;
  double compactness = 10.0;
  std::size_t iters = 10;
};

// SLIC k-means over (L, a, b, x, y) with grid seeding, lowest-gradient seed
// perturbation and a final connectivity pass.
template <class T>
SuperpixelPartition slic_superpixels(const BasicImage<T>& image, const SlicConfig& cfg) {
  const std::size_t h = image.height(), w = image.width(), npx = h * w;
  if (npx == 0) throw ArgumentError("slic: empty image");
  if (cfg.k_target == 0) throw ArgumentError("slic: k_target must be at least 1");
  if (cfg.k_target > npx) throw ArgumentError("slic: k_target exceeds pixel count");
  if (!(cfg.compactness > 0)) throw ArgumentError("slic: compactness must be positive");

  std::vector<std::array<double, 3>> lab(npx);
  for (std::size_t p = 0; p < npx; ++p)
    lab[p] = detail::to_lab(image[p], image[npx + p], image[2 * npx + p]);

  const double step = std::sqrt(static_cast<double>(npx) / static_cast<double>(cfg.k_target));
  const std::size_t ny = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(h / step)), 1, h);
  const std::size_t nx = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(w / step)), 1, w);

  auto grad = [&](std::size_t y, std::size_t x) {
    if (y == 0 || x == 0 || y + 1 >= h || x + 1 >= w) return std::numeric_limits<double>::infinity();
    double g = 0;
    for (int c = 0; c < 3; ++c) {
      const double dx = lab[y * w + x + 1][c] - lab[y * w + x - 1][c];
      const double dy = lab[(y + 1) * w + x][c] - lab[(y - 1) * w + x][c];
      g += dx * dx + dy * dy;
    }
    return g;
  };

  struct Center {
    double l, a, b, y, x;
  };
  std::vector<Center> centers;
  for (std::size_t i = 0; i < ny; ++i)
    for (std::size_t j = 0; j < nx; ++j) {
      double cy = (static_cast<double>(i) + 0.5) * static_cast<double>(h) / static_cast<double>(ny) - 0.5;
      double cx = (static_cast<double>(j) + 0.5) * static_cast<double>(w) / static_cast<double>(nx) - 0.5;
      const auto py = static_cast<std::size_t>(std::clamp(std::lround(cy), 0L, static_cast<long>(h) - 1));
      const auto px = static_cast<std::size_t>(std::clamp(std::lround(cx), 0L, static_cast<long>(w) - 1));
      double best = grad(py, px);
      std::size_t by = py, bx = px;
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long qy = static_cast<long>(py) + dy, qx = static_cast<long>(px) + dx;
          if (qy < 0 || qx < 0 || qy >= static_cast<long>(h) || qx >= static_cast<long>(w)) continue;
          const double g = grad(static_cast<std::size_t>(qy), static_cast<std::size_t>(qx));
          if (g < best) best = g, by = static_cast<std::size_t>(qy), bx = static_cast<std::size_t>(qx);
        }
      if (by != py || bx != px) cy = static_cast<double>(by), cx = static_cast<double>(bx);
      const auto& c = lab[by * w + bx];
      centers.push_back({c[0], c[1], c[2], cy, cx});
    }

  Grid<std::int32_t> labels(h, w, -1);
  std::vector<double> dist(npx);
  const double spatial = (cfg.compactness / step) * (cfg.compactness / step);
  const long radius = static_cast<long>(std::ceil(2.0 * step));
  for (std::size_t it = 0; it < std::max<std::size_t>(cfg.iters, 1); ++it) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const auto& c = centers[k];
      const long y0 = std::max(0L, static_cast<long>(std::floor(c.y)) - radius);
      const long y1 = std::min(static_cast<long>(h) - 1, static_cast<long>(std::ceil(c.y)) + radius);
      const long x0 = std::max(0L, static_cast<long>(std::floor(c.x)) - radius);
      const long x1 = std::min(static_cast<long>(w) - 1, static_cast<long>(std::ceil(c.x)) + radius);
      for (long y = y0; y <= y1; ++y)
        for (long x = x0; x <= x1; ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
          const double dl = lab[p][0] - c.l, da = lab[p][1] - c.a, db = lab[p][2] - c.b;
          const double dy = static_cast<double>(y) - c.y, dx = static_cast<double>(x) - c.x;
          const double dd = dl * dl + da * da + db * db + spatial * (dy * dy + dx * dx);
          if (dd < dist[p]) dist[p] = dd, labels[p] = static_cast<std::int32_t>(k);
        }
    }
    std::vector<std::array<double, 6>> acc(centers.size(), {0, 0, 0, 0, 0, 0});
    for (std::size_t p = 0; p < npx; ++p) {
      if (labels[p] < 0) continue;
      auto& a = acc[static_cast<std::size_t>(labels[p])];
      a[0] += lab[p][0], a[1] += lab[p][1], a[2] += lab[p][2];
      a[3] += static_cast<double>(p / w), a[4] += static_cast<double>(p % w), a[5] += 1;
    }
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const auto& a = acc[k];
      if (a[5] == 0) continue;
      centers[k] = {a[0] / a[5], a[1] / a[5], a[2] / a[5], a[3] / a[5], a[4] / a[5]};
    }
  }
  // Pixels no window reached (cannot happen with a 2*step radius, kept for safety).
  for (std::size_t p = 0; p < npx; ++p)
    if (labels[p] < 0) labels[p] = 0;

  const std::size_t min_area = std::max<std::size_t>(1, npx / centers.size() / 4);
  return enforce_connectivity(labels, min_area);
}

// ---------------------------------------------------------------------------
// Loss map and scoring

struct LossMap {
  Grid<float> values;
  bool normalized = false;
};

// (v - min) / max(max - min, range_floor). range_floor = 0 is plain min-max;
// a constant field maps to zero.
inline LossMap normalize_loss(Grid<float> raw, double range_floor = 0.0) {
  if (raw.empty()) return {std::move(raw), true};
  const auto [lo_it, hi_it] = std::minmax_element(raw.values().begin(), raw.values().end());
  const double lo = *lo_it, range = static_cast<double>(*hi_it) - lo;
  const double denom = std::max(range, range_floor);
  for (auto& v : raw.values()) v = denom > 0 ? static_cast<float>((v - lo) / denom) : 0.0f;
  return {std::move(raw), true};
}

inline LossMap loss_map(const Image& target, const Image& coarse, const PerceptualOracle& oracle,
                        double range_floor = 0.0) {
  if (!target.same_shape(coarse)) throw ArgumentError("loss_map: image shapes differ");
  auto ev = oracle.evaluate(target, coarse);
  if (ev.map.height() != target.height() || ev.map.width() != target.width())
    throw InternalError("perceptual oracle returned a map at the wrong resolution");
  return normalize_loss(std::move(ev.map), range_floor);
}

// Mean loss inside each partition.
inline std::vector<double> partition_scores(const LossMap& lmap, const SuperpixelPartition& part) {
  if (!lmap.values.same_shape(part.labels)) throw ArgumentError("partition_scores: shape mismatch");
  std::vector<double> sum(part.count, 0.0);
  std::vector<std::size_t> count(part.count, 0);
  for (std::size_t p = 0; p < part.labels.size(); ++p) {
    const auto l = static_cast<std::size_t>(part.labels[p]);
    if (l >= part.count) throw InternalError("partition label out of range");
    sum[l] += lmap.values[p];
    ++count[l];
  }
  for (std::size_t i = 0; i < part.count; ++i) {
    if (count[i] == 0) throw InternalError("empty partition " + std::to_string(i));
    sum[i] /= static_cast<double>(count[i]);
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Parsing

struct Category {
  std::uint8_t label = 0;
  std::string name;
  bool in_domain = true;
  double tau = 0.7;
  bool operator==(const Category&) const = default;
};

class CategoryTable {
 public:
  CategoryTable() = default;
  explicit CategoryTable(std::vector<Category> cats) {
    for (auto& c : cats) add(std::move(c));
  }

  // Face and hair components in-domain; eyes, nose and mouth get the
  // stricter threshold.
  static CategoryTable defaults(double tau1 = 0.7, double tau2 = 0.8) {
    return CategoryTable({{0, "background", false, tau1},
                          {1, "skin", true, tau1},
                          {2, "hair", true, tau1},
                          {3, "brows", true, tau1},
                          {4, "ears", true, tau1},
                          {5, "eyes", true, tau2},
                          {6, "nose", true, tau2},
                          {7, "mouth", true, tau2},
                          {8, "clothing", false, tau1},
                          {9, "headwear", false, tau1},
                          {10, "occlusion", false, tau1}});
  }

  void add(Category c) {
    if (!(c.tau >= 0) || !std::isfinite(c.tau)) throw ArgumentError("category '" + c.name + "' has an invalid threshold");
    cats_[c.label] = std::move(c);
  }
  bool contains(std::uint8_t label) const { return cats_.count(label) != 0; }
  const Category& at(std::uint8_t label) const {
    auto it = cats_.find(label);
    if (it == cats_.end()) throw ArgumentError("parsing label " + std::to_string(label) + " has no category");
    return it->second;
  }
  const std::map<std::uint8_t, Category>& categories() const noexcept { return cats_; }

  // "label name domain tau" per line, '#' starts a comment.
  std::string to_text() const {
    std::ostringstream os;
    os << "# label name domain tau\n";
    for (const auto& [l, c] : cats_) os << int(l) << ' ' << c.name << ' ' << (c.in_domain ? "in" : "out") << ' ' << c.tau << '\n';
    return os.str();
  }

  static CategoryTable parse(const std::string& text) {
    CategoryTable t;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      std::istringstream ls(line);
      int label;
      std::string name, domain;
      double tau;
      if (!(ls >> label)) continue;
      if (!(ls >> name >> domain >> tau) || label < 0 || label > 255 || (domain != "in" && domain != "out"))
        throw IoError("category manifest line " + std::to_string(lineno) + " is malformed");
      t.add({static_cast<std::uint8_t>(label), name, domain == "in", tau});
    }
    if (t.cats_.empty()) throw IoError("category manifest is empty");
    return t;
  }

  bool operator==(const CategoryTable&) const = default;

 private:
  std::map<std::uint8_t, Category> cats_;
};

class ParsingMask {
 public:
  ParsingMask(Grid<std::uint8_t> labels, CategoryTable table) : labels_(std::move(labels)), table_(std::move(table)) {
    for (auto l : labels_.values())
      if (!table_.contains(l)) throw ArgumentError("parsing label " + std::to_string(l) + " has no category");
  }

  const Grid<std::uint8_t>& labels() const noexcept { return labels_; }
  const CategoryTable& table() const noexcept { return table_; }
  std::size_t height() const noexcept { return labels_.height(); }
  std::size_t width() const noexcept { return labels_.width(); }

  DomainMask domain_mask() const {
    DomainMask m(height(), width());
    for (std::size_t i = 0; i < labels_.size(); ++i) m.set(i, table_.at(labels_[i]).in_domain);
    return m;
  }

 private:
  Grid<std::uint8_t> labels_;
  CategoryTable table_;
};

using ParsingOracle = std::function<ParsingMask(const Image&)>;

// Every pixel labelled with one category.
inline ParsingOracle uniform_parser(CategoryTable table, std::uint8_t label = 1) {
  return [table = std::move(table), label](const Image& img) {
    return ParsingMask(Grid<std::uint8_t>(img.height(), img.width(), label), table);
  };
}

// Ground-truth label raster shipped alongside an image.
inline ParsingOracle raster_parser(Grid<std::uint8_t> labels, CategoryTable table) {
  return [labels = std::move(labels), table = std::move(table)](const Image& img) {
    if (labels.height() != img.height() || labels.width() != img.width())
      throw ArgumentError("label raster resolution differs from the image");
    return ParsingMask(labels, table);
  };
}

inline void write_parsing(const std::filesystem::path& raster, const std::filesystem::path& manifest,
                          const ParsingMask& p) {
  write_gray8(raster, p.labels());
  std::ofstream os(manifest);
  if (!os) throw IoError("cannot write '" + manifest.string() + "'");
  os << p.table().to_text();
}

inline CategoryTable read_category_table(const std::filesystem::path& manifest) {
  std::ifstream is(manifest);
  if (!is) throw IoError("cannot open '" + manifest.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return CategoryTable::parse(ss.str());
}

// ---------------------------------------------------------------------------
// Binarization and fusion

// Majority parsing category per partition; ties go to the smaller label.
inline std::vector<std::uint8_t> majority_categories(const SuperpixelPartition& part, const ParsingMask& parsing) {
  if (!part.labels.same_shape(parsing.labels())) throw ArgumentError("partition and parsing shapes differ");
  std::vector<std::array<std::size_t, 256>> votes(part.count);
  for (auto& v : votes) v.fill(0);
  for (std::size_t p = 0; p < part.labels.size(); ++p)
    ++votes[static_cast<std::size_t>(part.labels[p])][parsing.labels()[p]];
  std::vector<std::uint8_t> out(part.count);
  for (std::size_t i = 0; i < part.count; ++i)
    out[i] = static_cast<std::uint8_t>(std::max_element(votes[i].begin(), votes[i].end()) - votes[i].begin());
  return out;
}

// Partition i is out-of-domain iff its score reaches its category threshold.
inline DomainMask binarize(const std::vector<double>& scores, const SuperpixelPartition& part,
                           const ParsingMask& parsing) {
  if (scores.size() != part.count) throw ArgumentError("binarize: one score per partition required");
  const auto cats = majority_categories(part, parsing);
  std::vector<std::uint8_t> in(part.count);
  for (std::size_t i = 0; i < part.count; ++i) in[i] = scores[i] >= parsing.table().at(cats[i]).tau ? 0 : 1;
  DomainMask m(part.labels.height(), part.labels.width());
  for (std::size_t p = 0; p < part.labels.size(); ++p) m.set(p, in[static_cast<std::size_t>(part.labels[p])]);
  return m;
}

inline DomainMask fuse(const DomainMask& m_s, const DomainMask& m_p) {
  if (m_s.height() != m_p.height() || m_s.width() != m_p.width()) throw ArgumentError("fuse: mask shapes differ");
  DomainMask out(m_s.height(), m_s.width());
  for (std::size_t i = 0; i < m_s.size(); ++i) out.set(i, m_s[i] && m_p[i]);
  return out;
}

inline DomainMask fuse(const DomainMask& m_s, const ParsingMask& parsing) { return fuse(m_s, parsing.domain_mask()); }

// ---------------------------------------------------------------------------
// Full segmentation

struct SegmentConfig {
  SlicConfig slic;
  CoarseConfig coarse;
  double tau1 = 0.7;
  double tau2 = 0.8;
  double range_floor = 0.5;
};

struct SegmentResult {
  EmbeddingResult coarse;
  LossMap lmap;
  SuperpixelPartition partition;
  std::vector<double> scores;
  DomainMask superpixel_mask;  // m_s
  DomainMask parsing_mask;     // m_p
  DomainMask mask;             // m = m_p * m_s
};

// Everything downstream of (loss map, superpixels, parsing); replaying cached
// intermediates through this reproduces the mask exactly.
inline DomainMask segment_from(const LossMap& lmap, const SuperpixelPartition& part, const ParsingMask& parsing) {
  return fuse(binarize(partition_scores(lmap, part), part, parsing), parsing);
}

// A precomputed coarse inversion (shared with the embedding stage) may be passed in.
inline SegmentResult segment(const Image& image, const GeneratorState& state, const SegmentConfig& cfg,
                             const PerceptualOracle& oracle, const ParsingOracle& parser,
                             std::optional<EmbeddingResult> coarse = std::nullopt) {
  require_output_resolution(state, image);
  SegmentResult r;
  r.coarse = coarse ? std::move(*coarse) : coarse_invert(state, image, cfg.coarse, oracle);
  r.lmap = loss_map(image, r.coarse.coarse_image, oracle, cfg.range_floor);
  r.partition = slic_superpixels(image, cfg.slic);
  r.scores = partition_scores(r.lmap, r.partition);
  const auto parsing = parser(image);
  r.superpixel_mask = binarize(r.scores, r.partition, parsing);
  r.parsing_mask = parsing.domain_mask();
  r.mask = fuse(r.superpixel_mask, r.parsing_mask);
  return r;
}

}  // namespace dhr

#endif  // DHR_DOMAIN_SEG_HPP
