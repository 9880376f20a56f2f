// Acceptance suite: one PASS/FAIL line per criterion. Usage: acceptance [N ...]
// to run a subset. Exit status is nonzero if any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "dhr/bench.hpp"
#include "dhr/domain_seg.hpp"
#include "dhr/editing.hpp"
#include "dhr/metrics.hpp"
#include "dhr/pipeline.hpp"
#include "dhr/refine.hpp"
#include "dhr/selfcheck.hpp"
#include "dhr/toy.hpp"

using namespace dhr;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::shared_ptr<const PerceptualOracle> pyramid() { return std::make_shared<PyramidOracle<float>>(); }

// Instance A1 for a given seed: patched toy target, mask from segmentation,
// latent from the shared coarse inversion.
struct A1 {
  ToyInstance inst;
  SegmentResult seg;
  LatentCode w;
};

A1 make_a1(const GeneratorState& s, std::uint64_t seed) {
  auto inst = make_toy_instance(s, seed);
  auto seg = segment(inst.target, s, SegmentConfig{}, *pyramid(), uniform_parser(CategoryTable::defaults()));
  auto w = seg.coarse.latent.lifted(s.n_layers());
  return {std::move(inst), std::move(seg), std::move(w)};
}

RefineConfig a1_refine_config() {
  RefineConfig cfg;  // 100 feature / 50 weight steps, lr 0.09 / 0.0015
  cfg.lambda = 0;
  return cfg;
}

constexpr std::uint64_t kA1Seed = 3000;

// --- 1 -----------------------------------------------------------------------------
Verdict mask_algebra() {
  const auto rep = mask_algebra_check(GeneratorState::toy(), 100, 0);
  return {rep.ok() && rep.cases == 100, rep.summary().substr(0, rep.summary().find('\n'))};
}

// --- 2 -----------------------------------------------------------------------------
Verdict gradient_separation() {
  const auto rep = toy_gradient_split_check(GeneratorState::toy(), 0, 60, 0.0);
  const bool ok = rep.ok() && rep.fd_coordinates >= 50 && rep.fd_max_rel_error <= 1e-3;
  std::ostringstream os;
  os << "feature/in " << (rep.feature_ignores_in_region ? "isolated" : "LEAKS") << ", weights/out "
     << (rep.theta_ignores_out_region ? "isolated" : "LEAKS") << ", " << rep.fd_coordinates
     << " FD coords, max rel err " << fmt("%.2e", rep.fd_max_rel_error);
  return {ok, os.str()};
}

// --- 3 -----------------------------------------------------------------------------
Verdict hybrid_convergence() {
  const auto s = GeneratorState::toy();
  auto a1 = make_a1(s, kA1Seed);
  auto r = refine(make_session(s, a1.w, a1.inst.target, a1.seg.mask, a1_refine_config(), pyramid()));
  if (!r.history.front().loss_in || !r.final_losses.loss_out) return {false, "segmentation produced a one-region mask"};
  const double out = *r.final_losses.loss_out;
  const double in0 = *r.history.front().loss_in, in1 = *r.final_losses.loss_in;
  const double reduction = 1 - in1 / in0;
  return {out < 1e-3 && reduction >= 0.5,
          "out-domain L2 " + fmt("%.2e", out) + " (< 1e-3), in-domain L2 " + fmt("%.2e", in0) + " -> " +
              fmt("%.2e", in1) + " (" + fmt("%.0f", 100 * reduction) + "% reduction, >= 50%)"};
}

// --- 4 -----------------------------------------------------------------------------
Verdict hybrid_beats_weight_only() {
  const auto s = GeneratorState::toy();
  const auto cfg = a1_refine_config();
  int wins = 0;
  std::string worst;
  double worst_ratio = 0;
  for (std::uint64_t t = 0; t < 10; ++t) {
    auto a1 = make_a1(s, kA1Seed + t);
    auto hybrid = refine(make_session(s, a1.w, a1.inst.target, a1.seg.mask, cfg, pyramid()));
    auto weights = refine_weights_only(s, a1.w, a1.inst.target, cfg.steps_feature, cfg.lr_theta, cfg.lambda, pyramid());
    const double mh = mse(hybrid.image, a1.inst.target), mw = mse(weights.image, a1.inst.target);
    wins += mh <= mw;
    worst_ratio = std::max(worst_ratio, mh / mw);
  }
  return {wins >= 9, std::to_string(wins) + "/10 trials hybrid MSE <= weight-only MSE (>= 9), worst ratio " +
                         fmt("%.3f", worst_ratio)};
}

// --- 5 -----------------------------------------------------------------------------
Verdict editing_invariance() {
  const auto s = GeneratorState::toy();
  auto a1 = make_a1(s, kA1Seed);
  auto session = make_session(s, a1.w, a1.inst.target, a1.seg.mask, a1_refine_config(), pyramid());
  const auto mask_feat = session.mask_feat;
  auto r = refine(std::move(session));
  const RefinedArtifacts art{r.state, a1.w, r.feature, mask_feat};
  std::size_t compared = 0, differing = 0;
  bool identity = true;
  for (const auto& d : make_toy_directions(s, 5, 5)) {
    const EditDirection dir{d.name, LatentSpace::W, 1, d.vector.size(), d.vector, true};
    std::vector<Tensor<float>> blended;
    for (double alpha : {-3.0, 0.0, 3.0})
      blended.push_back(blended_feature(art.state, edit_latent(art.w, dir, alpha), art.feature, art.mask_feat));
    identity = identity && edit(art, dir, 0.0) == r.image;
    for (std::size_t c = 0; c < blended[0].channels(); ++c)
      for (std::size_t p = 0; p < mask_feat.size(); ++p) {
        if (mask_feat[p]) continue;
        const auto y = p / mask_feat.width(), x = p % mask_feat.width();
        ++compared;
        differing += blended[0](c, y, x) != blended[1](c, y, x) || blended[2](c, y, x) != blended[1](c, y, x);
      }
  }
  return {compared > 0 && differing == 0 && identity,
          std::to_string(compared) + " out-of-domain feature values over 5 directions x 3 alphas, " +
              std::to_string(differing) + " differ; alpha=0 edit " + (identity ? "reproduces" : "DIFFERS FROM") +
              " the refined output"};
}

// --- 6 -----------------------------------------------------------------------------
Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  auto rng = make_rng(seed);
  Image img(h, w);
  auto v = uniform_vector<float>(rng, img.size(), -1, 1);
  std::copy(v.begin(), v.end(), img.values().begin());
  return img;
}

bool valid_partition(const SuperpixelPartition& p) {
  if (p.count == 0) return false;
  std::vector<std::size_t> area(p.count, 0);
  for (auto l : p.labels.values()) {
    if (l < 0 || static_cast<std::size_t>(l) >= p.count) return false;
    ++area[static_cast<std::size_t>(l)];
  }
  if (std::find(area.begin(), area.end(), 0u) != area.end()) return false;
  Grid<std::int32_t> comp;
  return detail::connected_components(p.labels, comp) == p.count;
}

Verdict dss_correctness() {
  const auto s = GeneratorState::toy();
  // Scores against a brute-force mean.
  double max_err = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto p = slic_superpixels(random_image(32, 32, seed), SlicConfig{});
    auto rng = make_rng(seed + 50);
    LossMap m{Grid<float>(32, 32), true};
    auto v = uniform_vector<float>(rng, m.values.size(), 0, 1);
    std::copy(v.begin(), v.end(), m.values.values().begin());
    const auto scores = partition_scores(m, p);
    for (std::size_t i = 0; i < p.count; ++i) {
      double sum = 0, n = 0;
      for (std::size_t q = 0; q < p.labels.size(); ++q)
        if (p.labels[q] == static_cast<std::int32_t>(i)) sum += m.values[q], n += 1;
      max_err = std::max(max_err, std::abs(scores[i] - sum / n));
    }
  }
  // SLIC invariants over the corpus.
  std::vector<Image> corpus;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    corpus.push_back(random_image(32, 32, seed));
    auto inst = make_toy_instance(s, seed);
    corpus.push_back(inst.clean);
    corpus.push_back(inst.target);
  }
  corpus.push_back(random_image(20, 28, 9));
  std::size_t partitions = 0, invalid = 0;
  for (const auto& img : corpus)
    for (std::size_t k : {1u, 4u, 25u, 100u, 300u}) {
      ++partitions;
      invalid += !valid_partition(slic_superpixels(img, SlicConfig{.k_target = k}));
    }
  // Patch recall and clean false-out over 30 toy seeds.
  const auto o = pyramid();
  const auto parser = uniform_parser(CategoryTable::defaults());
  double worst_recall = 1, worst_false_out = 0;
  for (std::uint64_t seed = 1000; seed < 1030; ++seed) {
    const auto inst = make_toy_instance(s, seed);
    const auto patched = segment(inst.target, s, SegmentConfig{}, *o, parser).mask;
    const auto clean = segment(inst.clean, s, SegmentConfig{}, *o, parser).mask;
    std::size_t in_patch = 0, caught = 0;
    for (std::size_t i = 0; i < patched.size(); ++i)
      if (!inst.patch[i]) ++in_patch, caught += !patched[i];
    worst_recall = std::min(worst_recall, static_cast<double>(caught) / static_cast<double>(in_patch));
    worst_false_out = std::max(worst_false_out, static_cast<double>(clean.count_out()) / static_cast<double>(clean.size()));
  }
  const bool ok = max_err <= 1e-6 && invalid == 0 && worst_recall >= 0.8 && worst_false_out <= 0.05;
  return {ok, "score err " + fmt("%.1e", max_err) + ", " + std::to_string(invalid) + "/" + std::to_string(partitions) +
                  " invalid partitions, worst patch recall " + fmt("%.3f", worst_recall) + " (>= 0.8), worst clean false-out " +
                  fmt("%.3f", worst_false_out) + " (<= 0.05) over 30 seeds"};
}

// --- 7 -----------------------------------------------------------------------------
Verdict benchmark_shape() {
  const auto s = GeneratorState::toy();
  std::vector<BenchInstance> inst;
  for (std::uint64_t i = 0; i < 3; ++i)
    inst.push_back({"toy" + std::to_string(i), make_toy_instance(s, 4000 + i).target,
                    uniform_parser(CategoryTable::defaults())});
  const auto rows = benchmark({10, 50, 100}, inst, RunConfig{});
  bool ok = rows.size() == 3;
  std::string detail = "psnr";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    ok = ok && rows[i].failures == 0 && std::isfinite(rows[i].psnr);
    if (i > 0) ok = ok && rows[i].psnr >= rows[i - 1].psnr - 0.2;
    detail += " " + std::to_string(rows[i].steps) + ":" + fmt("%.2f", rows[i].psnr) + "dB/" + fmt("%.2f", rows[i].wall_time) + "s";
  }
  return {ok, detail + " (nondecreasing within 0.2 dB)"};
}

// --- 8 -----------------------------------------------------------------------------
std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Verdict determinism() {
  const auto root = fs::temp_directory_path() / ("dhr-acceptance-" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  const auto inst = make_toy_instance(GeneratorState::toy(), kA1Seed);
  write_image(root / "a1.png", inst.target);
  const RunOptions no_cache{false, std::nullopt};
  const auto a = run_invert(RunConfig{}, root / "a1.png", root / "first", no_cache);
  const auto b = run_invert(RunConfig{}, root / "a1.png", root / "second", no_cache);
  if (!a.ok || !b.ok) return {false, "invert failed: " + a.error + b.error};
  std::size_t files = 0, differing = 0;
  std::string which;
  for (const auto& e : fs::directory_iterator(root / "first")) {
    const auto name = e.path().filename().string();
    if (name == bundle::timing) continue;
    ++files;
    bool same;
    if (name == bundle::eval) {
      auto ra = EvalRecord::parse(bytes(e.path())), rb = EvalRecord::parse(bytes(root / "second" / name));
      ra.wall_time = rb.wall_time = 0;
      same = ra == rb;
    } else {
      same = fs::exists(root / "second" / name) && bytes(e.path()) == bytes(root / "second" / name);
    }
    if (!same) ++differing, which += " " + name;
  }
  fs::remove_all(root);
  return {differing == 0 && files > 0,
          std::to_string(files) + " artifacts compared (timing excluded), " + std::to_string(differing) + " differ" + which};
}

struct Criterion {
  int id;
  const char* name;
  double time_limit;  // seconds; 0 = none
  std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "mask/blending algebra", 10, mask_algebra},
      {2, "gradient separation", 120, gradient_separation},
      {3, "hybrid refinement convergence (A1)", 120, hybrid_convergence},
      {4, "hybrid beats weight-only", 0, hybrid_beats_weight_only},
      {5, "editing invariance", 30, editing_invariance},
      {6, "domain segmentation correctness", 60, dss_correctness},
      {7, "benchmark harness shape", 0, benchmark_shape},
      {8, "determinism", 0, determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.time_limit > 0 && secs >= c.time_limit) {
      v.pass = false;
      v.detail += "; over the " + fmt("%.0f", c.time_limit) + " s limit";
    }
    failed += !v.pass;
    std::printf("%s %d %s: %s [%.1f s]\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
