#ifndef DHR_PIPELINE_HPP
#define DHR_PIPELINE_HPP

// End-to-end orchestration: embed -> segment -> refine -> synthesize, with
// an on-disk bundle per image and a content-addressed stage cache.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unistd.h>
#include <vector>

#include "dhr/archive.hpp"
#include "dhr/config.hpp"
#include "dhr/domain_seg.hpp"
#include "dhr/editing.hpp"
#include "dhr/embedding.hpp"
#include "dhr/image_io.hpp"
#include "dhr/metrics.hpp"
#include "dhr/perceptual.hpp"
#include "dhr/refine.hpp"

namespace dhr {

// A failure tagged with the pipeline stage it happened in.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& message)
      : std::runtime_error(stage + ": " + message), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

template <class F>
auto in_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

// File names inside a bundle directory.
namespace bundle {
inline constexpr const char* config = "config.txt";
inline constexpr const char* input = "input.png";
inline constexpr const char* generator = "generator.dhra";
inline constexpr const char* latent = "latent.dhra";
inline constexpr const char* coarse = "coarse.png";
inline constexpr const char* coarse_trace = "coarse_trace.txt";
inline constexpr const char* parsing = "parsing.png";
inline constexpr const char* parsing_table = "parsing.txt";
inline constexpr const char* segmentation = "segmentation.dhra";
inline constexpr const char* mask_superpixel = "mask_superpixel.png";
inline constexpr const char* mask = "mask.png";
inline constexpr const char* mask_feat = "mask_feat.png";
inline constexpr const char* refined = "refined.png";
inline constexpr const char* theta_delta = "theta_delta.dhra";
inline constexpr const char* feature = "feature.dhra";
inline constexpr const char* history = "history.txt";
inline constexpr const char* eval = "eval.txt";
inline constexpr const char* timing = "timing.txt";
inline constexpr const char* failed = "FAILED";
}  // namespace bundle

// ---------------------------------------------------------------------------
// Run context

inline GeneratorState make_generator(const RunConfig& cfg) {
  GeneratorState state = [&] {
    if (cfg.generator == "toy") {
      ToyArchitecture arch;
      arch.seed = cfg.toy_seed;
      return GeneratorState::toy(arch);
    }
    return load_generator(cfg.generator);
  }();
  if (cfg.layer >= 0) state.set_inject_layer(static_cast<std::size_t>(cfg.layer));
  state.set_tune_style_affines(cfg.tune_style_affines);
  return state;
}

// Cache root: DHR_CACHE_DIR, else $XDG_CACHE_HOME/dhr, else ~/.cache/dhr.
inline std::optional<std::filesystem::path> default_cache_dir() {
  if (const char* d = std::getenv("DHR_CACHE_DIR"); d && *d) return std::filesystem::path(d);
  if (const char* d = std::getenv("XDG_CACHE_HOME"); d && *d) return std::filesystem::path(d) / "dhr";
  if (const char* d = std::getenv("HOME"); d && *d) return std::filesystem::path(d) / ".cache" / "dhr";
  return std::nullopt;
}

struct RunOptions {
  bool use_cache = true;
  std::optional<std::filesystem::path> cache_dir = default_cache_dir();
};

struct PipelineContext {
  RunConfig config;
  GeneratorState state;
  std::shared_ptr<const PerceptualOracle> oracle;
  EncoderOracle encoder;
  std::optional<std::filesystem::path> cache_dir;  // unset: no caching

  static PipelineContext make(const RunConfig& cfg, const RunOptions& opt = {},
                              const std::filesystem::path& scratch = {}) {
    return in_stage("config", [&] {
      cfg.validate();
      PipelineContext ctx{cfg, make_generator(cfg), make_oracle<float>(cfg.oracle), {}, std::nullopt};
      auto dir = scratch.empty() ? std::filesystem::temp_directory_path() /
                                       ("dhr-encoder-" + std::to_string(::getpid()))
                                 : scratch;
      ctx.encoder = EncoderRegistry::instance().resolve(cfg.encoder, dir);
      if (opt.use_cache) ctx.cache_dir = opt.cache_dir;
      return ctx;
    });
  }
};

// ---------------------------------------------------------------------------
// Stage cache

namespace detail {

inline std::string image_key(const Image& img) {
  Fnv1a h;
  h.update(img.values());
  return hex64(h.digest());
}

inline std::string coarse_key(const PipelineContext& ctx, const Image& target) {
  const auto& c = ctx.config;
  std::ostringstream os;
  os << "coarse|" << hex64(ctx.state.fingerprint()) << '|' << hex64(ctx.state.delta_checksum()) << '|'
     << image_key(target) << '|' << ctx.oracle->name() << '|' << c.seed << '|' << c.coarse_steps << '|'
     << format_real(c.coarse_lr) << '|' << c.mean_samples;
  Fnv1a h;
  h.update(os.str());
  return hex64(h.digest());
}

inline std::string segment_key(const PipelineContext& ctx, const std::string& coarse, const Image& target) {
  const auto& c = ctx.config;
  std::ostringstream os;
  os << "segment|" << coarse << '|' << image_key(target) << '|' << c.k << '|' << format_real(c.compactness) << '|'
     << c.slic_iters << '|' << format_real(c.range_floor);
  Fnv1a h;
  h.update(os.str());
  return hex64(h.digest());
}

// Write to a private temporary and rename, so concurrent writers of the same
// key never expose a half-written file.
inline void publish_archive(const std::filesystem::path& path, const Archive& ar) {
  std::filesystem::create_directories(path.parent_path());
  std::ostringstream tid;
  tid << std::this_thread::get_id();
  auto tmp = path;
  tmp += ".tmp-" + std::to_string(::getpid()) + "-" + tid.str();
  write_archive(tmp, ar);
  std::filesystem::rename(tmp, path);
}

inline std::optional<Archive> try_read(const std::filesystem::path& path, const std::string& kind) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    auto ar = read_archive(path);
    if (ar.kind != kind) return std::nullopt;
    return ar;
  } catch (const IoError&) {
    return std::nullopt;  // unreadable entries are recomputed
  }
}

inline Image image_from_array(const ParamArray<float>& a) {
  if (a.shape.size() != 3 || a.shape[0] != 3) throw IoError("cached image has the wrong shape");
  Image img(a.shape[1], a.shape[2]);
  std::copy(a.values.begin(), a.values.end(), img.values().begin());
  return img;
}

inline ParamArray<float> image_to_array(const Image& img) {
  return {{3, img.height(), img.width()}, std::vector<float>(img.values().begin(), img.values().end())};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages

inline EmbeddingResult coarse_stage(const PipelineContext& ctx, const Image& target) {
  std::optional<std::filesystem::path> path;
  if (ctx.cache_dir) {
    path = *ctx.cache_dir / ("coarse-" + detail::coarse_key(ctx, target) + ".dhra");
    if (auto ar = detail::try_read(*path, "coarse_cache")) {
      const auto& w = ar->array("latent");
      return {LatentCode(LatentSpace::W, 1, w.values.size(), w.values), detail::image_from_array(ar->array("image")),
              ar->meta.at("loss_trace").get<std::vector<double>>()};
    }
  }
  auto res = coarse_invert(ctx.state, target, ctx.config.coarse_config(), *ctx.oracle);
  if (path) {
    Archive ar;
    ar.kind = "coarse_cache";
    ar.meta = {{"loss_trace", res.loss_trace}};
    ar.arrays["latent"] = {{1, res.latent.dim()},
                           std::vector<float>(res.latent.values().begin(), res.latent.values().end())};
    ar.arrays["image"] = detail::image_to_array(res.coarse_image);
    detail::publish_archive(*path, ar);
  }
  return res;
}

inline Embedding embed_stage(const PipelineContext& ctx, const Image& target) {
  if (ctx.encoder) return embed(&ctx.encoder, ctx.state, target, ctx.config.coarse_config(), *ctx.oracle);
  require_output_resolution(ctx.state, target);
  auto coarse = coarse_stage(ctx, target);
  auto lifted = coarse.latent.lifted(ctx.state.n_layers());
  return {std::move(lifted), std::move(coarse)};
}

// Parsing for an image file under the configured policy.
inline ParsingOracle parser_for(const RunConfig& cfg, const std::filesystem::path& image_path) {
  auto labels = image_path.parent_path() / (image_path.stem().string() + ".labels.png");
  auto table = image_path.parent_path() / (image_path.stem().string() + ".labels.txt");
  const bool have = std::filesystem::exists(labels) && std::filesystem::exists(table);
  if (cfg.parsing == "sidecar" || (cfg.parsing == "auto" && have)) {
    if (!have) throw IoError("parsing sidecar '" + labels.string() + "' (+ .labels.txt) not found");
    return raster_parser(read_gray8(labels), read_category_table(table));
  }
  return uniform_parser(CategoryTable::defaults(cfg.tau1, cfg.tau2), static_cast<std::uint8_t>(cfg.parsing_label));
}

// Loss map and superpixels are cached; everything after them is replayed.
inline SegmentResult segment_stage(const PipelineContext& ctx, const Image& target, const ParsingOracle& parser,
                                   std::optional<EmbeddingResult> coarse = std::nullopt) {
  require_output_resolution(ctx.state, target);
  SegmentResult r;
  r.coarse = coarse ? std::move(*coarse) : coarse_stage(ctx, target);
  std::optional<std::filesystem::path> path;
  bool hit = false;
  if (ctx.cache_dir) {
    Fnv1a h;
    h.update(std::span<const float>(r.coarse.coarse_image.values()));
    const auto ck = detail::coarse_key(ctx, target) + hex64(h.digest());
    path = *ctx.cache_dir / ("segment-" + detail::segment_key(ctx, ck, target) + ".dhra");
    if (auto ar = detail::try_read(*path, "segment_cache")) {
      const auto& lm = ar->array("loss_map");
      const auto& pl = ar->array("partition");
      r.lmap.values = Grid<float>(lm.shape.at(0), lm.shape.at(1));
      std::copy(lm.values.begin(), lm.values.end(), r.lmap.values.values().begin());
      r.lmap.normalized = true;
      r.partition.labels = Grid<std::int32_t>(pl.shape.at(0), pl.shape.at(1));
      for (std::size_t i = 0; i < pl.values.size(); ++i) r.partition.labels[i] = static_cast<std::int32_t>(pl.values[i]);
      r.partition.count = ar->meta.at("count").get<std::size_t>();
      hit = true;
    }
  }
  const auto cfg = ctx.config.segment_config();
  if (!hit) {
    r.lmap = loss_map(target, r.coarse.coarse_image, *ctx.oracle, cfg.range_floor);
    r.partition = slic_superpixels(target, cfg.slic);
    if (path) {
      Archive ar;
      ar.kind = "segment_cache";
      ar.meta = {{"count", r.partition.count}};
      ar.arrays["loss_map"] = {{r.lmap.values.height(), r.lmap.values.width()},
                               std::vector<float>(r.lmap.values.values().begin(), r.lmap.values.values().end())};
      ar.arrays["partition"] = {{r.partition.labels.height(), r.partition.labels.width()},
                                std::vector<float>(r.partition.labels.values().begin(), r.partition.labels.values().end())};
      detail::publish_archive(*path, ar);
    }
  }
  r.scores = partition_scores(r.lmap, r.partition);
  const auto parsing = parser(target);
  r.superpixel_mask = binarize(r.scores, r.partition, parsing);
  r.parsing_mask = parsing.domain_mask();
  r.mask = fuse(r.superpixel_mask, r.parsing_mask);
  return r;
}

inline RefineResult refine_stage(const PipelineContext& ctx, const Image& target, const LatentCode& w,
                                 const DomainMask& mask) {
  return refine(make_session(ctx.state.fresh(), w, target, mask, ctx.config.refine_config(), ctx.oracle));
}

// In-memory result of the full pipeline on one image.
struct Inversion {
  Embedding embedding;
  SegmentResult segmentation;
  RefineResult refined;
  std::vector<std::pair<std::string, double>> timings;  // seconds per stage
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// The coarse inversion computed for the embedding also drives segmentation.
inline Inversion invert_image(const PipelineContext& ctx, const Image& target, const ParsingOracle& parser) {
  std::vector<std::pair<std::string, double>> timings;
  auto t0 = std::chrono::steady_clock::now();
  auto emb = in_stage("embed", [&] { return embed_stage(ctx, target); });
  timings.emplace_back("embed", seconds_since(t0));
  t0 = std::chrono::steady_clock::now();
  auto seg = in_stage("segment", [&] { return segment_stage(ctx, target, parser, emb.coarse); });
  timings.emplace_back("segment", seconds_since(t0));
  t0 = std::chrono::steady_clock::now();
  auto ref = in_stage("refine", [&] { return refine_stage(ctx, target, emb.latent, seg.mask); });
  timings.emplace_back("refine", seconds_since(t0));
  return {std::move(emb), std::move(seg), std::move(ref), std::move(timings)};
}

// ---------------------------------------------------------------------------
// Bundle I/O

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << text;
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::string format_history(const std::vector<RefineStep>& history, const RefineStep& final_losses) {
  auto opt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string("-"); };
  std::string out = "# step L_in L_out\n";
  for (std::size_t i = 0; i < history.size(); ++i)
    out += std::to_string(i) + " " + opt(history[i].loss_in) + " " + opt(history[i].loss_out) + "\n";
  out += std::to_string(history.size()) + " " + opt(final_losses.loss_in) + " " + opt(final_losses.loss_out) + "\n";
  return out;
}

inline std::string format_trace(const std::vector<double>& trace) {
  std::string out = "# step loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i) out += std::to_string(i) + " " + format_real(trace[i]) + "\n";
  return out;
}

// Metrics as they can be recomputed from the stored 16-bit images.
inline EvalRecord evaluate_pair(const std::string& id, const Image& pred, const Image& target,
                                const PerceptualOracle& oracle, const std::string& config_fingerprint,
                                double wall_time = 0) {
  const auto p = quantized(pred), t = quantized(target);
  const double m = mse(p, t);
  return {id, m, psnr_from_mse(m), oracle.evaluate(p, t).scalar, wall_time, config_fingerprint};
}

inline void write_embedding(const std::filesystem::path& dir, const PipelineContext& ctx, const Embedding& e) {
  save_latent(dir / bundle::latent, e.latent, ctx.state.fingerprint());
  if (e.coarse) {
    write_image(dir / bundle::coarse, e.coarse->coarse_image);
    write_text(dir / bundle::coarse_trace, format_trace(e.coarse->loss_trace));
  }
}

inline void write_segmentation(const std::filesystem::path& dir, const SegmentResult& s, const ParsingMask& parsing) {
  write_image(dir / bundle::coarse, s.coarse.coarse_image);
  write_parsing(dir / bundle::parsing, dir / bundle::parsing_table, parsing);
  Archive ar;
  ar.kind = "segmentation";
  ar.meta = {{"count", s.partition.count}, {"scores", s.scores}};
  ar.arrays["loss_map"] = {{s.lmap.values.height(), s.lmap.values.width()},
                           std::vector<float>(s.lmap.values.values().begin(), s.lmap.values.values().end())};
  ar.arrays["partition"] = {{s.partition.labels.height(), s.partition.labels.width()},
                            std::vector<float>(s.partition.labels.values().begin(), s.partition.labels.values().end())};
  write_archive(dir / bundle::segmentation, ar);
  write_mask(dir / bundle::mask_superpixel, s.superpixel_mask);
  write_mask(dir / bundle::mask, s.mask);
}

inline void write_refinement(const std::filesystem::path& dir, const RefineResult& r, const DomainMask& mask_feat) {
  write_image(dir / bundle::refined, r.image);
  save_theta_delta(dir / bundle::theta_delta, r.state);
  save_feature(dir / bundle::feature, r.feature);
  write_mask(dir / bundle::mask_feat, mask_feat);
  write_text(dir / bundle::history, format_history(r.history, r.final_losses));
}

inline std::string format_timings(const std::vector<std::pair<std::string, double>>& t) {
  std::string out;
  double total = 0;
  for (const auto& [stage, s] : t) {
    out += stage + " " + format_real(s) + "\n";
    total += s;
  }
  return out + "total " + format_real(total) + "\n";
}

struct RunOutcome {
  bool ok = false;
  std::filesystem::path bundle;
  std::optional<EvalRecord> record;
  std::string stage;  // failing stage when !ok
  std::string error;
};

// Marks a bundle failed; whatever was written before the failure is kept.
inline RunOutcome fail_bundle(const std::filesystem::path& dir, RunOutcome out, const StageError& e) {
  out.ok = false;
  out.stage = e.stage();
  out.error = e.what();
  try {
    std::filesystem::create_directories(dir);
    write_text(dir / bundle::failed, std::string(e.what()) + "\n");
  } catch (...) {
  }
  return out;
}

inline Image read_input(const std::filesystem::path& image_path) {
  if (!std::filesystem::exists(image_path)) throw IoError("image '" + image_path.string() + "' does not exist");
  return read_image(image_path);
}

struct PreparedRun {
  PipelineContext ctx;
  Image target;
  ParsingOracle parser;
};

// Config, input copy and generator go into the bundle before any stage runs.
inline PreparedRun prepare_run(const RunConfig& cfg, const std::filesystem::path& image_path,
                               const std::filesystem::path& out_dir, const RunOptions& opt) {
  in_stage("output", [&] {
    std::filesystem::create_directories(out_dir);
    std::filesystem::remove(out_dir / bundle::failed);
    write_config(out_dir / bundle::config, cfg);
  });
  auto ctx = PipelineContext::make(cfg, opt,
                                   std::filesystem::temp_directory_path() /
                                       ("dhr-encoder-" + std::to_string(::getpid()) + "-" + out_dir.filename().string()));
  Image target = in_stage("input", [&] {
    auto img = read_input(image_path);
    require_output_resolution(ctx.state, img);
    return img;
  });
  auto parser = in_stage("input", [&] { return parser_for(cfg, image_path); });
  in_stage("output", [&] {
    write_image(out_dir / bundle::input, target);
    save_generator(out_dir / bundle::generator, ctx.state);
  });
  return {std::move(ctx), std::move(target), std::move(parser)};
}

// Runs body, turning any failure into a FAILED marker in the bundle.
template <class F>
RunOutcome guarded_run(const std::filesystem::path& out_dir, F&& body) {
  RunOutcome out;
  out.bundle = out_dir;
  try {
    body(out);
    out.ok = true;
    return out;
  } catch (const StageError& e) {
    return fail_bundle(out_dir, std::move(out), e);
  } catch (const std::exception& e) {
    return fail_bundle(out_dir, std::move(out), StageError("internal", e.what()));
  }
}

inline SegmentResult segment_with_parsing(const PreparedRun& run, const std::filesystem::path& out_dir,
                                          std::optional<EmbeddingResult> coarse) {
  std::optional<ParsingMask> parsing;
  auto seg = in_stage("segment", [&] {
    parsing.emplace(run.parser(run.target));
    const ParsingMask fixed = *parsing;
    return segment_stage(run.ctx, run.target, [fixed](const Image&) { return fixed; }, std::move(coarse));
  });
  in_stage("output", [&] { write_segmentation(out_dir, seg, *parsing); });
  return seg;
}

inline void finish_refinement(const PreparedRun& run, const std::filesystem::path& out_dir, const RefineResult& ref,
                              const DomainMask& mask, const std::string& id,
                              std::chrono::steady_clock::time_point t_start,
                              const std::vector<std::pair<std::string, double>>& timings, RunOutcome& out) {
  const auto fr = run.ctx.state.feature_resolution();
  in_stage("output", [&] {
    write_refinement(out_dir, ref, downsample_mask(mask, fr, fr));
    out.record = evaluate_pair(id, ref.image, run.target, *run.ctx.oracle, run.ctx.config.fingerprint(),
                               seconds_since(t_start));
    write_text(out_dir / bundle::eval, out.record->to_line() + "\n");
    write_text(out_dir / bundle::timing, format_timings(timings));
  });
}

// Embedding only: latent (and the coarse image when no encoder is bound).
inline RunOutcome run_embed(const RunConfig& cfg, const std::filesystem::path& image_path,
                            const std::filesystem::path& out_dir, const RunOptions& opt = {}) {
  return guarded_run(out_dir, [&](RunOutcome&) {
    auto run = prepare_run(cfg, image_path, out_dir, opt);
    auto emb = in_stage("embed", [&] { return embed_stage(run.ctx, run.target); });
    in_stage("output", [&] { write_embedding(out_dir, run.ctx, emb); });
  });
}

// Coarse inversion and domain segmentation.
inline RunOutcome run_segment(const RunConfig& cfg, const std::filesystem::path& image_path,
                              const std::filesystem::path& out_dir, const RunOptions& opt = {}) {
  return guarded_run(out_dir, [&](RunOutcome&) {
    auto run = prepare_run(cfg, image_path, out_dir, opt);
    auto coarse = in_stage("segment", [&] { return coarse_stage(run.ctx, run.target); });
    in_stage("output", [&] { write_text(out_dir / bundle::coarse_trace, format_trace(coarse.loss_trace)); });
    segment_with_parsing(run, out_dir, std::move(coarse));
  });
}

// Refinement from a stored latent and mask; the result is a complete bundle.
inline RunOutcome run_refine(const RunConfig& cfg, const std::filesystem::path& image_path,
                             const std::filesystem::path& latent_path, const std::filesystem::path& mask_path,
                             const std::filesystem::path& out_dir, const RunOptions& opt = {}) {
  const auto t_start = std::chrono::steady_clock::now();
  return guarded_run(out_dir, [&](RunOutcome& out) {
    auto run = prepare_run(cfg, image_path, out_dir, opt);
    auto [w, mask] = in_stage("input", [&] {
      auto stored = load_latent(latent_path);
      auto mask = read_mask(mask_path);
      return std::pair{stored.code.lifted(run.ctx.state.n_layers()), std::move(mask)};
    });
    in_stage("output", [&] {
      save_latent(out_dir / bundle::latent, w, run.ctx.state.fingerprint());
      write_mask(out_dir / bundle::mask, mask);
    });
    auto t0 = std::chrono::steady_clock::now();
    auto ref = in_stage("refine", [&] { return refine_stage(run.ctx, run.target, w, mask); });
    finish_refinement(run, out_dir, ref, mask, image_path.stem().string(), t_start, {{"refine", seconds_since(t0)}},
                      out);
  });
}

// Full pipeline on one image file; writes the bundle into out_dir.
inline RunOutcome run_invert(const RunConfig& cfg, const std::filesystem::path& image_path,
                             const std::filesystem::path& out_dir, const RunOptions& opt = {}) {
  const auto t_start = std::chrono::steady_clock::now();
  return guarded_run(out_dir, [&](RunOutcome& out) {
    auto run = prepare_run(cfg, image_path, out_dir, opt);
    std::vector<std::pair<std::string, double>> timings{{"input", seconds_since(t_start)}};

    auto t0 = std::chrono::steady_clock::now();
    auto emb = in_stage("embed", [&] { return embed_stage(run.ctx, run.target); });
    timings.emplace_back("embed", seconds_since(t0));
    in_stage("output", [&] { write_embedding(out_dir, run.ctx, emb); });

    t0 = std::chrono::steady_clock::now();
    auto seg = segment_with_parsing(run, out_dir, emb.coarse);
    timings.emplace_back("segment", seconds_since(t0));

    t0 = std::chrono::steady_clock::now();
    auto ref = in_stage("refine", [&] { return refine_stage(run.ctx, run.target, emb.latent, seg.mask); });
    timings.emplace_back("refine", seconds_since(t0));
    finish_refinement(run, out_dir, ref, seg.mask, image_path.stem().string(), t_start, timings, out);
  });
}

// ---------------------------------------------------------------------------
// Reading a bundle back

inline RefinedArtifacts load_refined(const std::filesystem::path& dir) {
  auto state = load_generator(dir / bundle::generator);
  load_theta_delta(dir / bundle::theta_delta, state);
  auto w = load_latent(dir / bundle::latent);
  if (w.generator != hex64(state.fingerprint())) throw ConfigurationError("bundle latent belongs to another generator");
  auto f = load_feature(dir / bundle::feature);
  if (f.layer != state.inject_layer()) state.set_inject_layer(f.layer);
  return {std::move(state), std::move(w.code), std::move(f), read_mask(dir / bundle::mask_feat)};
}

inline EvalRecord evaluate_bundle(const std::filesystem::path& dir) {
  const auto cfg = read_config(dir / bundle::config);
  const auto oracle = make_oracle<float>(cfg.oracle);
  const auto pred = read_image(dir / bundle::refined);
  const auto target = read_image(dir / bundle::input);
  // Identity and timing come from the stored record when there is one.
  std::string id = dir.filename().string();
  double wall = 0;
  if (std::filesystem::exists(dir / bundle::eval)) {
    const auto stored = EvalRecord::parse(read_text(dir / bundle::eval));
    id = stored.id;
    wall = stored.wall_time;
  }
  return evaluate_pair(id, pred, target, *oracle, cfg.fingerprint(), wall);
}

// ---------------------------------------------------------------------------
// Batch

struct BatchFailure {
  std::string id;
  std::string message;
};

struct BatchSummary {
  std::vector<EvalRecord> rows;  // successful images, in file-name order
  std::vector<BatchFailure> failures;
  std::optional<EvalRecord> mean;  // arithmetic mean of the rows

  std::string to_table() const {
    std::ostringstream os;
    os << "id mse psnr perceptual wall_time\n";
    auto line = [&](const EvalRecord& r) {
      os << r.id << ' ' << format_real(r.mse) << ' ' << format_real(r.psnr) << ' ' << format_real(r.perceptual) << ' '
         << format_real(r.wall_time) << '\n';
    };
    for (const auto& r : rows) line(r);
    if (mean) line(*mean);
    os << "failures " << failures.size() << '\n';
    for (const auto& f : failures) os << "failed " << f.id << ' ' << f.message << '\n';
    return os.str();
  }
};

inline std::optional<EvalRecord> mean_record(const std::vector<EvalRecord>& rows, const std::string& fingerprint) {
  if (rows.empty()) return std::nullopt;
  EvalRecord m{"mean", 0, 0, 0, 0, fingerprint};
  for (const auto& r : rows) {
    m.mse += r.mse;
    m.psnr += r.psnr;
    m.perceptual += r.perceptual;
    m.wall_time += r.wall_time;
  }
  const auto n = static_cast<double>(rows.size());
  m.mse /= n;
  m.psnr /= n;
  m.perceptual /= n;
  m.wall_time /= n;
  return m;
}

// Images are the *.png files of image_dir, minus parsing sidecars.
inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& image_dir) {
  if (!std::filesystem::is_directory(image_dir)) throw IoError("'" + image_dir.string() + "' is not a directory");
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(image_dir)) {
    const auto& p = e.path();
    if (!e.is_regular_file() || p.extension() != ".png") continue;
    if (p.stem().extension() == ".labels") continue;
    out.push_back(p);
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline BatchSummary run_batch(const RunConfig& cfg, const std::filesystem::path& image_dir,
                              const std::filesystem::path& out_dir, std::size_t workers = 1,
                              const RunOptions& opt = {}) {
  const auto images = list_images(image_dir);
  if (images.empty()) throw IoError("no images in '" + image_dir.string() + "'");
  std::vector<RunOutcome> outcomes(images.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < images.size();)
      outcomes[i] = run_invert(cfg, images[i], out_dir / images[i].stem(), opt);
  };
  workers = std::clamp<std::size_t>(workers, 1, images.size());
  std::vector<std::jthread> pool;
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(work);
  work();
  pool.clear();

  BatchSummary s;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (outcomes[i].ok) s.rows.push_back(*outcomes[i].record);
    else s.failures.push_back({images[i].stem().string(), outcomes[i].error});
  }
  s.mean = mean_record(s.rows, cfg.fingerprint());
  std::filesystem::create_directories(out_dir);
  write_text(out_dir / "summary.txt", s.to_table());
  std::string records;
  for (const auto& r : s.rows) records += r.to_line() + "\n";
  write_text(out_dir / "records.txt", records);
  return s;
}

}  // namespace dhr

#endif  // DHR_PIPELINE_HPP
