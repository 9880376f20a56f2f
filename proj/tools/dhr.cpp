// dhr: command-line front end for inversion, segmentation, refinement,
// editing and evaluation.

#include <CLI11.hpp>

#include <cstdio>
#include <deque>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dhr/bench.hpp"
#include "dhr/config.hpp"
#include "dhr/editing.hpp"
#include "dhr/image_io.hpp"
#include "dhr/metrics.hpp"
#include "dhr/pipeline.hpp"
#include "dhr/selfcheck.hpp"
#include "dhr/toy.hpp"

namespace fs = std::filesystem;
using namespace dhr;

namespace {

constexpr int kFailed = 1;
constexpr int kUsage = 2;

// Options shared by every subcommand that builds a RunConfig.
struct ConfigOptions {
  std::string config_file;
  std::vector<std::string> sets;
  bool no_cache = false;
  std::deque<std::pair<std::string, std::optional<std::string>>> flags;  // config key, value; stable addresses

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "Run configuration file (key = value lines)")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Override a config key, KEY=VALUE (repeatable)");
    app->add_flag("--no-cache", no_cache, "Bypass the stage cache (root: $DHR_CACHE_DIR)");
  }

  // --flag-name VALUE maps onto config key `key`.
  void flag(CLI::App* app, const std::string& name, const std::string& key, const std::string& help) {
    flags.emplace_back(key, std::nullopt);
    app->add_option(name, flags.back().second, help);
  }

  RunConfig build() const {
    RunConfig c = config_file.empty() ? RunConfig{} : read_config(config_file);
    for (const auto& [key, value] : flags)
      if (value) c.set(key, *value);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigurationError("--set expects KEY=VALUE, got '" + kv + "'");
      c.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    c.validate();
    return c;
  }

  RunOptions run_options() const { return no_cache ? RunOptions{false, std::nullopt} : RunOptions{}; }
};

void generator_flags(CLI::App* app, ConfigOptions& o) {
  o.flag(app, "--generator", "generator", "'toy' or a generator archive");
  o.flag(app, "--oracle", "oracle", "Perceptual oracle: pyramid | pointwise");
  o.flag(app, "--seed", "seed", "Seed of the mean-latent start");
}

void embed_flags(CLI::App* app, ConfigOptions& o) {
  o.flag(app, "--coarse-steps", "coarse_steps", "Coarse W-space optimization steps");
  o.flag(app, "--encoder", "encoder", "Encoder: none | exec:<program> | registered name");
}

void segment_flags(CLI::App* app, ConfigOptions& o) {
  o.flag(app, "--k", "k", "Target superpixel count");
  o.flag(app, "--tau1", "tau1", "Threshold for face and hair categories");
  o.flag(app, "--tau2", "tau2", "Threshold for eyes, nose and mouth");
  o.flag(app, "--parsing", "parsing", "Parsing source: auto | uniform | sidecar");
}

void refine_flags(CLI::App* app, ConfigOptions& o) {
  o.flag(app, "--steps-f", "steps_f", "Feature optimization steps");
  o.flag(app, "--steps-w", "steps_w", "Weight optimization steps (the first ones)");
  o.flag(app, "--lr-w", "lr_w", "Weight learning rate");
  o.flag(app, "--lr-f", "lr_f", "Feature learning rate");
  o.flag(app, "--lambda", "lambda", "Perceptual weight in the masked loss");
  o.flag(app, "--layer", "layer", "Feature injection layer (-1: generator default)");
}

int report(const RunOutcome& out) {
  if (!out.ok) {
    std::cerr << "dhr: " << out.error << " (partial bundle kept in " << out.bundle.string() << ")\n";
    return kFailed;
  }
  if (out.record) std::cout << out.record->to_line() << '\n';
  else std::cout << "wrote " << out.bundle.string() << '\n';
  return 0;
}

std::vector<std::size_t> parse_budgets(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    tok = detail::trim(tok);
    if (tok.empty()) continue;
    std::size_t v = 0;
    detail::from_text(tok, v);
    out.push_back(v);
  }
  return out;
}

std::string alpha_label(double a) {
  std::ostringstream os;
  os << std::showpos << std::fixed << std::setprecision(2) << a;
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-specific hybrid refinement for GAN inversion"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // embed
  ConfigOptions embed_o;
  std::string embed_image, embed_out;
  auto* embed_cmd = app.add_subcommand("embed", "Map an image to a W+ latent");
  embed_cmd->add_option("--image", embed_image, "Input image (PNG)")->required();
  embed_cmd->add_option("--out", embed_out, "Output directory")->required();
  embed_o.attach(embed_cmd);
  generator_flags(embed_cmd, embed_o);
  embed_flags(embed_cmd, embed_o);

  // segment
  ConfigOptions seg_o;
  std::string seg_image, seg_out;
  auto* seg_cmd = app.add_subcommand("segment", "Split an image into in-domain and out-of-domain regions");
  seg_cmd->add_option("--image", seg_image, "Input image (PNG)")->required();
  seg_cmd->add_option("--out", seg_out, "Output directory")->required();
  seg_o.attach(seg_cmd);
  generator_flags(seg_cmd, seg_o);
  seg_o.flag(seg_cmd, "--coarse-steps", "coarse_steps", "Coarse W-space optimization steps");
  segment_flags(seg_cmd, seg_o);

  // refine
  ConfigOptions ref_o;
  std::string ref_image, ref_latent, ref_mask, ref_out;
  auto* ref_cmd = app.add_subcommand("refine", "Hybrid weight/feature refinement from a latent and a mask");
  ref_cmd->add_option("--image", ref_image, "Target image (PNG)")->required();
  ref_cmd->add_option("--latent", ref_latent, "Latent archive from `embed`")->required();
  ref_cmd->add_option("--mask", ref_mask, "Domain mask PNG from `segment` (white = in-domain)")->required();
  ref_cmd->add_option("--out", ref_out, "Bundle directory")->required();
  ref_o.attach(ref_cmd);
  generator_flags(ref_cmd, ref_o);
  refine_flags(ref_cmd, ref_o);

  // invert
  ConfigOptions inv_o;
  std::string inv_image, inv_dir, inv_out;
  std::size_t inv_workers = 1;
  auto* inv_cmd = app.add_subcommand("invert", "Full pipeline: embed, segment, refine");
  auto* inv_image_opt = inv_cmd->add_option("--image", inv_image, "Input image (PNG)");
  auto* inv_dir_opt = inv_cmd->add_option("--input-dir", inv_dir, "Invert every PNG in a directory");
  inv_image_opt->excludes(inv_dir_opt);
  inv_cmd->add_option("--out", inv_out, "Bundle directory (batch: one sub-bundle per image)")->required();
  inv_cmd->add_option("--workers", inv_workers, "Parallel images in batch mode")->check(CLI::PositiveNumber);
  inv_o.attach(inv_cmd);
  generator_flags(inv_cmd, inv_o);
  embed_flags(inv_cmd, inv_o);
  segment_flags(inv_cmd, inv_o);
  refine_flags(inv_cmd, inv_o);

  // edit
  std::string edit_bundle, edit_direction, edit_out;
  double edit_alpha = 3.0;
  auto* edit_cmd = app.add_subcommand("edit", "Apply a latent direction to a refined bundle");
  edit_cmd->add_option("--bundle", edit_bundle, "Bundle directory from `invert` or `refine`")->required()->check(CLI::ExistingDirectory);
  edit_cmd->add_option("--direction", edit_direction, "Direction archive")->required()->check(CLI::ExistingFile);
  edit_cmd->add_option("--alpha", edit_alpha, "Edit strength");
  edit_cmd->add_option("--out", edit_out, "Output PNG (default: <bundle>/edit_<name>_<alpha>.png)");

  // eval
  std::string eval_bundle, eval_pred, eval_target, eval_oracle = "pyramid", eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "Compute MSE, PSNR and perceptual distance");
  auto* eval_bundle_opt = eval_cmd->add_option("--bundle", eval_bundle, "Evaluate a bundle's refined output");
  auto* eval_pred_opt = eval_cmd->add_option("--pred-dir", eval_pred, "Directory of predicted PNGs");
  auto* eval_target_opt = eval_cmd->add_option("--target-dir", eval_target, "Directory of target PNGs (same names)");
  eval_pred_opt->needs(eval_target_opt);
  eval_target_opt->needs(eval_pred_opt);
  eval_bundle_opt->excludes(eval_pred_opt);
  eval_cmd->add_option("--oracle", eval_oracle, "Perceptual oracle for directory mode");
  eval_cmd->add_option("--out", eval_out, "Also write the records to this file");

  // bench
  ConfigOptions bench_o;
  std::string bench_budgets = "10,50,100", bench_dir, bench_out;
  std::size_t bench_instances = 3;
  std::uint64_t bench_instance_seed = 4000;
  auto* bench_cmd = app.add_subcommand("bench", "Time-versus-quality sweep over refinement budgets");
  bench_cmd->add_option("--budgets", bench_budgets, "Comma-separated feature-step budgets");
  bench_cmd->add_option("--instances", bench_instances, "Number of synthetic toy instances");
  bench_cmd->add_option("--instance-seed", bench_instance_seed, "First toy instance seed");
  bench_cmd->add_option("--input-dir", bench_dir, "Use the PNGs of a directory instead of toy instances");
  bench_cmd->add_option("--out", bench_out, "Directory for bench.txt and curve.png");
  bench_o.attach(bench_cmd);
  generator_flags(bench_cmd, bench_o);
  segment_flags(bench_cmd, bench_o);

  // selfcheck
  std::size_t sc_cases = 100, sc_fd = 60;
  std::uint64_t sc_seed = 0;
  auto* sc_cmd = app.add_subcommand("selfcheck", "Mask-algebra and gradient-routing checks on the toy generator");
  sc_cmd->add_option("--cases", sc_cases, "Randomized mask-algebra cases");
  sc_cmd->add_option("--fd", sc_fd, "Finite-difference coordinates");
  sc_cmd->add_option("--seed", sc_seed, "Seed");

  // toy
  std::string toy_out;
  std::size_t toy_count = 3, toy_directions = 5;
  std::uint64_t toy_seed = 1000, toy_gen_seed = 7;
  double toy_patch = 0.2;
  auto* toy_cmd = app.add_subcommand("toy", "Write synthetic toy-generator images and edit directions");
  toy_cmd->add_option("--out", toy_out, "Output directory")->required();
  toy_cmd->add_option("--count", toy_count, "Number of images");
  toy_cmd->add_option("--seed", toy_seed, "First instance seed");
  toy_cmd->add_option("--patch", toy_patch, "Area fraction of the pasted noise square (0: clean)")
      ->check(CLI::Range(0.0, 1.0));
  toy_cmd->add_option("--directions", toy_directions, "Number of edit directions");
  toy_cmd->add_option("--toy-seed", toy_gen_seed, "Toy generator weight seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*embed_cmd) return report(run_embed(embed_o.build(), embed_image, embed_out, embed_o.run_options()));
    if (*seg_cmd) return report(run_segment(seg_o.build(), seg_image, seg_out, seg_o.run_options()));
    if (*ref_cmd)
      return report(run_refine(ref_o.build(), ref_image, ref_latent, ref_mask, ref_out, ref_o.run_options()));

    if (*inv_cmd) {
      const auto cfg = inv_o.build();
      if (!inv_dir.empty()) {
        auto s = run_batch(cfg, inv_dir, inv_out, inv_workers, inv_o.run_options());
        std::cout << s.to_table();
        return s.failures.empty() ? 0 : kFailed;
      }
      if (inv_image.empty()) throw ArgumentError("invert needs --image or --input-dir");
      return report(run_invert(cfg, inv_image, inv_out, inv_o.run_options()));
    }

    if (*edit_cmd) {
      const auto art = load_refined(edit_bundle);
      const auto dir = load_direction(edit_direction);
      auto img = edit(art, dir, edit_alpha);
      fs::path out = edit_out.empty()
                         ? fs::path(edit_bundle) / ("edit_" + (dir.name.empty() ? std::string("dir") : dir.name) +
                                                    "_" + alpha_label(edit_alpha) + ".png")
                         : fs::path(edit_out);
      write_image(out, img);
      std::cout << "wrote " << out.string() << '\n';
      return 0;
    }

    if (*eval_cmd) {
      std::vector<EvalRecord> records;
      if (!eval_bundle.empty()) {
        records.push_back(evaluate_bundle(eval_bundle));
      } else if (!eval_pred.empty()) {
        const auto oracle = make_oracle<float>(eval_oracle);
        for (const auto& p : list_images(eval_pred)) {
          const auto t = fs::path(eval_target) / p.filename();
          if (!fs::exists(t)) throw IoError("no target for '" + p.filename().string() + "' in " + eval_target);
          records.push_back(evaluate_pair(p.stem().string(), read_image(p), read_image(t), *oracle, "-"));
        }
      } else {
        throw ArgumentError("eval needs --bundle or --pred-dir/--target-dir");
      }
      std::string text;
      for (const auto& r : records) text += r.to_line() + "\n";
      std::cout << text;
      if (!eval_out.empty()) write_text(eval_out, text);
      return 0;
    }

    if (*bench_cmd) {
      const auto cfg = bench_o.build();
      std::vector<BenchInstance> inst;
      if (!bench_dir.empty()) {
        for (const auto& p : list_images(bench_dir))
          inst.push_back({p.stem().string(), read_image(p), parser_for(cfg, p)});
      } else {
        const auto state = make_generator(cfg);
        for (std::size_t i = 0; i < bench_instances; ++i)
          inst.push_back({"toy" + std::to_string(i), make_toy_instance(state, bench_instance_seed + i).target,
                          parser_for(cfg, "")});
      }
      const auto rows = benchmark(parse_budgets(bench_budgets), inst, cfg);
      const auto table = format_bench_table(rows);
      std::cout << table;
      for (const auto& r : rows)
        for (const auto& e : r.errors) std::cerr << "dhr: budget " << r.steps << ": " << e << '\n';
      if (!bench_out.empty()) {
        fs::create_directories(bench_out);
        write_text(fs::path(bench_out) / "bench.txt", table);
        write_image(fs::path(bench_out) / "curve.png", render_bench_curve(rows));
      }
      return 0;
    }

    if (*sc_cmd) {
      const auto state = GeneratorState::toy();
      const auto algebra = mask_algebra_check(state, sc_cases, sc_seed);
      std::cout << "mask algebra: " << (algebra.ok() ? "ok" : "FAILED") << "\n" << algebra.summary();
      const auto split = toy_gradient_split_check(state, sc_seed, sc_fd);
      std::cout << "gradient routing: " << (split.ok() ? "ok" : "FAILED") << '\n' << split.summary();
      return algebra.ok() && split.ok() ? 0 : kFailed;
    }

    if (*toy_cmd) {
      ToyArchitecture arch;
      arch.seed = toy_gen_seed;
      const auto state = GeneratorState::toy(arch);
      const fs::path out = toy_out;
      fs::create_directories(out / "truth");
      save_generator(out / "truth" / "generator.dhra", state);
      for (std::size_t i = 0; i < toy_count; ++i) {
        const auto inst = make_toy_instance(state, toy_seed + i, toy_patch);
        char stem[32];
        std::snprintf(stem, sizeof stem, "toy_%03zu", i);
        write_image(out / (std::string(stem) + ".png"), inst.target);
        write_image(out / "truth" / (std::string(stem) + ".clean.png"), inst.clean);
        write_mask(out / "truth" / (std::string(stem) + ".patch.png"), inst.patch);
        save_latent(out / "truth" / (std::string(stem) + ".latent.dhra"), inst.w_true, state.fingerprint());
      }
      if (toy_directions > 0) {
        fs::create_directories(out / "directions");
        for (const auto& d : make_toy_directions(state, toy_seed, toy_directions))
          save_direction(out / "directions" / (d.name + ".dhra"),
                         {d.name, LatentSpace::W, 1, d.vector.size(), d.vector, true});
      }
      std::cout << "wrote " << toy_count << " images to " << out.string() << '\n';
      return 0;
    }
  } catch (const ConfigurationError& e) {
    std::cerr << "dhr: configuration error: " << e.what() << '\n';
    return kUsage;
  } catch (const ArgumentError& e) {
    std::cerr << "dhr: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "dhr: " << e.what() << '\n';
    return kFailed;
  }
  return kUsage;
}
