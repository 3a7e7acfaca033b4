#pragma once

// Command-line front end. Every subcommand resolves a RunConfig (defaults,
// then --config file, then flags), stamps run.json into its output location
// and maps failures to exit codes: 1 for config/contract errors, 2 for I/O.

#include <iostream>
#include <memory>
#include <optional>

#include "CLI11.hpp"
#include "xedit/config.hpp"

namespace xedit {

namespace cli_detail {

/// A flag that overrides one config key when given on the command line.
struct Binding {
  CLI::Option* option;
  std::string section, key;
  std::shared_ptr<std::string> value;
};

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::vector<Binding> bindings;
};

inline void bind(CLI::App* app, Common& c, const std::string& flag, const std::string& section,
                 const std::string& key, const std::string& help) {
  auto v = std::make_shared<std::string>();
  auto* opt = app->add_option(flag, *v, help + " [" + section + "." + key + "]");
  c.bindings.push_back({opt, section, key, v});
}

inline void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "INI/TOML-style config file with [run], [dataset], [diffusion], "
                                             "[model], [train], [eval] sections");
  app->add_option("--set", c.sets, "Override any config key: section.key=value (repeatable)");
  bind(app, c, "--seed", "run", "seed", "Master seed; every stage derives its own sub-seed from it");
  bind(app, c, "--threads", "run", "threads", "Worker threads for data generation and tensor ops");
}

inline RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config_path.empty()) cfg.load_file(c.config_path);
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    const auto dot = s.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw ConfigError("--set expects section.key=value, got '" + s + "'");
    cfg.set(s.substr(0, dot), s.substr(dot + 1, eq - dot - 1), s.substr(eq + 1));
  }
  for (const auto& b : c.bindings)
    if (b.option->count() > 0) cfg.set(b.section, b.key, *b.value);
  return cfg;
}

inline void apply_threads(const RunConfig& cfg) {
  torch::set_num_threads(static_cast<int>(std::max<std::int64_t>(1, cfg.integer("run", "threads"))));
}

inline fs::path checkpoint_file(const fs::path& p, const char* name = "checkpoint.pt") {
  return fs::is_directory(p) ? p / name : p;
}

inline fs::path output_dir_of(const fs::path& file) {
  auto dir = file.has_parent_path() ? file.parent_path() : fs::path(".");
  fs::create_directories(dir);
  return dir;
}

inline std::vector<Variant> parse_variants(const std::vector<std::string>& names) {
  std::vector<Variant> out;
  for (const auto& n : names) {
    if (n == "all") {
      for (auto v : all_variants())
        if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
      continue;
    }
    auto v = variant_from_string(n);
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  }
  return out;
}

}  // namespace cli_detail

/// Runs the command line; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"xedit: localize diffusion-based image edits"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand help for every subcommand");

  std::string command_line;
  for (int i = 0; i < argc; ++i) command_line += (i ? " " : "") + std::string(argv[i]);

  // build-dataset -----------------------------------------------------------
  Common c_build;
  std::string build_out;
  auto* build = app.add_subcommand("build-dataset", "Render a synthetic edited/original pair dataset");
  add_common(build, c_build);
  bind(build, c_build, "--n-pairs", "dataset", "n_pairs", "Number of pairs");
  bind(build, c_build, "--edited-fraction", "dataset", "edited_fraction", "Fraction of pairs that carry an edit");
  bind(build, c_build, "--size", "dataset", "size", "Canvas size in pixels (power of two, >= 32)");
  bind(build, c_build, "--grain", "dataset", "grain", "Per-pixel grain amplitude of originals in 8-bit levels");
  build->add_option("--out", build_out, "Output directory")->required();

  // train-diffusion ---------------------------------------------------------
  Common c_diff;
  std::string diff_manifest, diff_out;
  auto* diff = app.add_subcommand("train-diffusion", "Train the pixel-space denoiser on training-split originals");
  add_common(diff, c_diff);
  diff->add_option("--manifest", diff_manifest, "Dataset directory or manifest.json")->required();
  bind(diff, c_diff, "--steps", "diffusion", "train_steps", "Optimizer steps");
  bind(diff, c_diff, "--batch-size", "diffusion", "batch_size", "Batch size");
  bind(diff, c_diff, "--lr", "diffusion", "learning_rate", "Learning rate");
  bind(diff, c_diff, "--width", "diffusion", "base_width", "Denoiser base width");
  diff->add_option("--out", diff_out, "Output directory (writes diffusion.pt)")->required();

  // extract-features --------------------------------------------------------
  Common c_feat;
  std::string feat_manifest, feat_ckpt, feat_out;
  std::vector<std::string> feat_variants;
  auto* feat = app.add_subcommand("extract-features", "DDIM-invert every network input and cache feature stacks");
  add_common(feat, c_feat);
  feat->add_option("--manifest", feat_manifest, "Dataset directory or manifest.json")->required();
  feat->add_option("--checkpoint", feat_ckpt, "Diffusion checkpoint (file or train-diffusion output dir)")->required();
  feat->add_option("--variant", feat_variants,
                   "Feature variant(s): phi, phi_fi, image_only, A, B, C, D, E or all (repeatable)")
      ->required();
  bind(feat, c_feat, "--n-steps", "diffusion", "n_steps", "DDIM inversion steps");
  feat->add_option("--out", feat_out, "Feature cache directory")->required();

  // train / finetune --------------------------------------------------------
  struct TrainFlags {
    Common common;
    std::string manifest, features, variant, out, from;
  };
  auto add_train_flags = [&](CLI::App* sub, TrainFlags& f) {
    add_common(sub, f.common);
    sub->add_option("--manifest", f.manifest, "Dataset directory or manifest.json")->required();
    sub->add_option("--features", f.features, "Feature cache directory")->required();
    sub->add_option("--variant", f.variant, "Feature variant")->required();
    bind(sub, f.common, "--epochs", "train", "epochs", "Epochs");
    bind(sub, f.common, "--lr", "train", "learning_rate", "Peak learning rate");
    bind(sub, f.common, "--batch-size", "train", "batch_size", "Batch size");
    bind(sub, f.common, "--width", "model", "base_width", "Segmentation network base width");
    bind(sub, f.common, "--augment", "train", "augment", "Enable flip/crop/blur/dropout augmentation (true/false)");
    sub->add_option("--out", f.out, "Output directory (writes checkpoint.pt, log.jsonl)")->required();
  };
  TrainFlags tf, ff;
  auto* train = app.add_subcommand("train", "Stage 1: train the segmentation network on cached features");
  add_train_flags(train, tf);
  auto* finetune = app.add_subcommand("finetune", "Stage 2: finetune a stage-1 checkpoint with the relevance loss");
  add_train_flags(finetune, ff);
  finetune->add_option("--from", ff.from, "Stage-1 checkpoint (file or train output dir)")->required();
  bind(finetune, ff.common, "--lambda-r", "train", "lambda_R", "Relevance loss weight");
  bind(finetune, ff.common, "--lambda-s", "train", "lambda_S", "Segmentation loss weight");
  bind(finetune, ff.common, "--ig-steps", "train", "ig_steps", "Integrated-gradients steps");

  // eval --------------------------------------------------------------------
  Common c_eval;
  std::string eval_ckpt, eval_manifest, eval_features, eval_out, eval_hist, eval_overlays;
  auto* eval = app.add_subcommand("eval", "PSNR/SSIM report of a checkpoint on one split");
  add_common(eval, c_eval);
  eval->add_option("--checkpoint", eval_ckpt, "Segmentation checkpoint (file or output dir)")->required();
  eval->add_option("--manifest", eval_manifest, "Dataset directory or manifest.json")->required();
  eval->add_option("--features", eval_features, "Feature cache directory")->required();
  bind(eval, c_eval, "--split", "eval", "split", "Split to evaluate: train, val or test");
  eval->add_option("--out", eval_out, "Report path (JSON)")->required();
  eval->add_option("--histogram", eval_hist, "Also write the prediction histogram on originals (CSV)");
  eval->add_option("--overlays", eval_overlays, "Also write original|edited|GT|prediction panels here");

  // predict -----------------------------------------------------------------
  Common c_pred;
  std::string pred_ckpt, pred_diff, pred_image, pred_variant, pred_out, pred_overlay;
  auto* pred = app.add_subcommand("predict", "Predict the edit mask of a single image");
  add_common(pred, c_pred);
  pred->add_option("--checkpoint", pred_ckpt, "Segmentation checkpoint (file or output dir)")->required();
  pred->add_option("--diffusion", pred_diff, "Diffusion checkpoint used to build the feature stack")->required();
  pred->add_option("--image", pred_image, "Input PNG")->required();
  pred->add_option("--variant", pred_variant, "Feature variant (must match the checkpoint)");
  bind(pred, c_pred, "--n-steps", "diffusion", "n_steps", "DDIM inversion steps");
  pred->add_option("--out", pred_out, "Output mask PNG (8-bit grayscale)")->required();
  pred->add_option("--overlay", pred_overlay, "Also write an image|mask side-by-side PNG");

  // ablate ------------------------------------------------------------------
  Common c_abl;
  std::string abl_manifest, abl_features, abl_out;
  auto* abl = app.add_subcommand("ablate", "Train and evaluate one model per partial feature stack");
  add_common(abl, c_abl);
  abl->add_option("--manifest", abl_manifest, "Dataset directory or manifest.json")->required();
  abl->add_option("--features", abl_features, "Feature cache holding variants A-E and phi")->required();
  bind(abl, c_abl, "--epochs", "train", "epochs", "Epochs per variant");
  bind(abl, c_abl, "--width", "model", "base_width", "Segmentation network base width");
  abl->add_option("--out", abl_out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Help prints usage and exits 0; any other parse failure prints the
    // offending flag plus usage and exits 1.
    const int code = app.exit(e, out, err);
    if (code == 0) return 0;
    err << app.help();
    return 1;
  }

  try {
    if (*build) {
      auto cfg = resolve(c_build);
      apply_threads(cfg);
      const fs::path dir = build_out;
      auto m = build_dataset(cfg.dataset(), dir);
      stamp_run(dir, command_line, cfg, {});
      out << "wrote " << m.pairs.size() << " pairs to " << dir.string() << " (fingerprint " << m.fingerprint()
          << ")\n";
    } else if (*diff) {
      auto cfg = resolve(c_diff);
      apply_threads(cfg);
      auto m = load_manifest(diff_manifest);
      auto images = load_originals(m, Split::train);
      auto result = train_toy_diffusion(images, cfg.diffusion());
      const fs::path dir = diff_out;
      fs::create_directories(dir);
      save_diffusion(result.model, dir / "diffusion.pt");
      std::ofstream curve(dir / "loss.csv");
      if (!curve) throw IoError("cannot write " + (dir / "loss.csv").string());
      curve << "step,loss\n";
      for (std::size_t i = 0; i < result.loss_curve.size(); ++i) curve << i << "," << result.loss_curve[i] << "\n";
      stamp_run(dir, command_line, cfg, {{"manifest", m.root}});
      out << "trained denoiser on " << images.size(0) << " originals in " << result.seconds << " s, final loss "
          << (result.loss_curve.empty() ? 0.0 : result.loss_curve.back()) << "\n";
    } else if (*feat) {
      auto cfg = resolve(c_feat);
      apply_threads(cfg);
      auto m = load_manifest(feat_manifest);
      const auto ckpt = checkpoint_file(feat_ckpt, "diffusion.pt");
      auto model = load_diffusion(ckpt);
      auto idx = extract_features(m, model, parse_variants(feat_variants), feat_out, cfg.inversion_steps());
      stamp_run(feat_out, command_line, cfg, {{"manifest", m.root}, {"checkpoint", ckpt}});
      out << "cached " << idx.files.size() << " feature stacks in " << feat_out << "\n";
    } else if (*train || *finetune) {
      auto& f = *train ? tf : ff;
      const auto stage = *train ? Stage::segmentation : Stage::finetune;
      auto cfg = resolve(f.common);
      apply_threads(cfg);
      const auto variant = variant_from_string(f.variant);
      auto m = load_manifest(f.manifest);
      auto idx = load_feature_index(f.features);
      auto data = load_training_data(m, idx, variant);
      auto tc = cfg.train(stage, variant);
      TrainResult r;
      std::map<std::string, fs::path> inputs{{"manifest", m.root}, {"features", f.features}};
      if (stage == Stage::segmentation) {
        r = train_stage1(data, cfg.model(variant, m.canvas_size), tc);
      } else {
        const auto from = checkpoint_file(f.from);
        auto stage1 = load_checkpoint(from, tc);
        if (stage1.variant != variant)
          throw ConfigError("checkpoint variant " + to_string(stage1.variant) + " does not match --variant " +
                            f.variant);
        r = train_stage2_finetune(stage1, data, tc);
        inputs["from"] = from;
      }
      const fs::path dir = f.out;
      fs::create_directories(dir);
      r.state.data_fingerprint = data.fingerprint;
      save_checkpoint(r.state, dir / "checkpoint.pt");
      write_log(r.log, dir / "log.jsonl");
      stamp_run(dir, command_line, cfg, inputs);
      out << to_string(stage) << ": " << r.state.epoch << " epochs, " << r.state.global_step
          << " steps, best val SSIM " << r.state.best_score << "\n";
    } else if (*eval) {
      auto cfg = resolve(c_eval);
      apply_threads(cfg);
      const auto ckpt = checkpoint_file(eval_ckpt);
      auto state = load_checkpoint(ckpt);
      auto m = load_manifest(eval_manifest);
      auto idx = load_feature_index(eval_features);
      const auto split = split_from_string(cfg.get("eval", "split"));
      auto report = evaluate_split(state, m, idx, split);
      const fs::path report_path = eval_out;
      write_json(report_path, to_json(report));
      if (!eval_hist.empty() || !eval_overlays.empty()) {
        auto data = load_training_data(m, idx, state.variant);
        auto predict = model_predictor(state.best_model());
        const auto& samples = data.split(split);
        if (!eval_hist.empty())
          write_histogram_csv(original_histogram(predict, samples, static_cast<int>(cfg.integer("eval", "bins"))),
                              eval_hist);
        if (!eval_overlays.empty()) {
          for (const auto& s : samples) {
            const auto* e = &*std::find_if(m.pairs.begin(), m.pairs.end(),
                                           [&](const PairEntry& p) { return p.pair_id == s.pair_id; });
            write_overlay(fs::path(eval_overlays) / (s.pair_id + ".png"), read_png(m.root / e->original_path),
                          s.image, s.mask, predict(s));
          }
        }
      }
      stamp_run(output_dir_of(report_path), command_line, cfg,
                {{"checkpoint", ckpt}, {"manifest", m.root}, {"features", eval_features}});
      out << report.split << ": mean PSNR " << report.all.mean_psnr << " dB, mean SSIM " << report.all.mean_ssim
          << " over " << report.all.count << " pairs";
      if (!report.ok()) out << " (" << report.missing.size() << " pairs without features)";
      out << "\n";
      if (!report.ok()) return 1;
    } else if (*pred) {
      auto cfg = resolve(c_pred);
      apply_threads(cfg);
      const auto ckpt = checkpoint_file(pred_ckpt);
      auto state = load_checkpoint(ckpt);
      if (!pred_variant.empty() && variant_from_string(pred_variant) != state.variant)
        throw ConfigError("--variant " + pred_variant + " does not match the checkpoint variant " +
                          to_string(state.variant));
      const auto dckpt = checkpoint_file(pred_diff, "diffusion.pt");
      auto diffusion = load_diffusion(dckpt);
      auto image = read_png(pred_image, 3);
      auto features = build_features(image, diffusion, state.variant, cfg.inversion_steps());
      auto model = state.best_model();
      torch::Tensor mask;
      {
        torch::NoGradGuard g;
        mask = model->forward(features.values);
      }
      write_png(pred_out, mask);
      if (!pred_overlay.empty()) write_png(pred_overlay, panel_strip({image, mask}));
      stamp_run(output_dir_of(pred_out), command_line, cfg,
                {{"checkpoint", ckpt}, {"diffusion", dckpt}, {"image", pred_image}});
      out << "mask written to " << pred_out << " (mean " << mask.mean().item<double>() << ")\n";
    } else if (*abl) {
      auto cfg = resolve(c_abl);
      apply_threads(cfg);
      auto m = load_manifest(abl_manifest);
      auto idx = load_feature_index(abl_features);
      auto rows = run_ablation(m, idx, cfg.model(Variant::phi, m.canvas_size), cfg.train(Stage::segmentation, Variant::phi),
                               [&](const AblationRow& r) {
                                 out << to_string(r.variant) << " (" << r.channels << " ch): PSNR " << r.psnr
                                     << " SSIM " << r.ssim << "\n";
                               });
      const fs::path csv = abl_out;
      output_dir_of(csv);
      std::ofstream f(csv);
      if (!f) throw IoError("cannot write " + csv.string());
      f << ablation_csv(rows);
      f.close();
      stamp_run(output_dir_of(csv), command_line, cfg, {{"manifest", m.root}, {"features", abl_features}});
    }
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ContractError& e) {
    err << "contract error: " << e.what() << "\n";
    return 1;
  } catch (const EditError& e) {
    err << "edit error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace xedit
