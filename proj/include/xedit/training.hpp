#pragma once

// Two-stage optimization driver. Stage 1 minimizes the segmentation loss;
// stage 2 finetunes with lambda_R * relevance + lambda_S * segmentation, the
// relevance map being recomputed by integrated gradients at every step.

#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xedit/dataset.hpp"
#include "xedit/diffusion.hpp"
#include "xedit/losses.hpp"
#include "xedit/metrics.hpp"
#include "xedit/model.hpp"

namespace xedit {

enum class Stage { segmentation, finetune };

inline std::string to_string(Stage s) { return s == Stage::segmentation ? "segmentation" : "finetune"; }

inline Stage stage_from_string(const std::string& s) {
  if (s == "segmentation") return Stage::segmentation;
  if (s == "finetune") return Stage::finetune;
  throw ConfigError("unknown training stage '" + s + "'");
}

struct TrainConfig {
  Stage stage = Stage::segmentation;
  double learning_rate = 1e-4;
  double weight_decay = 1e-3;
  int batch_size = 16;
  int epochs = 10;
  std::int64_t restart_period = 0;  // T_0 in steps; 0 = one epoch
  int restart_mult = 2;             // T_mult
  double lr_min = 0.0;
  std::uint64_t seed = 0;
  LossWeights loss_weights;
  Variant variant = Variant::phi;
  bool augment = false;
  AugmentationSpec augmentation;
  int ig_steps = 32;
  int relevance_every = 1;           // compute the relevance term every k-th step
  int relevance_samples = 0;         // samples per batch fed to IG; 0 = whole batch
  bool relevance_image_channels_only = false;
  int ig_chunk = 64;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be nonnegative");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (epochs < 0) throw ConfigError("epochs must be nonnegative");
    if (restart_period < 0) throw ConfigError("restart_period must be nonnegative");
    if (restart_mult < 1) throw ConfigError("restart_mult must be at least 1");
    if (lr_min < 0 || lr_min > learning_rate) throw ConfigError("lr_min must lie in [0, learning_rate]");
    if (ig_steps < 8) throw ConfigError("ig_steps must be at least 8");
    if (relevance_every < 1) throw ConfigError("relevance_every must be positive");
    if (relevance_samples < 0) throw ConfigError("relevance_samples must be nonnegative");
    if (augment) augmentation.validate();
    loss_weights.validate();
  }

  json to_json() const {
    return {{"stage", to_string(stage)},
            {"learning_rate", learning_rate},
            {"weight_decay", weight_decay},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"restart_period", restart_period},
            {"restart_mult", restart_mult},
            {"lr_min", lr_min},
            {"seed", seed},
            {"variant", xedit::to_string(variant)},
            {"augment", augment},
            {"ig_steps", ig_steps},
            {"relevance_every", relevance_every},
            {"relevance_samples", relevance_samples},
            {"relevance_image_channels_only", relevance_image_channels_only},
            {"loss_weights",
             {{"alpha", loss_weights.alpha},
              {"lambda_flat", loss_weights.lambda_flat},
              {"lambda_edge", loss_weights.lambda_edge},
              {"lambda_R", loss_weights.lambda_R},
              {"lambda_S", loss_weights.lambda_S}}}};
  }
};

// ---------------------------------------------------------------------------
// Learning-rate schedule: cosine annealing with warm restarts

/// Learning rate at optimizer step `step` (0-based). `period` is T_0 in steps.
inline double lr_at(std::int64_t step, double lr_max, double lr_min, std::int64_t period, int mult) {
  if (step < 0) throw ConfigError("step must be nonnegative");
  if (period < 1) throw ConfigError("restart period must be positive");
  std::int64_t t = step;
  std::int64_t len = period;
  if (mult == 1) {
    t = step % period;
  } else {
    while (t >= len) {
      t -= len;
      len *= mult;
    }
  }
  return lr_min + 0.5 * (lr_max - lr_min) *
                      (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(len)));
}

inline double lr_at(std::int64_t step, const TrainConfig& cfg) {
  return lr_at(step, cfg.learning_rate, cfg.lr_min, cfg.restart_period, cfg.restart_mult);
}

// ---------------------------------------------------------------------------
// Data

struct Sample {
  std::string pair_id;
  torch::Tensor features;  // [C,H,W]
  torch::Tensor image;     // [3,H,W], the network-input image
  torch::Tensor mask;      // [1,H,W]
  bool is_edited = false;
};

struct TrainingData {
  std::vector<Sample> train, val, test;
  Variant variant = Variant::phi;
  std::string fingerprint;  // manifest pair list + variant

  const std::vector<Sample>& split(Split s) const {
    return s == Split::train ? train : (s == Split::val ? val : test);
  }
};

inline TrainingData load_training_data(const Manifest& m, const FeatureIndex& features, Variant variant) {
  TrainingData d;
  d.variant = variant;
  d.fingerprint = m.fingerprint();
  for (const auto& e : m.pairs) {
    const auto side = input_side(e);
    if (!features.has(e.pair_id, side, variant))
      throw ConfigError("features missing for pair " + e.pair_id + " variant " + to_string(variant));
    Sample s;
    s.pair_id = e.pair_id;
    s.features = features.load(e.pair_id, side, variant).values;
    s.image = read_png(m.root / e.edited_path, 3);
    s.mask = read_png(m.root / e.mask_path, 1);
    s.is_edited = e.is_edited;
    (e.split == Split::train ? d.train : (e.split == Split::val ? d.val : d.test)).push_back(std::move(s));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Log

struct StepRecord {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0;
  double seg_loss = 0;
  std::optional<double> rel_loss;
  double total_loss = 0;
  bool operator==(const StepRecord&) const = default;
};

struct EpochRecord {
  int epoch = 0;
  double val_psnr = 0;
  double val_ssim = 0;
  double val_mean_pred_originals = 0;
  bool operator==(const EpochRecord&) const = default;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  double wall_clock_s = 0;  // excluded from equality

  bool same_records(const TrainLog& o) const { return steps == o.steps && epochs == o.epochs; }
};

inline json to_json(const StepRecord& r) {
  json j{{"type", "step"}, {"step", r.step}, {"epoch", r.epoch}, {"lr", r.lr},
         {"seg_loss", r.seg_loss}, {"total_loss", r.total_loss}};
  j["rel_loss"] = r.rel_loss ? json(*r.rel_loss) : json(nullptr);
  return j;
}

inline json to_json(const EpochRecord& r) {
  return {{"type", "epoch"},           {"epoch", r.epoch},       {"val_psnr", r.val_psnr},
          {"val_ssim", r.val_ssim}, {"val_mean_pred_originals", r.val_mean_pred_originals}};
}

/// One JSON object per line: step records, epoch records, then a summary line.
inline void write_log(const TrainLog& log, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : log.steps) out << to_json(r).dump() << "\n";
  for (const auto& r : log.epochs) out << to_json(r).dump() << "\n";
  out << json{{"type", "summary"}, {"wall_clock_s", log.wall_clock_s}}.dump() << "\n";
}

inline TrainLog read_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  TrainLog log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = json::parse(line);
    const auto type = j.at("type").get<std::string>();
    if (type == "step") {
      StepRecord r;
      r.step = j.at("step");
      r.epoch = j.at("epoch");
      r.lr = j.at("lr");
      r.seg_loss = j.at("seg_loss");
      r.total_loss = j.at("total_loss");
      if (!j.at("rel_loss").is_null()) r.rel_loss = j.at("rel_loss").get<double>();
      log.steps.push_back(r);
    } else if (type == "epoch") {
      log.epochs.push_back({j.at("epoch"), j.at("val_psnr"), j.at("val_ssim"), j.at("val_mean_pred_originals")});
    } else if (type == "summary") {
      log.wall_clock_s = j.at("wall_clock_s");
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Training state and checkpoints

struct TrainState {
  ModelConfig model_config;
  XEditUNet model{nullptr};
  std::unique_ptr<torch::optim::AdamW> optimizer;
  Stage stage = Stage::segmentation;
  Variant variant = Variant::phi;
  int epoch = 0;  // completed epochs
  std::int64_t global_step = 0;
  double best_score = -1e300;
  std::vector<torch::Tensor> best_params;
  std::string data_fingerprint;

  void reset_optimizer(const TrainConfig& cfg) {
    optimizer = std::make_unique<torch::optim::AdamW>(
        model->parameters(), torch::optim::AdamWOptions(cfg.learning_rate).weight_decay(cfg.weight_decay));
  }

  std::vector<torch::Tensor> snapshot() const {
    std::vector<torch::Tensor> out;
    for (const auto& p : model->parameters()) out.push_back(p.detach().clone());
    return out;
  }

  void restore(const std::vector<torch::Tensor>& params) {
    torch::NoGradGuard g;
    auto ps = model->parameters();
    require(ps.size() == params.size(), "parameter snapshot does not match the model");
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i].copy_(params[i]);
  }

  /// Best-validation parameters, or the current ones if no validation ran.
  std::vector<torch::Tensor> preferred_params() const { return best_params.empty() ? snapshot() : best_params; }

  XEditUNet best_model() const {
    auto m = XEditUNet(model_config);
    torch::NoGradGuard g;
    auto src = preferred_params();
    auto dst = m->parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i].copy_(src[i]);
    m->eval();
    return m;
  }
};

inline TrainState fresh_state(const ModelConfig& mc, const TrainConfig& cfg) {
  TrainState s;
  s.model_config = mc;
  s.model = make_model(mc, cfg.seed);
  s.stage = cfg.stage;
  s.variant = cfg.variant;
  s.reset_optimizer(cfg);
  return s;
}

inline void save_params(torch::serialize::OutputArchive& ar, const std::vector<torch::Tensor>& ps) {
  for (std::size_t i = 0; i < ps.size(); ++i) ar.write("p" + std::to_string(i), ps[i]);
}

inline std::vector<torch::Tensor> load_params(torch::serialize::InputArchive& ar, std::size_t count) {
  std::vector<torch::Tensor> ps(count);
  for (std::size_t i = 0; i < count; ++i) ar.read("p" + std::to_string(i), ps[i]);
  return ps;
}

// libtorch's own optimizer serializer keys state by parameter address, so
// its bytes change from run to run. AdamW moments are stored by parameter
// index instead.
inline void save_adamw(torch::serialize::OutputArchive& ar, torch::optim::AdamW& opt,
                       const std::vector<torch::Tensor>& params) {
  auto& state = opt.state();
  std::vector<std::int64_t> steps(params.size(), -1);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto it = state.find(params[i].unsafeGetTensorImpl());
    if (it == state.end()) continue;
    const auto& st = static_cast<const torch::optim::AdamWParamState&>(*it->second);
    steps[i] = st.step();
    ar.write("m" + std::to_string(i), st.exp_avg());
    ar.write("v" + std::to_string(i), st.exp_avg_sq());
  }
  ar.write("steps", torch::tensor(steps, torch::kInt64));
}

inline void load_adamw(torch::serialize::InputArchive& ar, torch::optim::AdamW& opt,
                       const std::vector<torch::Tensor>& params) {
  torch::Tensor steps;
  ar.read("steps", steps);
  if (steps.numel() != static_cast<std::int64_t>(params.size()))
    throw ConfigError("optimizer state does not match the model");
  auto& state = opt.state();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto step = steps[static_cast<std::int64_t>(i)].item<std::int64_t>();
    if (step < 0) continue;
    auto st = std::make_unique<torch::optim::AdamWParamState>();
    st->step(step);
    torch::Tensor m, v;
    ar.read("m" + std::to_string(i), m);
    ar.read("v" + std::to_string(i), v);
    st->exp_avg(m);
    st->exp_avg_sq(v);
    state[params[i].unsafeGetTensorImpl()] = std::move(st);
  }
}

inline void save_checkpoint(const TrainState& s, const fs::path& path, bool with_optimizer = true) {
  json meta{{"format_version", kFormatVersion},
            {"kind", "segmentation"},
            {"model_config", s.model_config.to_json()},
            {"stage", to_string(s.stage)},
            {"variant", to_string(s.variant)},
            {"epoch", s.epoch},
            {"global_step", s.global_step},
            {"best_score", s.best_score},
            {"has_best", !s.best_params.empty()},
            {"has_optimizer", with_optimizer && s.optimizer != nullptr},
            {"data_fingerprint", s.data_fingerprint}};
  torch::serialize::OutputArchive root;
  root.write("meta", c10::IValue(meta.dump()));
  torch::serialize::OutputArchive params;
  save_params(params, s.snapshot());
  root.write("model", params);
  if (!s.best_params.empty()) {
    torch::serialize::OutputArchive best;
    save_params(best, s.best_params);
    root.write("best", best);
  }
  if (with_optimizer && s.optimizer) {
    torch::serialize::OutputArchive opt;
    save_adamw(opt, *s.optimizer, s.model->parameters());
    root.write("optimizer", opt);
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  try {
    root.save_to(path.string());
  } catch (const c10::Error& e) {
    throw IoError("cannot write checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
}

/// Loads a segmentation checkpoint. The optimizer is rebuilt from `cfg` and,
/// when stored, its state restored.
inline TrainState load_checkpoint(const fs::path& path, const TrainConfig& cfg = {}) {
  torch::serialize::InputArchive root;
  try {
    root.load_from(path.string());
  } catch (const c10::Error& e) {
    throw IoError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  // Missing records or meta keys mean a truncated or foreign archive.
  try {
    c10::IValue meta_value;
    root.read("meta", meta_value);
    const auto meta = json::parse(meta_value.toStringRef());
    if (meta.at("format_version").get<int>() != kFormatVersion || meta.at("kind") != "segmentation")
      throw ConfigError(path.string() + " is not a segmentation checkpoint of a supported version");
    TrainState s;
    s.model_config = ModelConfig::from_json(meta.at("model_config"));
    s.model = XEditUNet(s.model_config);
    s.stage = stage_from_string(meta.at("stage"));
    s.variant = variant_from_string(meta.at("variant"));
    s.epoch = meta.at("epoch");
    s.global_step = meta.at("global_step");
    s.best_score = meta.at("best_score");
    s.data_fingerprint = meta.at("data_fingerprint");
    const auto n = s.model->parameters().size();
    torch::serialize::InputArchive params;
    root.read("model", params);
    s.restore(load_params(params, n));
    if (meta.at("has_best").get<bool>()) {
      torch::serialize::InputArchive best;
      root.read("best", best);
      s.best_params = load_params(best, n);
    }
    s.reset_optimizer(cfg);
    if (meta.at("has_optimizer").get<bool>()) {
      torch::serialize::InputArchive opt;
      root.read("optimizer", opt);
      load_adamw(opt, *s.optimizer, s.model->parameters());
    }
    return s;
  } catch (const c10::Error& e) {
    throw IoError("corrupt checkpoint " + path.string() + ": " + e.what_without_backtrace());
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Per-sample evaluation shared by validation and the evaluation harness

struct SampleMetrics {
  std::string pair_id;
  double psnr = 0;
  double ssim = 0;
  bool is_edited = false;
  double mean_pred = 0;
};

inline torch::Tensor predict_batch(XEditUNet& model, const torch::Tensor& features) {
  torch::NoGradGuard g;
  return model->forward(features);
}

inline std::vector<SampleMetrics> score_samples(XEditUNet& model, const std::vector<Sample>& samples,
                                                int batch = 32) {
  std::vector<SampleMetrics> out;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch)) {
    const auto stop = std::min(samples.size(), start + static_cast<std::size_t>(batch));
    std::vector<torch::Tensor> feats;
    for (auto i = start; i < stop; ++i) feats.push_back(samples[i].features);
    auto pred = predict_batch(model, torch::stack(feats));
    for (auto i = start; i < stop; ++i) {
      const auto& s = samples[i];
      auto p = pred[static_cast<std::int64_t>(i - start)];
      out.push_back({s.pair_id, psnr(p, s.mask), ssim_value(p, s.mask), s.is_edited, p.mean().item<double>()});
    }
  }
  return out;
}

inline EpochRecord validate(XEditUNet& model, const std::vector<Sample>& val, int epoch) {
  EpochRecord r;
  r.epoch = epoch;
  if (val.empty()) return r;
  auto rows = score_samples(model, val);
  double originals = 0;
  int n_orig = 0;
  for (const auto& m : rows) {
    r.val_psnr += m.psnr;
    r.val_ssim += m.ssim;
    if (!m.is_edited) {
      originals += m.mean_pred;
      ++n_orig;
    }
  }
  r.val_psnr /= static_cast<double>(rows.size());
  r.val_ssim /= static_cast<double>(rows.size());
  r.val_mean_pred_originals = n_orig ? originals / n_orig : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Training loop

struct Batch {
  torch::Tensor features;  // [B,C,H,W]
  torch::Tensor images;    // [B,3,H,W]
  torch::Tensor masks;     // [B,1,H,W]
};

inline Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& order, std::size_t begin,
                        std::size_t end, const TrainConfig& cfg, std::int64_t step) {
  std::vector<torch::Tensor> f, x, y;
  for (auto k = begin; k < end; ++k) {
    const auto& s = samples[order[k]];
    if (cfg.augment) {
      auto spec = cfg.augmentation;
      spec.seed = item_seed(stage_seed(cfg.seed, "augment"), static_cast<std::uint64_t>(step) * 4096 + (k - begin));
      const auto c = s.features.size(0);
      auto [stack, mask] = augment_pair(torch::cat({s.features, s.image}, 0), s.mask, spec);
      f.push_back(stack.narrow(0, 0, c));
      x.push_back(stack.narrow(0, c, 3));
      y.push_back(mask);
    } else {
      f.push_back(s.features);
      x.push_back(s.image);
      y.push_back(s.mask);
    }
  }
  return {torch::stack(f), torch::stack(x), torch::stack(y)};
}

/// Relevance map of the model over a feature batch (differentiable when
/// `create_graph`).
inline RelevanceMap model_relevance(XEditUNet& model, const torch::Tensor& features, const TrainConfig& cfg,
                                    bool create_graph) {
  IGOptions opt;
  opt.steps = cfg.ig_steps;
  opt.create_graph = create_graph;
  opt.chunk = cfg.ig_chunk;
  if (cfg.relevance_image_channels_only) {
    opt.channel_first = 0;
    opt.channel_count = cfg.variant == Variant::phi_fi ? 1 : 3;
  }
  MaskFn fn = [&](const torch::Tensor& x) { return model->forward(x); };
  return integrated_gradients(fn, features, torch::Tensor(), opt);
}

struct StepOutcome {
  double seg = 0;
  std::optional<double> rel;
  double total = 0;
};

inline StepOutcome train_step(TrainState& s, const Batch& b, const TrainConfig& cfg, std::int64_t step) {
  const auto& w = cfg.loss_weights;
  auto pred = s.model->forward(b.features);
  auto seg = segmentation_loss(pred, b.masks, w);
  StepOutcome out;
  torch::Tensor loss;
  if (cfg.stage == Stage::segmentation) {
    loss = seg;
  } else {
    const bool with_rel = step % cfg.relevance_every == 0;
    torch::Tensor rel = torch::zeros({}, seg.options());
    if (with_rel) {
      auto feats = b.features;
      auto imgs = b.images;
      if (cfg.relevance_samples > 0 && cfg.relevance_samples < feats.size(0)) {
        feats = feats.narrow(0, 0, cfg.relevance_samples);
        imgs = imgs.narrow(0, 0, cfg.relevance_samples);
      }
      auto r = model_relevance(s.model, feats, cfg, /*create_graph=*/true);
      rel = relevance_loss(r.values, sobel_decompose(imgs), w);
      out.rel = rel.item<double>();
    }
    loss = total_loss(seg, rel, w);
  }
  s.optimizer->zero_grad();
  loss.backward();
  s.optimizer->step();
  out.seg = seg.item<double>();
  out.total = loss.item<double>();
  return out;
}

/// Runs epochs [s.epoch, until_epoch). Validation after every epoch picks
/// the best model by validation SSIM.
inline void run_epochs(TrainState& s, const TrainingData& data, TrainConfig cfg, int until_epoch, TrainLog& log) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError("training split is empty");
  if (data.train.front().features.size(0) != s.model_config.in_channels)
    throw ConfigError("feature variant does not match the model's in_channels");
  const auto n = data.train.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const auto steps_per_epoch = static_cast<std::int64_t>((n + bs - 1) / bs);
  if (cfg.restart_period == 0) cfg.restart_period = steps_per_epoch;
  s.data_fingerprint = data.fingerprint;
  s.model->train();
  const auto start = std::chrono::steady_clock::now();
  for (; s.epoch < until_epoch; ++s.epoch) {
    const auto order = permutation(n, item_seed(stage_seed(cfg.seed, "order"), static_cast<std::uint64_t>(s.epoch)));
    for (std::size_t b = 0; b < n; b += bs) {
      const double lr = lr_at(s.global_step, cfg);
      for (auto& g : s.optimizer->param_groups())
        static_cast<torch::optim::AdamWOptions&>(g.options()).lr(lr);
      auto batch = make_batch(data.train, order, b, std::min(n, b + bs), cfg, s.global_step);
      auto o = train_step(s, batch, cfg, s.global_step);
      log.steps.push_back({s.global_step, s.epoch, lr, o.seg, o.rel, o.total});
      ++s.global_step;
    }
    s.model->eval();
    auto rec = validate(s.model, data.val, s.epoch);
    s.model->train();
    log.epochs.push_back(rec);
    if (!data.val.empty() && rec.val_ssim > s.best_score) {
      s.best_score = rec.val_ssim;
      s.best_params = s.snapshot();
    }
  }
  s.model->eval();
  log.wall_clock_s += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

struct TrainResult {
  TrainState state;
  TrainLog log;
};

/// Stage 1 from scratch (or warm-started from `init` parameters).
inline TrainResult train_stage1(const TrainingData& data, const ModelConfig& mc, TrainConfig cfg,
                                const TrainState* init = nullptr) {
  cfg.stage = Stage::segmentation;
  cfg.validate();
  TrainResult r;
  r.state = fresh_state(mc, cfg);
  if (init) {
    r.state.restore(init->preferred_params());
    r.state.reset_optimizer(cfg);
  }
  run_epochs(r.state, data, cfg, cfg.epochs, r.log);
  return r;
}

/// Stage 2: starts from the stage-1 parameters with a fresh optimizer and
/// schedule and minimizes the combined objective.
inline TrainResult train_stage2_finetune(const TrainState& stage1, const TrainingData& data, TrainConfig cfg) {
  cfg.stage = Stage::finetune;
  cfg.validate();
  if (!stage1.model) throw ConfigError("finetuning requires a stage-1 checkpoint");
  if (stage1.model_config.in_channels != variant_channels(cfg.variant))
    throw ConfigError("finetune variant does not match the stage-1 checkpoint");
  TrainResult r;
  r.state = fresh_state(stage1.model_config, cfg);
  r.state.restore(stage1.preferred_params());
  r.state.reset_optimizer(cfg);
  run_epochs(r.state, data, cfg, cfg.epochs, r.log);
  return r;
}

/// Mean of R * H over samples: the relevance mass the edge penalty targets.
inline double relevance_edge_mass(XEditUNet& model, const std::vector<Sample>& samples, const TrainConfig& cfg,
                                  int batch = 8) {
  double acc = 0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch)) {
    const auto stop = std::min(samples.size(), start + static_cast<std::size_t>(batch));
    std::vector<torch::Tensor> f, x;
    for (auto i = start; i < stop; ++i) {
      f.push_back(samples[i].features);
      x.push_back(samples[i].image);
    }
    auto r = model_relevance(model, torch::stack(f), cfg, false);
    auto h = sobel_decompose(torch::stack(x)).high;
    acc += (r.values.detach() * h).flatten(1).mean(1).sum().item<double>();
    count += stop - start;
  }
  return count ? acc / static_cast<double>(count) : 0.0;
}

}  // namespace xedit
