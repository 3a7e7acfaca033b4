// End-to-end acceptance run. Builds a desk-scale pipeline in a scratch
// directory, checks each acceptance criterion and prints one PASS/FAIL line
// per criterion. Exit status is 0 unless a criterion not named by --expect-fail fails.

#include <chrono>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "oracles.hpp"
#include "xedit/evaluation.hpp"

using namespace xedit;

namespace {

// Tolerances and runtime budgets (seconds).
constexpr double kPsnrTol = 1e-9;
constexpr double kSsimTol = 1e-6;
constexpr double kExactTol = 1e-12;
constexpr double kGradRelTol = 1e-3;
constexpr double kIgCompletenessRel = 0.01;
constexpr double kRoundTripMax = 0.05;
constexpr double kStage1SsimMin = 0.7;
constexpr double kStage1MarginDb = 2.0;
constexpr double kFalsePositiveLevel = 0.25;
constexpr double kHistogramModeMax = 0.05;
constexpr double kBudgetMetrics = 60;
constexpr double kBudgetGradients = 300;
constexpr double kBudgetIg = 120;
constexpr double kBudgetDiffusion = 1200;
constexpr double kBudgetStage1 = 900;
constexpr double kBudgetAblation = 1800;

// Desk-scale pipeline.
constexpr int kCanvas = 64;
constexpr std::size_t kTaskPairs = 200;
constexpr std::uint64_t kTaskSeed = 0;
constexpr std::size_t kDiffusionPairs = 625;  // 500 training-split originals
constexpr std::uint64_t kDiffusionSeed = 1;
constexpr int kDiffusionSteps = 800;
constexpr int kInversionSteps = 50;
constexpr Variant kStage1Variant = Variant::phi;

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

ModelConfig desk_model(Variant v) {
  ModelConfig m;
  m.in_channels = variant_channels(v);
  m.base_width = 8;
  m.cbam_reduction = 8;
  m.input_size = kCanvas;
  return m;
}

// Stage 1 at desk scale: small network, higher peak rate, one cosine cycle
// over the whole run, MSE-only segmentation objective (alpha = 0).
TrainConfig desk_stage1(Variant v) {
  TrainConfig t;
  t.variant = v;
  t.learning_rate = 3e-3;
  t.batch_size = 16;
  t.epochs = 100;
  t.restart_period = 100 * 10;
  t.loss_weights.alpha = 0.0;
  return t;
}

TrainConfig desk_finetune(Variant v) {
  TrainConfig t;
  t.stage = Stage::finetune;
  t.variant = v;
  t.batch_size = 16;
  t.epochs = 2;
  t.loss_weights.alpha = 0.0;
  t.ig_steps = 16;
  t.relevance_samples = 4;
  return t;
}

std::string digest_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return hash_string(ss.str());
}

/// Digest over every file below `dir` (relative path and bytes), run.json excluded.
std::string digest_tree(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "run.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files) acc += fs::relative(f, dir).string() + "=" + digest_file(f) + ";";
  return hash_string(acc) + " (" + std::to_string(files.size()) + " files)";
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

/// Shared pipeline artifacts, built on first use.
class Pipeline {
 public:
  explicit Pipeline(fs::path work) : work_(std::move(work)) {}

  const fs::path& work() const { return work_; }

  const Manifest& task() {
    if (!task_) {
      DatasetOptions o;
      o.n_pairs = kTaskPairs;
      o.seed = kTaskSeed;
      o.canvas_size = kCanvas;
      task_ = build_dataset(o, work_ / "task_dataset");
    }
    return *task_;
  }

  const Manifest& diffusion_data() {
    if (!diffusion_data_) {
      DatasetOptions o;
      o.n_pairs = kDiffusionPairs;
      o.seed = kDiffusionSeed;
      o.canvas_size = kCanvas;
      diffusion_data_ = build_dataset(o, work_ / "diffusion_dataset");
    }
    return *diffusion_data_;
  }

  const DiffusionModel& diffusion() {
    if (!diffusion_) {
      auto images = load_originals(diffusion_data(), Split::train);
      diffusion_images = images.size(0);
      DiffusionTrainConfig c;
      c.train_steps = kDiffusionSteps;
      c.seed = kDiffusionSeed;
      auto r = train_toy_diffusion(images, c);
      diffusion_seconds = r.seconds;
      diffusion_loss = r.loss_curve;
      save_diffusion(r.model, work_ / "diffusion" / "diffusion.pt");
      diffusion_ = std::move(r.model);
    }
    return *diffusion_;
  }

  const FeatureIndex& features() {
    if (!features_) {
      std::vector<Variant> vs = ablation_variants();
      if (std::find(vs.begin(), vs.end(), kStage1Variant) == vs.end()) vs.push_back(kStage1Variant);
      features_ = extract_features(task(), diffusion(), vs, work_ / "features", kInversionSteps);
    }
    return *features_;
  }

  const TrainingData& data() {
    if (!data_) data_ = load_training_data(task(), features(), kStage1Variant);
    return *data_;
  }

  const TrainResult& stage1() {
    if (!stage1_) {
      const auto& d = data();
      const auto start = Clock::now();
      stage1_ = train_stage1(d, desk_model(kStage1Variant), desk_stage1(kStage1Variant));
      stage1_seconds = seconds_since(start);
      save_checkpoint(stage1_->state, work_ / "stage1" / "checkpoint.pt");
      write_log(stage1_->log, work_ / "stage1" / "log.jsonl");
    }
    return *stage1_;
  }

  XEditUNet stage1_model() { return stage1().state.best_model(); }

  std::int64_t diffusion_images = 0;
  double diffusion_seconds = 0;
  std::vector<double> diffusion_loss;
  double stage1_seconds = 0;

 private:
  fs::path work_;
  std::optional<Manifest> task_, diffusion_data_;
  std::optional<DiffusionModel> diffusion_;
  std::optional<FeatureIndex> features_;
  std::optional<TrainingData> data_;
  std::optional<TrainResult> stage1_;
};

// 1 -------------------------------------------------------------------------
Verdict metric_oracles(Pipeline&) {
  const auto start = Clock::now();
  auto gen = make_generator(101);
  double worst_psnr = 0, worst_ssim = 0;
  for (int i = 0; i < 100; ++i) {
    auto support = at::rand({kCanvas, kCanvas}, gen, torch::kFloat64) > 0.7;
    auto y = at::rand({kCanvas, kCanvas}, gen, torch::kFloat64) * support;
    auto p = i == 0 ? y.clone() : (y + 0.1 * at::randn({kCanvas, kCanvas}, gen, torch::kFloat64)).clamp(0, 1);
    const auto gp = oracles::to_grid(p), gy = oracles::to_grid(y);
    worst_psnr = std::max(worst_psnr, std::abs(psnr(p, y) - oracles::psnr_oracle(gp, gy)));
    worst_ssim = std::max(worst_ssim, std::abs(ssim_value(p, y) - oracles::ssim_oracle(gp, gy)));
  }
  const double secs = seconds_since(start);
  return {worst_psnr <= kPsnrTol && worst_ssim <= kSsimTol && secs < kBudgetMetrics,
          "100 pairs 64x64: max |dPSNR| " + fmt(worst_psnr) + " (tol 1e-9), max |dSSIM| " + fmt(worst_ssim) +
              " (tol 1e-6), " + fmt(secs, 3) + " s"};
}

// 2 -------------------------------------------------------------------------
Verdict loss_examples(Pipeline&) {
  LossWeights w;
  auto gen = make_generator(202);
  auto y = at::rand({4, 1, 32, 32}, gen, torch::kFloat64) * (at::rand({4, 1, 32, 32}, gen, torch::kFloat64) > 0.6);
  const double self = segmentation_loss(y, y, w).item<double>();

  auto flat = sobel_decompose(torch::full({1, 1, 16, 16}, 0.4, torch::kFloat64));
  auto ones = torch::ones({1, 1, 16, 16}, torch::kFloat64);
  const double r_ones = relevance_loss(ones, flat, w).item<double>();
  const double r_zero = relevance_loss(torch::zeros_like(ones), flat, w).item<double>();
  const double r_edge = relevance_loss(ones, FrequencyMaps{ones, ones}, w).item<double>();

  bool rejects = false;
  try {
    total_loss(1.0, 1.0, LossWeights{0.2, 0.1, 3.0, 0.3, 0.6});
  } catch (const ConfigError&) {
    rejects = true;
  }
  const bool pass = self == 0.0 && std::abs(r_ones) <= kExactTol && std::abs(r_zero - 0.1) <= kExactTol &&
                    std::abs(r_edge - 3.0) <= kExactTol && rejects;
  return {pass, "seg(y,y) = " + fmt(self) + ", relevance {R=1 flat, R=0 flat, R=1 on H=1} = {" + fmt(r_ones, 17) +
                    ", " + fmt(r_zero, 17) + ", " + fmt(r_edge, 17) + "}, lambda 0.3+0.6 rejected: " +
                    (rejects ? "yes" : "no")};
}

// 3 -------------------------------------------------------------------------
double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-12});
}

Verdict gradient_checks(Pipeline&) {
  const auto start = Clock::now();
  const double h = 1e-6;
  auto gen = make_generator(303);

  // d segmentation_loss / d prediction
  auto y = at::rand({1, 1, kCanvas, kCanvas}, gen, torch::kFloat64) *
           (at::rand({1, 1, kCanvas, kCanvas}, gen, torch::kFloat64) > 0.7);
  auto p = at::rand({1, 1, kCanvas, kCanvas}, gen, torch::kFloat64).requires_grad_(true);
  LossWeights w;
  auto g = torch::autograd::grad({segmentation_loss(p, y, w)}, {p})[0].flatten();
  double worst_loss = 0;
  auto base = p.detach().flatten();
  for (int k = 0; k < 10; ++k) {
    const auto i = at::randint(base.size(0), {1}, gen, torch::kLong).item<std::int64_t>();
    auto up = base.clone(), down = base.clone();
    up[i] += h;
    down[i] -= h;
    const double num = (segmentation_loss(up.view(p.sizes()), y, w).item<double>() -
                        segmentation_loss(down.view(p.sizes()), y, w).item<double>()) /
                       (2 * h);
    worst_loss = std::max(worst_loss, relative_error(g[i].item<double>(), num));
  }

  // d (weighted network output) / d parameters
  auto mc = desk_model(Variant::phi);
  mc.input_size = 32;
  auto net = make_model(mc, 7);
  net->to(torch::kFloat64);
  auto x = at::rand({2, mc.in_channels, 32, 32}, gen, torch::kFloat64);
  auto weights = at::rand({2, 1, 32, 32}, gen, torch::kFloat64);
  auto objective = [&]() { return (net->forward(x) * weights).sum(); };
  auto params = net->parameters();
  auto grads = torch::autograd::grad({objective()}, params);
  std::int64_t total = 0;
  for (const auto& q : params) total += q.numel();
  double worst_net = 0;
  torch::NoGradGuard no_grad;
  for (int k = 0; k < 10; ++k) {
    auto flat_index = at::randint(total, {1}, gen, torch::kLong).item<std::int64_t>();
    std::size_t which = 0;
    while (flat_index >= params[which].numel()) flat_index -= params[which++].numel();
    auto q = params[which].view({-1});
    const double orig = q[flat_index].item<double>();
    q[flat_index] = orig + h;
    const double f_up = objective().item<double>();
    q[flat_index] = orig - h;
    const double f_down = objective().item<double>();
    q[flat_index] = orig;
    worst_net = std::max(worst_net, relative_error(grads[which].view({-1})[flat_index].item<double>(),
                                                   (f_up - f_down) / (2 * h)));
  }
  const double secs = seconds_since(start);
  return {worst_loss <= kGradRelTol && worst_net <= kGradRelTol && secs < kBudgetGradients,
          "float64 central differences: loss wrt prediction max rel err " + fmt(worst_loss) +
              ", output wrt 10 parameters max rel err " + fmt(worst_net) + " (tol 1e-3), " + fmt(secs, 3) + " s"};
}

// 4 -------------------------------------------------------------------------
Verdict ig_axioms(Pipeline& pipe) {
  // Frozen linear probe: attribution_i = w_i x_i / (H W) for the mean target.
  auto gen = make_generator(404);
  auto weights = at::randn({1, 12, 16, 16}, gen, torch::kFloat64);
  MaskFn probe = [&](const torch::Tensor& x) { return (x * weights).sum(1, true); };
  auto x = at::rand({1, 12, 16, 16}, gen, torch::kFloat64);
  auto lin = integrated_gradients(probe, x, {});
  const double lin_err = (lin.attributions - weights * x / 256.0).abs().max().item<double>();

  auto model = pipe.stage1_model();
  const auto& val = pipe.data().val;
  const auto start = Clock::now();
  MaskFn fn = [&](const torch::Tensor& t) { return model->forward(t); };
  IGOptions opt;
  opt.steps = 128;
  double worst = 0;
  std::string early;
  int used = 0;
  for (const auto& s : val) {
    if (used == 4) break;
    if (!s.is_edited) continue;
    auto r = integrated_gradients(fn, s.features, {}, opt);
    torch::NoGradGuard no_grad;
    const double base = model->forward(torch::zeros_like(s.features)).mean().item<double>();
    const double gap = model->forward(s.features).mean().item<double>() - base;
    worst = std::max(worst, std::abs(r.attributions.sum().item<double>() - gap) / std::abs(gap));
    // Share of the output change already reached before the first midpoint.
    const double first = model->forward(s.features / (2.0 * opt.steps)).mean().item<double>() - base;
    early += (early.empty() ? "" : ", ") + fmt(first / gap, 3);
    ++used;
  }
  const double secs = seconds_since(start);
  return {lin_err <= kExactTol && worst <= kIgCompletenessRel && used == 4 && secs < kBudgetIg,
          "linear probe max err " + fmt(lin_err) + "; completeness on trained checkpoint, 128 steps, " +
              std::to_string(used) + " samples: max rel gap " + fmt(worst) +
              " (tol 1%); [f(x/256)-f(0)]/[f(x)-f(0)] per sample: " + early + ", " + fmt(secs, 3) + " s"};
}

// 5 -------------------------------------------------------------------------
Verdict frequency_maps(Pipeline&) {
  auto gen = make_generator(505);
  auto f = sobel_decompose(at::rand({4, 3, kCanvas, kCanvas}, gen, torch::kFloat64));
  const double sum_err = (f.high + f.low - 1.0).abs().max().item<double>();
  const double const_h = sobel_decompose(torch::full({3, 32, 32}, 0.7, torch::kFloat64)).high.abs().max().item<double>();

  auto step = torch::zeros({1, 16, 16}, torch::kFloat64);
  step.slice(2, 9, 16).fill_(1.0);
  auto h = sobel_decompose(step).high[0];
  const auto oracle = oracles::sobel_oracle(oracles::to_grid(step));
  double peak = 0;
  for (const auto& row : oracle)
    for (double v : row) peak = std::max(peak, v);
  double step_err = 0;
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) {
      const double expected = (j == 8 || j == 9) ? 1.0 : 0.0;
      step_err = std::max({step_err, std::abs(h[i][j].item<double>() - expected),
                           std::abs(oracle[i][j] / peak - expected)});
    }
  return {sum_err <= kExactTol && const_h == 0.0 && step_err <= kExactTol,
          "max |H+L-1| " + fmt(sum_err) + ", constant-image max H " + fmt(const_h) + ", step-edge max err " +
              fmt(step_err)};
}

// 6 -------------------------------------------------------------------------
Verdict diffusion_round_trip(Pipeline& pipe) {
  const auto& model = pipe.diffusion();
  std::vector<torch::Tensor> held_out;
  for (const auto& e : pipe.task().pairs)
    if (e.split != Split::train) held_out.push_back(read_png(pipe.task().root / e.original_path, 3));
  auto images = torch::stack(held_out);
  std::vector<double> err;
  for (int n : {10, 25, 50}) err.push_back(round_trip_error(model, images, n).mean().item<double>());
  const auto& loss = pipe.diffusion_loss;
  double head = 0, tail = 0;
  for (int i = 0; i < 50; ++i) {
    head += loss[static_cast<std::size_t>(i)] / 50;
    tail += loss[loss.size() - 1 - static_cast<std::size_t>(i)] / 50;
  }
  const bool pass = pipe.diffusion_images >= 500 && err[2] <= kRoundTripMax && err[0] > err[1] &&
                    err[1] > err[2] && pipe.diffusion_seconds <= kBudgetDiffusion;
  return {pass, std::to_string(pipe.diffusion_images) + " training originals, " + std::to_string(kDiffusionSteps) +
                    " steps in " + fmt(pipe.diffusion_seconds, 4) + " s (loss " + fmt(head) + " -> " + fmt(tail) +
                    "); held-out MAE at n=10/25/50: " + fmt(err[0]) + " / " + fmt(err[1]) + " / " + fmt(err[2]) +
                    " on " + std::to_string(images.size(0)) + " originals (max 0.05, strictly decreasing)"};
}

// 7 -------------------------------------------------------------------------
Verdict learning_signal(Pipeline& pipe) {
  const auto& r = pipe.stage1();
  const auto& test = pipe.data().test;
  auto report = evaluate_samples(model_predictor(pipe.stage1_model()), test, "test");
  auto zero = evaluate_samples([](const Sample& s) { return torch::zeros_like(s.mask); }, test, "test");
  const double first = r.log.steps.front().seg_loss, last = r.log.steps.back().seg_loss;
  const bool pass = report.all.mean_ssim >= kStage1SsimMin &&
                    report.edited.mean_psnr >= zero.edited.mean_psnr + kStage1MarginDb &&
                    pipe.stage1_seconds <= kBudgetStage1;
  return {pass, "variant " + to_string(kStage1Variant) + ", " + std::to_string(r.log.steps.size()) + " steps in " +
                    fmt(pipe.stage1_seconds, 4) + " s (seg loss " + fmt(first) + " -> " + fmt(last) +
                    "); test SSIM " + fmt(report.all.mean_ssim) + " (min 0.7); edited PSNR " +
                    fmt(report.edited.mean_psnr) + " dB vs all-zero " + fmt(zero.edited.mean_psnr) +
                    " dB (margin >= 2 dB)"};
}

// 8 -------------------------------------------------------------------------
Verdict finetune_direction(Pipeline& pipe) {
  const auto& s1 = pipe.stage1();
  const auto& data = pipe.data();
  auto probe_cfg = desk_finetune(kStage1Variant);
  probe_cfg.ig_steps = 32;

  auto before_model = pipe.stage1_model();
  const double before = relevance_edge_mass(before_model, data.val, probe_cfg);
  auto ft = train_stage2_finetune(s1.state, data, desk_finetune(kStage1Variant));
  save_checkpoint(ft.state, pipe.work() / "finetune" / "checkpoint.pt");
  write_log(ft.log, pipe.work() / "finetune" / "log.jsonl");
  auto after_model = ft.state.best_model();
  const double after = relevance_edge_mass(after_model, data.val, probe_cfg);

  // lambda_R = 0 against plain stage-1 stepping from the same start.
  auto zero_cfg = desk_finetune(kStage1Variant);
  zero_cfg.epochs = 1;
  zero_cfg.ig_steps = 8;
  zero_cfg.relevance_samples = 2;
  zero_cfg.loss_weights.lambda_R = 0.0;
  zero_cfg.loss_weights.lambda_S = 1.0;
  auto degenerate = train_stage2_finetune(s1.state, data, zero_cfg);
  auto plain_cfg = zero_cfg;
  plain_cfg.stage = Stage::segmentation;
  auto plain = train_stage1(data, s1.state.model_config, plain_cfg, &s1.state);
  bool same = degenerate.log.steps.size() == plain.log.steps.size();
  for (std::size_t i = 0; same && i < plain.log.steps.size(); ++i)
    same = degenerate.log.steps[i].seg_loss == plain.log.steps[i].seg_loss &&
           degenerate.log.steps[i].total_loss == plain.log.steps[i].total_loss &&
           degenerate.log.steps[i].lr == plain.log.steps[i].lr;
  same = same && parameters_fingerprint(*degenerate.state.model) == parameters_fingerprint(*plain.state.model);

  double rel_sum = 0;
  for (const auto& r : ft.log.steps) rel_sum += r.rel_loss.value_or(0.0);
  return {after <= before && same,
          "validation mean R*H " + fmt(before, 6) + " -> " + fmt(after, 6) + " after " +
              std::to_string(ft.log.steps.size()) + " finetune steps (mean rel loss " +
              fmt(rel_sum / static_cast<double>(ft.log.steps.size())) + "); lambda_R=0 bit-exact vs stage-1 over " +
              std::to_string(plain.log.steps.size()) + " steps: " + (same ? "yes" : "no")};
}

// 9 -------------------------------------------------------------------------
Verdict false_positives(Pipeline& pipe) {
  const auto& samples = pipe.data().test;
  auto trained = original_histogram(model_predictor(pipe.stage1_model()), samples);
  auto mc = desk_model(kStage1Variant);
  mc.output_bias = 0.0;
  auto neutral = make_model(mc, 0);
  neutral->eval();
  auto untrained = original_histogram(model_predictor(neutral), samples);
  auto biased = make_model(desk_model(kStage1Variant), 0);
  biased->eval();
  auto untrained_biased = original_histogram(model_predictor(biased), samples);
  const double t = trained.fraction_above(kFalsePositiveLevel), u = untrained.fraction_above(kFalsePositiveLevel);
  const double mode = trained.mode_center();
  return {t < u && mode >= 0.0 && mode <= kHistogramModeMax,
          "fraction > 0.25 on " + std::to_string(trained.total) + " original pixels: trained " + fmt(t) +
              " vs untrained (zero head bias) " + fmt(u) + " [untrained with sparse-prior head bias: " +
              fmt(untrained_biased.fraction_above(kFalsePositiveLevel)) + "]; trained histogram mode at " +
              fmt(mode) + " (max 0.05)"};
}

// 10 ------------------------------------------------------------------------
Verdict ablation(Pipeline& pipe) {
  const auto& m = pipe.task();
  const auto& f = pipe.features();
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 16;
  const auto start = Clock::now();
  auto rows = run_ablation(m, f, desk_model(Variant::phi), tc);
  const double secs = seconds_since(start);
  std::ofstream(pipe.work() / "ablation.csv") << ablation_csv(rows);
  std::multiset<int> channels;
  std::set<std::string> prints;
  std::string table;
  for (const auto& r : rows) {
    channels.insert(r.channels);
    prints.insert(r.data_fingerprint);
    table += " " + to_string(r.variant) + ":" + fmt(r.psnr) + "/" + fmt(r.ssim, 3);
  }
  const bool pass = rows.size() == 6 && channels == std::multiset<int>{3, 6, 6, 9, 9, 12} && prints.size() == 1 &&
                    secs <= kBudgetAblation;
  return {pass, std::to_string(rows.size()) + " rows, channels {3,6,6,9,9,12}: " +
                    (channels == std::multiset<int>{3, 6, 6, 9, 9, 12} ? "yes" : "no") + ", " +
                    std::to_string(prints.size()) + " distinct data fingerprint(s), " + fmt(secs, 4) +
                    " s; PSNR/SSIM" + table};
}

// 11 ------------------------------------------------------------------------
Verdict determinism(Pipeline& pipe) {
  const auto dir = pipe.work() / "determinism";
  std::vector<std::string> failures;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };

  DatasetOptions o;
  o.n_pairs = 24;
  o.seed = 5;
  o.canvas_size = kCanvas;
  o.threads = 1;
  auto ds = build_dataset(o, dir / "dataset_a");
  o.threads = 3;
  build_dataset(o, dir / "dataset_b");
  check(digest_tree(dir / "dataset_a") == digest_tree(dir / "dataset_b"), "dataset");

  auto originals = load_originals(pipe.diffusion_data(), Split::train).slice(0, 0, 100);
  DiffusionTrainConfig dc;
  dc.train_steps = 20;
  dc.seed = 5;
  auto da = train_toy_diffusion(originals, dc);
  auto db = train_toy_diffusion(originals, dc);
  save_diffusion(da.model, dir / "a" / "diffusion.pt");
  save_diffusion(db.model, dir / "b" / "diffusion.pt");
  check(da.loss_curve == db.loss_curve && da.model.fingerprint() == db.model.fingerprint() &&
            digest_file(dir / "a" / "diffusion.pt") == digest_file(dir / "b" / "diffusion.pt"),
        "diffusion");

  extract_features(ds, pipe.diffusion(), {Variant::phi}, dir / "features_a", 10);
  extract_features(ds, pipe.diffusion(), {Variant::phi}, dir / "features_b", 10);
  check(digest_tree(dir / "features_a") == digest_tree(dir / "features_b"), "features");

  const auto& data = pipe.data();
  auto tc = desk_stage1(kStage1Variant);
  tc.epochs = 1;
  auto sa = train_stage1(data, desk_model(kStage1Variant), tc);
  auto sb = train_stage1(data, desk_model(kStage1Variant), tc);
  save_checkpoint(sa.state, dir / "a" / "stage1.pt");
  save_checkpoint(sb.state, dir / "b" / "stage1.pt");
  check(sa.log.same_records(sb.log) && digest_file(dir / "a" / "stage1.pt") == digest_file(dir / "b" / "stage1.pt"),
        "stage-1");

  auto fc = desk_finetune(kStage1Variant);
  fc.epochs = 1;
  fc.ig_steps = 8;
  fc.relevance_samples = 2;
  auto fa = train_stage2_finetune(sa.state, data, fc);
  auto fb = train_stage2_finetune(sa.state, data, fc);
  save_checkpoint(fa.state, dir / "a" / "finetune.pt");
  save_checkpoint(fb.state, dir / "b" / "finetune.pt");
  check(fa.log.same_records(fb.log) && digest_file(dir / "a" / "finetune.pt") == digest_file(dir / "b" / "finetune.pt"),
        "finetune");

  std::string detail = "dataset (1 vs 3 threads), diffusion training, feature extraction, stage-1, finetune: ";
  if (failures.empty()) return {true, detail + "logs and checkpoint bytes identical"};
  for (const auto& f : failures) detail += f + " ";
  return {false, detail + "differ"};
}

struct Criterion {
  int id;
  std::string name;
  std::function<Verdict(Pipeline&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance run over a desk-scale pipeline"};
  std::string work = "acceptance_run";
  std::vector<int> only, expected;
  app.add_option("--work-dir", work, "Scratch directory (wiped first)");
  app.add_option("--only", only, "Run only these criterion numbers");
  app.add_option("--expect-fail", expected,
                 "Criteria known to be unattainable at this scale; still reported, but they do not set the exit code");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "metric oracles", metric_oracles},
      {2, "loss examples", loss_examples},
      {3, "gradient checks", gradient_checks},
      {4, "integrated-gradients axioms", ig_axioms},
      {5, "frequency decomposition", frequency_maps},
      {6, "diffusion round trip", diffusion_round_trip},
      {7, "stage-1 learning signal", learning_signal},
      {8, "finetuning direction", finetune_direction},
      {9, "false-positive control", false_positives},
      {10, "ablation harness", ablation},
      {11, "determinism", determinism},
  };

  fs::remove_all(work);
  fs::create_directories(work);
  Pipeline pipe(work);
  nlohmann::json report = nlohmann::json::array();
  int failed = 0, known = 0;
  const auto start = Clock::now();
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = c.run(pipe);
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    const bool is_expected = std::find(expected.begin(), expected.end(), c.id) != expected.end();
    if (!v.pass) ++(is_expected ? known : failed);
    std::cout << (v.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << v.detail << " ("
              << fmt(secs, 4) << " s incl. shared setup)" << (!v.pass && is_expected ? " [expected failure]" : "")
              << std::endl;
    report.push_back({{"criterion", c.id}, {"name", c.name}, {"pass", v.pass}, {"expected_failure", is_expected},
                      {"detail", v.detail}, {"seconds", secs}});
  }
  write_json(fs::path(work) / "acceptance.json", report);
  std::cout << (failed ? "FAILED " : (known ? "PASSED WITH EXPECTED FAILURES " : "ALL PASSED ")) << "(" << failed
            << " unexpected and " << known << " expected failures, " << fmt(seconds_since(start), 5) << " s total)"
            << std::endl;
  return failed ? 1 : 0;
}
