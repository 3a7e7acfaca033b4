#pragma once

// PSNR/SSIM evaluation of predicted masks, false-positive statistics on
// original images, and the input-ablation and baseline comparison harnesses.

#include <algorithm>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "xedit/training.hpp"

namespace xedit {

/// Maps one sample to a predicted mask [1,H,W].
using Predictor = std::function<torch::Tensor(const Sample&)>;

inline Predictor model_predictor(XEditUNet model) {
  return [model](const Sample& s) mutable {
    torch::NoGradGuard g;
    return model->forward(s.features);
  };
}

struct PairMetrics {
  std::string pair_id;
  double psnr = 0;
  double ssim = 0;
  bool is_edited = false;
  double mean_pred = 0;
};

struct Aggregate {
  std::size_t count = 0;
  double mean_psnr = 0;
  double median_psnr = 0;
  double mean_ssim = 0;
};

struct MetricsReport {
  std::string split;
  std::vector<PairMetrics> rows;  // sorted by pair_id
  Aggregate all, edited, original;
  std::string checkpoint_fingerprint;
  std::string variant;
  std::string data_fingerprint;
  std::vector<std::string> missing;  // pairs whose features were unavailable

  bool ok() const { return missing.empty(); }
};

inline Aggregate aggregate(const std::vector<PairMetrics>& rows, const std::function<bool(const PairMetrics&)>& keep) {
  Aggregate a;
  std::vector<double> ps;
  for (const auto& r : rows) {
    if (!keep(r)) continue;
    ps.push_back(r.psnr);
    a.mean_psnr += r.psnr;
    a.mean_ssim += r.ssim;
  }
  a.count = ps.size();
  if (ps.empty()) return a;
  a.mean_psnr /= static_cast<double>(a.count);
  a.mean_ssim /= static_cast<double>(a.count);
  std::sort(ps.begin(), ps.end());
  const auto mid = ps.size() / 2;
  a.median_psnr = ps.size() % 2 ? ps[mid] : 0.5 * (ps[mid - 1] + ps[mid]);
  return a;
}

/// Recomputes the aggregates from the rows; rows are put in pair-id order
/// first so the result does not depend on input order.
inline void finalize(MetricsReport& r) {
  std::sort(r.rows.begin(), r.rows.end(), [](const auto& a, const auto& b) { return a.pair_id < b.pair_id; });
  r.all = aggregate(r.rows, [](const auto&) { return true; });
  r.edited = aggregate(r.rows, [](const auto& m) { return m.is_edited; });
  r.original = aggregate(r.rows, [](const auto& m) { return !m.is_edited; });
}

inline MetricsReport evaluate_samples(const Predictor& predict, const std::vector<Sample>& samples,
                                      const std::string& split) {
  MetricsReport r;
  r.split = split;
  for (const auto& s : samples) {
    auto p = predict(s);
    r.rows.push_back({s.pair_id, psnr(p, s.mask), ssim_value(p, s.mask), s.is_edited, p.mean().item<double>()});
  }
  finalize(r);
  return r;
}

/// Evaluates a checkpoint on one manifest split, reading features from the
/// cache. Pairs without cached features are listed in `missing`.
inline MetricsReport evaluate_split(const TrainState& checkpoint, const Manifest& m, const FeatureIndex& features,
                                    Split split) {
  auto model = checkpoint.best_model();
  auto predict = model_predictor(model);
  MetricsReport r;
  r.split = to_string(split);
  for (const auto* e : m.select(split)) {
    const auto side = input_side(*e);
    if (!features.has(e->pair_id, side, checkpoint.variant)) {
      r.missing.push_back(e->pair_id);
      continue;
    }
    Sample s;
    s.pair_id = e->pair_id;
    s.features = features.load(e->pair_id, side, checkpoint.variant).values;
    s.mask = read_png(m.root / e->mask_path, 1);
    s.is_edited = e->is_edited;
    auto p = predict(s);
    r.rows.push_back({s.pair_id, psnr(p, s.mask), ssim_value(p, s.mask), s.is_edited, p.mean().item<double>()});
  }
  finalize(r);
  r.checkpoint_fingerprint = parameters_fingerprint(*model);
  r.variant = to_string(checkpoint.variant);
  r.data_fingerprint = m.fingerprint();
  return r;
}

inline json to_json(const Aggregate& a) {
  return {{"count", a.count}, {"mean_psnr", a.mean_psnr}, {"median_psnr", a.median_psnr}, {"mean_ssim", a.mean_ssim}};
}

inline json to_json(const MetricsReport& r) {
  json rows = json::array();
  for (const auto& m : r.rows)
    rows.push_back({{"pair_id", m.pair_id}, {"psnr", m.psnr}, {"ssim", m.ssim}, {"is_edited", m.is_edited},
                    {"mean_pred", m.mean_pred}});
  return {{"format_version", kFormatVersion},
          {"split", r.split},
          {"fingerprint", {{"checkpoint", r.checkpoint_fingerprint}, {"variant", r.variant}, {"data", r.data_fingerprint}}},
          {"aggregates", {{"all", to_json(r.all)}, {"edited", to_json(r.edited)}, {"original", to_json(r.original)}}},
          {"psnr_cap_db", kPsnrCapDb},
          {"missing", r.missing},
          {"pairs", rows}};
}

// ---------------------------------------------------------------------------
// Original-image prediction histogram

struct PredictionHistogram {
  std::vector<double> edges;  // bins + 1 edges covering [0,1]
  std::vector<std::int64_t> counts;
  std::int64_t total = 0;
  std::vector<std::pair<double, double>> above;  // (threshold, fraction of pixels > threshold)

  std::size_t mode_bin() const {
    return static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  }
  double mode_center() const {
    const auto b = mode_bin();
    return 0.5 * (edges[b] + edges[b + 1]);
  }
  double fraction_above(double threshold) const {
    for (const auto& [t, f] : above)
      if (t == threshold) return f;
    throw ContractError("threshold not tracked by the histogram");
  }
};

inline PredictionHistogram original_histogram(const Predictor& predict, const std::vector<Sample>& samples,
                                              int bins = 100,
                                              const std::vector<double>& thresholds = {0.1, 0.25, 0.5}) {
  PredictionHistogram h;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (int i = 0; i <= bins; ++i) h.edges.push_back(static_cast<double>(i) / bins);
  std::vector<std::int64_t> above(thresholds.size(), 0);
  std::size_t originals = 0;
  for (const auto& s : samples) {
    if (s.is_edited) continue;
    ++originals;
    auto p = predict(s).detach().to(torch::kFloat64).contiguous().flatten();
    auto idx = (p * bins).floor().clamp(0, bins - 1).to(torch::kLong);
    auto counts = torch::bincount(idx, {}, bins);
    auto acc = counts.accessor<std::int64_t, 1>();
    for (int b = 0; b < bins; ++b) h.counts[static_cast<std::size_t>(b)] += acc[b];
    for (std::size_t t = 0; t < thresholds.size(); ++t) above[t] += (p > thresholds[t]).sum().item<std::int64_t>();
    h.total += p.numel();
  }
  if (originals == 0) throw ConfigError("original_histogram: no original images in the split");
  for (std::size_t t = 0; t < thresholds.size(); ++t)
    h.above.emplace_back(thresholds[t], static_cast<double>(above[t]) / static_cast<double>(h.total));
  return h;
}

inline void write_histogram_csv(const PredictionHistogram& h, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b < h.counts.size(); ++b)
    out << h.edges[b] << "," << h.edges[b + 1] << "," << h.counts[b] << "\n";
  for (const auto& [t, f] : h.above) out << "# fraction_above_" << t << "," << f << "\n";
}

// ---------------------------------------------------------------------------
// Overlays: original | edited | ground truth | prediction

inline void write_overlay(const fs::path& path, const torch::Tensor& original, const torch::Tensor& edited,
                          const torch::Tensor& gt, const torch::Tensor& pred) {
  write_png(path, panel_strip({original, edited, gt, pred}));
}

// ---------------------------------------------------------------------------
// Full-scale reference values (display only)

struct ReferenceRow {
  std::string model;
  std::string input;
  double psnr;
  double ssim;
};

inline double reference_psnr_ablation(Variant v) {
  switch (v) {
    case Variant::A: return 24.632;
    case Variant::B: return 24.535;
    case Variant::C: return 24.677;
    case Variant::D: return 24.709;
    case Variant::E: return 24.576;
    case Variant::phi: return 24.831;
    default: return std::nan("");
  }
}

inline double reference_ssim_ablation(Variant v) {
  switch (v) {
    case Variant::A: return 0.859;
    case Variant::B: return 0.837;
    case Variant::C: return 0.894;
    case Variant::D: return 0.889;
    case Variant::E: return 0.893;
    case Variant::phi: return 0.875;
    default: return std::nan("");
  }
}

inline const std::vector<ReferenceRow>& reference_baseline_rows() {
  static const std::vector<ReferenceRow> rows{
      {"U-Net", "x", 24.672, 0.902},
      {"U-Net", "phi_fi", 24.785, 0.919},
      {"X-Edit", "phi_fi", 24.946, 0.945},
      {"X-Edit", "phi", 24.831, 0.875},
      {"X-Edit + finetuning", "phi_fi", 24.926, 0.943},
      {"X-Edit + finetuning", "phi", 24.270, 0.954},
  };
  return rows;
}

// ---------------------------------------------------------------------------
// Ablation over partial feature stacks

struct AblationRow {
  Variant variant;
  std::string description;
  int channels = 0;
  double psnr = 0;
  double ssim = 0;
  std::string data_fingerprint;
  double reference_psnr = 0;
  double reference_ssim = 0;
};

inline const std::vector<Variant>& ablation_variants() {
  static const std::vector<Variant> v{Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::phi};
  return v;
}

/// Trains one model per variant with identical seeds and epochs and
/// evaluates each on the test split.
inline std::vector<AblationRow> run_ablation(const Manifest& m, const FeatureIndex& features,
                                             const ModelConfig& base, const TrainConfig& cfg,
                                             const std::function<void(const AblationRow&)>& on_row = {}) {
  std::vector<AblationRow> rows;
  for (auto v : ablation_variants()) {
    auto data = load_training_data(m, features, v);
    auto mc = base;
    mc.in_channels = variant_channels(v);
    auto tc = cfg;
    tc.variant = v;
    auto trained = train_stage1(data, mc, tc);
    auto report = evaluate_samples(model_predictor(trained.state.best_model()), data.test, "test");
    AblationRow row{v,
                    variant_description(v),
                    mc.in_channels,
                    report.all.mean_psnr,
                    report.all.mean_ssim,
                    data.fingerprint,
                    reference_psnr_ablation(v),
                    reference_ssim_ablation(v)};
    if (on_row) on_row(row);
    rows.push_back(row);
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << std::setprecision(6) << std::fixed;
  out << "variant,input,channels,psnr,ssim,data_fingerprint,reference_psnr,reference_ssim\n";
  for (const auto& r : rows)
    out << to_string(r.variant) << ",\"" << r.description << "\"," << r.channels << "," << r.psnr << "," << r.ssim
        << "," << r.data_fingerprint << "," << r.reference_psnr << "," << r.reference_ssim << "\n";
  out << "# PSNR capped at " << kPsnrCapDb << " dB for zero-error pairs.\n";
  out << "# reference_* columns are full-scale values shown for context; they are not reproduced here.\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Plain U-Net vs attention U-Net on the same data

struct BaselineRow {
  std::string model;
  std::string input;
  double psnr = 0;
  double ssim = 0;
  std::string data_fingerprint;
};

inline std::vector<BaselineRow> compare_baseline(const TrainingData& data, const ModelConfig& base,
                                                 const TrainConfig& cfg) {
  std::vector<BaselineRow> rows;
  for (bool cbam : {false, true}) {
    auto mc = base;
    mc.cbam_enabled = cbam;
    mc.in_channels = variant_channels(data.variant);
    auto tc = cfg;
    tc.variant = data.variant;
    auto trained = train_stage1(data, mc, tc);
    auto report = evaluate_samples(model_predictor(trained.state.best_model()), data.test, "test");
    rows.push_back({cbam ? "X-Edit" : "U-Net", to_string(data.variant), report.all.mean_psnr, report.all.mean_ssim,
                    data.fingerprint});
  }
  return rows;
}

inline std::string baseline_table(const std::vector<BaselineRow>& rows) {
  std::ostringstream out;
  out << std::setprecision(3) << std::fixed;
  out << "model,input,psnr,ssim,data_fingerprint\n";
  for (const auto& r : rows)
    out << r.model << "," << r.input << "," << r.psnr << "," << r.ssim << "," << r.data_fingerprint << "\n";
  out << "# reference (full scale, not reproduced here)\n";
  for (const auto& r : reference_baseline_rows())
    out << "# " << r.model << "," << r.input << "," << r.psnr << "," << r.ssim << "\n";
  return out.str();
}

}  // namespace xedit
