#pragma once

// Segmentation loss (MSE + SSIM), Sobel high/low-frequency maps,
// integrated-gradients relevance maps, the relevance loss and the combined
// objective. Everything here is a pure function of its arguments.

#include <cmath>
#include <functional>

#include "xedit/common.hpp"

namespace xedit {

struct LossWeights {
  double alpha = 0.2;
  double lambda_flat = 0.1;
  double lambda_edge = 3.0;
  double lambda_R = 0.5;
  double lambda_S = 0.5;

  void validate() const {
    if (alpha < 0 || lambda_flat < 0 || lambda_edge < 0 || lambda_R < 0 || lambda_S < 0)
      throw ConfigError("loss weights must be nonnegative");
    if (std::abs(lambda_R + lambda_S - 1.0) > 1e-12)
      throw ConfigError("lambda_R + lambda_S must equal 1 (got " + std::to_string(lambda_R) + " + " +
                        std::to_string(lambda_S) + ")");
  }

  static LossWeights make(double alpha, double lambda_flat, double lambda_edge, double lambda_R, double lambda_S) {
    LossWeights w{alpha, lambda_flat, lambda_edge, lambda_R, lambda_S};
    w.validate();
    return w;
  }
};

namespace detail {
inline torch::Tensor as_nchw(const torch::Tensor& t) {
  if (t.dim() == 2) return t.unsqueeze(0).unsqueeze(0);
  if (t.dim() == 3) return t.unsqueeze(0);
  return t;
}
}  // namespace detail

inline torch::Tensor mse(const torch::Tensor& a, const torch::Tensor& b) { return (a - b).pow(2).mean(); }

// ---------------------------------------------------------------------------
// SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic
// range 1, valid windows only. Same function backs the loss and the metrics.

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

inline torch::Tensor ssim_window(torch::ScalarType dtype) {
  auto x = torch::arange(kSsimWindow, torch::kFloat64) - (kSsimWindow / 2);
  auto g = torch::exp(-x.pow(2) / (2.0 * kSsimSigma * kSsimSigma));
  g = g / g.sum();
  return torch::outer(g, g).to(dtype).view({1, 1, kSsimWindow, kSsimWindow});
}

/// Per-image mean SSIM, shape [N]. Inputs [H,W], [C,H,W] or [N,C,H,W]; for
/// C > 1 channels are averaged.
inline torch::Tensor ssim_per_image(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw ContractError("ssim: input shapes differ");
  auto x = detail::as_nchw(a);
  auto y = detail::as_nchw(b);
  if (x.size(-1) < kSsimWindow || x.size(-2) < kSsimWindow)
    throw ContractError("ssim: inputs must be at least 11x11");
  const auto n = x.size(0);
  const auto c = x.size(1);
  x = x.reshape({n * c, 1, x.size(2), x.size(3)});
  y = y.reshape({n * c, 1, y.size(2), y.size(3)});
  auto win = ssim_window(x.scalar_type());
  auto filt = [&](const torch::Tensor& t) { return torch::conv2d(t, win); };
  auto mu_x = filt(x);
  auto mu_y = filt(y);
  auto sxx = filt(x * x) - mu_x * mu_x;
  auto syy = filt(y * y) - mu_y * mu_y;
  auto sxy = filt(x * y) - mu_x * mu_y;
  auto map = ((2.0 * mu_x * mu_y + kSsimC1) * (2.0 * sxy + kSsimC2)) /
             ((mu_x * mu_x + mu_y * mu_y + kSsimC1) * (sxx + syy + kSsimC2));
  return map.reshape({n, -1}).mean(1);
}

/// Mean SSIM over all images in the batch (scalar, differentiable).
inline torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b) { return ssim_per_image(a, b).mean(); }

/// MSE(pred, target) + alpha * (1 - SSIM(pred, target)).
inline torch::Tensor segmentation_loss(const torch::Tensor& pred, const torch::Tensor& target, const LossWeights& w) {
  if (pred.sizes() != target.sizes()) throw ContractError("segmentation_loss: shapes differ");
  return mse(pred, target) + w.alpha * (1.0 - ssim(pred, target));
}

// ---------------------------------------------------------------------------
// Sobel decomposition

struct FrequencyMaps {
  torch::Tensor high;  // H(x), [N,1,H,W] or [1,H,W]
  torch::Tensor low;   // L(x) = 1 - H(x)
};

inline torch::Tensor luminance(const torch::Tensor& x) {
  auto t = detail::as_nchw(x);
  if (t.size(1) == 1) return t;
  require(t.size(1) == 3, "luminance expects 1 or 3 channels");
  return t.select(1, 0).unsqueeze(1) * 0.299 + t.select(1, 1).unsqueeze(1) * 0.587 +
         t.select(1, 2).unsqueeze(1) * 0.114;
}

/// Raw Sobel gradient magnitude of the luminance, reflect padding, [N,1,H,W].
inline torch::Tensor sobel_magnitude(const torch::Tensor& x) {
  auto g = luminance(x);
  auto kx = torch::tensor({-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0}, torch::kFloat64)
                .view({1, 1, 3, 3})
                .to(g.scalar_type());
  auto ky = kx.transpose(2, 3).contiguous();
  namespace F = torch::nn::functional;
  auto p = F::pad(g, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReflect));
  auto gx = torch::conv2d(p, kx);
  auto gy = torch::conv2d(p, ky);
  return torch::sqrt(gx * gx + gy * gy);
}

/// H = magnitude / per-image max (H = 0 when the max is below eps), L = 1 - H.
inline FrequencyMaps sobel_decompose(const torch::Tensor& x, double eps = 1e-12) {
  torch::NoGradGuard no_grad;
  auto mag = sobel_magnitude(x);
  auto peak = mag.amax({1, 2, 3}, true);
  auto high = torch::where(peak < eps, torch::zeros_like(mag), mag / peak.clamp_min(eps));
  if (x.dim() == 3 || x.dim() == 2) high = high.squeeze(0);
  return {high, 1.0 - high};
}

// ---------------------------------------------------------------------------
// Integrated gradients

/// Maps a batch [N,C,H,W] to predicted masks [N,1,H,W].
using MaskFn = std::function<torch::Tensor(const torch::Tensor&)>;
/// Maps predicted masks [N,1,H,W] to one target scalar per sample, [N].
using TargetReducer = std::function<torch::Tensor(const torch::Tensor&)>;

inline torch::Tensor mean_target(const torch::Tensor& pred) { return pred.flatten(1).mean(1); }

struct IGOptions {
  int steps = 32;
  TargetReducer target = mean_target;
  /// Keep the graph so the relevance map itself can be differentiated.
  bool create_graph = false;
  /// Channel range [first, first+count) summed into the map; count < 0 = all.
  int channel_first = 0;
  int channel_count = -1;
  /// Path points evaluated per forward call.
  int chunk = 32;
};

struct RelevanceMap {
  torch::Tensor values;        // [N,1,H,W] (or [1,H,W]) in [0,1]
  torch::Tensor attributions;  // raw per-element attributions, input shape
  int ig_steps = 0;
};

/// Integrated gradients along baseline -> input with the midpoint rule.
/// An empty baseline means the all-zero stack.
inline RelevanceMap integrated_gradients(const MaskFn& model, const torch::Tensor& input,
                                         const torch::Tensor& baseline, const IGOptions& opt = {}) {
  if (opt.steps < 8) throw ConfigError("integrated gradients needs at least 8 steps");
  auto x = detail::as_nchw(input);
  auto base = baseline.defined() ? detail::as_nchw(baseline) : torch::zeros_like(x);
  if (base.sizes() != x.sizes()) throw ContractError("integrated_gradients: baseline shape differs from input");

  const auto n = x.size(0);
  const auto s = static_cast<std::int64_t>(opt.steps);
  auto alphas = (torch::arange(s, x.options()) + 0.5) / static_cast<double>(s);
  auto delta = x - base;

  // Path points ordered sample-major: row i*s + k is sample i at alpha_k.
  auto path = base.unsqueeze(1) + alphas.view({1, s, 1, 1, 1}) * delta.unsqueeze(1);
  path = path.reshape({n * s, x.size(1), x.size(2), x.size(3)});

  // Gradients are taken w.r.t. detached path points; with create_graph they
  // stay differentiable w.r.t. the model parameters.
  const auto chunk = std::max<std::int64_t>(1, opt.chunk);
  std::vector<torch::Tensor> grads;
  for (std::int64_t start = 0; start < n * s; start += chunk) {
    const auto stop = std::min(n * s, start + chunk);
    auto leaf = path.slice(0, start, stop).detach().requires_grad_(true);
    auto target = opt.target(model(leaf)).sum();
    auto g = torch::autograd::grad({target}, {leaf}, {}, /*retain_graph=*/opt.create_graph,
                                   /*create_graph=*/opt.create_graph)[0];
    grads.push_back(g);
  }
  auto all = torch::cat(grads, 0).view({n, s, x.size(1), x.size(2), x.size(3)});
  auto avg_grad = all.mean(1);
  auto attributions = delta * avg_grad;

  auto selected = attributions;
  if (opt.channel_count >= 0) selected = attributions.narrow(1, opt.channel_first, opt.channel_count);
  auto spatial = selected.abs().sum(1, true);
  auto peak = spatial.amax({1, 2, 3}, true);
  auto values = torch::where(peak < 1e-12, torch::zeros_like(spatial), spatial / peak.clamp_min(1e-12));

  RelevanceMap r;
  r.values = input.dim() == 3 ? values.squeeze(0) : values;
  r.attributions = input.dim() == 3 ? attributions.squeeze(0) : attributions;
  r.ig_steps = opt.steps;
  return r;
}

// ---------------------------------------------------------------------------
// Relevance and combined losses

/// lambda_flat * MSE(R*L, 1) + lambda_edge * MSE(R*H, 0), pixel-averaged.
inline torch::Tensor relevance_loss(const torch::Tensor& relevance, const FrequencyMaps& f, const LossWeights& w) {
  if (relevance.sizes() != f.high.sizes() || relevance.sizes() != f.low.sizes())
    throw ContractError("relevance_loss: relevance and frequency maps are not aligned");
  auto flat = (relevance * f.low - 1.0).pow(2).mean();
  auto edge = (relevance * f.high).pow(2).mean();
  return w.lambda_flat * flat + w.lambda_edge * edge;
}

/// lambda_R * rel + lambda_S * seg.
inline torch::Tensor total_loss(const torch::Tensor& seg, const torch::Tensor& rel, const LossWeights& w) {
  w.validate();
  return w.lambda_R * rel + w.lambda_S * seg;
}

inline double total_loss(double seg, double rel, const LossWeights& w) {
  w.validate();
  return w.lambda_R * rel + w.lambda_S * seg;
}

}  // namespace xedit
