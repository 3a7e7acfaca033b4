#pragma once

#include <cmath>

#include "xedit/losses.hpp"

namespace xedit {

inline constexpr double kPsnrCapDb = 100.0;
inline constexpr double kPsnrMinMse = 1e-10;

/// 10 log10(1 / MSE) for masks in [0,1]; 100 dB when MSE < 1e-10.
inline double psnr(const torch::Tensor& pred, const torch::Tensor& target) {
  if (pred.sizes() != target.sizes()) throw ContractError("psnr: shapes differ");
  const double m = (pred.to(torch::kFloat64) - target.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (m < kPsnrMinMse) return kPsnrCapDb;
  return 10.0 * std::log10(1.0 / m);
}

/// SSIM of one mask pair as a double, computed in float64.
inline double ssim_value(const torch::Tensor& pred, const torch::Tensor& target) {
  return ssim(pred.to(torch::kFloat64), target.to(torch::kFloat64)).item<double>();
}

}  // namespace xedit
