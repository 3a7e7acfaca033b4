#pragma once

#include <filesystem>
#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "xedit/common.hpp"

namespace xedit {

namespace fs = std::filesystem;

// Images are float tensors laid out C x H x W with values in [0, 1].
// Files are 8-bit PNG; values are quantized with round-to-nearest.

inline torch::Tensor to_uint8(const torch::Tensor& chw) {
  return chw.detach().to(torch::kFloat64).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8);
}

inline void write_png(const fs::path& path, const torch::Tensor& chw) {
  require(chw.dim() == 3 && (chw.size(0) == 1 || chw.size(0) == 3),
          "write_png expects a 1- or 3-channel CHW tensor");
  const int channels = static_cast<int>(chw.size(0));
  const int h = static_cast<int>(chw.size(1));
  const int w = static_cast<int>(chw.size(2));
  auto hwc = to_uint8(chw).permute({1, 2, 0}).contiguous();
  if (channels == 3) hwc = hwc.flip(2).contiguous();  // RGB -> BGR
  cv::Mat mat(h, w, channels == 3 ? CV_8UC3 : CV_8UC1, hwc.data_ptr<std::uint8_t>());
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), mat);
  } catch (const cv::Exception& e) {
    throw IoError("cannot write " + path.string() + ": " + e.what());
  }
  if (!ok) throw IoError("cannot write " + path.string());
}

/// Reads a PNG as float32 CHW in [0,1]. `channels` is 3 (RGB) or 1 (gray).
inline torch::Tensor read_png(const fs::path& path, int channels = 3) {
  cv::Mat mat = cv::imread(path.string(), channels == 3 ? cv::IMREAD_COLOR : cv::IMREAD_GRAYSCALE);
  if (mat.empty()) throw IoError("cannot read image " + path.string());
  auto t = torch::from_blob(mat.data, {mat.rows, mat.cols, channels}, torch::kUInt8).clone();
  if (channels == 3) t = t.flip(2);  // BGR -> RGB
  return t.permute({2, 0, 1}).contiguous().to(torch::kFloat32).div(255.0);
}

/// Horizontal strip of equally sized panels; gray panels are broadcast to RGB.
inline torch::Tensor panel_strip(const std::vector<torch::Tensor>& panels) {
  std::vector<torch::Tensor> rgb;
  rgb.reserve(panels.size());
  for (const auto& p : panels) {
    auto q = p.detach().to(torch::kFloat32);
    rgb.push_back(q.size(0) == 1 ? q.expand({3, q.size(1), q.size(2)}) : q);
  }
  return torch::cat(rgb, 2);
}

}  // namespace xedit
