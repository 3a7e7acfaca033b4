#pragma once

// U-Net segmentation network with CBAM attention after every double-conv.
// Four stride-2 encoder stages (the fourth is the bottleneck), four
// nearest-upsample decoder stages with skip concatenation, a 1x1 head and a
// logistic output so predictions lie in [0, 1].

#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xedit/common.hpp"

namespace xedit {

struct ModelConfig {
  int in_channels = 12;
  int base_width = 32;
  int depth = 4;
  bool cbam_enabled = true;
  int cbam_reduction = 16;
  int spatial_kernel = 7;
  int input_size = 64;
  int norm_groups = 8;
  /// Initial head bias. Edit masks are sparse, so the untrained network
  /// starts near sigmoid(-4) ~ 0.018 instead of 0.5.
  double output_bias = -4.0;

  void validate() const {
    if (in_channels < 1) throw ConfigError("in_channels must be positive");
    if (depth != 4) throw ConfigError("the segmentation network has exactly 4 down and 4 up stages");
    if (base_width < 1) throw ConfigError("base_width must be positive");
    if (cbam_reduction < 1) throw ConfigError("cbam_reduction must be positive");
    if (base_width < cbam_reduction)
      throw ConfigError("base_width (" + std::to_string(base_width) + ") must be at least cbam_reduction (" +
                        std::to_string(cbam_reduction) + ")");
    if (spatial_kernel < 1 || spatial_kernel % 2 == 0) throw ConfigError("spatial_kernel must be odd");
    if (input_size % 16 != 0) throw ConfigError("input_size must be divisible by 16");
  }

  nlohmann::json to_json() const {
    return {{"in_channels", in_channels},   {"base_width", base_width},         {"depth", depth},
            {"cbam_enabled", cbam_enabled}, {"cbam_reduction", cbam_reduction}, {"spatial_kernel", spatial_kernel},
            {"input_size", input_size},     {"norm_groups", norm_groups},       {"output_bias", output_bias}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.in_channels = j.at("in_channels");
    c.base_width = j.at("base_width");
    c.depth = j.at("depth");
    c.cbam_enabled = j.at("cbam_enabled");
    c.cbam_reduction = j.at("cbam_reduction");
    c.spatial_kernel = j.at("spatial_kernel");
    c.input_size = j.at("input_size");
    c.norm_groups = j.value("norm_groups", 8);
    c.output_bias = j.value("output_bias", -4.0);
    return c;
  }
};

inline int group_count(int max_groups, int channels) { return std::gcd(max_groups, channels); }

/// Shared two-layer bottleneck over global average- and max-pooled descriptors.
class ChannelAttentionImpl : public torch::nn::Module {
 public:
  ChannelAttentionImpl(int channels, int reduction) {
    if (channels < reduction)
      throw ConfigError("channel attention over " + std::to_string(channels) + " channels needs reduction <= channels, got " +
                        std::to_string(reduction));
    const int hidden = std::max(1, channels / reduction);
    fc1 = register_module("fc1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, hidden, 1)));
    fc2 = register_module("fc2", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, channels, 1)));
  }

  /// Weights in (0,1), shape [N, C, 1, 1].
  torch::Tensor weights(const torch::Tensor& f) {
    auto avg = f.mean({2, 3}, true);
    auto max = f.amax({2, 3}, true);
    return torch::sigmoid(mlp(avg) + mlp(max));
  }

  torch::Tensor forward(const torch::Tensor& f) { return f * weights(f); }

 private:
  torch::Tensor mlp(const torch::Tensor& x) { return fc2(torch::relu(fc1(x))); }
  torch::nn::Conv2d fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(ChannelAttention);

/// k x k convolution over the [channel-mean; channel-max] planes.
class SpatialAttentionImpl : public torch::nn::Module {
 public:
  explicit SpatialAttentionImpl(int kernel) {
    if (kernel < 1 || kernel % 2 == 0)
      throw ConfigError("spatial attention kernel must be odd, got " + std::to_string(kernel));
    conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(2, 1, kernel).padding(kernel / 2)));
  }

  /// Weights in (0,1), shape [N, 1, H, W].
  torch::Tensor weights(const torch::Tensor& f) {
    auto planes = torch::cat({f.mean(1, true), f.amax(1, true)}, 1);
    return torch::sigmoid(conv(planes));
  }

  torch::Tensor forward(const torch::Tensor& f) { return f * weights(f); }

 private:
  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(SpatialAttention);

/// Channel attention then spatial attention. Disabled blocks own no
/// parameters and pass input through untouched.
class CBAMImpl : public torch::nn::Module {
 public:
  CBAMImpl(int channels, int reduction, int kernel, bool enabled) : enabled_(enabled) {
    if (!enabled_) return;
    channel = register_module("channel", ChannelAttention(channels, reduction));
    spatial = register_module("spatial", SpatialAttention(kernel));
  }

  torch::Tensor forward(const torch::Tensor& f) {
    if (!enabled_) return f;
    return spatial(channel(f));
  }

  bool enabled() const { return enabled_; }

  ChannelAttention channel{nullptr};
  SpatialAttention spatial{nullptr};

 private:
  bool enabled_;
};
TORCH_MODULE(CBAM);

/// conv3x3 -> GN -> SiLU -> conv3x3 -> GN -> SiLU -> CBAM. The first conv
/// carries the stage stride.
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int in_ch, int out_ch, int stride, const ModelConfig& cfg) {
    conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 3).stride(stride).padding(1)));
    norm1 = register_module("norm1", torch::nn::GroupNorm(group_count(cfg.norm_groups, out_ch), out_ch));
    conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_ch, out_ch, 3).padding(1)));
    norm2 = register_module("norm2", torch::nn::GroupNorm(group_count(cfg.norm_groups, out_ch), out_ch));
    cbam = register_module("cbam", CBAM(out_ch, cfg.cbam_reduction, cfg.spatial_kernel, cfg.cbam_enabled));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto h = torch::silu(norm1(conv1(x)));
    h = torch::silu(norm2(conv2(h)));
    return cbam(h);
  }

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  CBAM cbam{nullptr};
};
TORCH_MODULE(ConvBlock);

/// Nearest x2 upsample, conv to the skip width, concat skip, ConvBlock.
class UpStageImpl : public torch::nn::Module {
 public:
  UpStageImpl(int in_ch, int skip_ch, const ModelConfig& cfg) {
    reduce = register_module("reduce", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, skip_ch, 3).padding(1)));
    block = register_module("block", ConvBlock(2 * skip_ch, skip_ch, 1, cfg));
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip) {
    namespace F = torch::nn::functional;
    auto up = F::interpolate(
        x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
    return block(torch::cat({reduce(up), skip}, 1));
  }

  torch::nn::Conv2d reduce{nullptr};
  ConvBlock block{nullptr};
};
TORCH_MODULE(UpStage);

class XEditUNetImpl : public torch::nn::Module {
 public:
  explicit XEditUNetImpl(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int w = cfg.base_width;
    stem = register_module("stem", ConvBlock(cfg.in_channels, w, 1, cfg));
    for (int i = 0; i < 4; ++i)
      down.push_back(register_module("down" + std::to_string(i), ConvBlock(w << i, w << (i + 1), 2, cfg)));
    for (int i = 3; i >= 0; --i)
      up.push_back(register_module("up" + std::to_string(i), UpStage(w << (i + 1), w << i, cfg)));
    head = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(w, 1, 1)));
    torch::NoGradGuard no_grad;
    head->bias.fill_(cfg.output_bias);
  }

  /// Pre-sigmoid output, [N, 1, H, W].
  torch::Tensor logits(const torch::Tensor& input) {
    auto x = input.dim() == 3 ? input.unsqueeze(0) : input;
    if (x.dim() != 4 || x.size(1) != cfg_.in_channels)
      throw ContractError("segmentation input has " + std::to_string(x.dim() >= 3 ? x.size(-3) : -1) +
                          " channels, model expects " + std::to_string(cfg_.in_channels));
    if (x.size(2) % 16 != 0 || x.size(3) % 16 != 0)
      throw ContractError("segmentation input spatial size must be divisible by 16");
    std::vector<torch::Tensor> skips;
    auto h = stem(x);
    for (auto& d : down) {
      skips.push_back(h);
      h = d(h);
    }
    for (std::size_t i = 0; i < up.size(); ++i) h = up[i](h, skips[skips.size() - 1 - i]);
    return head(h);
  }

  /// Predicted mask in [0,1]; [N,1,H,W] for batched input, [1,H,W] otherwise.
  torch::Tensor forward(const torch::Tensor& input) {
    auto y = torch::sigmoid(logits(input));
    return input.dim() == 3 ? y.squeeze(0) : y;
  }

  const ModelConfig& config() const { return cfg_; }

  std::vector<CBAM> attention_blocks() const {
    std::vector<CBAM> out{stem->cbam};
    for (const auto& d : down) out.push_back(d->cbam);
    for (const auto& u : up) out.push_back(u->block->cbam);
    return out;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }

  ConvBlock stem{nullptr};
  std::vector<ConvBlock> down;
  std::vector<UpStage> up;
  torch::nn::Conv2d head{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(XEditUNet);

/// Seeded construction; identical (config, seed) gives identical parameters.
inline XEditUNet make_model(const ModelConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(stage_seed(seed, "model-init"));
  return XEditUNet(cfg);
}

inline std::string parameters_fingerprint(const torch::nn::Module& m) {
  std::string acc;
  for (const auto& p : m.parameters()) acc += tensor_fingerprint(p);
  return hash_string(acc);
}

}  // namespace xedit
