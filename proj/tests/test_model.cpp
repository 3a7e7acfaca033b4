#include <gtest/gtest.h>

#include "xedit/model.hpp"

using namespace xedit;

namespace {

ModelConfig small_config(int in_channels = 12, bool cbam = true) {
  ModelConfig c;
  c.in_channels = in_channels;
  c.base_width = 8;
  c.cbam_reduction = 4;
  c.cbam_enabled = cbam;
  c.input_size = 32;
  return c;
}

// Independent parameter tally from layer shapes.
std::int64_t conv(std::int64_t in, std::int64_t out, std::int64_t k) { return in * out * k * k + out; }
std::int64_t cbam(std::int64_t c, const ModelConfig& cfg) {
  if (!cfg.cbam_enabled) return 0;
  const std::int64_t h = std::max<std::int64_t>(1, c / cfg.cbam_reduction);
  return (c * h + h) + (h * c + c) + (2 * cfg.spatial_kernel * cfg.spatial_kernel + 1);
}
std::int64_t block(std::int64_t in, std::int64_t out, const ModelConfig& cfg) {
  return conv(in, out, 3) + 2 * out + conv(out, out, 3) + 2 * out + cbam(out, cfg);
}
std::int64_t expected_parameters(const ModelConfig& cfg) {
  const std::int64_t w = cfg.base_width;
  std::int64_t n = block(cfg.in_channels, w, cfg);
  for (int i = 0; i < 4; ++i) n += block(w << i, w << (i + 1), cfg);
  for (int i = 0; i < 4; ++i) n += conv(w << (i + 1), w << i, 3) + block(2 * (w << i), w << i, cfg);
  return n + conv(w, 1, 1);
}

}  // namespace

TEST(Cbam, ChannelWeightsHaveExpectedShapeAndRange) {
  ChannelAttention ca(16, 4);
  auto f = torch::randn({2, 16, 8, 8});
  auto w = ca->weights(f);
  EXPECT_EQ(w.sizes(), (std::vector<int64_t>{2, 16, 1, 1}));
  EXPECT_GT(w.min().item<float>(), 0.0f);
  EXPECT_LT(w.max().item<float>(), 1.0f);
}

TEST(Cbam, SpatialWeightsHaveExpectedShapeAndRange) {
  SpatialAttention sa(7);
  auto f = torch::randn({2, 16, 8, 8});
  auto w = sa->weights(f);
  EXPECT_EQ(w.sizes(), (std::vector<int64_t>{2, 1, 8, 8}));
  EXPECT_GT(w.min().item<float>(), 0.0f);
  EXPECT_LT(w.max().item<float>(), 1.0f);
}

TEST(Cbam, OutputPreservesShapeAndNeverGrowsMagnitude) {
  CBAM block(16, 4, 7, true);
  auto f = torch::randn({3, 16, 8, 8});
  auto y = block(f);
  EXPECT_EQ(y.sizes(), f.sizes());
  EXPECT_TRUE((y.abs() <= f.abs()).all().item<bool>());
}

TEST(Cbam, ChannelWeightsIgnoreSpatialPermutation) {
  ChannelAttention ca(8, 2);
  auto f = torch::randn({1, 8, 6, 6});
  auto shuffled = f.flatten(2).index_select(2, torch::randperm(36)).view({1, 8, 6, 6});
  EXPECT_TRUE(torch::allclose(ca->weights(f), ca->weights(shuffled), 1e-5, 1e-6));
}

TEST(Cbam, DisabledBlockIsIdentityWithoutParameters) {
  CBAM block(16, 4, 7, false);
  auto f = torch::randn({1, 16, 4, 4});
  EXPECT_TRUE(torch::equal(block(f), f));
  EXPECT_TRUE(block->parameters().empty());
}

TEST(Cbam, RejectsInvalidSettings) {
  EXPECT_THROW(SpatialAttention(4), ConfigError);
  EXPECT_THROW(SpatialAttention(0), ConfigError);
  EXPECT_THROW(ChannelAttention(8, 16), ConfigError);
}

TEST(UNet, OutputShapeAndRange) {
  auto net = make_model(small_config(), 0);
  auto y = net->forward(torch::rand({2, 12, 32, 32}));
  EXPECT_EQ(y.sizes(), (std::vector<int64_t>{2, 1, 32, 32}));
  EXPECT_GE(y.min().item<float>(), 0.0f);
  EXPECT_LE(y.max().item<float>(), 1.0f);
  EXPECT_EQ(net->forward(torch::rand({12, 32, 32})).sizes(), (std::vector<int64_t>{1, 32, 32}));
}

TEST(UNet, UntrainedOutputStartsNearHeadBias) {
  auto net = make_model(small_config(), 0);
  net->head->weight.data().zero_();
  auto y = net->forward(torch::rand({1, 12, 32, 32}));
  EXPECT_NEAR(y.mean().item<float>(), 1.0 / (1.0 + std::exp(4.0)), 1e-6);
}

TEST(UNet, ParameterCountMatchesLayerTally) {
  for (int c : {3, 6, 9, 12}) {
    for (bool att : {true, false}) {
      auto cfg = small_config(c, att);
      EXPECT_EQ(make_model(cfg, 0)->parameter_count(), expected_parameters(cfg)) << c << " " << att;
    }
  }
  ModelConfig full;
  EXPECT_EQ(make_model(full, 0)->parameter_count(), expected_parameters(full));
}

TEST(UNet, HasAttentionAfterEveryBlock) {
  auto net = make_model(small_config(), 0);
  auto blocks = net->attention_blocks();
  EXPECT_EQ(blocks.size(), 9u);
  for (const auto& b : blocks) EXPECT_TRUE(b->enabled());
}

TEST(UNet, SameSeedSameParameters) {
  auto a = make_model(small_config(), 4);
  auto b = make_model(small_config(), 4);
  auto c = make_model(small_config(), 5);
  EXPECT_EQ(parameters_fingerprint(*a), parameters_fingerprint(*b));
  EXPECT_NE(parameters_fingerprint(*a), parameters_fingerprint(*c));
}

TEST(UNet, WrongInputIsContractError) {
  auto net = make_model(small_config(), 0);
  EXPECT_THROW(net->forward(torch::rand({1, 9, 32, 32})), ContractError);
  EXPECT_THROW(net->forward(torch::rand({1, 12, 24, 24})), ContractError);
}

TEST(UNet, ConfigValidation) {
  auto c = small_config();
  c.spatial_kernel = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.base_width = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.input_size = 40;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.depth = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(UNet, ConfigJsonRoundTrip) {
  auto c = small_config(9, false);
  c.output_bias = -2.5;
  auto d = ModelConfig::from_json(c.to_json());
  EXPECT_EQ(d.to_json(), c.to_json());
}
