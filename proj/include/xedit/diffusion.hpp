#pragma once

// Pixel-space toy diffusion model, deterministic DDIM inversion and
// reconstruction, and assembly of the inversion feature stacks.
//
// There is no latent autoencoder at this scale: encode/decode are the affine
// maps x -> 2x - 1 and back (clipped), so "latents" are images in [-1, 1].
// Inversion is unconditional.

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xedit/common.hpp"
#include "xedit/dataset.hpp"

namespace xedit {

// ---------------------------------------------------------------------------
// encode / decode

inline torch::Tensor encode(const torch::Tensor& x) { return x * 2.0 - 1.0; }

inline torch::Tensor decode(const torch::Tensor& z) { return ((z + 1.0) * 0.5).clamp(0.0, 1.0); }

// ---------------------------------------------------------------------------
// Noise schedule

struct NoiseSchedule {
  int steps = 0;              // T
  double beta_start = 0;
  double beta_end = 0;
  torch::Tensor betas;        // float64 [T]
  torch::Tensor alphas;       // 1 - beta
  torch::Tensor alpha_bars;   // cumulative product

  /// Linearly spaced betas. Defaults give alpha_bar(T) ~ 6e-3.
  static NoiseSchedule linear(int steps = 200, double beta_start = 5e-4, double beta_end = 0.05) {
    if (steps < 2) throw ConfigError("noise schedule needs at least 2 steps");
    if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0))
      throw ConfigError("noise schedule requires 0 < beta_start < beta_end < 1");
    NoiseSchedule s;
    s.steps = steps;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas = torch::linspace(beta_start, beta_end, steps, torch::kFloat64);
    s.alphas = 1.0 - s.betas;
    s.alpha_bars = torch::cumprod(s.alphas, 0);
    return s;
  }

  /// alpha_bar at timestep t in [0, T-1]; t = -1 denotes the clean image.
  double alpha_bar(int t) const { return t < 0 ? 1.0 : alpha_bars[t].item<double>(); }
};

// ---------------------------------------------------------------------------
// Denoiser

struct DenoiserConfig {
  int base_width = 16;
  int time_dim = 64;
  int groups = 8;
};

inline torch::Tensor timestep_embedding(const torch::Tensor& t, int dim) {
  const int half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / half);
  auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

class TimeResBlockImpl : public torch::nn::Module {
 public:
  TimeResBlockImpl(int in_ch, int out_ch, int time_dim, int groups)
      : norm1(torch::nn::GroupNormOptions(std::min(groups, in_ch), in_ch)),
        conv1(torch::nn::Conv2dOptions(in_ch, out_ch, 3).padding(1)),
        time_proj(time_dim, out_ch),
        norm2(torch::nn::GroupNormOptions(std::min(groups, out_ch), out_ch)),
        conv2(torch::nn::Conv2dOptions(out_ch, out_ch, 3).padding(1)) {
    register_module("norm1", norm1);
    register_module("conv1", conv1);
    register_module("time_proj", time_proj);
    register_module("norm2", norm2);
    register_module("conv2", conv2);
    if (in_ch != out_ch) {
      skip = torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, out_ch, 1));
      register_module("skip", skip);
    }
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb) {
    auto h = conv1(torch::silu(norm1(x)));
    h = h + time_proj(temb).unsqueeze(-1).unsqueeze(-1);
    h = conv2(torch::silu(norm2(h)));
    return h + (skip ? skip(x) : x);
  }

 private:
  torch::nn::GroupNorm norm1;
  torch::nn::Conv2d conv1;
  torch::nn::Linear time_proj;
  torch::nn::GroupNorm norm2;
  torch::nn::Conv2d conv2;
  torch::nn::Conv2d skip{nullptr};
};
TORCH_MODULE(TimeResBlock);

/// Three-resolution noise predictor: eps(z_t, t) with the same shape as z_t.
class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(const DenoiserConfig& cfg) : cfg_(cfg) {
    const int w = cfg.base_width;
    const int td = cfg.time_dim;
    const int g = cfg.groups;
    time_mlp = register_module("time_mlp", torch::nn::Sequential(torch::nn::Linear(td, td), torch::nn::SiLU(),
                                                                 torch::nn::Linear(td, td)));
    conv_in = register_module("conv_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, w, 3).padding(1)));
    enc0 = register_module("enc0", TimeResBlock(w, w, td, g));
    down0 = register_module("down0", torch::nn::Conv2d(torch::nn::Conv2dOptions(w, w, 3).stride(2).padding(1)));
    enc1 = register_module("enc1", TimeResBlock(w, 2 * w, td, g));
    down1 = register_module("down1",
                            torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * w, 2 * w, 3).stride(2).padding(1)));
    mid = register_module("mid", TimeResBlock(2 * w, 4 * w, td, g));
    dec1 = register_module("dec1", TimeResBlock(4 * w + 2 * w, 2 * w, td, g));
    dec0 = register_module("dec0", TimeResBlock(2 * w + w, w, td, g));
    norm_out = register_module("norm_out", torch::nn::GroupNorm(torch::nn::GroupNormOptions(std::min(g, w), w)));
    conv_out = register_module("conv_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(w, 3, 3).padding(1)));
  }

  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& t) {
    auto temb = time_mlp->forward(timestep_embedding(t, cfg_.time_dim).to(z.scalar_type()));
    auto h0 = enc0(conv_in(z), temb);
    auto h1 = enc1(down0(h0), temb);
    auto h2 = mid(down1(h1), temb);
    namespace F = torch::nn::functional;
    auto up = [](const torch::Tensor& x) {
      return F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0})
                                   .mode(torch::kNearest));
    };
    auto d1 = dec1(torch::cat({up(h2), h1}, 1), temb);
    auto d0 = dec0(torch::cat({up(d1), h0}, 1), temb);
    return conv_out(torch::silu(norm_out(d0)));
  }

  const DenoiserConfig& config() const { return cfg_; }

 private:
  DenoiserConfig cfg_;
  torch::nn::Sequential time_mlp{nullptr};
  torch::nn::Conv2d conv_in{nullptr}, down0{nullptr}, down1{nullptr}, conv_out{nullptr};
  TimeResBlock enc0{nullptr}, enc1{nullptr}, mid{nullptr}, dec1{nullptr}, dec0{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
};
TORCH_MODULE(Denoiser);

struct DiffusionModel {
  DenoiserConfig config;
  NoiseSchedule schedule;
  int image_size = 64;
  std::uint64_t seed = 0;
  bool trained = false;
  mutable Denoiser net{nullptr};

  static DiffusionModel create(const DenoiserConfig& cfg, NoiseSchedule schedule, int image_size,
                               std::uint64_t seed) {
    DiffusionModel m;
    m.config = cfg;
    m.schedule = std::move(schedule);
    m.image_size = image_size;
    m.seed = seed;
    torch::manual_seed(stage_seed(seed, "diffusion-init"));
    m.net = Denoiser(cfg);
    return m;
  }

  torch::Tensor predict_noise(const torch::Tensor& z, int t) const {
    auto tt = torch::full({z.size(0)}, t, torch::kLong);
    return net->forward(z, tt);
  }

  std::string fingerprint() const {
    std::string acc;
    for (const auto& p : net->parameters()) acc += tensor_fingerprint(p);
    return hash_string(acc);
  }
};

// ---------------------------------------------------------------------------
// Checkpoint

inline void save_diffusion(const DiffusionModel& m, const fs::path& path) {
  json meta{{"format_version", kFormatVersion},
            {"kind", "diffusion"},
            {"image_size", m.image_size},
            {"seed", m.seed},
            {"trained", m.trained},
            {"schedule", {{"steps", m.schedule.steps}, {"beta_start", m.schedule.beta_start},
                          {"beta_end", m.schedule.beta_end}}},
            {"denoiser", {{"base_width", m.config.base_width}, {"time_dim", m.config.time_dim},
                          {"groups", m.config.groups}}}};
  torch::serialize::OutputArchive root;
  root.write("meta", c10::IValue(meta.dump()));
  torch::serialize::OutputArchive net;
  m.net->save(net);
  root.write("denoiser", net);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  try {
    root.save_to(path.string());
  } catch (const c10::Error& e) {
    throw IoError("cannot write checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
}

inline DiffusionModel load_diffusion(const fs::path& path) {
  torch::serialize::InputArchive root;
  try {
    root.load_from(path.string());
  } catch (const c10::Error& e) {
    throw IoError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  c10::IValue meta_value;
  root.read("meta", meta_value);
  const auto meta = json::parse(meta_value.toStringRef());
  if (meta.at("format_version").get<int>() != kFormatVersion || meta.at("kind") != "diffusion")
    throw ConfigError(path.string() + " is not a diffusion checkpoint of a supported version");
  DenoiserConfig cfg;
  cfg.base_width = meta["denoiser"]["base_width"];
  cfg.time_dim = meta["denoiser"]["time_dim"];
  cfg.groups = meta["denoiser"]["groups"];
  auto schedule = NoiseSchedule::linear(meta["schedule"]["steps"], meta["schedule"]["beta_start"],
                                        meta["schedule"]["beta_end"]);
  auto m = DiffusionModel::create(cfg, schedule, meta["image_size"], meta["seed"]);
  m.trained = meta["trained"];
  torch::serialize::InputArchive net;
  root.read("denoiser", net);
  m.net->load(net);
  return m;
}

// ---------------------------------------------------------------------------
// Training

struct DiffusionTrainConfig {
  int train_steps = 2000;
  int batch_size = 16;
  double learning_rate = 2e-3;
  int schedule_steps = 200;
  double beta_start = 5e-4;
  double beta_end = 0.05;
  DenoiserConfig denoiser;
  std::uint64_t seed = 0;
  std::size_t min_images = 100;
};

struct DiffusionTrainResult {
  DiffusionModel model;
  std::vector<double> loss_curve;  // one entry per optimizer step
  double seconds = 0;
};

/// Standard noise-prediction objective over a stack of images [N, 3, H, W] in [0,1].
inline DiffusionTrainResult train_toy_diffusion(const torch::Tensor& images, const DiffusionTrainConfig& cfg) {
  require(images.dim() == 4 && images.size(1) == 3, "train_toy_diffusion expects [N,3,H,W] images");
  const auto n = static_cast<std::size_t>(images.size(0));
  if (n < cfg.min_images)
    throw ConfigError("diffusion training needs at least " + std::to_string(cfg.min_images) +
                      " original images, got " + std::to_string(n));
  if (cfg.train_steps < 1 || cfg.batch_size < 1) throw ConfigError("train_steps and batch_size must be positive");

  const auto start = std::chrono::steady_clock::now();
  auto schedule = NoiseSchedule::linear(cfg.schedule_steps, cfg.beta_start, cfg.beta_end);
  auto model = DiffusionModel::create(cfg.denoiser, schedule, static_cast<int>(images.size(2)), cfg.seed);
  model.net->train();
  torch::optim::AdamW opt(model.net->parameters(), torch::optim::AdamWOptions(cfg.learning_rate).weight_decay(0.0));

  auto gen = make_generator(stage_seed(cfg.seed, "diffusion-train"));
  const auto latents = encode(images.to(torch::kFloat32));
  const auto sqrt_ab = schedule.alpha_bars.sqrt().to(torch::kFloat32);
  const auto sqrt_1mab = (1.0 - schedule.alpha_bars).sqrt().to(torch::kFloat32);

  DiffusionTrainResult result;
  result.loss_curve.reserve(static_cast<std::size_t>(cfg.train_steps));
  for (int step = 0; step < cfg.train_steps; ++step) {
    auto idx = torch::randint(static_cast<std::int64_t>(n), {cfg.batch_size}, gen, torch::kLong);
    auto t = torch::randint(schedule.steps, {cfg.batch_size}, gen, torch::kLong);
    auto z0 = latents.index_select(0, idx);
    auto eps = at::randn(z0.sizes(), gen, z0.options());
    auto a = sqrt_ab.index_select(0, t).view({-1, 1, 1, 1});
    auto b = sqrt_1mab.index_select(0, t).view({-1, 1, 1, 1});
    auto zt = a * z0 + b * eps;
    auto loss = torch::mse_loss(model.net->forward(zt, t), eps);
    opt.zero_grad();
    loss.backward();
    opt.step();
    result.loss_curve.push_back(loss.item<double>());
  }
  model.net->eval();
  model.trained = true;
  result.model = std::move(model);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

/// Originals of the train split, stacked.
inline torch::Tensor load_originals(const Manifest& m, Split split = Split::train) {
  std::vector<torch::Tensor> xs;
  for (const auto* e : m.select(split)) xs.push_back(read_png(m.root / e->original_path, 3));
  if (xs.empty()) return torch::empty({0, 3, m.canvas_size, m.canvas_size});
  return torch::stack(xs);
}

// ---------------------------------------------------------------------------
// DDIM (eta = 0)

/// Timesteps visited by an n-step DDIM pass: stride-1, 2*stride-1, ..., T-1.
inline std::vector<int> ddim_timesteps(const NoiseSchedule& s, int n_steps) {
  if (n_steps < 0) throw ConfigError("n_steps must be nonnegative");
  if (n_steps > s.steps)
    throw ConfigError("n_steps " + std::to_string(n_steps) + " exceeds schedule length " + std::to_string(s.steps));
  std::vector<int> ts;
  if (n_steps == 0) return ts;
  if (s.steps % n_steps != 0)
    throw ConfigError("n_steps " + std::to_string(n_steps) + " does not divide the schedule length " +
                      std::to_string(s.steps));
  const int stride = s.steps / n_steps;
  for (int k = 1; k <= n_steps; ++k) ts.push_back(k * stride - 1);
  return ts;
}

namespace detail {
inline torch::Tensor batched(const torch::Tensor& z) { return z.dim() == 3 ? z.unsqueeze(0) : z; }
inline torch::Tensor unbatched_like(const torch::Tensor& z, const torch::Tensor& like) {
  return like.dim() == 3 ? z.squeeze(0) : z;
}

/// One deterministic DDIM move from noise level a_from to a_to given eps.
inline torch::Tensor ddim_move(const torch::Tensor& z, const torch::Tensor& eps, double a_from, double a_to) {
  auto x0 = (z - std::sqrt(1.0 - a_from) * eps) / std::sqrt(a_from);
  return std::sqrt(a_to) * x0 + std::sqrt(1.0 - a_to) * eps;
}
}  // namespace detail

/// Deterministic DDIM inversion z_0 -> z_T. Accepts [3,H,W] or [N,3,H,W].
inline torch::Tensor ddim_invert(const DiffusionModel& model, const torch::Tensor& z0, int n_steps = 50) {
  const auto ts = ddim_timesteps(model.schedule, n_steps);
  torch::NoGradGuard no_grad;
  auto z = detail::batched(z0);
  int prev = -1;
  for (int t : ts) {
    auto eps = model.predict_noise(z, t);
    z = detail::ddim_move(z, eps, model.schedule.alpha_bar(prev), model.schedule.alpha_bar(t));
    prev = t;
  }
  return detail::unbatched_like(z, z0);
}

/// Deterministic DDIM sampling z_T -> z_0 over the same step grid, reversed.
inline torch::Tensor ddim_reconstruct(const DiffusionModel& model, const torch::Tensor& zT, int n_steps = 50) {
  const auto ts = ddim_timesteps(model.schedule, n_steps);
  torch::NoGradGuard no_grad;
  auto z = detail::batched(zT);
  for (std::size_t k = ts.size(); k-- > 0;) {
    const int t = ts[k];
    const int next = k == 0 ? -1 : ts[k - 1];
    auto eps = model.predict_noise(z, t);
    z = detail::ddim_move(z, eps, model.schedule.alpha_bar(t), model.schedule.alpha_bar(next));
  }
  return detail::unbatched_like(z, zT);
}

struct InversionResult {
  torch::Tensor z0;
  torch::Tensor z_T_hat;
  torch::Tensor z0_hat;
  torch::Tensor decoded_noise;  // D(z_T_hat)
  torch::Tensor decoded_recon;  // D(z0_hat)
  torch::Tensor residual;       // |x - D(z0_hat)|
};

/// encode -> invert -> reconstruct -> decode for one image [3,H,W] or a batch.
inline InversionResult invert_image(const DiffusionModel& model, const torch::Tensor& x, int n_steps = 50) {
  require(x.size(-3) == 3, "invert_image expects 3-channel images");
  InversionResult r;
  r.z0 = encode(x);
  r.z_T_hat = ddim_invert(model, r.z0, n_steps);
  r.z0_hat = ddim_reconstruct(model, r.z_T_hat, n_steps);
  r.decoded_noise = decode(r.z_T_hat);
  r.decoded_recon = decode(r.z0_hat);
  r.residual = (x - r.decoded_recon).abs();
  return r;
}

/// Mean absolute pixel error of the invert/reconstruct round trip, per image.
inline torch::Tensor round_trip_error(const DiffusionModel& model, const torch::Tensor& images, int n_steps) {
  auto r = invert_image(model, images, n_steps);
  return r.residual.flatten(1).mean(1);
}

// ---------------------------------------------------------------------------
// Likelihood proxy

/// <delta, z0_hat - z0> / ||delta||^2, with 0 when ||delta|| < eps.
inline double discrepancy_from(const torch::Tensor& z0, const torch::Tensor& z0_hat, const torch::Tensor& delta,
                               double eps = 1e-8) {
  const double norm2 = delta.to(torch::kFloat64).pow(2).sum().item<double>();
  if (std::sqrt(norm2) < eps) return 0.0;
  return (delta.to(torch::kFloat64) * (z0_hat - z0).to(torch::kFloat64)).sum().item<double>() / norm2;
}

/// Likelihood proxy for one image. delta is the discrepancy of a single-step
/// re-inversion of the n-step reconstruction, delta = R1(z0_hat) - z0_hat;
/// the score projects the n-step error z0_hat - z0 onto it.
inline double discrepancy_score(const torch::Tensor& x, const DiffusionModel& model, int n_steps = 50) {
  if (!model.trained) throw ContractError("discrepancy_score requires a trained diffusion model");
  const auto z0 = encode(x);
  const auto z0_hat = ddim_reconstruct(model, ddim_invert(model, z0, n_steps), n_steps);
  const auto again = ddim_reconstruct(model, ddim_invert(model, z0_hat, 1), 1);
  return discrepancy_from(z0, z0_hat, again - z0_hat);
}

// ---------------------------------------------------------------------------
// Feature stacks

enum class Variant { phi, phi_fi, image_only, A, B, C, D, E };

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::phi, Variant::phi_fi, Variant::image_only, Variant::A,
                                      Variant::B,   Variant::C,      Variant::D,          Variant::E};
  return v;
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::phi: return "phi";
    case Variant::phi_fi: return "phi_fi";
    case Variant::image_only: return "image_only";
    case Variant::A: return "A";
    case Variant::B: return "B";
    case Variant::C: return "C";
    case Variant::D: return "D";
    case Variant::E: return "E";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (auto v : all_variants())
    if (to_string(v) == s) return v;
  throw ConfigError("unknown feature variant '" + s + "'");
}

struct ChannelGroup {
  std::string name;
  int channels = 0;
};

/// Ordered channel groups for each variant.
inline std::vector<ChannelGroup> variant_layout(Variant v) {
  const ChannelGroup x{"image", 3}, noise{"decoded_noise", 3}, recon{"decoded_recon", 3}, res{"residual", 3};
  switch (v) {
    case Variant::phi: return {x, noise, recon, res};
    case Variant::phi_fi: return {{"gray_image", 1}, {"gray_decoded_noise", 1}, {"gray_decoded_recon", 1}};
    case Variant::image_only:
    case Variant::A: return {x};
    case Variant::B: return {x, noise};
    case Variant::C: return {x, recon};
    case Variant::D: return {x, noise, recon};
    case Variant::E: return {x, noise, res};
  }
  return {};
}

inline int variant_channels(Variant v) {
  int c = 0;
  for (const auto& g : variant_layout(v)) c += g.channels;
  return c;
}

inline std::string variant_description(Variant v) {
  switch (v) {
    case Variant::phi: return "x + D(zT) + D(z0) + |x - D(z0)|";
    case Variant::phi_fi: return "gray(x) + gray(D(zT)) + gray(D(z0))";
    case Variant::image_only:
    case Variant::A: return "x";
    case Variant::B: return "x + D(zT)";
    case Variant::C: return "x + D(z0)";
    case Variant::D: return "x + D(zT) + D(z0)";
    case Variant::E: return "x + D(zT) + |x - D(z0)|";
  }
  return "";
}

/// Luminance with weights (0.299, 0.587, 0.114); channel axis is -3.
inline torch::Tensor grayscale(const torch::Tensor& rgb) {
  return rgb.select(-3, 0).unsqueeze(-3) * 0.299 + rgb.select(-3, 1).unsqueeze(-3) * 0.587 +
         rgb.select(-3, 2).unsqueeze(-3) * 0.114;
}

struct FeatureStack {
  torch::Tensor values;  // [C, H, W] (or [N, C, H, W] when batched)
  Variant variant = Variant::phi;
  std::vector<ChannelGroup> layout;

  int channels() const { return static_cast<int>(values.size(-3)); }
};

/// Concatenates the channel groups of `variant` from a cached inversion.
inline FeatureStack assemble_features(const torch::Tensor& x, const InversionResult& r, Variant variant) {
  std::vector<torch::Tensor> parts;
  switch (variant) {
    case Variant::phi: parts = {x, r.decoded_noise, r.decoded_recon, r.residual}; break;
    case Variant::phi_fi: parts = {grayscale(x), grayscale(r.decoded_noise), grayscale(r.decoded_recon)}; break;
    case Variant::image_only:
    case Variant::A: parts = {x}; break;
    case Variant::B: parts = {x, r.decoded_noise}; break;
    case Variant::C: parts = {x, r.decoded_recon}; break;
    case Variant::D: parts = {x, r.decoded_noise, r.decoded_recon}; break;
    case Variant::E: parts = {x, r.decoded_noise, r.residual}; break;
  }
  FeatureStack f;
  f.values = torch::cat(parts, -3).contiguous();
  f.variant = variant;
  f.layout = variant_layout(variant);
  return f;
}

inline FeatureStack build_features(const torch::Tensor& x, const DiffusionModel& model, Variant variant,
                                   int n_steps = 50) {
  if (variant == Variant::A || variant == Variant::image_only) {
    InversionResult none;
    return assemble_features(x, none, variant);
  }
  return assemble_features(x, invert_image(model, x, n_steps), variant);
}

inline FeatureStack build_features(const torch::Tensor& x, const DiffusionModel& model, const std::string& variant,
                                   int n_steps = 50) {
  return build_features(x, model, variant_from_string(variant), n_steps);
}

// ---------------------------------------------------------------------------
// Feature cache: one binary tensor file per (pair_id, side, variant) plus index.json.
//
// File layout (little-endian):
//   char[4] "XEFT" | u32 format_version | u32 name_len | name bytes (variant)
//   u32 C | u32 H | u32 W | float32[C*H*W] (C-major)

inline void write_feature_file(const fs::path& path, const FeatureStack& f) {
  require(f.values.dim() == 3, "feature file holds a single [C,H,W] stack");
  auto v = f.values.detach().to(torch::kFloat32).contiguous();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  auto put_u32 = [&](std::uint32_t x) {
    unsigned char b[4] = {static_cast<unsigned char>(x), static_cast<unsigned char>(x >> 8),
                          static_cast<unsigned char>(x >> 16), static_cast<unsigned char>(x >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  out.write("XEFT", 4);
  put_u32(kFormatVersion);
  const auto name = to_string(f.variant);
  put_u32(static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  for (int d = 0; d < 3; ++d) put_u32(static_cast<std::uint32_t>(v.size(d)));
  out.write(static_cast<const char*>(v.data_ptr()), static_cast<std::streamsize>(v.numel() * 4));
  if (!out) throw IoError("write failed for " + path.string());
}

inline FeatureStack read_feature_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature file " + path.string());
  auto get_u32 = [&]() {
    unsigned char b[4] = {};
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
  };
  char magic[4] = {};
  in.read(magic, 4);
  if (std::string(magic, 4) != "XEFT") throw IoError(path.string() + " is not a feature file");
  if (get_u32() != static_cast<std::uint32_t>(kFormatVersion)) throw IoError("unsupported feature file version");
  std::string name(get_u32(), '\0');
  in.read(name.data(), static_cast<std::streamsize>(name.size()));
  const auto c = get_u32(), h = get_u32(), w = get_u32();
  auto values = torch::empty({c, h, w}, torch::kFloat32);
  in.read(static_cast<char*>(values.data_ptr()), static_cast<std::streamsize>(values.numel() * 4));
  if (!in) throw IoError("truncated feature file " + path.string());
  FeatureStack f;
  f.variant = variant_from_string(name);
  f.values = values;
  f.layout = variant_layout(f.variant);
  if (f.channels() != variant_channels(f.variant)) throw IoError("channel count mismatch in " + path.string());
  return f;
}

/// Which image of a pair feeds the segmentation network: the edited image for
/// edited pairs, the original for unedited pairs.
inline std::string input_side(const PairEntry& e) { return e.is_edited ? "edit" : "orig"; }

inline std::string feature_file_name(const std::string& pair_id, const std::string& side, Variant v) {
  return pair_id + "_" + side + "_" + to_string(v) + ".xft";
}

struct FeatureIndex {
  fs::path root;
  std::string checkpoint_fingerprint;
  int n_steps = 50;
  std::vector<Variant> variants;
  std::map<std::string, std::string> files;  // key pair_id/side/variant -> file name

  static std::string key(const std::string& pair_id, const std::string& side, Variant v) {
    return pair_id + "/" + side + "/" + to_string(v);
  }

  bool has(const std::string& pair_id, const std::string& side, Variant v) const {
    return files.count(key(pair_id, side, v)) != 0;
  }

  FeatureStack load(const std::string& pair_id, const std::string& side, Variant v) const {
    auto it = files.find(key(pair_id, side, v));
    if (it == files.end())
      throw ConfigError("feature cache has no entry for " + key(pair_id, side, v));
    return read_feature_file(root / it->second);
  }
};

inline void save_feature_index(const FeatureIndex& idx) {
  json entries = json::array();
  for (const auto& [k, f] : idx.files) entries.push_back({{"key", k}, {"file", f}});
  json vars = json::array();
  for (auto v : idx.variants) vars.push_back(to_string(v));
  json layouts = json::object();
  for (auto v : idx.variants) {
    json groups = json::array();
    for (const auto& g : variant_layout(v)) groups.push_back({{"name", g.name}, {"channels", g.channels}});
    layouts[to_string(v)] = groups;
  }
  write_json(idx.root / "index.json", {{"format_version", kFormatVersion},
                                       {"checkpoint", idx.checkpoint_fingerprint},
                                       {"n_steps", idx.n_steps},
                                       {"variants", vars},
                                       {"layouts", layouts},
                                       {"entries", entries}});
}

inline FeatureIndex load_feature_index(const fs::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw IoError("cannot open feature index in " + dir.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed feature index: ") + e.what());
  }
  if (j.at("format_version").get<int>() != kFormatVersion) throw ConfigError("unsupported feature index version");
  FeatureIndex idx;
  idx.root = dir;
  idx.checkpoint_fingerprint = j.at("checkpoint").get<std::string>();
  idx.n_steps = j.at("n_steps").get<int>();
  for (const auto& v : j.at("variants")) idx.variants.push_back(variant_from_string(v.get<std::string>()));
  for (const auto& e : j.at("entries")) idx.files[e.at("key").get<std::string>()] = e.at("file").get<std::string>();
  return idx;
}

/// Extracts features for the network-input side of every manifest pair.
/// Inversion runs once per image; every requested variant is assembled from it.
inline FeatureIndex extract_features(const Manifest& m, const DiffusionModel& model,
                                     const std::vector<Variant>& variants, const fs::path& out_dir,
                                     int n_steps = 50, int batch_size = 32) {
  if (variants.empty()) throw ConfigError("no feature variants requested");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create feature directory " + out_dir.string());

  bool needs_inversion = false;
  for (auto v : variants) needs_inversion |= (v != Variant::A && v != Variant::image_only);

  FeatureIndex idx;
  idx.root = out_dir;
  idx.checkpoint_fingerprint = model.fingerprint();
  idx.n_steps = n_steps;
  idx.variants = variants;

  for (std::size_t start = 0; start < m.pairs.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto stop = std::min(m.pairs.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<torch::Tensor> xs;
    for (auto i = start; i < stop; ++i) xs.push_back(read_png(m.root / m.pairs[i].edited_path, 3));
    auto batch = torch::stack(xs);
    InversionResult r;
    if (needs_inversion) r = invert_image(model, batch, n_steps);
    for (auto i = start; i < stop; ++i) {
      const auto k = static_cast<std::int64_t>(i - start);
      InversionResult one;
      if (needs_inversion) {
        one.decoded_noise = r.decoded_noise[k];
        one.decoded_recon = r.decoded_recon[k];
        one.residual = r.residual[k];
      }
      const auto& e = m.pairs[i];
      const auto side = input_side(e);
      for (auto v : variants) {
        auto f = assemble_features(batch[k], one, v);
        const auto name = feature_file_name(e.pair_id, side, v);
        write_feature_file(out_dir / name, f);
        idx.files[FeatureIndex::key(e.pair_id, side, v)] = name;
      }
    }
  }
  save_feature_index(idx);
  return idx;
}

}  // namespace xedit
