#pragma once

// Procedural paired-edit dataset: scenes of flat-colored shapes over a grainy
// background, analytic edits, exact ground-truth masks, mask-consistent
// augmentation and the on-disk dataset layout.
//
// Originals carry a per-pixel sensor grain. An edit re-renders its footprint
// without grain, the way a generative editor re-synthesizes the region it
// touches; that trace is what makes edits localizable from the edited image
// alone.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "xedit/common.hpp"
#include "xedit/image_io.hpp"

namespace xedit {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Scene description

enum class ShapeKind { circle, rectangle, triangle };

inline std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

inline ShapeKind shape_kind_from_string(const std::string& s) {
  if (s == "circle") return ShapeKind::circle;
  if (s == "rectangle") return ShapeKind::rectangle;
  if (s == "triangle") return ShapeKind::triangle;
  throw ConfigError("unknown shape kind '" + s + "'");
}

/// RGB on the 8-bit grid, stored as integer levels 0..255.
struct Color {
  std::array<int, 3> level{0, 0, 0};
  bool operator==(const Color&) const = default;
  double channel(int c) const { return level[static_cast<std::size_t>(c)] / 255.0; }
};

struct Shape {
  ShapeKind kind = ShapeKind::circle;
  double center_x = 0;  // column, pixel units
  double center_y = 0;  // row, pixel units
  double scale = 1;     // half extent in pixels
  Color color;
  int z_order = 0;
  bool operator==(const Shape&) const = default;

  /// Coverage test at continuous coordinates (pixel centers sit at +0.5).
  bool covers(double x, double y) const {
    const double dx = x - center_x;
    const double dy = y - center_y;
    switch (kind) {
      case ShapeKind::circle:
        return dx * dx + dy * dy <= scale * scale;
      case ShapeKind::rectangle:
        return std::abs(dx) <= scale && std::abs(dy) <= 0.6 * scale;
      case ShapeKind::triangle: {
        // apex (0,-s), base corners (-s, s) and (s, s)
        if (dy > scale || dy < -scale) return false;
        const double half_width = scale * (dy + scale) / (2.0 * scale);
        return std::abs(dx) <= half_width;
      }
    }
    return false;
  }

  bool inside_canvas(int size) const {
    return center_x - scale >= 0.0 && center_x + scale <= size && center_y - scale >= 0.0 &&
           center_y + scale <= size;
  }
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int canvas_size = 64;
  std::vector<Shape> shapes;
  Color background;
  int grain_amplitude = 32;  // in 8-bit levels
  bool operator==(const SceneSpec&) const = default;
};

inline constexpr int kMinCanvas = 32;
inline constexpr int kMaxShapes = 6;

// ---------------------------------------------------------------------------
// Rendering

/// Footprint of one shape as a bool [H, W] tensor.
inline torch::Tensor footprint(const Shape& shape, int size) {
  auto out = torch::zeros({size, size}, torch::kBool);
  auto acc = out.accessor<bool, 2>();
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) acc[i][j] = shape.covers(j + 0.5, i + 0.5);
  return out;
}

/// Grain-free rendering, float32 [3, H, W].
inline torch::Tensor render_clean(const SceneSpec& scene) {
  const int n = scene.canvas_size;
  auto levels = torch::empty({3, n, n}, torch::kInt32);
  for (int c = 0; c < 3; ++c) levels[c].fill_(scene.background.level[static_cast<std::size_t>(c)]);

  std::vector<std::size_t> order(scene.shapes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scene.shapes[a].z_order < scene.shapes[b].z_order;
  });
  auto acc = levels.accessor<int, 3>();
  for (std::size_t idx : order) {
    const auto& s = scene.shapes[idx];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (s.covers(j + 0.5, i + 0.5))
          for (int c = 0; c < 3; ++c) acc[c][i][j] = s.color.level[static_cast<std::size_t>(c)];
  }
  return levels.to(torch::kFloat32).div(255.0);
}

/// Integer grain offsets [3, H, W] in 8-bit levels, a pure function of the scene seed.
inline torch::Tensor grain_levels(const SceneSpec& scene) {
  const int n = scene.canvas_size;
  auto out = torch::zeros({3, n, n}, torch::kInt32);
  if (scene.grain_amplitude <= 0) return out;
  Rng rng(stage_seed(scene.seed, "grain"));
  auto acc = out.accessor<int, 3>();
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        acc[c][i][j] = static_cast<int>(rng.integer(-scene.grain_amplitude, scene.grain_amplitude));
  return out;
}

/// Rendering with grain, quantized to the 8-bit grid so PNG storage is lossless.
inline torch::Tensor render(const SceneSpec& scene) {
  auto levels = render_clean(scene).mul(255.0).round().to(torch::kInt32) + grain_levels(scene);
  return levels.clamp(0, 255).to(torch::kFloat32).div(255.0);
}

// ---------------------------------------------------------------------------
// Scene generation

inline Color random_color(Rng& rng) {
  Color c;
  for (auto& l : c.level) l = static_cast<int>(rng.integer(16, 239));
  return c;
}

inline Shape random_shape(Rng& rng, int size, int z_order) {
  Shape s;
  s.kind = static_cast<ShapeKind>(rng.integer(0, 2));
  s.scale = rng.uniform(size / 14.0, size / 5.0);
  s.center_x = rng.uniform(s.scale + 1.0, size - s.scale - 1.0);
  s.center_y = rng.uniform(s.scale + 1.0, size - s.scale - 1.0);
  s.color = random_color(rng);
  s.z_order = z_order;
  return s;
}

inline void validate_canvas(int canvas_size) {
  if (canvas_size < kMinCanvas)
    throw ConfigError("canvas_size " + std::to_string(canvas_size) + " is below the minimum of " +
                      std::to_string(kMinCanvas));
  if ((canvas_size & (canvas_size - 1)) != 0)
    throw ConfigError("canvas_size must be a power of two, got " + std::to_string(canvas_size));
}

inline SceneSpec generate_scene(std::uint64_t seed, int canvas_size) {
  validate_canvas(canvas_size);
  Rng rng(stage_seed(seed, "scene"));
  SceneSpec scene;
  scene.seed = seed;
  scene.canvas_size = canvas_size;
  scene.background = random_color(rng);
  const auto count = rng.integer(1, kMaxShapes);
  for (int i = 0; i < count; ++i) scene.shapes.push_back(random_shape(rng, canvas_size, i));
  return scene;
}

// ---------------------------------------------------------------------------
// Edits

enum class EditKind { recolor_shape, add_shape, remove_shape, translate_shape };

inline std::string to_string(EditKind k) {
  switch (k) {
    case EditKind::recolor_shape: return "recolor_shape";
    case EditKind::add_shape: return "add_shape";
    case EditKind::remove_shape: return "remove_shape";
    case EditKind::translate_shape: return "translate_shape";
  }
  return "?";
}

inline EditKind edit_kind_from_string(const std::string& s) {
  if (s == "recolor_shape") return EditKind::recolor_shape;
  if (s == "add_shape") return EditKind::add_shape;
  if (s == "remove_shape") return EditKind::remove_shape;
  if (s == "translate_shape") return EditKind::translate_shape;
  throw ConfigError("unknown edit kind '" + s + "'");
}

struct EditSpec {
  EditKind kind = EditKind::recolor_shape;
  int target_index = 0;  // for add_shape: insertion index == current shape count
  Color new_color;       // recolor_shape
  Shape new_shape;       // add_shape
  double dx = 0, dy = 0; // translate_shape
  bool operator==(const EditSpec&) const = default;
};

struct ImagePair {
  torch::Tensor original;  // x_o, [3, H, W]
  torch::Tensor edited;    // x_e, [3, H, W]
  bool is_edited = false;
  SceneSpec scene;
  std::optional<EditSpec> edit;
};

/// The scene after the edit plus the bool [H, W] region the editor re-rendered.
inline std::pair<SceneSpec, torch::Tensor> edited_scene(const SceneSpec& scene, const EditSpec& edit) {
  const int n = scene.canvas_size;
  const int count = static_cast<int>(scene.shapes.size());
  SceneSpec out = scene;
  torch::Tensor region;
  switch (edit.kind) {
    case EditKind::recolor_shape: {
      if (edit.target_index < 0 || edit.target_index >= count)
        throw EditError("recolor target_index out of range");
      out.shapes[static_cast<std::size_t>(edit.target_index)].color = edit.new_color;
      region = footprint(scene.shapes[static_cast<std::size_t>(edit.target_index)], n);
      break;
    }
    case EditKind::add_shape: {
      if (edit.target_index != count) throw EditError("add_shape target_index must equal shape count");
      if (count >= kMaxShapes) throw EditError("scene already holds the maximum number of shapes");
      if (!edit.new_shape.inside_canvas(n)) throw EditError("added shape leaves the canvas");
      out.shapes.push_back(edit.new_shape);
      region = footprint(edit.new_shape, n);
      break;
    }
    case EditKind::remove_shape: {
      if (edit.target_index < 0 || edit.target_index >= count)
        throw EditError("remove target_index out of range");
      region = footprint(scene.shapes[static_cast<std::size_t>(edit.target_index)], n);
      out.shapes.erase(out.shapes.begin() + edit.target_index);
      break;
    }
    case EditKind::translate_shape: {
      if (edit.target_index < 0 || edit.target_index >= count)
        throw EditError("translate target_index out of range");
      auto& s = out.shapes[static_cast<std::size_t>(edit.target_index)];
      s.center_x += edit.dx;
      s.center_y += edit.dy;
      if (!s.inside_canvas(n)) throw EditError("translated shape leaves the canvas");
      region = footprint(scene.shapes[static_cast<std::size_t>(edit.target_index)], n)
                   .logical_or(footprint(s, n));
      break;
    }
  }
  return {std::move(out), region};
}

/// Renders x_o and x_e. Throws EditError for invalid targets and for edits
/// that change no scene content (the caller resamples).
inline ImagePair apply_edit(const SceneSpec& scene, const EditSpec& edit) {
  auto [after, region] = edited_scene(scene, edit);
  auto clean_before = render_clean(scene);
  auto clean_after = render_clean(after);
  if (torch::equal(clean_before, clean_after)) throw EditError("edit changes no pixels");

  ImagePair pair;
  pair.original = render(scene);
  pair.edited = torch::where(region.unsqueeze(0), clean_after, pair.original);
  pair.is_edited = true;
  pair.scene = scene;
  pair.edit = edit;
  return pair;
}

inline ImagePair unedited_pair(const SceneSpec& scene) {
  ImagePair pair;
  pair.original = render(scene);
  pair.edited = pair.original.clone();
  pair.is_edited = false;
  pair.scene = scene;
  return pair;
}

inline EditSpec sample_edit(const SceneSpec& scene, Rng& rng) {
  const int count = static_cast<int>(scene.shapes.size());
  const int n = scene.canvas_size;
  EditSpec e;
  e.kind = static_cast<EditKind>(rng.integer(0, 3));
  if (e.kind == EditKind::add_shape && count >= kMaxShapes) e.kind = EditKind::recolor_shape;
  switch (e.kind) {
    case EditKind::recolor_shape:
      e.target_index = static_cast<int>(rng.integer(0, count - 1));
      e.new_color = random_color(rng);
      break;
    case EditKind::add_shape:
      e.target_index = count;
      e.new_shape = random_shape(rng, n, count);
      break;
    case EditKind::remove_shape:
      e.target_index = static_cast<int>(rng.integer(0, count - 1));
      break;
    case EditKind::translate_shape: {
      e.target_index = static_cast<int>(rng.integer(0, count - 1));
      const double reach = n / 4.0;
      e.dx = std::round(rng.uniform(-reach, reach));
      e.dy = std::round(rng.uniform(-reach, reach));
      break;
    }
  }
  return e;
}

/// Samples edits until one is valid and changes content.
inline ImagePair sample_edited_pair(const SceneSpec& scene, Rng& rng, int max_attempts = 256) {
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    try {
      return apply_edit(scene, sample_edit(scene, rng));
    } catch (const EditError&) {
    }
  }
  throw EditError("no valid edit found after " + std::to_string(max_attempts) + " attempts");
}

// ---------------------------------------------------------------------------
// Ground truth

/// Per-pixel |x_o - x_e| reduced by channel maximum, [1, H, W] in [0, 1].
inline torch::Tensor compute_gt_mask(const torch::Tensor& original, const torch::Tensor& edited) {
  if (original.sizes() != edited.sizes())
    throw ContractError("compute_gt_mask: image shapes differ");
  require(original.dim() == 3, "compute_gt_mask expects CHW images");
  return (original - edited).abs().amax(0, /*keepdim=*/true).clamp(0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentationSpec {
  double horizontal_flip_prob = 0.5;
  double crop_fraction_min = 0.75;
  double crop_fraction_max = 1.0;
  double gaussian_blur_prob = 0.2;
  double blur_sigma_min = 0.3;
  double blur_sigma_max = 1.0;
  double coarse_dropout_prob = 0.2;
  int dropout_holes_min = 1;
  int dropout_holes_max = 3;
  double dropout_size_min = 0.05;  // fraction of canvas side
  double dropout_size_max = 0.15;
  std::uint64_t seed = 0;

  void validate() const {
    for (double p : {horizontal_flip_prob, gaussian_blur_prob, coarse_dropout_prob})
      if (p < 0.0 || p > 1.0) throw ConfigError("augmentation probabilities must lie in [0,1]");
    if (!(crop_fraction_min > 0.5) || crop_fraction_max > 1.0 || crop_fraction_min > crop_fraction_max)
      throw ConfigError("crop fraction range must lie in (0.5, 1.0]");
    if (blur_sigma_min <= 0.0 || blur_sigma_min > blur_sigma_max)
      throw ConfigError("blur sigma range must be positive and ordered");
    if (dropout_holes_min < 0 || dropout_holes_min > dropout_holes_max)
      throw ConfigError("dropout hole count range invalid");
    if (dropout_size_min <= 0.0 || dropout_size_min > dropout_size_max || dropout_size_max > 1.0)
      throw ConfigError("dropout hole size range invalid");
  }

  /// Spec that performs no transformation at all.
  static AugmentationSpec identity() {
    AugmentationSpec s;
    s.horizontal_flip_prob = 0;
    s.crop_fraction_min = s.crop_fraction_max = 1.0;
    s.gaussian_blur_prob = 0;
    s.coarse_dropout_prob = 0;
    return s;
  }
};

inline torch::Tensor hflip(const torch::Tensor& chw) { return chw.flip(-1); }

/// Crops the window [top, top+crop) x [left, left+crop) and resizes back to the
/// full side with nearest-neighbour sampling. Nearest sampling only selects
/// pixels, so it commutes exactly with the ground-truth mask computation.
inline torch::Tensor crop_resize_nearest(const torch::Tensor& chw, std::int64_t top, std::int64_t left,
                                         std::int64_t crop) {
  const auto h = chw.size(-2);
  const auto w = chw.size(-1);
  auto rows = torch::empty({h}, torch::kLong);
  auto cols = torch::empty({w}, torch::kLong);
  for (std::int64_t i = 0; i < h; ++i) rows[i] = top + (2 * i + 1) * crop / (2 * h);
  for (std::int64_t j = 0; j < w; ++j) cols[j] = left + (2 * j + 1) * crop / (2 * w);
  return chw.index_select(-2, rows).index_select(-1, cols);
}

inline torch::Tensor gaussian_kernel_1d(double sigma, int radius, torch::ScalarType dtype = torch::kFloat32) {
  auto x = torch::arange(-radius, radius + 1, torch::kFloat64);
  auto k = torch::exp(-x.pow(2) / (2.0 * sigma * sigma));
  return (k / k.sum()).to(dtype);
}

/// Separable Gaussian blur with reflect padding, applied to every channel.
inline torch::Tensor gaussian_blur(const torch::Tensor& chw, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  const auto c = chw.size(0);
  auto k = gaussian_kernel_1d(sigma, radius, chw.scalar_type());
  auto x = chw.unsqueeze(0);
  namespace F = torch::nn::functional;
  x = F::pad(x, F::PadFuncOptions({radius, radius, radius, radius}).mode(torch::kReflect));
  x = F::conv2d(x, k.view({1, 1, 1, -1}).expand({c, 1, 1, 2 * radius + 1}), F::Conv2dFuncOptions().groups(c));
  x = F::conv2d(x, k.view({1, 1, -1, 1}).expand({c, 1, 2 * radius + 1, 1}), F::Conv2dFuncOptions().groups(c));
  return x.squeeze(0);
}

/// Applies the same geometric transforms to image (any channel count) and mask,
/// blur to the image only, and coarse dropout to both.
inline std::pair<torch::Tensor, torch::Tensor> augment_pair(const torch::Tensor& image,
                                                            const torch::Tensor& mask,
                                                            const AugmentationSpec& spec) {
  spec.validate();
  require(image.dim() == 3 && mask.dim() == 3, "augment_pair expects CHW tensors");
  require(image.size(1) == mask.size(1) && image.size(2) == mask.size(2),
          "augment_pair: image and mask are not spatially aligned");
  Rng rng(spec.seed);
  auto img = image;
  auto msk = mask;
  const auto side = image.size(1);

  if (rng.bernoulli(spec.horizontal_flip_prob)) {
    img = hflip(img);
    msk = hflip(msk);
  }

  const double fraction = rng.uniform(spec.crop_fraction_min, spec.crop_fraction_max);
  const auto crop = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::lround(fraction * side)), 1, side);
  const auto top = rng.integer(0, side - crop);
  const auto left = rng.integer(0, side - crop);
  if (crop < side) {
    img = crop_resize_nearest(img, top, left, crop);
    msk = crop_resize_nearest(msk, top, left, crop);
  }

  const bool blur = rng.bernoulli(spec.gaussian_blur_prob);
  const double sigma = rng.uniform(spec.blur_sigma_min, spec.blur_sigma_max);
  if (blur) img = gaussian_blur(img, sigma);

  if (rng.bernoulli(spec.coarse_dropout_prob)) {
    const auto holes = rng.integer(spec.dropout_holes_min, spec.dropout_holes_max);
    auto keep = torch::ones({1, side, side}, img.options());
    for (std::int64_t k = 0; k < holes; ++k) {
      const auto hole = std::max<std::int64_t>(
          1, std::lround(rng.uniform(spec.dropout_size_min, spec.dropout_size_max) * side));
      const auto y = rng.integer(0, side - hole);
      const auto x = rng.integer(0, side - hole);
      keep.slice(1, y, y + hole).slice(2, x, x + hole).zero_();
    }
    img = img * keep;
    msk = msk * keep.to(msk.scalar_type());
  }
  return {img.contiguous(), msk.contiguous()};
}

// ---------------------------------------------------------------------------
// JSON for scene/edit metadata

inline json to_json(const Color& c) { return json::array({c.level[0], c.level[1], c.level[2]}); }
inline Color color_from_json(const json& j) {
  Color c;
  for (std::size_t i = 0; i < 3; ++i) c.level[i] = j.at(i).get<int>();
  return c;
}

inline json to_json(const Shape& s) {
  return {{"kind", to_string(s.kind)}, {"center", {s.center_x, s.center_y}}, {"scale", s.scale},
          {"color", to_json(s.color)}, {"z_order", s.z_order}};
}
inline Shape shape_from_json(const json& j) {
  Shape s;
  s.kind = shape_kind_from_string(j.at("kind").get<std::string>());
  s.center_x = j.at("center").at(0).get<double>();
  s.center_y = j.at("center").at(1).get<double>();
  s.scale = j.at("scale").get<double>();
  s.color = color_from_json(j.at("color"));
  s.z_order = j.at("z_order").get<int>();
  return s;
}

inline json to_json(const SceneSpec& s) {
  json shapes = json::array();
  for (const auto& sh : s.shapes) shapes.push_back(to_json(sh));
  return {{"seed", s.seed}, {"canvas_size", s.canvas_size}, {"background", to_json(s.background)},
          {"grain_amplitude", s.grain_amplitude}, {"shapes", shapes}};
}
inline SceneSpec scene_from_json(const json& j) {
  SceneSpec s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.canvas_size = j.at("canvas_size").get<int>();
  s.background = color_from_json(j.at("background"));
  s.grain_amplitude = j.at("grain_amplitude").get<int>();
  for (const auto& sh : j.at("shapes")) s.shapes.push_back(shape_from_json(sh));
  return s;
}

inline json to_json(const EditSpec& e) {
  json j{{"kind", to_string(e.kind)}, {"target_index", e.target_index}};
  switch (e.kind) {
    case EditKind::recolor_shape: j["new_color"] = to_json(e.new_color); break;
    case EditKind::add_shape: j["new_shape"] = to_json(e.new_shape); break;
    case EditKind::remove_shape: break;
    case EditKind::translate_shape: j["displacement"] = {e.dx, e.dy}; break;
  }
  return j;
}
inline EditSpec edit_from_json(const json& j) {
  EditSpec e;
  e.kind = edit_kind_from_string(j.at("kind").get<std::string>());
  e.target_index = j.at("target_index").get<int>();
  if (j.contains("new_color")) e.new_color = color_from_json(j["new_color"]);
  if (j.contains("new_shape")) e.new_shape = shape_from_json(j["new_shape"]);
  if (j.contains("displacement")) {
    e.dx = j["displacement"].at(0).get<double>();
    e.dy = j["displacement"].at(1).get<double>();
  }
  return e;
}

// ---------------------------------------------------------------------------
// Manifest and on-disk layout

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

struct PairEntry {
  std::string pair_id;
  std::string original_path;  // relative to the dataset root
  std::string edited_path;
  std::string mask_path;
  bool is_edited = false;
  std::uint64_t seed = 0;
  Split split = Split::train;
  std::string edit_kind;  // empty for unedited pairs
};

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct Manifest {
  int format_version = kFormatVersion;
  std::uint64_t seed = 0;
  int canvas_size = 64;
  double edited_fraction = 0.5;
  SplitFractions splits;
  std::vector<PairEntry> pairs;
  fs::path root;  // not serialized

  std::vector<const PairEntry*> select(Split s) const {
    std::vector<const PairEntry*> out;
    for (const auto& p : pairs)
      if (p.split == s) out.push_back(&p);
    return out;
  }

  /// Digest of the pair list; identical for any two runs over the same data.
  std::string fingerprint() const {
    std::string acc;
    for (const auto& p : pairs)
      acc += p.pair_id + ":" + std::to_string(p.seed) + ":" + (p.is_edited ? "e" : "o") + ":" +
             to_string(p.split) + ";";
    return hash_string(acc);
  }
};

inline json to_json(const Manifest& m) {
  json pairs = json::array();
  for (const auto& p : m.pairs) {
    json j{{"pair_id", p.pair_id},   {"original", p.original_path}, {"edited", p.edited_path},
           {"mask", p.mask_path},    {"is_edited", p.is_edited},    {"seed", p.seed},
           {"split", to_string(p.split)}};
    if (!p.edit_kind.empty()) j["edit_kind"] = p.edit_kind;
    pairs.push_back(std::move(j));
  }
  return {{"format_version", m.format_version},
          {"seed", m.seed},
          {"canvas_size", m.canvas_size},
          {"edited_fraction", m.edited_fraction},
          {"split_fractions", {{"train", m.splits.train}, {"val", m.splits.val}, {"test", m.splits.test}}},
          {"pairs", pairs}};
}

inline Manifest manifest_from_json(const json& j) {
  Manifest m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != kFormatVersion)
    throw ConfigError("unsupported manifest format_version " + std::to_string(m.format_version));
  m.seed = j.at("seed").get<std::uint64_t>();
  m.canvas_size = j.at("canvas_size").get<int>();
  m.edited_fraction = j.at("edited_fraction").get<double>();
  const auto& s = j.at("split_fractions");
  m.splits = {s.at("train").get<double>(), s.at("val").get<double>(), s.at("test").get<double>()};
  for (const auto& p : j.at("pairs")) {
    PairEntry e;
    e.pair_id = p.at("pair_id").get<std::string>();
    e.original_path = p.at("original").get<std::string>();
    e.edited_path = p.at("edited").get<std::string>();
    e.mask_path = p.at("mask").get<std::string>();
    e.is_edited = p.at("is_edited").get<bool>();
    e.seed = p.at("seed").get<std::uint64_t>();
    e.split = split_from_string(p.at("split").get<std::string>());
    e.edit_kind = p.value("edit_kind", std::string{});
    m.pairs.push_back(std::move(e));
  }
  return m;
}

inline Manifest load_manifest(const fs::path& path_or_dir) {
  const auto file = fs::is_directory(path_or_dir) ? path_or_dir / "manifest.json" : path_or_dir;
  std::ifstream in(file);
  if (!in) throw IoError("cannot open manifest " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + file.string() + ": " + e.what());
  }
  auto m = manifest_from_json(j);
  m.root = file.parent_path();
  return m;
}

inline void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed for " + path.string());
}

/// Loaded images for one manifest entry.
struct LoadedPair {
  torch::Tensor original;
  torch::Tensor edited;
  torch::Tensor mask;  // [1, H, W]
  const PairEntry* entry = nullptr;

  /// The segmentation input image: x_e for edited pairs, x_o otherwise (identical then).
  const torch::Tensor& input() const { return edited; }
};

inline LoadedPair load_pair(const Manifest& m, const PairEntry& e) {
  LoadedPair p;
  p.original = read_png(m.root / e.original_path, 3);
  p.edited = read_png(m.root / e.edited_path, 3);
  p.mask = read_png(m.root / e.mask_path, 1);
  p.entry = &e;
  return p;
}

inline std::string format_pair_id(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06zu", index);
  return buf;
}

struct DatasetOptions {
  std::size_t n_pairs = 200;
  double edited_fraction = 0.5;
  std::uint64_t seed = 0;
  int canvas_size = 64;
  SplitFractions splits;
  int grain_amplitude = 32;
  unsigned threads = 0;  // 0: hardware concurrency
};

/// Generates one pair for the given pair seed. Pure function of its arguments.
inline ImagePair generate_pair(std::uint64_t pair_seed, int canvas_size, bool edited, int grain_amplitude) {
  auto scene = generate_scene(pair_seed, canvas_size);
  scene.grain_amplitude = grain_amplitude;
  if (!edited) return unedited_pair(scene);
  Rng rng(stage_seed(pair_seed, "edit"));
  return sample_edited_pair(scene, rng);
}

/// Deterministic Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i) - 1));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

inline Manifest build_dataset(const DatasetOptions& opt, const fs::path& out_dir) {
  if (opt.n_pairs < 1) throw ConfigError("n_pairs must be at least 1");
  if (opt.edited_fraction < 0.0 || opt.edited_fraction > 1.0)
    throw ConfigError("edited_fraction must lie in [0,1]");
  const double split_sum = opt.splits.train + opt.splits.val + opt.splits.test;
  if (opt.splits.train < 0 || opt.splits.val < 0 || opt.splits.test < 0 || std::abs(split_sum - 1.0) > 1e-9)
    throw ConfigError("split fractions must be nonnegative and sum to 1");
  validate_canvas(opt.canvas_size);

  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "masks", ec);
  if (ec || !fs::is_directory(out_dir / "images"))
    throw IoError("cannot create dataset directory " + out_dir.string());

  const auto n = opt.n_pairs;
  const auto n_edited = static_cast<std::size_t>(std::llround(static_cast<double>(n) * opt.edited_fraction));
  const auto base = stage_seed(opt.seed, "dataset");

  // Which pairs are edited, then splits stratified by edited status.
  const auto order = permutation(n, stage_seed(base, "edited"));
  std::vector<bool> edited(n, false);
  for (std::size_t k = 0; k < n_edited; ++k) edited[order[k]] = true;

  std::vector<Split> split(n, Split::train);
  for (bool group : {true, false}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < n; ++i)
      if (edited[i] == group) members.push_back(i);
    const auto perm = permutation(members.size(), stage_seed(base, group ? "split-e" : "split-o"));
    const auto g = static_cast<double>(members.size());
    const auto n_val = static_cast<std::size_t>(std::llround(g * opt.splits.val));
    const auto n_test = std::min(members.size() - std::min(members.size(), n_val),
                                 static_cast<std::size_t>(std::llround(g * opt.splits.test)));
    for (std::size_t k = 0; k < members.size(); ++k) {
      auto& s = split[members[perm[k]]];
      if (k < n_val) s = Split::val;
      else if (k < n_val + n_test) s = Split::test;
    }
  }

  Manifest m;
  m.seed = opt.seed;
  m.canvas_size = opt.canvas_size;
  m.edited_fraction = opt.edited_fraction;
  m.splits = opt.splits;
  m.root = out_dir;
  m.pairs.resize(n);

  auto work = [&](std::size_t i) {
    auto& e = m.pairs[i];
    e.pair_id = format_pair_id(i);
    e.seed = item_seed(base, i);
    e.is_edited = edited[i];
    e.split = split[i];
    e.original_path = "images/" + e.pair_id + "_orig.png";
    e.edited_path = "images/" + e.pair_id + "_edit.png";
    e.mask_path = "masks/" + e.pair_id + ".png";
    auto pair = generate_pair(e.seed, opt.canvas_size, e.is_edited, opt.grain_amplitude);
    if (pair.edit) e.edit_kind = to_string(pair.edit->kind);
    write_png(out_dir / e.original_path, pair.original);
    write_png(out_dir / e.edited_path, pair.edited);
    write_png(out_dir / e.mask_path, compute_gt_mask(pair.original, pair.edited));
  };

  unsigned threads = opt.threads ? opt.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::exception_ptr> errors(threads);
    {
      std::vector<std::jthread> pool;
      for (unsigned t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
          try {
            for (std::size_t i = t; i < n; i += threads) work(i);
          } catch (...) {
            errors[t] = std::current_exception();
          }
        });
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  write_json(out_dir / "manifest.json", to_json(m));
  return m;
}

}  // namespace xedit
