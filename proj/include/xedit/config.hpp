#pragma once

// Resolved run configuration: built-in defaults, overlaid by an optional
// INI/TOML-style file ([section] key = value), overlaid by command-line flags.

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "xedit/evaluation.hpp"

namespace xedit {

inline constexpr const char* kCodeVersion = "0.1.0";

class RunConfig {
 public:
  using Section = std::map<std::string, std::string>;

  RunConfig() {
    values_["run"] = {{"seed", "0"}, {"threads", "1"}};
    values_["dataset"] = {{"n_pairs", "200"},        {"edited_fraction", "0.5"}, {"size", "64"},
                          {"grain", "32"},           {"train_fraction", "0.8"},  {"val_fraction", "0.1"},
                          {"test_fraction", "0.1"}};
    values_["diffusion"] = {{"train_steps", "2000"}, {"batch_size", "16"},   {"learning_rate", "0.002"},
                            {"schedule_steps", "200"}, {"beta_start", "0.0005"}, {"beta_end", "0.05"},
                            {"base_width", "16"},    {"n_steps", "50"}};
    values_["model"] = {{"base_width", "32"}, {"cbam", "true"}, {"cbam_reduction", "16"}, {"spatial_kernel", "7"}};
    values_["train"] = {{"learning_rate", "0.0001"},  {"weight_decay", "0.001"}, {"batch_size", "16"},
                        {"epochs", "10"},             {"restart_period", "0"},   {"restart_mult", "2"},
                        {"lr_min", "0"},              {"augment", "false"},      {"alpha", "0.2"},
                        {"lambda_flat", "0.1"},       {"lambda_edge", "3.0"},    {"lambda_R", "0.5"},
                        {"lambda_S", "0.5"},          {"ig_steps", "32"},        {"relevance_every", "1"},
                        {"relevance_samples", "0"},   {"image_channels_only", "false"}};
    values_["eval"] = {{"split", "test"}, {"bins", "100"}};
  }

  /// Overlays every key of an INI/TOML-style file. Unknown sections or keys
  /// are configuration errors.
  void load_file(const fs::path& path) {
    boost::property_tree::ptree tree;
    try {
      boost::property_tree::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      if (!fs::exists(path)) throw IoError("cannot open config " + path.string());
      throw ConfigError(std::string("malformed config: ") + e.what());
    }
    for (const auto& [section, body] : tree) {
      if (body.empty()) throw ConfigError("config key '" + section + "' must live inside a [section]");
      for (const auto& [key, leaf] : body) set(section, key, unquote(leaf.data()));
    }
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    auto s = values_.find(section);
    if (s == values_.end()) throw ConfigError("unknown config section [" + section + "]");
    if (s->second.find(key) == s->second.end())
      throw ConfigError("unknown config key '" + key + "' in [" + section + "]");
    s->second[key] = value;
  }

  const std::string& get(const std::string& section, const std::string& key) const {
    return values_.at(section).at(key);
  }

  double number(const std::string& section, const std::string& key) const {
    const auto& v = get(section, key);
    try {
      std::size_t used = 0;
      double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("[" + section + "] " + key + " = '" + v + "' is not a number");
    }
  }

  std::int64_t integer(const std::string& section, const std::string& key) const {
    const double d = number(section, key);
    if (d != std::floor(d)) throw ConfigError("[" + section + "] " + key + " must be an integer");
    return static_cast<std::int64_t>(d);
  }

  bool boolean(const std::string& section, const std::string& key) const {
    const auto& v = get(section, key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("[" + section + "] " + key + " = '" + v + "' is not a boolean");
  }

  std::uint64_t seed() const { return static_cast<std::uint64_t>(integer("run", "seed")); }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [s, body] : values_)
      for (const auto& [k, v] : body) j[s][k] = v;
    return j;
  }

  /// INI text that reproduces this configuration through load_file.
  std::string to_ini() const {
    std::ostringstream out;
    for (const auto& [s, body] : values_) {
      out << "[" << s << "]\n";
      for (const auto& [k, v] : body) out << k << " = " << v << "\n";
      out << "\n";
    }
    return out.str();
  }

  // Typed views -------------------------------------------------------------

  DatasetOptions dataset() const {
    DatasetOptions o;
    o.n_pairs = static_cast<std::size_t>(std::max<std::int64_t>(0, integer("dataset", "n_pairs")));
    if (integer("dataset", "n_pairs") < 1) throw ConfigError("n_pairs must be at least 1");
    o.edited_fraction = number("dataset", "edited_fraction");
    o.seed = seed();
    o.canvas_size = static_cast<int>(integer("dataset", "size"));
    o.grain_amplitude = static_cast<int>(integer("dataset", "grain"));
    o.splits = {number("dataset", "train_fraction"), number("dataset", "val_fraction"),
                number("dataset", "test_fraction")};
    o.threads = static_cast<unsigned>(std::max<std::int64_t>(1, integer("run", "threads")));
    return o;
  }

  DiffusionTrainConfig diffusion() const {
    DiffusionTrainConfig c;
    c.train_steps = static_cast<int>(integer("diffusion", "train_steps"));
    c.batch_size = static_cast<int>(integer("diffusion", "batch_size"));
    c.learning_rate = number("diffusion", "learning_rate");
    c.schedule_steps = static_cast<int>(integer("diffusion", "schedule_steps"));
    c.beta_start = number("diffusion", "beta_start");
    c.beta_end = number("diffusion", "beta_end");
    c.denoiser.base_width = static_cast<int>(integer("diffusion", "base_width"));
    c.seed = seed();
    return c;
  }

  int inversion_steps() const { return static_cast<int>(integer("diffusion", "n_steps")); }

  ModelConfig model(Variant v, int input_size) const {
    ModelConfig m;
    m.in_channels = variant_channels(v);
    m.base_width = static_cast<int>(integer("model", "base_width"));
    m.cbam_enabled = boolean("model", "cbam");
    m.cbam_reduction = static_cast<int>(integer("model", "cbam_reduction"));
    m.spatial_kernel = static_cast<int>(integer("model", "spatial_kernel"));
    m.input_size = input_size;
    m.validate();
    return m;
  }

  TrainConfig train(Stage stage, Variant v) const {
    TrainConfig t;
    t.stage = stage;
    t.variant = v;
    t.learning_rate = number("train", "learning_rate");
    t.weight_decay = number("train", "weight_decay");
    t.batch_size = static_cast<int>(integer("train", "batch_size"));
    t.epochs = static_cast<int>(integer("train", "epochs"));
    t.restart_period = integer("train", "restart_period");
    t.restart_mult = static_cast<int>(integer("train", "restart_mult"));
    t.lr_min = number("train", "lr_min");
    t.augment = boolean("train", "augment");
    t.loss_weights = {number("train", "alpha"), number("train", "lambda_flat"), number("train", "lambda_edge"),
                      number("train", "lambda_R"), number("train", "lambda_S")};
    t.ig_steps = static_cast<int>(integer("train", "ig_steps"));
    t.relevance_every = static_cast<int>(integer("train", "relevance_every"));
    t.relevance_samples = static_cast<int>(integer("train", "relevance_samples"));
    t.relevance_image_channels_only = boolean("train", "image_channels_only");
    t.seed = seed();
    t.validate();
    return t;
  }

 private:
  static std::string unquote(std::string v) {
    if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front())
      return v.substr(1, v.size() - 2);
    return v;
  }

  std::map<std::string, Section> values_;
};

/// FNV-1a digest of a file's bytes (directories: of their manifest/index).
inline std::string file_fingerprint(const fs::path& p) {
  fs::path target = p;
  if (fs::is_directory(p)) {
    if (fs::exists(p / "manifest.json")) target = p / "manifest.json";
    else if (fs::exists(p / "index.json")) target = p / "index.json";
    else return "directory";
  }
  std::ifstream in(target, std::ios::binary);
  if (!in) return "missing";
  std::ostringstream ss;
  ss << in.rdbuf();
  return hash_string(ss.str());
}

/// Writes run.json (resolved config, seed, code version, input fingerprints)
/// and resolved.ini next to a run's outputs.
inline void stamp_run(const fs::path& dir, const std::string& command, const RunConfig& cfg,
                      const std::map<std::string, fs::path>& inputs) {
  nlohmann::json in = nlohmann::json::object();
  for (const auto& [name, path] : inputs) in[name] = {{"path", path.string()}, {"fingerprint", file_fingerprint(path)}};
  write_json(dir / "run.json", {{"command", command},
                                {"seed", cfg.seed()},
                                {"code_version", kCodeVersion},
                                {"format_version", kFormatVersion},
                                {"config", cfg.to_json()},
                                {"inputs", in}});
  std::ofstream out(dir / "resolved.ini");
  if (!out) throw IoError("cannot write " + (dir / "resolved.ini").string());
  out << cfg.to_ini();
}

}  // namespace xedit
