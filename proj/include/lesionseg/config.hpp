#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>

#include "lesionseg/common.hpp"
#include "lesionseg/dataset.hpp"
#include "lesionseg/losses.hpp"
#include "lesionseg/models.hpp"
#include "lesionseg/preprocess.hpp"
#include "lesionseg/training.hpp"

namespace lesionseg {

// --- minimal TOML-style parser ------------------------------------------------
// Supported: [section] headers, key = value lines, # comments, quoted strings,
// booleans, integers, floats. That is the whole config surface; anything else
// is rejected loudly.

struct TomlValue {
  enum class Kind { Bool, Int, Float, Str } kind = Kind::Str;
  bool b = false;
  std::int64_t i = 0;
  double f = 0.0;
  std::string s;
  int line = 0;
};

using TomlTable = std::map<std::string, std::map<std::string, TomlValue>>;

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (c == '"' && (i == 0 || line[i - 1] != '\\')) in_str = !in_str;
    if (c == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

inline bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-' && c != '.')
      return false;
  return true;
}

inline TomlValue parse_toml_value(const std::string& raw, int line_no) {
  TomlValue v;
  v.line = line_no;
  if (raw.size() >= 2 && raw.front() == '"' && raw.back() == '"') {
    v.kind = TomlValue::Kind::Str;
    std::string out;
    for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
      char c = raw[i];
      if (c == '\\' && i + 2 < raw.size()) {
        char n = raw[++i];
        if (n == 'n') out += '\n';
        else if (n == 't') out += '\t';
        else if (n == '"') out += '"';
        else if (n == '\\') out += '\\';
        else throw ConfigError("config line " + std::to_string(line_no) +
                               ": unsupported escape '\\" + std::string(1, n) + "'");
      } else {
        out += c;
      }
    }
    v.s = out;
    return v;
  }
  if (raw == "true" || raw == "false") {
    v.kind = TomlValue::Kind::Bool;
    v.b = (raw == "true");
    return v;
  }
  // integer?
  {
    std::size_t pos = 0;
    try {
      long long n = std::stoll(raw, &pos);
      if (pos == raw.size()) {
        v.kind = TomlValue::Kind::Int;
        v.i = n;
        return v;
      }
    } catch (...) {
    }
  }
  // float?
  {
    std::size_t pos = 0;
    try {
      double d = std::stod(raw, &pos);
      if (pos == raw.size()) {
        v.kind = TomlValue::Kind::Float;
        v.f = d;
        return v;
      }
    } catch (...) {
    }
  }
  throw ConfigError("config line " + std::to_string(line_no) + ": cannot parse value '" + raw +
                    "' (expected quoted string, boolean, or number)");
}

}  // namespace detail

inline TomlTable parse_toml_subset(const std::string& text) {
  TomlTable table;
  std::istringstream in(text);
  std::string line;
  std::string section;  // "" = top level
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = detail::trim(detail::strip_comment(line));
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError("config line " + std::to_string(line_no) + ": malformed section header");
      section = detail::trim(t.substr(1, t.size() - 2));
      if (!detail::valid_key(section))
        throw ConfigError("config line " + std::to_string(line_no) + ": bad section name '" +
                          section + "'");
      table[section];  // sections may legally be empty
      continue;
    }
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    std::string key = detail::trim(t.substr(0, eq));
    std::string val = detail::trim(t.substr(eq + 1));
    if (!detail::valid_key(key))
      throw ConfigError("config line " + std::to_string(line_no) + ": bad key '" + key + "'");
    if (val.empty())
      throw ConfigError("config line " + std::to_string(line_no) + ": missing value for '" + key +
                        "'");
    auto& sec = table[section];
    if (sec.count(key))
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key +
                        "'");
    sec[key] = detail::parse_toml_value(val, line_no);
  }
  return table;
}

// Typed accessor that tracks which keys were consumed so leftovers can be
// rejected by name.
class ConfigReader {
 public:
  explicit ConfigReader(TomlTable table) : table_(std::move(table)) {}

  void get(const std::string& sec, const std::string& key, std::string& out) {
    if (auto* v = find(sec, key)) {
      if (v->kind != TomlValue::Kind::Str) bad_type(sec, key, "a quoted string");
      out = v->s;
    }
  }
  void get(const std::string& sec, const std::string& key, bool& out) {
    if (auto* v = find(sec, key)) {
      if (v->kind != TomlValue::Kind::Bool) bad_type(sec, key, "true or false");
      out = v->b;
    }
  }
  void get(const std::string& sec, const std::string& key, int& out) {
    if (auto* v = find(sec, key)) {
      if (v->kind != TomlValue::Kind::Int) bad_type(sec, key, "an integer");
      out = static_cast<int>(v->i);
    }
  }
  void get(const std::string& sec, const std::string& key, std::uint64_t& out) {
    if (auto* v = find(sec, key)) {
      if (v->kind != TomlValue::Kind::Int || v->i < 0) bad_type(sec, key, "a non-negative integer");
      out = static_cast<std::uint64_t>(v->i);
    }
  }
  void get(const std::string& sec, const std::string& key, double& out) {
    if (auto* v = find(sec, key)) {
      if (v->kind == TomlValue::Kind::Int) out = static_cast<double>(v->i);
      else if (v->kind == TomlValue::Kind::Float) out = v->f;
      else bad_type(sec, key, "a number");
    }
  }

  void finish() const {
    for (const auto& [sec, kv] : table_)
      for (const auto& [key, v] : kv)
        if (!consumed_.count({sec, key}))
          throw ConfigError("unknown config key '" + qualified(sec, key) + "' (line " +
                            std::to_string(v.line) + ")");
  }

 private:
  static std::string qualified(const std::string& sec, const std::string& key) {
    return sec.empty() ? key : sec + "." + key;
  }
  const TomlValue* find(const std::string& sec, const std::string& key) {
    auto s = table_.find(sec);
    if (s == table_.end()) return nullptr;
    auto k = s->second.find(key);
    if (k == s->second.end()) return nullptr;
    consumed_.insert({sec, key});
    return &k->second;
  }
  [[noreturn]] void bad_type(const std::string& sec, const std::string& key, const char* want) {
    throw ConfigError("config key '" + qualified(sec, key) + "' must be " + want);
  }

  TomlTable table_;
  std::set<std::pair<std::string, std::string>> consumed_;
};

struct EvalConfig {
  double threshold = 0.5;
  int tile = 512;
  int stride = 256;
  std::string out_dir = "eval";
  double overlay_alpha = 0.6;

  void validate() const {
    if (!(threshold >= 0.0 && threshold <= 1.0))
      throw ConfigError("eval.threshold must lie in [0,1]");
    if (tile < 16 || tile % 16 != 0) throw ConfigError("eval.tile must be a multiple of 16");
    if (stride < 1 || stride > tile) throw ConfigError("eval.stride must lie in [1, tile]");
    if (!(overlay_alpha >= 0.0 && overlay_alpha <= 1.0))
      throw ConfigError("eval.overlay_alpha must lie in [0,1]");
  }
};

// The whole experiment in one struct; fields default to the reference
// hyperparameters so an empty config file is a valid full-scale experiment.
struct ExperimentConfig {
  LesionType lesion = LesionType::EX;
  std::string model = "hednet_cgan";  // | hednet | unet | stub
  std::uint64_t seed = 0;
  std::string run_name = "run";
  std::string runs_dir = "runs";

  DatasetConfig dataset;
  PreprocessConfig preprocess;
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;  // patch_size 0 = auto by lesion
  LossConfig loss;
  TrainConfig train;
  EvalConfig eval;

  // hednet/unet/stub are the non-adversarial variants; only the full model
  // keeps the adversarial weight.
  double effective_lambda() const {
    return model == "hednet_cgan" ? loss.lambda_gan : 0.0;
  }

  void validate() const {
    if (model != "hednet_cgan" && model != "hednet" && model != "unet" && model != "stub")
      throw ConfigError("model must be one of hednet_cgan|hednet|unet|stub");
    if (run_name.empty() || run_name.find('/') != std::string::npos)
      throw ConfigError("run_name must be a non-empty path-free name");
    dataset.validate();
    preprocess.validate();
    generator.validate();
    discriminator.validate();
    loss.validate();
    train.validate();
    eval.validate();
  }
};

namespace detail {

inline std::string toml_str(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '\n') {
      out += "\\n";
    } else if (c == '\t') {
      out += "\\t";
    } else {
      if (c == '"' || c == '\\') out += '\\';
      out += c;
    }
  }
  return out + "\"";
}

inline std::string toml_num(double v) {
  if (v == static_cast<std::int64_t>(v) && std::abs(v) < 1e15) {
    // keep a float marker so round-trips preserve the type
    return std::to_string(static_cast<std::int64_t>(v)) + ".0";
  }
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {  // shortest exact representation
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::stod(buf) == v) break;
  }
  return buf;
}

}  // namespace detail

// Deterministic full dump of the effective configuration: fixed key order,
// every key present. Feeding the dump back through the parser reproduces the
// config, and its hash identifies the experiment.
inline std::string canonical_dump(const ExperimentConfig& c) {
  std::ostringstream o;
  auto b = [](bool v) { return v ? "true" : "false"; };
  o << "lesion = " << detail::toml_str(to_string(c.lesion)) << "\n";
  o << "model = " << detail::toml_str(c.model) << "\n";
  o << "seed = " << c.seed << "\n";
  o << "run_name = " << detail::toml_str(c.run_name) << "\n";
  o << "runs_dir = " << detail::toml_str(c.runs_dir) << "\n";
  o << "\n[dataset]\n";
  o << "root = " << detail::toml_str(c.dataset.root) << "\n";
  o << "image_dir = " << detail::toml_str(c.dataset.image_dir) << "\n";
  o << "mask_dir = " << detail::toml_str(c.dataset.mask_dir) << "\n";
  o << "split_ratio = " << detail::toml_num(c.dataset.split_ratio) << "\n";
  o << "crop = " << c.dataset.crop << "\n";
  o << "rotate_max_deg = " << detail::toml_num(c.dataset.rotate_max_deg) << "\n";
  o << "foreground_biased_crop = " << b(c.dataset.foreground_biased_crop) << "\n";
  o << "limit_images = " << c.dataset.limit_images << "\n";
  o << "\n[preprocess]\n";
  o << "brightness_balance = " << b(c.preprocess.brightness_balance) << "\n";
  o << "clahe = " << b(c.preprocess.clahe) << "\n";
  o << "denoise = " << b(c.preprocess.denoise) << "\n";
  o << "bilateral = " << b(c.preprocess.bilateral) << "\n";
  o << "clip_limit = " << detail::toml_num(c.preprocess.clip_limit) << "\n";
  o << "tile_grid_x = " << c.preprocess.tile_grid_x << "\n";
  o << "tile_grid_y = " << c.preprocess.tile_grid_y << "\n";
  o << "clahe_channels = " << detail::toml_str(c.preprocess.clahe_channels) << "\n";
  o << "nl_strength = " << detail::toml_num(c.preprocess.nl_strength) << "\n";
  o << "bilateral_diameter = " << c.preprocess.bilateral_diameter << "\n";
  o << "bilateral_sigma_color = " << detail::toml_num(c.preprocess.bilateral_sigma_color) << "\n";
  o << "bilateral_sigma_space = " << detail::toml_num(c.preprocess.bilateral_sigma_space) << "\n";
  o << "cache_dir = " << detail::toml_str(c.preprocess.cache_dir) << "\n";
  o << "\n[model]\n";
  o << "base_width = " << c.generator.base_width << "\n";
  o << "backbone_stages = " << c.generator.backbone_stages << "\n";
  o << "pretrained_backbone = " << b(c.generator.pretrained_backbone) << "\n";
  o << "backbone_weights = " << detail::toml_str(c.generator.backbone_weights) << "\n";
  o << "fusion_init = " << detail::toml_num(c.generator.fusion_init) << "\n";
  o << "patch_size = " << c.discriminator.patch_size << "\n";
  o << "disc_base_width = " << c.discriminator.base_width << "\n";
  o << "\n[loss]\n";
  o << "beta = " << detail::toml_num(c.loss.beta) << "\n";
  o << "lambda_gan = " << detail::toml_num(c.loss.lambda_gan) << "\n";
  o << "eps = " << detail::toml_num(c.loss.eps) << "\n";
  o << "gan_loss_form = " << detail::toml_str(c.loss.gan_loss_form) << "\n";
  o << "\n[train]\n";
  o << "lr_init = " << detail::toml_num(c.train.lr_init) << "\n";
  o << "lr_decay_factor = " << detail::toml_num(c.train.lr_decay_factor) << "\n";
  o << "g_decay_every = " << c.train.g_decay_every << "\n";
  o << "d_decay_every = " << c.train.d_decay_every << "\n";
  o << "momentum = " << detail::toml_num(c.train.momentum) << "\n";
  o << "weight_decay = " << detail::toml_num(c.train.weight_decay) << "\n";
  o << "epochs = " << c.train.epochs << "\n";
  o << "batch_train = " << c.train.batch_train << "\n";
  o << "batch_test = " << c.train.batch_test << "\n";
  o << "val_interval = " << c.train.val_interval << "\n";
  o << "grad_clip = " << detail::toml_num(c.train.grad_clip) << "\n";
  o << "\n[eval]\n";
  o << "threshold = " << detail::toml_num(c.eval.threshold) << "\n";
  o << "tile = " << c.eval.tile << "\n";
  o << "stride = " << c.eval.stride << "\n";
  o << "out_dir = " << detail::toml_str(c.eval.out_dir) << "\n";
  o << "overlay_alpha = " << detail::toml_num(c.eval.overlay_alpha) << "\n";
  return o.str();
}

inline std::string config_hash(const ExperimentConfig& c) {
  return hex64(fnv1a64(canonical_dump(c)));
}

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  ConfigReader r(parse_toml_subset(text));
  ExperimentConfig c;

  std::string lesion_s = to_string(c.lesion);
  r.get("", "lesion", lesion_s);
  c.lesion = parse_lesion(lesion_s);
  r.get("", "model", c.model);
  r.get("", "seed", c.seed);
  r.get("", "run_name", c.run_name);
  r.get("", "runs_dir", c.runs_dir);

  r.get("dataset", "root", c.dataset.root);
  r.get("dataset", "image_dir", c.dataset.image_dir);
  r.get("dataset", "mask_dir", c.dataset.mask_dir);
  r.get("dataset", "split_ratio", c.dataset.split_ratio);
  r.get("dataset", "crop", c.dataset.crop);
  r.get("dataset", "rotate_max_deg", c.dataset.rotate_max_deg);
  r.get("dataset", "foreground_biased_crop", c.dataset.foreground_biased_crop);
  r.get("dataset", "limit_images", c.dataset.limit_images);

  r.get("preprocess", "brightness_balance", c.preprocess.brightness_balance);
  r.get("preprocess", "clahe", c.preprocess.clahe);
  r.get("preprocess", "denoise", c.preprocess.denoise);
  r.get("preprocess", "bilateral", c.preprocess.bilateral);
  r.get("preprocess", "clip_limit", c.preprocess.clip_limit);
  r.get("preprocess", "tile_grid_x", c.preprocess.tile_grid_x);
  r.get("preprocess", "tile_grid_y", c.preprocess.tile_grid_y);
  r.get("preprocess", "clahe_channels", c.preprocess.clahe_channels);
  r.get("preprocess", "nl_strength", c.preprocess.nl_strength);
  r.get("preprocess", "bilateral_diameter", c.preprocess.bilateral_diameter);
  r.get("preprocess", "bilateral_sigma_color", c.preprocess.bilateral_sigma_color);
  r.get("preprocess", "bilateral_sigma_space", c.preprocess.bilateral_sigma_space);
  r.get("preprocess", "cache_dir", c.preprocess.cache_dir);

  r.get("model", "base_width", c.generator.base_width);
  r.get("model", "backbone_stages", c.generator.backbone_stages);
  r.get("model", "pretrained_backbone", c.generator.pretrained_backbone);
  r.get("model", "backbone_weights", c.generator.backbone_weights);
  r.get("model", "fusion_init", c.generator.fusion_init);
  int patch = 0;
  r.get("model", "patch_size", patch);
  r.get("model", "disc_base_width", c.discriminator.base_width);

  r.get("loss", "beta", c.loss.beta);
  r.get("loss", "lambda_gan", c.loss.lambda_gan);
  r.get("loss", "eps", c.loss.eps);
  r.get("loss", "gan_loss_form", c.loss.gan_loss_form);

  r.get("train", "lr_init", c.train.lr_init);
  r.get("train", "lr_decay_factor", c.train.lr_decay_factor);
  r.get("train", "g_decay_every", c.train.g_decay_every);
  r.get("train", "d_decay_every", c.train.d_decay_every);
  r.get("train", "momentum", c.train.momentum);
  r.get("train", "weight_decay", c.train.weight_decay);
  r.get("train", "epochs", c.train.epochs);
  r.get("train", "batch_train", c.train.batch_train);
  r.get("train", "batch_test", c.train.batch_test);
  r.get("train", "val_interval", c.train.val_interval);
  r.get("train", "grad_clip", c.train.grad_clip);

  r.get("eval", "threshold", c.eval.threshold);
  r.get("eval", "tile", c.eval.tile);
  r.get("eval", "stride", c.eval.stride);
  r.get("eval", "out_dir", c.eval.out_dir);
  r.get("eval", "overlay_alpha", c.eval.overlay_alpha);

  r.finish();

  // patch size: 0 selects the lesion-scale default (small patch for the
  // smallest lesions), otherwise as written
  if (patch == 0) patch = (c.lesion == LesionType::MA) ? 64 : 128;
  c.discriminator.patch_size = patch;

  // single sources of truth propagated to the sub-configs that reuse them
  c.train.seed = c.seed;
  c.train.lambda_gan = c.effective_lambda();
  c.train.beta = c.loss.beta;
  c.dataset.batch_train = c.train.batch_train;
  c.dataset.batch_test = c.train.batch_test;

  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  try {
    return parse_experiment_config(read_text_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace lesionseg
