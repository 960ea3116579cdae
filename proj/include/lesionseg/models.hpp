#pragma once

#include <torch/torch.h>

#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "lesionseg/common.hpp"

namespace lesionseg {

// Multi-scale probability maps; side_maps holds one entry per supervised
// head (5 for HEDNet, 1 for UNET/stub), fused_map is the final prediction.
struct SideOutputs {
  std::vector<torch::Tensor> side_maps;  // each B x 1 x S x S, in (0,1)
  torch::Tensor fused_map;               // B x 1 x S x S, in (0,1)

  std::vector<torch::Tensor> all_maps() const {
    std::vector<torch::Tensor> v = side_maps;
    v.push_back(fused_map);
    return v;
  }
};

struct GeneratorConfig {
  int backbone_stages = 5;
  bool pretrained_backbone = false;
  std::string backbone_weights;  // local file path, never downloaded
  double fusion_init = 0.0;      // 0 = uniform 1/backbone_stages
  int base_width = 64;           // 64 reproduces the VGG16 trunk widths

  void validate() const {
    if (backbone_stages < 2) throw ConfigError("generator.backbone_stages must be >= 2");
    if (base_width < 1) throw ConfigError("generator.base_width must be >= 1");
    if (fusion_init < 0.0) throw ConfigError("generator.fusion_init must be >= 0");
  }
};

struct DiscriminatorConfig {
  int patch_size = 128;    // effective receptive field of one output logit
  int input_channels = 4;  // 3 image + 1 segmentation map
  int base_width = 64;

  void validate() const {
    if (patch_size != 64 && patch_size != 128)
      throw ConfigError("discriminator.patch_size must be 64 or 128");
    if (input_channels != 4) throw ConfigError("discriminator.input_channels must be 4");
    if (base_width < 1) throw ConfigError("discriminator.base_width must be >= 1");
  }
};

// Common forward interface for all generators so the training loop runs
// unmodified across hednet / unet / stub.
struct GeneratorBase : torch::nn::Module {
  virtual ~GeneratorBase() = default;
  virtual SideOutputs forward(const torch::Tensor& images) = 0;
  virtual std::string kind() const = 0;
  virtual int stride_divisor() const { return 16; }
};

using GeneratorPtr = std::shared_ptr<GeneratorBase>;

namespace detail {

inline void check_generator_input(const torch::Tensor& images, int divisor) {
  if (images.dim() != 4 || images.size(1) != 3)
    throw DataError("generator_forward: expected B x 3 x H x W input");
  if (images.size(2) % divisor != 0 || images.size(3) % divisor != 0)
    throw DataError("generator_forward: spatial size " + std::to_string(images.size(2)) + "x" +
                    std::to_string(images.size(3)) + " not divisible by " +
                    std::to_string(divisor));
}

inline torch::Tensor upsample_to(const torch::Tensor& t, int64_t h, int64_t w) {
  if (t.size(2) == h && t.size(3) == w) return t;
  return torch::nn::functional::interpolate(
      t, torch::nn::functional::InterpolateFuncOptions()
             .size(std::vector<int64_t>{h, w})
             .mode(torch::kBilinear)
             .align_corners(false));
}

// Reflect padding: constant inputs stay constant, so tiled full-image
// inference is seam-free on flat regions.
inline torch::nn::Conv2d conv3x3(int in, int out) {
  return torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, 3).padding(1).padding_mode(torch::kReflect));
}

}  // namespace detail

// VGG-style trunk with per-stage side outputs and a learned 1x1 fusion over
// the concatenated side logits. Stage i has width base_width*2^min(i,3) and
// 2 convs for the first two stages, 3 after, matching VGG16 at width 64.
class HedNetImpl : public GeneratorBase {
 public:
  explicit HedNetImpl(GeneratorConfig cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    int in_ch = 3;
    for (int s = 0; s < cfg_.backbone_stages; ++s) {
      int out_ch = cfg_.base_width * (1 << std::min(s, 3));
      int n_convs = s < 2 ? 2 : 3;
      torch::nn::Sequential stage;
      for (int c = 0; c < n_convs; ++c) {
        stage->push_back(detail::conv3x3(c == 0 ? in_ch : out_ch, out_ch));
        stage->push_back(torch::nn::ReLU(torch::nn::ReLUOptions(true)));
      }
      stages_.push_back(register_module("stage" + std::to_string(s + 1), stage));
      side_heads_.push_back(register_module(
          "side" + std::to_string(s + 1),
          torch::nn::Conv2d(torch::nn::Conv2dOptions(out_ch, 1, 1))));
      in_ch = out_ch;
    }
    fuse_ = register_module(
        "fuse", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg_.backbone_stages, 1, 1)));
    double finit = cfg_.fusion_init > 0.0 ? cfg_.fusion_init : 1.0 / cfg_.backbone_stages;
    {
      torch::NoGradGuard ng;
      fuse_->weight.fill_(finit);
      fuse_->bias.zero_();
    }
    if (cfg_.pretrained_backbone) load_backbone_weights();
  }

  SideOutputs forward(const torch::Tensor& images) override {
    detail::check_generator_input(images, stride_divisor());
    int64_t h = images.size(2), w = images.size(3);
    torch::Tensor x = images;
    std::vector<torch::Tensor> side_logits;
    for (size_t s = 0; s < stages_.size(); ++s) {
      x = stages_[s]->forward(x);
      side_logits.push_back(detail::upsample_to(side_heads_[s]->forward(x), h, w));
      if (s + 1 < stages_.size()) x = torch::max_pool2d(x, 2, 2);
    }
    torch::Tensor fused_logit = fuse_->forward(torch::cat(side_logits, 1));
    SideOutputs out;
    for (const auto& l : side_logits) out.side_maps.push_back(torch::sigmoid(l));
    out.fused_map = torch::sigmoid(fused_logit);
    return out;
  }

  std::string kind() const override { return "hednet"; }
  int stride_divisor() const override { return 1 << (cfg_.backbone_stages - 1); }
  const GeneratorConfig& config() const { return cfg_; }

 private:
  void load_backbone_weights();

  GeneratorConfig cfg_;
  std::vector<torch::nn::Sequential> stages_;
  std::vector<torch::nn::Conv2d> side_heads_;
  torch::nn::Conv2d fuse_{nullptr};
};

// --- named-tensor weight container (.lstw) ----------------------------------
// [LSTW][u32 ver=1][u32 count]{[u32 len][name][u32 ndim][i64 dims][f32 data]}*

inline std::map<std::string, torch::Tensor> load_weight_container(
    const std::filesystem::path& path) {
  std::string raw = read_text_file(path);
  const char* p = raw.data();
  const char* end = p + raw.size();
  auto need = [&](size_t n) {
    if (p + n > end) throw IoError("truncated weight container: " + path.string());
  };
  need(12);
  if (std::memcmp(p, "LSTW", 4) != 0) throw IoError("bad weight container magic: " + path.string());
  std::uint32_t ver, count;
  std::memcpy(&ver, p + 4, 4);
  std::memcpy(&count, p + 8, 4);
  p += 12;
  if (ver != 1) throw IoError("unsupported weight container version: " + path.string());
  std::map<std::string, torch::Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    need(4);
    std::uint32_t len;
    std::memcpy(&len, p, 4);
    p += 4;
    need(len + 4);
    std::string name(p, len);
    p += len;
    std::uint32_t ndim;
    std::memcpy(&ndim, p, 4);
    p += 4;
    need(8ull * ndim);
    std::vector<int64_t> dims(ndim);
    std::memcpy(dims.data(), p, 8ull * ndim);
    p += 8ull * ndim;
    int64_t numel = 1;
    for (int64_t d : dims) numel *= d;
    need(sizeof(float) * numel);
    torch::Tensor t = torch::empty(dims, torch::kFloat32);
    std::memcpy(t.data_ptr<float>(), p, sizeof(float) * numel);
    p += sizeof(float) * numel;
    out[name] = t;
  }
  return out;
}

inline void save_weight_container(const std::filesystem::path& path,
                                  const std::map<std::string, torch::Tensor>& tensors) {
  std::string out("LSTW");
  std::uint32_t ver = 1, count = static_cast<std::uint32_t>(tensors.size());
  out.append(reinterpret_cast<const char*>(&ver), 4);
  out.append(reinterpret_cast<const char*>(&count), 4);
  for (const auto& [name, tensor] : tensors) {
    torch::Tensor t = tensor.to(torch::kFloat32).contiguous();
    std::uint32_t len = static_cast<std::uint32_t>(name.size());
    out.append(reinterpret_cast<const char*>(&len), 4);
    out.append(name);
    std::uint32_t ndim = static_cast<std::uint32_t>(t.dim());
    out.append(reinterpret_cast<const char*>(&ndim), 4);
    for (int64_t d : t.sizes()) out.append(reinterpret_cast<const char*>(&d), 8);
    out.append(reinterpret_cast<const char*>(t.data_ptr<float>()), sizeof(float) * t.numel());
  }
  atomic_write_file(path, out);
}

inline void HedNetImpl::load_backbone_weights() {
  if (cfg_.backbone_weights.empty())
    throw ConfigError("pretrained backbone requested but generator.backbone_weights is unset");
  if (!std::filesystem::exists(cfg_.backbone_weights))
    throw IoError("pretrained backbone weights not found: " + cfg_.backbone_weights);
  if (cfg_.backbone_stages != 5 || cfg_.base_width != 64)
    throw ConfigError("pretrained backbone weights require backbone_stages=5, base_width=64");
  auto weights = load_weight_container(cfg_.backbone_weights);
  // torchvision vgg16.features conv indices per stage
  static const std::vector<std::vector<int>> kVggIdx = {
      {0, 2}, {5, 7}, {10, 12, 14}, {17, 19, 21}, {24, 26, 28}};
  torch::NoGradGuard ng;
  for (size_t s = 0; s < stages_.size(); ++s) {
    auto convs = stages_[s]->modules(/*include_self=*/false);
    size_t ci = 0;
    for (const auto& m : convs) {
      auto conv = std::dynamic_pointer_cast<torch::nn::Conv2dImpl>(m);
      if (!conv) continue;
      std::string key = "features." + std::to_string(kVggIdx[s][ci]);
      auto wit = weights.find(key + ".weight");
      auto bit = weights.find(key + ".bias");
      if (wit == weights.end() || bit == weights.end())
        throw IoError("weight container missing tensor '" + key + "' for stage " +
                      std::to_string(s + 1));
      if (!wit->second.sizes().equals(conv->weight.sizes()))
        throw IoError("weight shape mismatch for '" + key + "'");
      conv->weight.copy_(wit->second);
      conv->bias.copy_(bit->second);
      ++ci;
    }
  }
}

// Standard encoder-decoder baseline with skip connections at every level;
// exposes the same SideOutputs interface (one side map == fused map).
class UNetImpl : public GeneratorBase {
 public:
  explicit UNetImpl(int base_width = 64, int levels = 4) : levels_(levels) {
    if (base_width < 1 || levels < 1) throw ConfigError("unet: invalid base_width/levels");
    int w = base_width;
    int in_ch = 3;
    for (int i = 0; i < levels; ++i) {
      int out_ch = w * (1 << i);
      enc_.push_back(register_module("enc" + std::to_string(i + 1), double_conv(in_ch, out_ch)));
      in_ch = out_ch;
    }
    int bott_ch = w * (1 << levels);
    bottleneck_ = register_module("bottleneck", double_conv(in_ch, bott_ch));
    in_ch = bott_ch;
    for (int i = levels - 1; i >= 0; --i) {
      int skip_ch = w * (1 << i);
      up_convs_.push_back(register_module("up" + std::to_string(i + 1),
                                          detail::conv3x3(in_ch, skip_ch)));
      dec_.push_back(
          register_module("dec" + std::to_string(i + 1), double_conv(2 * skip_ch, skip_ch)));
      in_ch = skip_ch;
    }
    head_ = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(w, 1, 1)));
  }

  SideOutputs forward(const torch::Tensor& images) override {
    detail::check_generator_input(images, stride_divisor());
    torch::Tensor x = images;
    std::vector<torch::Tensor> skips;
    for (int i = 0; i < levels_; ++i) {
      x = enc_[i]->forward(x);
      skips.push_back(x);
      x = torch::max_pool2d(x, 2, 2);
    }
    x = bottleneck_->forward(x);
    for (int i = 0; i < levels_; ++i) {
      torch::Tensor skip = skips[levels_ - 1 - i];
      if (ablate_skip == levels_ - 1 - i) skip = torch::zeros_like(skip);
      x = detail::upsample_to(x, skip.size(2), skip.size(3));
      x = torch::relu(up_convs_[i]->forward(x));
      x = dec_[i]->forward(torch::cat({skip, x}, 1));
    }
    SideOutputs out;
    out.fused_map = torch::sigmoid(head_->forward(x));
    out.side_maps = {out.fused_map};
    return out;
  }

  std::string kind() const override { return "unet"; }
  int stride_divisor() const override { return 1 << levels_; }

  // test probe: zero the skip connection at the given level (-1 = off)
  int ablate_skip = -1;

 private:
  static torch::nn::Sequential double_conv(int in, int out) {
    return torch::nn::Sequential(detail::conv3x3(in, out),
                                 torch::nn::ReLU(torch::nn::ReLUOptions(true)),
                                 detail::conv3x3(out, out),
                                 torch::nn::ReLU(torch::nn::ReLUOptions(true)));
  }

  int levels_;
  std::vector<torch::nn::Sequential> enc_, dec_;
  std::vector<torch::nn::Conv2d> up_convs_;
  torch::nn::Sequential bottleneck_{nullptr};
  torch::nn::Conv2d head_{nullptr};
};

// Testing utility: reads the first input channel through a learnable affine
// + sigmoid. With inputs whose red channel encodes the mask it acts as a
// perfect generator, which makes CLI/evaluation round-trips checkable.
class StubGeneratorImpl : public GeneratorBase {
 public:
  explicit StubGeneratorImpl(double gain = 8.0, double bias = 0.0) {
    gain_ = register_parameter("gain", torch::tensor({gain}, torch::kFloat32));
    bias_ = register_parameter("bias", torch::tensor({bias}, torch::kFloat32));
  }

  SideOutputs forward(const torch::Tensor& images) override {
    detail::check_generator_input(images, 1);
    torch::Tensor red = images.narrow(1, 0, 1);
    SideOutputs out;
    out.fused_map = torch::sigmoid(gain_ * red + bias_);
    out.side_maps = {out.fused_map};
    return out;
  }

  std::string kind() const override { return "stub"; }
  int stride_divisor() const override { return 1; }

 private:
  torch::Tensor gain_, bias_;
};

// Fully convolutional conditional discriminator over (image, segmentation)
// pairs. 4 stride-2 k4 blocks for patch_size 64, 5 for 128, then a k4 s1
// 1-channel head; theoretical receptive fields 94 and 190 px. First block
// carries no normalization.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit PatchDiscriminatorImpl(DiscriminatorConfig cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    const int n_blocks = cfg_.patch_size == 64 ? 4 : 5;
    int in_ch = cfg_.input_channels;
    for (int i = 0; i < n_blocks; ++i) {
      int out_ch = cfg_.base_width * (1 << std::min(i, 3));
      auto conv = torch::nn::Conv2d(
          torch::nn::Conv2dOptions(in_ch, out_ch, 4).stride(2).padding(1).bias(i == 0));
      torch::nn::Sequential block;
      block->push_back(conv);
      if (i > 0) block->push_back(torch::nn::BatchNorm2d(out_ch));
      block->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
      blocks_.push_back(register_module("block" + std::to_string(i + 1), block));
      in_ch = out_ch;
    }
    head_ = register_module(
        "head", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_ch, 1, 4).stride(1).padding(1)));
  }

  torch::Tensor forward_cat(const torch::Tensor& x) {
    if (x.dim() != 4 || x.size(1) != cfg_.input_channels)
      throw DataError("discriminator: expected B x " + std::to_string(cfg_.input_channels) +
                      " x S x S input");
    torch::Tensor y = x;
    for (auto& b : blocks_) y = b->forward(y);
    return head_->forward(y);
  }

  const DiscriminatorConfig& config() const { return cfg_; }

 private:
  DiscriminatorConfig cfg_;
  std::vector<torch::nn::Sequential> blocks_;
  torch::nn::Conv2d head_{nullptr};
};

using DiscriminatorPtr = std::shared_ptr<PatchDiscriminatorImpl>;

inline GeneratorPtr build_generator(const GeneratorConfig& cfg = {}) {
  return std::make_shared<HedNetImpl>(cfg);
}

inline GeneratorPtr build_unet(const GeneratorConfig& cfg = {}) {
  cfg.validate();
  return std::make_shared<UNetImpl>(cfg.base_width);
}

inline GeneratorPtr build_stub() { return std::make_shared<StubGeneratorImpl>(); }

// model kinds: hednet_cgan / hednet share the HEDNet generator; unet and
// stub swap it behind the same interface.
inline GeneratorPtr build_model(const std::string& kind, const GeneratorConfig& cfg = {}) {
  if (kind == "hednet" || kind == "hednet_cgan") return build_generator(cfg);
  if (kind == "unet") return build_unet(cfg);
  if (kind == "stub") return build_stub();
  throw ConfigError("unknown model kind '" + kind + "'");
}

inline DiscriminatorPtr build_discriminator(const DiscriminatorConfig& cfg = {}) {
  return std::make_shared<PatchDiscriminatorImpl>(cfg);
}

inline SideOutputs generator_forward(const GeneratorPtr& gen, const torch::Tensor& images) {
  return gen->forward(images);
}

// Concatenates (image, segmentation) along channels -> patch logit map.
inline torch::Tensor discriminator_forward(const DiscriminatorPtr& disc,
                                           const torch::Tensor& image, const torch::Tensor& seg) {
  if (image.dim() != 4 || seg.dim() != 4 || image.size(0) != seg.size(0) || seg.size(1) != 1 ||
      image.size(2) != seg.size(2) || image.size(3) != seg.size(3))
    throw DataError("discriminator_forward: image and segmentation shapes misaligned");
  return disc->forward_cat(torch::cat({image, seg}, 1));
}

}  // namespace lesionseg
