#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lesionseg/common.hpp"
#include "lesionseg/dataset.hpp"
#include "lesionseg/evaluation.hpp"
#include "lesionseg/losses.hpp"
#include "lesionseg/models.hpp"

namespace lesionseg {

struct TrainConfig {
  double lr_init = 0.001;
  double lr_decay_factor = 0.9;
  int g_decay_every = 200;
  int d_decay_every = 100;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int epochs = 5000;
  int batch_train = 4;
  int batch_test = 1;
  double lambda_gan = 0.01;
  double beta = 10.0;
  std::uint64_t seed = 0;
  int val_interval = 50;     // validate + checkpoint every this many epochs
  double grad_clip = 0.0;    // 0 disables clipping

  void validate() const {
    if (!(lr_init > 0.0)) throw ConfigError("train.lr_init must be > 0");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0))
      throw ConfigError("train.lr_decay_factor must lie in (0,1]");
    if (g_decay_every < 1) throw ConfigError("train.g_decay_every must be >= 1");
    if (d_decay_every < 1) throw ConfigError("train.d_decay_every must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must be in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch_train < 1) throw ConfigError("train.batch_train must be >= 1");
    if (batch_test < 1) throw ConfigError("train.batch_test must be >= 1");
    if (lambda_gan < 0.0) throw ConfigError("train.lambda_gan must be >= 0");
    if (!(beta > 0.0)) throw ConfigError("train.beta must be > 0");
    if (val_interval < 1) throw ConfigError("train.val_interval must be >= 1");
    if (grad_clip < 0.0) throw ConfigError("train.grad_clip must be >= 0");
  }
};

struct StepMetrics {
  double seg_loss = 0.0;
  double gan_g_loss = 0.0;
  double gan_d_loss = 0.0;
  double total_loss = 0.0;
};

struct ValidationMetrics {
  double ap = 0.0;
  double f1 = 0.0;
};

// Step decay: lr_init * factor^floor(epoch / decay_every).
inline double lr_at_epoch(double lr_init, int decay_every, int epoch, double factor = 0.9) {
  if (epoch < 0) throw ConfigError("lr_at_epoch: epoch must be >= 0");
  if (decay_every < 1) throw ConfigError("lr_at_epoch: decay_every must be >= 1");
  return lr_init * std::pow(factor, static_cast<double>(epoch / decay_every));
}

using SgdPtr = std::shared_ptr<torch::optim::SGD>;

inline SgdPtr make_sgd(const std::vector<torch::Tensor>& params, const TrainConfig& cfg) {
  auto opts = torch::optim::SGDOptions(cfg.lr_init)
                  .momentum(cfg.momentum)
                  .weight_decay(cfg.weight_decay);
  return std::make_shared<torch::optim::SGD>(params, opts);
}

inline void set_lr(torch::optim::SGD& opt, double lr) {
  for (auto& group : opt.param_groups())
    static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
}

namespace detail {

inline std::string join_ids(const std::vector<std::string>& ids) {
  std::string s;
  for (const auto& id : ids) {
    if (!s.empty()) s += ",";
    s += id;
  }
  return s;
}

inline void check_finite_loss(const torch::Tensor& loss, const char* what) {
  if (!std::isfinite(loss.item<double>()))
    throw NumericalError(std::string(what) + ": non-finite loss");
}

}  // namespace detail

// One alternating update on a batch: the discriminator first (real =
// (image, GT), fake = (image, detached fused prediction)), then the generator
// on deep supervision + lambda * adversarial term with fake logits recomputed
// through the live graph. lambda_gan == 0 runs the plain segmentation step and
// never touches the discriminator.
inline StepMetrics train_step(const Batch& batch, const GeneratorPtr& gen,
                              const DiscriminatorPtr& disc, torch::optim::SGD* g_opt,
                              torch::optim::SGD* d_opt, const LossConfig& loss_cfg,
                              double grad_clip = 0.0) {
  if (!gen || !g_opt) throw ConfigError("train_step: generator and its optimizer are required");
  const bool adversarial = loss_cfg.lambda_gan > 0.0;
  if (adversarial && (!disc || !d_opt))
    throw ConfigError("train_step: lambda_gan > 0 requires a discriminator and its optimizer");

  StepMetrics m;
  try {
    gen->train();
    auto outs = gen->forward(batch.images);

    if (adversarial) {
      disc->train();
      d_opt->zero_grad();
      auto logits_real = discriminator_forward(disc, batch.images, batch.masks);
      auto logits_fake = discriminator_forward(disc, batch.images, outs.fused_map.detach());
      auto d_loss = gan_discriminator_loss(logits_real, logits_fake);
      detail::check_finite_loss(d_loss, "train_step[discriminator]");
      d_loss.backward();
      if (grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(disc->parameters(), grad_clip);
      d_opt->step();
      m.gan_d_loss = d_loss.item<double>();
    }

    g_opt->zero_grad();
    auto seg = deep_supervision_loss(outs, batch.masks, loss_cfg.beta, loss_cfg.eps);
    torch::Tensor total = seg;
    if (adversarial) {
      auto logits_fake = discriminator_forward(disc, batch.images, outs.fused_map);
      auto g_gan = gan_generator_loss(logits_fake, loss_cfg.gan_loss_form);
      total = generator_total_loss(seg, g_gan, loss_cfg.lambda_gan);
      m.gan_g_loss = g_gan.item<double>();
    }
    detail::check_finite_loss(total, "train_step[generator]");
    total.backward();
    if (grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(gen->parameters(), grad_clip);
    g_opt->step();

    m.seg_loss = seg.item<double>();
    m.total_loss = total.item<double>();
  } catch (const NumericalError& e) {
    // every numerical failure in a step names the batch that triggered it
    throw NumericalError(std::string(e.what()) + " on batch [" + detail::join_ids(batch.ids) +
                         "]");
  }
  return m;
}

// Deterministic validation pass delegating to the pixel-pooled evaluation;
// consumes no RNG, so it never perturbs training reproducibility.
inline ValidationMetrics validate(const GeneratorPtr& gen, const std::vector<Sample>& val_samples,
                                  LesionType lesion, double threshold = 0.5, int tile = 512,
                                  int stride = 256) {
  if (val_samples.empty()) throw DataError("validate: empty validation set");
  auto rep = evaluate_model(gen, val_samples, lesion, "validation", threshold, tile, stride);
  return {rep.ap, rep.f1};
}

// --- checkpointing -----------------------------------------------------------

namespace detail {

inline nlohmann::json stats_to_json(const DatasetStats& s) {
  return {{"train_mean_intensity", s.train_mean_intensity},
          {"channel_means", s.channel_means},
          {"channel_stds", s.channel_stds}};
}

inline DatasetStats stats_from_json(const nlohmann::json& j) {
  DatasetStats s;
  s.train_mean_intensity = j.at("train_mean_intensity").get<double>();
  auto means = j.at("channel_means").get<std::vector<double>>();
  auto stds = j.at("channel_stds").get<std::vector<double>>();
  if (means.size() != 3 || stds.size() != 3)
    throw DataError("checkpoint stats: expected 3 channel means/stds");
  std::copy(means.begin(), means.end(), s.channel_means.begin());
  std::copy(stds.begin(), stds.end(), s.channel_stds.begin());
  return s;
}

inline nlohmann::json gen_cfg_to_json(const GeneratorConfig& c) {
  return {{"backbone_stages", c.backbone_stages},
          {"pretrained_backbone", c.pretrained_backbone},
          {"backbone_weights", c.backbone_weights},
          {"fusion_init", c.fusion_init},
          {"base_width", c.base_width}};
}

inline GeneratorConfig gen_cfg_from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.backbone_stages = j.at("backbone_stages").get<int>();
  c.pretrained_backbone = false;  // weights live in the checkpoint itself
  c.backbone_weights = j.at("backbone_weights").get<std::string>();
  c.fusion_init = j.at("fusion_init").get<double>();
  c.base_width = j.at("base_width").get<int>();
  return c;
}

inline nlohmann::json disc_cfg_to_json(const DiscriminatorConfig& c) {
  return {{"patch_size", c.patch_size},
          {"input_channels", c.input_channels},
          {"base_width", c.base_width}};
}

inline DiscriminatorConfig disc_cfg_from_json(const nlohmann::json& j) {
  DiscriminatorConfig c;
  c.patch_size = j.at("patch_size").get<int>();
  c.input_channels = j.at("input_channels").get<int>();
  c.base_width = j.at("base_width").get<int>();
  return c;
}

inline nlohmann::json train_cfg_to_json(const TrainConfig& c) {
  return {{"lr_init", c.lr_init},
          {"lr_decay_factor", c.lr_decay_factor},
          {"g_decay_every", c.g_decay_every},
          {"d_decay_every", c.d_decay_every},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},
          {"batch_train", c.batch_train},
          {"batch_test", c.batch_test},
          {"lambda_gan", c.lambda_gan},
          {"beta", c.beta},
          {"seed", c.seed},
          {"val_interval", c.val_interval},
          {"grad_clip", c.grad_clip}};
}

inline TrainConfig train_cfg_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr_init = j.at("lr_init").get<double>();
  c.lr_decay_factor = j.at("lr_decay_factor").get<double>();
  c.g_decay_every = j.at("g_decay_every").get<int>();
  c.d_decay_every = j.at("d_decay_every").get<int>();
  c.momentum = j.at("momentum").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_train = j.at("batch_train").get<int>();
  c.batch_test = j.at("batch_test").get<int>();
  c.lambda_gan = j.at("lambda_gan").get<double>();
  c.beta = j.at("beta").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.val_interval = j.at("val_interval").get<int>();
  c.grad_clip = j.at("grad_clip").get<double>();
  return c;
}

}  // namespace detail

struct Checkpoint {
  nlohmann::json meta;
  GeneratorPtr gen;
  DiscriminatorPtr disc;  // null when the run had no discriminator
  SgdPtr g_opt, d_opt;    // null unless loaded with_optimizers
  torch::Tensor rng_state;
};

inline void save_checkpoint(const std::filesystem::path& path, const GeneratorPtr& gen,
                            const DiscriminatorPtr& disc, torch::optim::SGD* g_opt,
                            torch::optim::SGD* d_opt, const nlohmann::json& meta) {
  torch::serialize::OutputArchive root;
  root.write("meta", meta.dump());
  {
    torch::serialize::OutputArchive a;
    gen->save(a);
    root.write("generator", a);
  }
  if (disc) {
    torch::serialize::OutputArchive a;
    disc->save(a);
    root.write("discriminator", a);
  }
  if (g_opt) {
    torch::serialize::OutputArchive a;
    g_opt->save(a);
    root.write("g_optimizer", a);
  }
  if (d_opt) {
    torch::serialize::OutputArchive a;
    d_opt->save(a);
    root.write("d_optimizer", a);
  }
  at::Generator rng_gen = at::detail::getDefaultCPUGenerator();
  root.write("torch_rng", rng_gen.get_state());
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  root.save_to(tmp.string());
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, bool with_optimizers = false) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive root;
  root.load_from(path.string());

  Checkpoint ck;
  c10::IValue meta_v;
  root.read("meta", meta_v);
  ck.meta = nlohmann::json::parse(meta_v.toStringRef());
  if (ck.meta.value("version", 0) != 1)
    throw IoError("unsupported checkpoint version in " + path.string());

  auto kind = ck.meta.at("model_kind").get<std::string>();
  ck.gen = build_model(kind, detail::gen_cfg_from_json(ck.meta.at("generator")));
  {
    torch::serialize::InputArchive a;
    root.read("generator", a);
    ck.gen->load(a);
  }
  if (ck.meta.value("has_discriminator", false)) {
    ck.disc = build_discriminator(detail::disc_cfg_from_json(ck.meta.at("discriminator")));
    torch::serialize::InputArchive a;
    root.read("discriminator", a);
    ck.disc->load(a);
  }
  if (with_optimizers) {
    auto tc = detail::train_cfg_from_json(ck.meta.at("train"));
    ck.g_opt = make_sgd(ck.gen->parameters(), tc);
    torch::serialize::InputArchive a;
    root.read("g_optimizer", a);
    ck.g_opt->load(a);
    if (ck.disc) {
      ck.d_opt = make_sgd(ck.disc->parameters(), tc);
      torch::serialize::InputArchive b;
      root.read("d_optimizer", b);
      ck.d_opt->load(b);
    }
  }
  torch::Tensor rng;
  if (root.try_read("torch_rng", rng)) ck.rng_state = rng;
  return ck;
}

// --- the fit loop -------------------------------------------------------------

struct FitOptions {
  std::filesystem::path run_dir;  // empty → train without writing artifacts
  std::string model_kind = "hednet_cgan";
  GeneratorConfig gen_cfg{};
  DiscriminatorConfig disc_cfg{};
  double loss_eps = 1e-7;
  std::string gan_loss_form = "non_saturating";
  LesionType lesion = LesionType::MA;
  DatasetStats stats{};
  std::string config_hash;
  int crop = 0;  // 0 → train on full images
  double rotate_max_deg = 0.0;
  bool foreground_biased_crop = false;
  double val_threshold = 0.5;
  int eval_tile = 512;
  int eval_stride = 256;
  std::filesystem::path resume_from;
  bool verbose = false;
};

struct TrainState {
  int epoch = 0;  // completed epochs
  double best_val_ap = -1.0;
  GeneratorPtr gen;
  DiscriminatorPtr disc;
  SgdPtr g_opt, d_opt;
  ValidationMetrics last_val{};
};

namespace detail {

inline nlohmann::json checkpoint_meta(const TrainConfig& cfg, const FitOptions& opts,
                                      const SplitManifest& manifest, const TrainState& st) {
  nlohmann::json meta;
  meta["version"] = 1;
  meta["epoch"] = st.epoch;
  meta["best_val_ap"] = st.best_val_ap;
  meta["model_kind"] = opts.model_kind;
  meta["generator"] = gen_cfg_to_json(opts.gen_cfg);
  meta["has_discriminator"] = static_cast<bool>(st.disc);
  if (st.disc) meta["discriminator"] = disc_cfg_to_json(opts.disc_cfg);
  meta["train"] = train_cfg_to_json(cfg);
  meta["loss"] = {{"eps", opts.loss_eps}, {"gan_loss_form", opts.gan_loss_form}};
  meta["lesion"] = to_string(opts.lesion);
  meta["config_hash"] = opts.config_hash;
  meta["stats"] = stats_to_json(opts.stats);
  meta["manifest"] = manifest.to_json();
  return meta;
}

// Exposed fill color for rotation: a raw black pixel after normalization.
inline cv::Scalar normalized_black(const DatasetStats& stats) {
  return {(0.0 - stats.channel_means[0]) / stats.channel_stds[0],
          (0.0 - stats.channel_means[1]) / stats.channel_stds[1],
          (0.0 - stats.channel_means[2]) / stats.channel_stds[2]};
}

constexpr std::uint64_t kGenSeedTag = 0x67656e65726174;   // generator init stream
constexpr std::uint64_t kDiscSeedTag = 0x64697363726963;  // discriminator init stream
constexpr std::uint64_t kShuffleTag = 0x73687566666c65;   // per-epoch batch order
constexpr std::uint64_t kAugmentTag = 0x6175676d656e74;   // per-sample augmentation

}  // namespace detail

inline TrainState fit(const TrainConfig& cfg, const SplitManifest& manifest,
                      const std::vector<Sample>& train_samples,
                      const std::vector<Sample>& val_samples, const FitOptions& opts) {
  cfg.validate();
  if (train_samples.empty()) throw DataError("fit: empty training set");
  if (val_samples.empty()) throw DataError("fit: empty validation set");
  LossConfig loss_cfg;
  loss_cfg.beta = cfg.beta;
  loss_cfg.lambda_gan = cfg.lambda_gan;
  loss_cfg.eps = opts.loss_eps;
  loss_cfg.gan_loss_form = opts.gan_loss_form;
  loss_cfg.validate();
  const bool adversarial = cfg.lambda_gan > 0.0;

  TrainState st;
  if (!opts.resume_from.empty()) {
    auto ck = load_checkpoint(opts.resume_from, /*with_optimizers=*/true);
    st.gen = ck.gen;
    st.disc = ck.disc;
    st.g_opt = ck.g_opt;
    st.d_opt = ck.d_opt;
    st.epoch = ck.meta.at("epoch").get<int>();
    st.best_val_ap = ck.meta.at("best_val_ap").get<double>();
    if (adversarial && !st.disc)
      throw ConfigError("fit: lambda_gan > 0 but the checkpoint has no discriminator");
    if (ck.rng_state.defined()) {
      at::Generator rng_gen = at::detail::getDefaultCPUGenerator();
      rng_gen.set_state(ck.rng_state);
    }
  } else {
    torch::manual_seed(mix_seed(cfg.seed, detail::kGenSeedTag));
    st.gen = build_model(opts.model_kind, opts.gen_cfg);
    st.g_opt = make_sgd(st.gen->parameters(), cfg);
    if (adversarial) {
      torch::manual_seed(mix_seed(cfg.seed, detail::kDiscSeedTag));
      st.disc = build_discriminator(opts.disc_cfg);
      st.d_opt = make_sgd(st.disc->parameters(), cfg);
    }
  }

  const cv::Scalar rotation_fill = detail::normalized_black(opts.stats);
  std::ofstream log;
  if (!opts.run_dir.empty()) {
    std::filesystem::create_directories(opts.run_dir);
    atomic_write_file(opts.run_dir / "manifest.json", manifest.to_json().dump(2) + "\n");
    log.open(opts.run_dir / "log.jsonl", std::ios::app);
    if (!log) throw IoError("fit: cannot open log file in " + opts.run_dir.string());
  }

  for (int epoch = st.epoch; epoch < cfg.epochs; ++epoch) {
    const double lr_g = lr_at_epoch(cfg.lr_init, cfg.g_decay_every, epoch, cfg.lr_decay_factor);
    const double lr_d = lr_at_epoch(cfg.lr_init, cfg.d_decay_every, epoch, cfg.lr_decay_factor);
    set_lr(*st.g_opt, lr_g);
    if (st.d_opt) set_lr(*st.d_opt, lr_d);

    std::vector<Sample> augmented;
    augmented.reserve(train_samples.size());
    for (std::size_t i = 0; i < train_samples.size(); ++i) {
      std::mt19937_64 rng(mix_seed(cfg.seed, detail::kAugmentTag, epoch, i));
      Sample s = train_samples[i];
      if (opts.crop > 0) s = random_crop(s, opts.crop, rng, opts.foreground_biased_crop);
      if (opts.rotate_max_deg > 0.0) s = random_rotate(s, opts.rotate_max_deg, rng, rotation_fill);
      augmented.push_back(std::move(s));
    }
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, detail::kShuffleTag, epoch));
    BatchStream stream(augmented, cfg.batch_train, &shuffle_rng);

    int step = 0;
    double epoch_seg = 0.0;
    while (auto batch = stream.next()) {
      StepMetrics m;
      try {
        m = train_step(*batch, st.gen, st.disc, st.g_opt.get(), st.d_opt.get(), loss_cfg,
                       cfg.grad_clip);
      } catch (const NumericalError& e) {
        if (!opts.run_dir.empty()) {
          nlohmann::json diag = {{"epoch", epoch},
                                 {"step", step},
                                 {"batch_ids", batch->ids},
                                 {"error", e.what()}};
          atomic_write_file(opts.run_dir / "diagnostic.json", diag.dump(2) + "\n");
        }
        throw;
      }
      epoch_seg += m.seg_loss;
      if (log) {
        nlohmann::json line = {{"epoch", epoch},       {"step", step},
                               {"lr_g", lr_g},         {"lr_d", st.d_opt ? lr_d : 0.0},
                               {"seg", m.seg_loss},    {"gan_g", m.gan_g_loss},
                               {"gan_d", m.gan_d_loss}, {"total", m.total_loss}};
        log << line.dump() << '\n';
      }
      ++step;
    }
    st.epoch = epoch + 1;

    const bool do_val = (st.epoch % cfg.val_interval == 0) || (st.epoch == cfg.epochs);
    if (do_val) {
      st.last_val = validate(st.gen, val_samples, opts.lesion, opts.val_threshold, opts.eval_tile,
                             opts.eval_stride);
      const bool improved = st.last_val.ap > st.best_val_ap;
      if (improved) st.best_val_ap = st.last_val.ap;
      if (log) {
        nlohmann::json line = {{"epoch", epoch},
                               {"event", "validation"},
                               {"ap", st.last_val.ap},
                               {"f1", st.last_val.f1},
                               {"best", improved}};
        log << line.dump() << '\n';
        log.flush();
      }
      if (!opts.run_dir.empty()) {
        auto meta = detail::checkpoint_meta(cfg, opts, manifest, st);
        save_checkpoint(opts.run_dir / "ckpt_latest", st.gen, st.disc, st.g_opt.get(),
                        st.d_opt.get(), meta);
        if (improved)
          save_checkpoint(opts.run_dir / "ckpt_best", st.gen, st.disc, st.g_opt.get(),
                          st.d_opt.get(), meta);
      }
    }
    if (opts.verbose) {
      std::string val_note = do_val ? "  val_ap " + std::to_string(st.last_val.ap) : "";
      std::fprintf(stderr, "epoch %d/%d  seg %.6f  lr_g %.6g%s\n", st.epoch, cfg.epochs,
                   epoch_seg / std::max(1, step), lr_g, val_note.c_str());
    }
  }
  return st;
}

}  // namespace lesionseg
