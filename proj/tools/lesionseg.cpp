// lesionseg: retinal lesion segmentation pipeline driver.
//
// Subcommands: preprocess, train, evaluate, infer, plot. All behavior is
// driven by one TOML config; flags override the few knobs that vary between
// invocations. Exit codes: 0 ok, 2 config error, 3 data/i-o error,
// 4 numerical failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "lesionseg/config.hpp"
#include "lesionseg/dataset.hpp"
#include "lesionseg/evaluation.hpp"
#include "lesionseg/models.hpp"
#include "lesionseg/preprocess.hpp"
#include "lesionseg/training.hpp"

namespace fs = std::filesystem;
using namespace lesionseg;

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> run_name;
  std::optional<int> limit_images;
  std::optional<int> epochs;
  std::optional<double> threshold;
};

ExperimentConfig load_config(const std::string& config_path, const Overrides& ov) {
  ExperimentConfig cfg =
      config_path.empty() ? ExperimentConfig{} : load_experiment_config(config_path);
  if (ov.seed) {
    cfg.seed = *ov.seed;
    cfg.train.seed = *ov.seed;
  }
  if (ov.run_name) cfg.run_name = *ov.run_name;
  if (ov.limit_images) cfg.dataset.limit_images = *ov.limit_images;
  if (ov.epochs) cfg.train.epochs = *ov.epochs;
  if (ov.threshold) cfg.eval.threshold = *ov.threshold;
  cfg.validate();
  return cfg;
}

std::string utc_timestamp() {
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

fs::path default_cache_dir(const ExperimentConfig& cfg) {
  if (!cfg.preprocess.cache_dir.empty()) return cfg.preprocess.cache_dir;
  if (!cfg.dataset.root.empty()) return fs::path(cfg.dataset.root) / "cache";
  return {};
}

// Sorted image ids (file stems) of a split directory; empty when absent.
std::vector<std::string> list_image_ids(const ExperimentConfig& cfg, const std::string& split) {
  fs::path dir = fs::path(cfg.dataset.root) / cfg.dataset.image_dir / split;
  std::vector<std::string> ids;
  if (!fs::is_directory(dir)) return ids;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    for (auto& ok : image_extensions())
      if (ext == ok) {
        ids.push_back(e.path().stem().string());
        break;
      }
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Dataset stats: reuse the cached stats.json when it matches this preprocess
// config, otherwise recompute from the raw training images.
DatasetStats obtain_stats(const ExperimentConfig& cfg, const std::vector<RawPair>& train_pairs,
                          const fs::path& cache_dir) {
  fs::path stats_path = cache_dir.empty() ? fs::path() : cache_dir / "stats.json";
  ExperimentConfig probe = cfg;  // hash covers only the preprocess block
  if (!stats_path.empty() && fs::exists(stats_path)) {
    auto j = nlohmann::json::parse(read_text_file(stats_path));
    if (j.value("preprocess_canonical", "") == cfg.preprocess.canonical_string()) {
      DatasetStats s = lesionseg::detail::stats_from_json(j.at("stats"));
      s.validate();
      return s;
    }
  }
  std::vector<RawFundusImage> imgs;
  imgs.reserve(train_pairs.size());
  for (const auto& p : train_pairs) imgs.push_back(p.image);
  return compute_dataset_stats(imgs);
}

void write_stats_file(const fs::path& cache_dir, const ExperimentConfig& cfg,
                      const DatasetStats& stats, std::size_t n_train) {
  nlohmann::json j;
  j["stats"] = lesionseg::detail::stats_to_json(stats);
  j["stats_version"] = stats_version(stats);
  j["preprocess_canonical"] = cfg.preprocess.canonical_string();
  j["preprocess_hash"] = preprocess_hash(cfg.preprocess, stats);
  j["n_train_images"] = n_train;
  atomic_write_file(cache_dir / "stats.json", j.dump(2) + "\n");
}

// Raw pairs -> preprocessed samples, using the cache when an entry matches
// the current preprocess hash and writing back fresh entries when a cache
// directory is configured.
std::vector<Sample> materialize(const std::vector<RawPair>& pairs, const PreprocessConfig& pcfg,
                                const DatasetStats& stats, const fs::path& cache_dir,
                                std::size_t* n_cached = nullptr, std::size_t* n_computed = nullptr) {
  const std::string hash = preprocess_hash(pcfg, stats);
  const std::string version = stats_version(stats);
  std::vector<Sample> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    Sample s;
    s.source_id = p.image.source_id;
    s.mask = p.mask;
    bool loaded = false;
    if (!cache_dir.empty()) {
      fs::path cpath = cache_path(cache_dir, p.image.source_id, hash);
      if (fs::exists(cpath)) {
        s.image = load_float_image(cpath, p.image.source_id);
        if (s.image.stats_version == version) {
          loaded = true;
          if (n_cached) ++*n_cached;
        }
      }
    }
    if (!loaded) {
      s.image = preprocess_pipeline(p.image, stats, pcfg);
      if (n_computed) ++*n_computed;
      if (!cache_dir.empty()) {
        fs::create_directories(cache_dir);
        save_float_image(cache_path(cache_dir, p.image.source_id, hash), s.image);
      }
    }
    s.check_aligned();
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<RawPair> filter_pairs(const std::vector<RawPair>& pairs,
                                  const std::vector<std::string>& keep_ids) {
  std::set<std::string> keep(keep_ids.begin(), keep_ids.end());
  std::vector<RawPair> out;
  for (const auto& p : pairs)
    if (keep.count(p.image.source_id)) out.push_back(p);
  return out;
}

// --- commands -----------------------------------------------------------------

int cmd_preprocess(const ExperimentConfig& cfg, const std::string& out_dir_flag) {
  fs::path cache_dir = out_dir_flag.empty() ? default_cache_dir(cfg) : fs::path(out_dir_flag);
  if (cache_dir.empty())
    throw ConfigError("preprocess: no cache directory (set [preprocess].cache_dir or --out)");
  fs::create_directories(cache_dir);

  auto train_pairs = load_idrid(cfg.dataset.root, cfg.lesion, "train", cfg.dataset);
  DatasetStats stats = obtain_stats(cfg, train_pairs, cache_dir);
  write_stats_file(cache_dir, cfg, stats, train_pairs.size());

  std::vector<RawPair> all = train_pairs;
  if (!list_image_ids(cfg, "test").empty()) {
    auto test_pairs = load_idrid(cfg.dataset.root, cfg.lesion, "test", cfg.dataset);
    all.insert(all.end(), test_pairs.begin(), test_pairs.end());
  }

  const std::string hash = preprocess_hash(cfg.preprocess, stats);
  std::size_t written = 0, skipped = 0;
  for (const auto& p : all) {
    fs::path cpath = cache_path(cache_dir, p.image.source_id, hash);
    if (fs::exists(cpath)) {
      ++skipped;
      continue;
    }
    save_float_image(cpath, preprocess_pipeline(p.image, stats, cfg.preprocess));
    ++written;
  }
  std::printf("preprocess: %zu written, %zu up-to-date, stats at %s\n", written, skipped,
              (cache_dir / "stats.json").string().c_str());
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, bool resume) {
  fs::path run_dir = fs::path(cfg.runs_dir) / cfg.run_name;
  fs::create_directories(run_dir);
  atomic_write_file(run_dir / "config.toml", canonical_dump(cfg));

  auto train_pairs = load_idrid(cfg.dataset.root, cfg.lesion, "train", cfg.dataset);
  fs::path cache_dir = default_cache_dir(cfg);
  DatasetStats stats = obtain_stats(cfg, train_pairs, cache_dir);

  std::vector<std::string> ids;
  for (const auto& p : train_pairs) ids.push_back(p.image.source_id);
  SplitManifest manifest = split_train_val(ids, cfg.dataset.split_ratio, cfg.seed);
  manifest.lesion = cfg.lesion;
  manifest.test_ids = list_image_ids(cfg, "test");
  manifest.validate();

  auto train_samples =
      materialize(filter_pairs(train_pairs, manifest.train_ids), cfg.preprocess, stats, cache_dir);
  auto val_samples =
      materialize(filter_pairs(train_pairs, manifest.val_ids), cfg.preprocess, stats, cache_dir);

  FitOptions opts;
  opts.run_dir = run_dir;
  opts.model_kind = cfg.model;
  opts.gen_cfg = cfg.generator;
  opts.disc_cfg = cfg.discriminator;
  opts.loss_eps = cfg.loss.eps;
  opts.gan_loss_form = cfg.loss.gan_loss_form;
  opts.lesion = cfg.lesion;
  opts.stats = stats;
  opts.config_hash = config_hash(cfg);
  opts.crop = cfg.dataset.crop;
  opts.rotate_max_deg = cfg.dataset.rotate_max_deg;
  opts.foreground_biased_crop = cfg.dataset.foreground_biased_crop;
  opts.val_threshold = cfg.eval.threshold;
  opts.eval_tile = cfg.eval.tile;
  opts.eval_stride = cfg.eval.stride;
  opts.verbose = true;
  if (resume) {
    fs::path latest = run_dir / "ckpt_latest";
    if (!fs::exists(latest)) throw DataError("train --resume: no checkpoint at " + latest.string());
    opts.resume_from = latest;
  }

  TrainConfig tc = cfg.train;
  tc.lambda_gan = cfg.effective_lambda();

  TrainState st = fit(tc, manifest, train_samples, val_samples, opts);
  std::printf("train: %d epochs done, best val AP %.6f, artifacts in %s\n", st.epoch,
              st.best_val_ap, run_dir.string().c_str());
  return 0;
}

int cmd_evaluate(const ExperimentConfig& cfg, std::string ckpt_flag, const std::string& split,
                 std::string out_flag, bool force) {
  fs::path run_dir = fs::path(cfg.runs_dir) / cfg.run_name;
  fs::path ckpt = ckpt_flag.empty() ? run_dir / "ckpt_best" : fs::path(ckpt_flag);
  auto ck = load_checkpoint(ckpt);

  const std::string current_hash = config_hash(cfg);
  const std::string ckpt_hash = ck.meta.value("config_hash", "");
  if (ckpt_hash != current_hash && !force)
    throw ConfigError("evaluate: config hash " + current_hash + " does not match checkpoint (" +
                      ckpt_hash + "); pass --force to evaluate anyway");

  DatasetStats stats = lesionseg::detail::stats_from_json(ck.meta.at("stats"));
  SplitManifest manifest = SplitManifest::from_json(ck.meta.at("manifest"));

  std::vector<RawPair> pairs;
  if (split == "test") {
    pairs = load_idrid(cfg.dataset.root, cfg.lesion, "test", cfg.dataset);
  } else if (split == "val" || split == "train") {
    auto all = load_idrid(cfg.dataset.root, cfg.lesion, "train", cfg.dataset);
    pairs = filter_pairs(all, split == "val" ? manifest.val_ids : manifest.train_ids);
  } else {
    throw ConfigError("evaluate: --split must be train|val|test");
  }
  auto samples = materialize(pairs, cfg.preprocess, stats, default_cache_dir(cfg));

  std::string model_name = ck.meta.at("model_kind").get<std::string>();
  MetricsReport rep = evaluate_model(ck.gen, samples, cfg.lesion, model_name, cfg.eval.threshold,
                                     cfg.eval.tile, cfg.eval.stride);

  fs::path out_dir = out_flag.empty() ? run_dir / cfg.eval.out_dir : fs::path(out_flag);
  fs::create_directories(out_dir);
  nlohmann::json j = rep.to_json();
  j["split"] = split;
  j["checkpoint"] = ckpt.string();
  j["generated_at"] = utc_timestamp();
  std::string hash_tag = (ckpt_hash.empty() ? current_hash : ckpt_hash).substr(0, 8);
  fs::path report_path =
      out_dir / ("report_" + model_name + "_" + to_string(cfg.lesion) + "_" + hash_tag + ".json");
  atomic_write_file(report_path, j.dump(2) + "\n");
  render_pr_plot({rep}, out_dir);

  std::printf("evaluate[%s/%s]: AP %.6f  F1 %.6f  (%d images, %lld positive px) -> %s\n",
              model_name.c_str(), to_string(cfg.lesion), rep.ap, rep.f1, rep.n_images,
              static_cast<long long>(rep.n_pixels_pos), report_path.string().c_str());
  return 0;
}

int cmd_infer(const ExperimentConfig& cfg, std::string ckpt_flag, const std::string& image_path,
              const std::string& out_path) {
  fs::path run_dir = fs::path(cfg.runs_dir) / cfg.run_name;
  fs::path ckpt = ckpt_flag.empty() ? run_dir / "ckpt_best" : fs::path(ckpt_flag);
  auto ck = load_checkpoint(ckpt);
  DatasetStats stats = lesionseg::detail::stats_from_json(ck.meta.at("stats"));

  RawFundusImage raw = load_image(image_path);
  PreprocessedImage pre = preprocess_pipeline(raw, stats, cfg.preprocess);
  torch::Tensor prob =
      predict_full_image(ck.gen, image_to_tensor(pre.pixels), cfg.eval.tile, cfg.eval.stride);

  // 16-bit probability map, written before (and independent of) the overlay
  cv::Mat prob_mat = tensor_to_map(prob);
  cv::Mat prob16;
  prob_mat.convertTo(prob16, CV_16UC1, 65535.0);
  if (!cv::imwrite(out_path, prob16)) throw IoError("infer: cannot write " + out_path);

  cv::Mat bgr;
  cv::cvtColor(raw.pixels, bgr, cv::COLOR_RGB2BGR);
  cv::Mat overlay = bgr.clone();
  const double alpha = cfg.eval.overlay_alpha;
  for (int r = 0; r < overlay.rows; ++r) {
    auto* orow = overlay.ptr<cv::Vec3b>(r);
    const float* prow = prob_mat.ptr<float>(r);
    for (int c = 0; c < overlay.cols; ++c) {
      double w = alpha * prow[c];
      orow[c][2] = cv::saturate_cast<uchar>(orow[c][2] * (1.0 - w) + 255.0 * w);
      orow[c][0] = cv::saturate_cast<uchar>(orow[c][0] * (1.0 - w));
      orow[c][1] = cv::saturate_cast<uchar>(orow[c][1] * (1.0 - w));
    }
  }
  fs::path overlay_path = fs::path(out_path).replace_extension();
  overlay_path += "_overlay.png";
  if (!cv::imwrite(overlay_path.string(), overlay))
    throw IoError("infer: cannot write " + overlay_path.string());

  std::printf("infer: wrote %s and %s\n", out_path.c_str(), overlay_path.string().c_str());
  return 0;
}

int cmd_plot(const std::vector<std::string>& report_paths, const std::string& out_dir) {
  std::vector<MetricsReport> reports;
  for (const auto& p : report_paths) {
    if (!fs::exists(p)) throw DataError("plot: report not found: " + p);
    reports.push_back(MetricsReport::from_json(nlohmann::json::parse(read_text_file(p))));
  }
  auto files = render_pr_plot(reports, out_dir);
  for (const auto& f : files) std::printf("plot: wrote %s\n", f.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"retinal lesion segmentation pipeline"};
  app.require_subcommand(1);
  app.fallthrough(true);

  std::string config_path;
  Overrides ov;
  std::uint64_t seed_flag = 0;
  std::string run_name_flag;
  int limit_flag = 0, epochs_flag = 0;
  double threshold_flag = 0.5;
  app.add_option("--config", config_path, "experiment config file (TOML)");
  auto* seed_opt = app.add_option("--seed", seed_flag, "override RNG seed");
  auto* run_opt = app.add_option("--run-name", run_name_flag, "override run name");
  auto* limit_opt = app.add_option("--limit-images", limit_flag, "cap images per split (0 = all)");
  auto* epochs_opt = app.add_option("--epochs", epochs_flag, "override training epochs");
  auto* thr_opt = app.add_option("--threshold", threshold_flag, "override decision threshold");

  auto* p_pre = app.add_subcommand("preprocess", "cache the preprocessed corpus + stats file");
  std::string pre_out;
  p_pre->add_option("--out", pre_out, "cache directory (default: [preprocess].cache_dir)");

  auto* p_train = app.add_subcommand("train", "train a model into runs/<run-name>");
  bool resume = false;
  p_train->add_flag("--resume", resume, "continue from ckpt_latest in the run directory");

  auto* p_eval = app.add_subcommand("evaluate", "compute AP/F1/PR artifacts for a checkpoint");
  std::string eval_ckpt, eval_split = "test", eval_out;
  bool eval_force = false;
  p_eval->add_option("--checkpoint", eval_ckpt, "checkpoint path (default: run's ckpt_best)");
  p_eval->add_option("--split", eval_split, "train|val|test (default test)");
  p_eval->add_option("--out", eval_out, "output directory");
  p_eval->add_flag("--force", eval_force, "evaluate despite config-hash mismatch");

  auto* p_infer = app.add_subcommand("infer", "probability map + overlay for one image");
  std::string infer_ckpt, infer_image, infer_out;
  p_infer->add_option("--checkpoint", infer_ckpt, "checkpoint path (default: run's ckpt_best)");
  p_infer->add_option("--image", infer_image, "input fundus image")->required();
  p_infer->add_option("--out", infer_out, "output probability map path (PNG)")->required();

  auto* p_plot = app.add_subcommand("plot", "combined PR plots from report JSONs");
  std::vector<std::string> plot_reports;
  std::string plot_out;
  p_plot->add_option("reports", plot_reports, "report JSON files")->required();
  p_plot->add_option("--out", plot_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // usage problems are config errors
  }

  try {
    if (*seed_opt) ov.seed = seed_flag;
    if (*run_opt) ov.run_name = run_name_flag;
    if (*limit_opt) ov.limit_images = limit_flag;
    if (*epochs_opt) ov.epochs = epochs_flag;
    if (*thr_opt) ov.threshold = threshold_flag;
    ExperimentConfig cfg = load_config(config_path, ov);

    if (*p_pre) return cmd_preprocess(cfg, pre_out);
    if (*p_train) return cmd_train(cfg, resume);
    if (*p_eval) return cmd_evaluate(cfg, eval_ckpt, eval_split, eval_out, eval_force);
    if (*p_infer) return cmd_infer(cfg, infer_ckpt, infer_image, infer_out);
    if (*p_plot) return cmd_plot(plot_reports, plot_out);
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 4;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
