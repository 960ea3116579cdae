#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <opencv2/imgproc.hpp>
#include <opencv2/photo.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "lesionseg/image.hpp"

namespace lesionseg {

struct PreprocessConfig {
  bool brightness_balance = true;
  bool clahe = true;
  bool denoise = true;
  bool bilateral = true;
  // CLAHE limit follows the absolute per-bin count convention (scaled by tile
  // size), i.e. the convention under which "40" is the meaningful default.
  double clip_limit = 40.0;
  int tile_grid_x = 8;
  int tile_grid_y = 8;
  std::string clahe_channels = "luminance";  // "luminance" | "rgb"
  double nl_strength = 10.0;
  int bilateral_diameter = 9;
  double bilateral_sigma_color = 75.0;
  double bilateral_sigma_space = 75.0;
  std::string cache_dir;

  std::string canonical_string() const {
    std::ostringstream ss;
    ss << "brightness_balance=" << brightness_balance << "\nclahe=" << clahe
       << "\ndenoise=" << denoise << "\nbilateral=" << bilateral
       << "\nclip_limit=" << clip_limit << "\ntile_grid=" << tile_grid_x << "x" << tile_grid_y
       << "\nclahe_channels=" << clahe_channels << "\nnl_strength=" << nl_strength
       << "\nbilateral_diameter=" << bilateral_diameter
       << "\nbilateral_sigma_color=" << bilateral_sigma_color
       << "\nbilateral_sigma_space=" << bilateral_sigma_space << "\n";
    return ss.str();
  }

  void validate() const {
    if (clip_limit <= 0.0) throw ConfigError("preprocess.clip_limit must be > 0");
    if (tile_grid_x < 1 || tile_grid_y < 1) throw ConfigError("preprocess.tile_grid must be >= 1");
    if (clahe_channels != "luminance" && clahe_channels != "rgb")
      throw ConfigError("preprocess.clahe_channels must be 'luminance' or 'rgb'");
    if (nl_strength <= 0.0) throw ConfigError("preprocess.nl_strength must be > 0");
    if (bilateral_diameter < 1) throw ConfigError("preprocess.bilateral_diameter must be >= 1");
    if (bilateral_sigma_color <= 0.0 || bilateral_sigma_space <= 0.0)
      throw ConfigError("preprocess.bilateral_sigma must be > 0");
  }
};

// Pooled mean intensity of the training images; normalization constants are
// the fixed ImageNet values.
inline DatasetStats compute_dataset_stats(const std::vector<RawFundusImage>& train_images) {
  if (train_images.empty()) throw DataError("compute_dataset_stats: empty training set");
  double sum = 0.0;
  double count = 0.0;
  for (const auto& img : train_images) {
    img.validate();
    cv::Scalar s = cv::sum(img.pixels);
    sum += s[0] + s[1] + s[2];
    count += 3.0 * img.pixels.rows * img.pixels.cols;
  }
  DatasetStats stats;
  stats.train_mean_intensity = sum / count;
  stats.validate();
  return stats;
}

inline std::string stats_version(const DatasetStats& stats) {
  std::ostringstream ss;
  ss.precision(17);
  ss << stats.train_mean_intensity;
  for (double v : stats.channel_means) ss << "," << v;
  for (double v : stats.channel_stds) ss << "," << v;
  return "ls1-" + hex64(fnv1a64(ss.str()));
}

namespace detail {

// Mean of min(v*gain, 255) over the histogram; monotone in gain.
inline double clipped_mean(const std::array<double, 256>& hist, double total, double gain) {
  double s = 0.0;
  for (int v = 0; v < 256; ++v) s += hist[v] * std::min(v * gain, 255.0);
  return s / total;
}

}  // namespace detail

// Rescales so the clipped output mean hits target_mean. Multiplicative gain
// preserves the black fundus background; the gain is found by bracketing +
// bisection on the clipped mean because clipping saturation defeats plain
// ratio iteration.
inline RawFundusImage brightness_balance(const RawFundusImage& image, double target_mean) {
  image.validate();
  if (!(target_mean > 0.0 && target_mean < 255.0))
    throw ConfigError("brightness_balance: target_mean must lie in (0,255)");
  double cur = mean_intensity(image.pixels);
  if (cur <= 0.0)
    throw DataError("brightness_balance: image '" + image.source_id + "' is all black");

  std::array<double, 256> hist{};
  double total = 3.0 * image.pixels.rows * image.pixels.cols;
  for (int r = 0; r < image.pixels.rows; ++r) {
    const uchar* p = image.pixels.ptr<uchar>(r);
    for (int i = 0; i < image.pixels.cols * 3; ++i) hist[p[i]] += 1.0;
  }

  constexpr double kTol = 0.25;
  double gain = target_mean / cur;
  double m = detail::clipped_mean(hist, total, gain);
  if (std::abs(m - target_mean) > kTol) {
    double lo = gain, hi = gain;
    if (m < target_mean) {
      while (detail::clipped_mean(hist, total, hi) < target_mean && hi < 1e6) hi *= 2.0;
    } else {
      while (detail::clipped_mean(hist, total, lo) > target_mean && lo > 1e-6) lo *= 0.5;
    }
    for (int it = 0; it < 60; ++it) {
      gain = 0.5 * (lo + hi);
      m = detail::clipped_mean(hist, total, gain);
      if (std::abs(m - target_mean) <= kTol) break;
      (m < target_mean ? lo : hi) = gain;
    }
  }

  RawFundusImage out;
  out.source_id = image.source_id;
  image.pixels.convertTo(out.pixels, CV_8UC3, gain);
  return out;
}

// Tile-local histogram equalization on the luminance channel (Lab) by
// default; per-RGB-channel equalization distorts lesion hue.
inline RawFundusImage clahe(const RawFundusImage& image, std::pair<int, int> tile_grid,
                            double clip_limit, const std::string& channels = "luminance") {
  image.validate();
  if (clip_limit <= 0.0) throw ConfigError("clahe: clip_limit must be > 0");
  if (tile_grid.first < 1 || tile_grid.second < 1)
    throw ConfigError("clahe: tile grid must be >= 1");
  auto eq = cv::createCLAHE(clip_limit, cv::Size(tile_grid.first, tile_grid.second));
  RawFundusImage out;
  out.source_id = image.source_id;
  if (channels == "rgb") {
    std::vector<cv::Mat> ch;
    cv::split(image.pixels, ch);
    for (auto& c : ch) eq->apply(c, c);
    cv::merge(ch, out.pixels);
  } else {
    cv::Mat lab;
    cv::cvtColor(image.pixels, lab, cv::COLOR_RGB2Lab);
    std::vector<cv::Mat> ch;
    cv::split(lab, ch);
    eq->apply(ch[0], ch[0]);
    cv::merge(ch, lab);
    cv::cvtColor(lab, out.pixels, cv::COLOR_Lab2RGB);
  }
  return out;
}

// Applied per channel: the colored OpenCV variant round-trips through 8-bit
// Lab, which breaks the exact identity on constant images.
inline RawFundusImage nl_means_denoise(const RawFundusImage& image, double strength = 10.0) {
  image.validate();
  if (strength <= 0.0) throw ConfigError("nl_means_denoise: strength must be > 0");
  std::vector<cv::Mat> ch;
  cv::split(image.pixels, ch);
  for (auto& c : ch) cv::fastNlMeansDenoising(c, c, static_cast<float>(strength), 7, 21);
  RawFundusImage out;
  out.source_id = image.source_id;
  cv::merge(ch, out.pixels);
  return out;
}

// Bilateral core, float in/out. Convention: square window of radius
// diameter/2, Gaussian spatial x Gaussian Euclidean-color weights shared
// across channels, reflect-101 border.
inline cv::Mat bilateral_filter_f32(const cv::Mat& src, int diameter, double sigma_color,
                                    double sigma_space) {
  CV_Assert(src.type() == CV_32FC3);
  const int r = std::max(1, diameter) / 2;
  const double inv2ss = 1.0 / (2.0 * sigma_space * sigma_space);
  const double inv2sc = 1.0 / (2.0 * sigma_color * sigma_color);
  std::vector<double> spatial((2 * r + 1) * (2 * r + 1));
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      spatial[(dy + r) * (2 * r + 1) + (dx + r)] = std::exp(-(dx * dx + dy * dy) * inv2ss);

  cv::Mat out(src.size(), CV_32FC3);
  auto reflect = [](int i, int n) { return cv::borderInterpolate(i, n, cv::BORDER_REFLECT_101); };
  for (int y = 0; y < src.rows; ++y) {
    for (int x = 0; x < src.cols; ++x) {
      const cv::Vec3f c = src.at<cv::Vec3f>(y, x);
      double wsum = 0.0, acc[3] = {0.0, 0.0, 0.0};
      for (int dy = -r; dy <= r; ++dy) {
        int yy = reflect(y + dy, src.rows);
        for (int dx = -r; dx <= r; ++dx) {
          int xx = reflect(x + dx, src.cols);
          const cv::Vec3f q = src.at<cv::Vec3f>(yy, xx);
          double d2 = 0.0;
          for (int k = 0; k < 3; ++k) {
            double d = q[k] - c[k];
            d2 += d * d;
          }
          double w = spatial[(dy + r) * (2 * r + 1) + (dx + r)] * std::exp(-d2 * inv2sc);
          wsum += w;
          for (int k = 0; k < 3; ++k) acc[k] += w * q[k];
        }
      }
      cv::Vec3f& o = out.at<cv::Vec3f>(y, x);
      for (int k = 0; k < 3; ++k) o[k] = static_cast<float>(acc[k] / wsum);
    }
  }
  return out;
}

inline RawFundusImage bilateral_filter(const RawFundusImage& image, int diameter = 9,
                                       double sigma_color = 75.0, double sigma_space = 75.0) {
  image.validate();
  if (diameter < 1) throw ConfigError("bilateral_filter: diameter must be >= 1");
  if (sigma_color <= 0.0 || sigma_space <= 0.0)
    throw ConfigError("bilateral_filter: sigmas must be > 0");
  cv::Mat srcf;
  image.pixels.convertTo(srcf, CV_32FC3);
  cv::Mat dstf = bilateral_filter_f32(srcf, diameter, sigma_color, sigma_space);
  RawFundusImage out;
  out.source_id = image.source_id;
  dstf.convertTo(out.pixels, CV_8UC3);  // rounds
  return out;
}

// ((v/255) - mean_c) / std_c per channel.
inline PreprocessedImage normalize_channels(const RawFundusImage& image,
                                            const DatasetStats& stats) {
  image.validate();
  stats.validate();
  PreprocessedImage out;
  out.source_id = image.source_id;
  out.stats_version = stats_version(stats);
  cv::Mat f;
  image.pixels.convertTo(f, CV_32FC3, 1.0 / 255.0);
  std::vector<cv::Mat> ch;
  cv::split(f, ch);
  for (int c = 0; c < 3; ++c)
    ch[c] = (ch[c] - stats.channel_means[c]) / stats.channel_stds[c];
  cv::merge(ch, out.pixels);
  return out;
}

// Inverse of normalize_channels, back to 8-bit RGB (for overlays).
inline cv::Mat denormalize_channels(const cv::Mat& pixels, const DatasetStats& stats) {
  CV_Assert(pixels.type() == CV_32FC3);
  std::vector<cv::Mat> ch;
  cv::split(pixels, ch);
  for (int c = 0; c < 3; ++c)
    ch[c] = (ch[c] * stats.channel_stds[c] + stats.channel_means[c]) * 255.0;
  cv::Mat merged, out;
  cv::merge(ch, merged);
  merged.convertTo(out, CV_8UC3);
  return out;
}

// brightness -> CLAHE -> denoise -> bilateral -> normalize, each stage
// individually switchable.
inline PreprocessedImage preprocess_pipeline(const RawFundusImage& image,
                                             const DatasetStats& stats,
                                             const PreprocessConfig& cfg = {}) {
  cfg.validate();
  RawFundusImage cur = image;
  std::string stage = "input";
  try {
    stage = "brightness_balance";
    if (cfg.brightness_balance) cur = brightness_balance(cur, stats.train_mean_intensity);
    stage = "clahe";
    if (cfg.clahe)
      cur = clahe(cur, {cfg.tile_grid_x, cfg.tile_grid_y}, cfg.clip_limit, cfg.clahe_channels);
    stage = "nl_means_denoise";
    if (cfg.denoise) cur = nl_means_denoise(cur, cfg.nl_strength);
    stage = "bilateral_filter";
    if (cfg.bilateral)
      cur = bilateral_filter(cur, cfg.bilateral_diameter, cfg.bilateral_sigma_color,
                             cfg.bilateral_sigma_space);
    stage = "normalize_channels";
    return normalize_channels(cur, stats);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw DataError("preprocess stage '" + stage + "' failed for '" + image.source_id +
                    "': " + e.what());
  }
}

// Cache key covers the preprocess parameters and the stats they ran with.
inline std::string preprocess_hash(const PreprocessConfig& cfg, const DatasetStats& stats) {
  return hex64(fnv1a64(cfg.canonical_string() + stats_version(stats)));
}

inline std::filesystem::path cache_path(const std::filesystem::path& dir,
                                        const std::string& source_id, const std::string& hash) {
  return dir / (source_id + "." + hash.substr(0, 16) + ".lspp");
}

}  // namespace lesionseg
