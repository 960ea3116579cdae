#pragma once

#include <torch/torch.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lesionseg/image.hpp"
#include "lesionseg/preprocess.hpp"

namespace lesionseg {

enum class LesionType { MA, SE, EX, HE };

inline const char* to_string(LesionType t) {
  switch (t) {
    case LesionType::MA: return "MA";
    case LesionType::SE: return "SE";
    case LesionType::EX: return "EX";
    case LesionType::HE: return "HE";
  }
  return "??";
}

inline LesionType parse_lesion(const std::string& s) {
  if (s == "MA") return LesionType::MA;
  if (s == "SE") return LesionType::SE;
  if (s == "EX") return LesionType::EX;
  if (s == "HE") return LesionType::HE;
  throw ConfigError("unknown lesion type '" + s + "' (expected MA|SE|EX|HE)");
}

// Per-pixel binary ground truth for one lesion type.
struct LesionMask {
  cv::Mat pixels;  // CV_8UC1, values {0,1}
  LesionType lesion = LesionType::MA;

  void validate() const {
    if (pixels.empty() || pixels.type() != CV_8UC1)
      throw DataError("LesionMask: expected non-empty 8-bit single-channel mask");
    double mn, mx;
    cv::minMaxLoc(pixels, &mn, &mx);
    if (mn < 0 || mx > 1) throw DataError("LesionMask: values outside {0,1}");
  }
};

struct Sample {
  PreprocessedImage image;
  LesionMask mask;
  std::string source_id;

  void check_aligned() const {
    if (image.pixels.rows != mask.pixels.rows || image.pixels.cols != mask.pixels.cols)
      throw DataError("Sample '" + source_id + "': image/mask dimensions differ");
  }
};

struct SplitManifest {
  std::vector<std::string> train_ids, val_ids, test_ids;
  std::uint64_t seed = 0;
  LesionType lesion = LesionType::MA;

  void validate() const {
    auto sorted = [](std::vector<std::string> v) {
      std::sort(v.begin(), v.end());
      return v;
    };
    auto a = sorted(train_ids), b = sorted(val_ids), c = sorted(test_ids);
    std::vector<std::string> inter;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
    std::set_intersection(a.begin(), a.end(), c.begin(), c.end(), std::back_inserter(inter));
    std::set_intersection(b.begin(), b.end(), c.begin(), c.end(), std::back_inserter(inter));
    if (!inter.empty()) throw DataError("SplitManifest: overlapping ids, e.g. '" + inter[0] + "'");
  }

  nlohmann::json to_json() const {
    return {{"train_ids", train_ids},
            {"val_ids", val_ids},
            {"test_ids", test_ids},
            {"seed", seed},
            {"lesion", to_string(lesion)}};
  }

  static SplitManifest from_json(const nlohmann::json& j) {
    SplitManifest m;
    m.train_ids = j.at("train_ids").get<std::vector<std::string>>();
    m.val_ids = j.at("val_ids").get<std::vector<std::string>>();
    m.test_ids = j.at("test_ids").get<std::vector<std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.lesion = parse_lesion(j.at("lesion").get<std::string>());
    m.validate();
    return m;
  }
};

struct DatasetConfig {
  std::string root;
  std::string image_dir = "images";
  std::string mask_dir = "masks";
  double split_ratio = 0.8;
  int crop = 512;
  double rotate_max_deg = 20.0;
  int batch_train = 4;
  int batch_test = 1;
  bool foreground_biased_crop = false;
  int limit_images = 0;  // 0 = all

  void validate() const {
    if (!(split_ratio > 0.0 && split_ratio < 1.0))
      throw ConfigError("dataset.split_ratio must lie in (0,1)");
    if (crop < 16 || crop % 16 != 0) throw ConfigError("dataset.crop must be a multiple of 16");
    if (rotate_max_deg < 0.0) throw ConfigError("dataset.rotate_max_deg must be >= 0");
    if (batch_train < 1 || batch_test < 1) throw ConfigError("dataset batch sizes must be >= 1");
    if (limit_images < 0) throw ConfigError("dataset.limit_images must be >= 0");
  }
};

inline const std::vector<std::string>& image_extensions() {
  static const std::vector<std::string> exts = {".jpg", ".jpeg", ".png", ".tif", ".tiff", ".bmp"};
  return exts;
}

struct RawPair {
  RawFundusImage image;
  LesionMask mask;
};

// Layout: <root>/images/{train,test}/*  and  <root>/masks/<LESION>/{train,test}/*
// Mask files match the image stem, optionally suffixed "_<LESION>".
inline std::vector<RawPair> load_idrid(const std::filesystem::path& root, LesionType lesion,
                                       const std::string& split,
                                       const DatasetConfig& cfg = {}) {
  namespace fs = std::filesystem;
  fs::path img_dir = root / cfg.image_dir / split;
  fs::path msk_dir = root / cfg.mask_dir / to_string(lesion) / split;
  if (!fs::is_directory(img_dir)) throw DataError("missing image directory: " + img_dir.string());
  if (!fs::is_directory(msk_dir)) throw DataError("missing mask directory: " + msk_dir.string());

  auto has_image_ext = [](const fs::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), ::tolower);
    return std::find(image_extensions().begin(), image_extensions().end(), e) !=
           image_extensions().end();
  };

  std::map<std::string, fs::path> masks_by_stem;
  for (const auto& entry : fs::directory_iterator(msk_dir))
    if (entry.is_regular_file() && has_image_ext(entry.path()))
      masks_by_stem[entry.path().stem().string()] = entry.path();

  std::vector<fs::path> image_files;
  for (const auto& entry : fs::directory_iterator(img_dir))
    if (entry.is_regular_file() && has_image_ext(entry.path())) image_files.push_back(entry.path());
  std::sort(image_files.begin(), image_files.end());
  if (cfg.limit_images > 0 && static_cast<int>(image_files.size()) > cfg.limit_images)
    image_files.resize(cfg.limit_images);

  std::vector<RawPair> pairs;
  pairs.reserve(image_files.size());
  for (const auto& f : image_files) {
    RawPair p;
    p.image = load_image(f);
    std::string stem = f.stem().string();
    auto it = masks_by_stem.find(stem + "_" + to_string(lesion));
    if (it == masks_by_stem.end()) it = masks_by_stem.find(stem);
    p.mask.lesion = lesion;
    if (it != masks_by_stem.end()) {
      p.mask.pixels = load_mask_binary(it->second);
      if (p.mask.pixels.rows != p.image.pixels.rows || p.mask.pixels.cols != p.image.pixels.cols)
        throw DataError("mask/image dimension mismatch for '" + it->second.string() + "'");
    } else {
      p.mask.pixels = cv::Mat::zeros(p.image.pixels.rows, p.image.pixels.cols, CV_8UC1);
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

// Deterministic shuffle, floor(n*ratio) ids to train, rest to val.
inline SplitManifest split_train_val(std::vector<std::string> ids, double ratio,
                                     std::uint64_t seed) {
  if (ids.empty()) throw DataError("split_train_val: empty id list");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split_train_val: ratio must be in (0,1)");
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  size_t n_train = static_cast<size_t>(std::floor(ids.size() * ratio));
  SplitManifest m;
  m.seed = seed;
  m.train_ids.assign(ids.begin(), ids.begin() + n_train);
  m.val_ids.assign(ids.begin() + n_train, ids.end());
  m.validate();
  return m;
}

// Same size x size window cut from image and mask at identical offsets.
inline Sample random_crop(const Sample& sample, int size, std::mt19937_64& rng,
                          bool foreground_biased = false) {
  sample.check_aligned();
  int h = sample.image.pixels.rows, w = sample.image.pixels.cols;
  if (size > std::min(h, w))
    throw DataError("random_crop: size " + std::to_string(size) + " exceeds image " +
                    std::to_string(h) + "x" + std::to_string(w));
  int max_y = h - size, max_x = w - size;
  int y = 0, x = 0;
  if (foreground_biased) {
    std::vector<cv::Point> fg;
    cv::findNonZero(sample.mask.pixels, fg);
    if (!fg.empty()) {
      const cv::Point p = fg[std::uniform_int_distribution<size_t>(0, fg.size() - 1)(rng)];
      // window chosen uniformly among those containing p
      int ylo = std::max(0, p.y - size + 1), yhi = std::min(max_y, p.y);
      int xlo = std::max(0, p.x - size + 1), xhi = std::min(max_x, p.x);
      y = std::uniform_int_distribution<int>(ylo, yhi)(rng);
      x = std::uniform_int_distribution<int>(xlo, xhi)(rng);
    } else {
      y = max_y > 0 ? std::uniform_int_distribution<int>(0, max_y)(rng) : 0;
      x = max_x > 0 ? std::uniform_int_distribution<int>(0, max_x)(rng) : 0;
    }
  } else {
    y = max_y > 0 ? std::uniform_int_distribution<int>(0, max_y)(rng) : 0;
    x = max_x > 0 ? std::uniform_int_distribution<int>(0, max_x)(rng) : 0;
  }
  cv::Rect roi(x, y, size, size);
  Sample out;
  out.image.pixels = sample.image.pixels(roi).clone();
  out.image.source_id = sample.image.source_id;
  out.image.stats_version = sample.image.stats_version;
  out.mask.pixels = sample.mask.pixels(roi).clone();
  out.mask.lesion = sample.mask.lesion;
  out.source_id = sample.source_id;
  return out;
}

// Rotates image (bilinear) and mask (nearest, re-binarized) by the same
// uniform angle; canvas size kept, exposed areas filled with image_fill / 0.
inline Sample random_rotate(const Sample& sample, double max_degrees, std::mt19937_64& rng,
                            const cv::Scalar& image_fill = cv::Scalar(0, 0, 0)) {
  sample.check_aligned();
  if (max_degrees < 0.0) throw ConfigError("random_rotate: max_degrees must be >= 0");
  Sample out = sample;
  if (max_degrees == 0.0) return out;
  double angle = std::uniform_real_distribution<double>(-max_degrees, max_degrees)(rng);
  cv::Point2f center(sample.image.pixels.cols * 0.5f, sample.image.pixels.rows * 0.5f);
  cv::Mat rot = cv::getRotationMatrix2D(center, angle, 1.0);
  cv::warpAffine(sample.image.pixels, out.image.pixels, rot, sample.image.pixels.size(),
                 cv::INTER_LINEAR, cv::BORDER_CONSTANT, image_fill);
  cv::Mat rotated_mask;
  cv::warpAffine(sample.mask.pixels, rotated_mask, rot, sample.mask.pixels.size(),
                 cv::INTER_NEAREST, cv::BORDER_CONSTANT, cv::Scalar(0));
  cv::compare(rotated_mask, 0, out.mask.pixels, cv::CMP_GT);
  out.mask.pixels /= 255;
  return out;
}

struct Batch {
  torch::Tensor images;  // B x 3 x H x W
  torch::Tensor masks;   // B x 1 x H x W
  std::vector<std::string> ids;
};

// Lazily materialized batch sequence; shuffled when an rng is supplied.
class BatchStream {
 public:
  BatchStream(const std::vector<Sample>& samples, int batch_size, std::mt19937_64* rng)
      : samples_(&samples), batch_size_(batch_size) {
    if (batch_size < 1) throw ConfigError("make_batches: batch_size must be >= 1");
    order_.resize(samples.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (rng) std::shuffle(order_.begin(), order_.end(), *rng);
  }

  std::optional<Batch> next() {
    if (pos_ >= order_.size()) return std::nullopt;
    size_t end = std::min(pos_ + static_cast<size_t>(batch_size_), order_.size());
    std::vector<torch::Tensor> imgs, msks;
    Batch b;
    for (size_t i = pos_; i < end; ++i) {
      const Sample& s = (*samples_)[order_[i]];
      s.check_aligned();
      imgs.push_back(image_to_tensor(s.image.pixels));
      msks.push_back(mask_to_tensor(s.mask.pixels));
      b.ids.push_back(s.source_id);
    }
    pos_ = end;
    b.images = torch::stack(imgs);
    b.masks = torch::stack(msks);
    return b;
  }

  size_t n_batches() const {
    return (order_.size() + batch_size_ - 1) / static_cast<size_t>(batch_size_);
  }

 private:
  const std::vector<Sample>* samples_;
  std::vector<size_t> order_;
  size_t pos_ = 0;
  int batch_size_;
};

inline BatchStream make_batches(const std::vector<Sample>& samples, int batch_size,
                                std::mt19937_64* rng = nullptr) {
  return BatchStream(samples, batch_size, rng);
}

}  // namespace lesionseg
