#pragma once

#include <torch/torch.h>

#include <array>
#include <cstring>
#include <filesystem>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <string>

#include "lesionseg/common.hpp"

namespace lesionseg {

// 8-bit RGB fundus photograph as loaded from disk (channel order RGB, not
// OpenCV's BGR).
struct RawFundusImage {
  cv::Mat pixels;  // CV_8UC3, RGB
  std::string source_id;

  void validate() const {
    if (pixels.empty() || pixels.rows < 1 || pixels.cols < 1)
      throw DataError("RawFundusImage '" + source_id + "': empty image");
    if (pixels.type() != CV_8UC3)
      throw DataError("RawFundusImage '" + source_id + "': expected 8-bit 3-channel pixels");
  }
};

// Float RGB image after the preprocessing chain (normalized, finite values).
struct PreprocessedImage {
  cv::Mat pixels;  // CV_32FC3, RGB
  std::string source_id;
  std::string stats_version;
};

// Brightness-balance target plus the fixed per-channel normalization constants.
struct DatasetStats {
  double train_mean_intensity = 0.0;
  std::array<double, 3> channel_means{0.485, 0.456, 0.406};
  std::array<double, 3> channel_stds{0.229, 0.224, 0.225};

  void validate() const {
    if (!(train_mean_intensity >= 0.0 && train_mean_intensity <= 255.0))
      throw DataError("DatasetStats: train_mean_intensity outside [0,255]");
    for (double s : channel_stds)
      if (!(s > 0.0)) throw DataError("DatasetStats: channel std must be positive");
  }
};

inline RawFundusImage load_image(const std::filesystem::path& path, std::string source_id = "") {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot decode image: " + path.string());
  RawFundusImage img;
  cv::cvtColor(bgr, img.pixels, cv::COLOR_BGR2RGB);
  img.source_id = source_id.empty() ? path.stem().string() : std::move(source_id);
  img.validate();
  return img;
}

// Ground-truth annotation file -> binary mask (any nonzero pixel counts).
inline cv::Mat load_mask_binary(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw IoError("cannot decode mask: " + path.string());
  cv::Mat bin;
  cv::compare(m, 0, bin, cv::CMP_GT);  // 255 where nonzero
  bin /= 255;                          // {0,1}
  return bin;                          // CV_8UC1
}

inline double mean_intensity(const cv::Mat& img) {
  cv::Scalar m = cv::mean(img);
  int c = img.channels();
  double s = 0.0;
  for (int i = 0; i < c; ++i) s += m[i];
  return s / c;
}

// --- lossless float-array cache format -------------------------------------
// [LSPP][u32 fmt=1][u32 len][stats_version bytes][i32 H][i32 W][i32 C][f32...]

inline void save_float_image(const std::filesystem::path& path, const PreprocessedImage& img) {
  cv::Mat m = img.pixels.isContinuous() ? img.pixels : img.pixels.clone();
  std::string out;
  auto put = [&out](const void* p, size_t n) { out.append(static_cast<const char*>(p), n); };
  out.append("LSPP");
  std::uint32_t fmt = 1, len = static_cast<std::uint32_t>(img.stats_version.size());
  put(&fmt, 4);
  put(&len, 4);
  out.append(img.stats_version);
  std::int32_t h = m.rows, w = m.cols, c = m.channels();
  put(&h, 4);
  put(&w, 4);
  put(&c, 4);
  put(m.ptr<float>(), sizeof(float) * static_cast<size_t>(h) * w * c);
  atomic_write_file(path, out);
}

inline PreprocessedImage load_float_image(const std::filesystem::path& path, std::string source_id) {
  std::string raw = read_text_file(path);
  const char* p = raw.data();
  const char* end = p + raw.size();
  auto need = [&](size_t n) {
    if (p + n > end) throw IoError("truncated cache file: " + path.string());
  };
  need(8);
  if (std::memcmp(p, "LSPP", 4) != 0) throw IoError("bad cache magic: " + path.string());
  p += 4;
  std::uint32_t fmt, len;
  std::memcpy(&fmt, p, 4);
  p += 4;
  if (fmt != 1) throw IoError("unsupported cache format version: " + path.string());
  need(4);
  std::memcpy(&len, p, 4);
  p += 4;
  need(len + 12);
  PreprocessedImage img;
  img.stats_version.assign(p, len);
  p += len;
  std::int32_t h, w, c;
  std::memcpy(&h, p, 4);
  std::memcpy(&w, p + 4, 4);
  std::memcpy(&c, p + 8, 4);
  p += 12;
  if (c != 3 || h < 1 || w < 1) throw IoError("bad cache dims: " + path.string());
  size_t bytes = sizeof(float) * static_cast<size_t>(h) * w * c;
  need(bytes);
  img.pixels.create(h, w, CV_32FC3);
  std::memcpy(img.pixels.ptr<float>(), p, bytes);
  img.source_id = std::move(source_id);
  return img;
}

// --- cv::Mat <-> torch interop ----------------------------------------------

// HWC float image -> CHW float tensor (copy).
inline torch::Tensor image_to_tensor(const cv::Mat& img) {
  CV_Assert(img.type() == CV_32FC3);
  cv::Mat m = img.isContinuous() ? img : img.clone();
  auto t = torch::from_blob(m.ptr<float>(), {m.rows, m.cols, 3}, torch::kFloat32);
  return t.permute({2, 0, 1}).contiguous().clone();
}

// Binary 8U mask -> 1xHxW float tensor with values {0,1}.
inline torch::Tensor mask_to_tensor(const cv::Mat& mask) {
  CV_Assert(mask.type() == CV_8UC1);
  cv::Mat m = mask.isContinuous() ? mask : mask.clone();
  auto t = torch::from_blob(m.ptr<uchar>(), {1, m.rows, m.cols}, torch::kUInt8);
  return t.to(torch::kFloat32).clone();
}

// CHW (or HW) float tensor -> single-channel float Mat.
inline cv::Mat tensor_to_map(const torch::Tensor& t) {
  auto u = t.squeeze().to(torch::kFloat32).contiguous();
  TORCH_CHECK(u.dim() == 2, "expected a single-channel map, got dim ", u.dim());
  cv::Mat m(static_cast<int>(u.size(0)), static_cast<int>(u.size(1)), CV_32FC1);
  std::memcpy(m.ptr<float>(), u.data_ptr<float>(), sizeof(float) * u.numel());
  return m;
}

}  // namespace lesionseg
