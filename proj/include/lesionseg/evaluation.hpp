#pragma once

#include <torch/torch.h>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lesionseg/common.hpp"
#include "lesionseg/dataset.hpp"
#include "lesionseg/models.hpp"

namespace lesionseg {

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct F1Result {
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  bool degenerate = false;  // true when precision + recall == 0
};

struct MetricsReport {
  std::string model_name;
  LesionType lesion = LesionType::MA;
  double ap = 0.0;
  double f1 = 0.0;
  double threshold = 0.5;
  bool f1_degenerate = false;
  std::vector<PrPoint> pr_points;
  int n_images = 0;
  std::int64_t n_pixels = 0;
  std::int64_t n_pixels_pos = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["model"] = model_name;
    j["lesion"] = to_string(lesion);
    j["pooling"] = "pixels";
    j["ap"] = ap;
    j["f1"] = f1;
    j["threshold"] = threshold;
    j["f1_degenerate"] = f1_degenerate;
    j["n_images"] = n_images;
    j["n_pixels"] = n_pixels;
    j["n_pixels_pos"] = n_pixels_pos;
    auto& pts = j["pr_curve"] = nlohmann::json::array();
    for (const auto& p : pr_points) pts.push_back({p.recall, p.precision});
    return j;
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.model_name = j.at("model").get<std::string>();
    r.lesion = parse_lesion(j.at("lesion").get<std::string>());
    r.ap = j.at("ap").get<double>();
    r.f1 = j.at("f1").get<double>();
    r.threshold = j.at("threshold").get<double>();
    r.f1_degenerate = j.value("f1_degenerate", false);
    r.n_images = j.at("n_images").get<int>();
    r.n_pixels = j.at("n_pixels").get<std::int64_t>();
    r.n_pixels_pos = j.at("n_pixels_pos").get<std::int64_t>();
    for (const auto& p : j.at("pr_curve"))
      r.pr_points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    return r;
  }
};

namespace detail {

// Indices sorting scores descending; ties keep ascending index order so the
// result is deterministic regardless of the sort implementation.
template <typename S>
inline std::vector<std::size_t> argsort_desc(const std::vector<S>& scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

template <typename S, typename L>
inline void check_metric_inputs(const std::vector<S>& scores, const std::vector<L>& labels,
                                const char* what) {
  if (scores.size() != labels.size())
    throw DataError(std::string(what) + ": scores/labels size mismatch");
  if (scores.empty()) throw DataError(std::string(what) + ": empty input");
  for (const auto& s : scores)
    if (std::isnan(static_cast<double>(s)))
      throw NumericalError(std::string(what) + ": NaN score");
}

// Shared sweep over descending unique score thresholds. Emits one
// (recall, precision) point per threshold group and accumulates the
// step-wise area sum((R_n - R_{n-1}) * P_n).
template <typename S, typename L>
inline double pr_sweep(const std::vector<S>& scores, const std::vector<L>& labels,
                       std::vector<PrPoint>* points) {
  check_metric_inputs(scores, labels, "average_precision");
  std::int64_t n_pos = 0;
  for (const auto& l : labels) n_pos += (l != 0);
  if (n_pos == 0) throw DataError("average_precision: no positive labels");

  auto order = argsort_desc(scores);
  double ap = 0.0;
  double prev_recall = 0.0;
  std::int64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& l = labels[order[i]];
    tp += (l != 0);
    fp += (l == 0);
    bool group_end = (i + 1 == order.size()) || (scores[order[i + 1]] < scores[order[i]]);
    if (!group_end) continue;
    double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    if (points) points->push_back({recall, precision});
  }
  return ap;
}

}  // namespace detail

// Step-wise interpolated average precision over descending unique score
// thresholds; ties are evaluated as one group.
template <typename S, typename L>
inline double average_precision(const std::vector<S>& scores, const std::vector<L>& labels) {
  return detail::pr_sweep(scores, labels, nullptr);
}

// Full precision-recall curve with the conventional (recall 0, precision 1)
// anchor prepended.
template <typename S, typename L>
inline std::vector<PrPoint> pr_curve(const std::vector<S>& scores, const std::vector<L>& labels) {
  std::vector<PrPoint> pts;
  pts.push_back({0.0, 1.0});
  detail::pr_sweep(scores, labels, &pts);
  return pts;
}

// Step-wise area implied by a pr_curve() result; agrees with
// average_precision on the same data.
inline double ap_from_curve(const std::vector<PrPoint>& pts) {
  double ap = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    ap += (pts[i].recall - pts[i - 1].recall) * pts[i].precision;
  return ap;
}

// F1 of the binarization score >= threshold. Precision/recall with an empty
// denominator count as 0; if both are 0 the result is 0 with the degenerate
// flag set.
template <typename S, typename L>
inline F1Result f1_score(const std::vector<S>& scores, const std::vector<L>& labels,
                         double threshold) {
  detail::check_metric_inputs(scores, labels, "f1_score");
  std::int64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    bool pred = static_cast<double>(scores[i]) >= threshold;
    bool pos = labels[i] != 0;
    tp += (pred && pos);
    fp += (pred && !pos);
    fn += (!pred && pos);
  }
  F1Result r;
  r.precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  r.recall = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  if (r.precision + r.recall > 0.0)
    r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  else
    r.degenerate = true;
  return r;
}

namespace detail {

// Replicate-pad a CHW tensor on the bottom/right by gathering clamped row and
// column indices; unlike the builtin pad op this accepts any pad size.
inline torch::Tensor pad_replicate_br(const torch::Tensor& chw, std::int64_t pad_h,
                                      std::int64_t pad_w) {
  if (pad_h == 0 && pad_w == 0) return chw;
  auto h = chw.size(1), w = chw.size(2);
  auto rows = torch::arange(h + pad_h, torch::kLong).clamp_max(h - 1);
  auto cols = torch::arange(w + pad_w, torch::kLong).clamp_max(w - 1);
  return chw.index_select(1, rows).index_select(2, cols);
}

inline std::vector<std::int64_t> tile_offsets(std::int64_t extent, std::int64_t window,
                                              std::int64_t stride) {
  std::vector<std::int64_t> offs;
  for (std::int64_t o = 0; o + window < extent; o += stride) offs.push_back(o);
  offs.push_back(extent - window);  // final window flush with the far edge
  return offs;
}

}  // namespace detail

// Sliding-window full-image inference: overlapping tiles, probabilities
// averaged where windows overlap. Images smaller than the tile are
// replicate-padded up to the next multiple the generator accepts and the pad
// is cropped away afterwards. Returns an HxW float probability map.
inline torch::Tensor predict_full_image(const GeneratorPtr& gen, const torch::Tensor& image,
                                        int tile = 512, int stride = 256) {
  if (!gen) throw ConfigError("predict_full_image: null generator");
  if (image.dim() != 3 || image.size(0) != 3)
    throw DataError("predict_full_image: expected a 3xHxW image tensor");
  if (tile <= 0 || stride <= 0 || stride > tile)
    throw ConfigError("predict_full_image: need 0 < stride <= tile");
  const std::int64_t div = gen->stride_divisor();
  if (tile % div != 0)
    throw ConfigError("predict_full_image: tile must be divisible by " + std::to_string(div));

  const std::int64_t h = image.size(1), w = image.size(2);
  auto ceil_to = [div](std::int64_t v) { return ((v + div - 1) / div) * div; };
  const std::int64_t win_h = std::min<std::int64_t>(tile, ceil_to(h));
  const std::int64_t win_w = std::min<std::int64_t>(tile, ceil_to(w));

  torch::NoGradGuard no_grad;
  const bool was_training = gen->is_training();
  gen->eval();

  auto padded = detail::pad_replicate_br(image, std::max<std::int64_t>(0, win_h - h),
                                         std::max<std::int64_t>(0, win_w - w));
  const std::int64_t ph = padded.size(1), pw = padded.size(2);
  auto acc = torch::zeros({ph, pw}, torch::kFloat);
  auto cnt = torch::zeros({ph, pw}, torch::kFloat);
  for (auto y : detail::tile_offsets(ph, win_h, stride)) {
    for (auto x : detail::tile_offsets(pw, win_w, stride)) {
      auto tile_in = padded.slice(1, y, y + win_h).slice(2, x, x + win_w).unsqueeze(0);
      auto fused = gen->forward(tile_in).fused_map.squeeze(0).squeeze(0);
      acc.slice(0, y, y + win_h).slice(1, x, x + win_w) += fused;
      cnt.slice(0, y, y + win_h).slice(1, x, x + win_w) += 1.0f;
    }
  }
  if (was_training) gen->train();
  return (acc / cnt).slice(0, 0, h).slice(1, 0, w).contiguous();
}

// Pixel-pooled evaluation over a whole split: every pixel of every image
// joins one global score/label list before AP/F1 are computed, so image size
// and count weight the pool naturally.
inline MetricsReport evaluate_model(const GeneratorPtr& gen, const std::vector<Sample>& samples,
                                    LesionType lesion, const std::string& model_name,
                                    double threshold = 0.5, int tile = 512, int stride = 256) {
  if (samples.empty()) throw DataError("evaluate_model: empty evaluation set");
  std::vector<float> scores;
  std::vector<std::uint8_t> labels;
  for (const auto& s : samples) {
    s.check_aligned();
    auto img = image_to_tensor(s.image.pixels);
    auto prob = predict_full_image(gen, img, tile, stride);
    auto prob_a = prob.accessor<float, 2>();
    for (int r = 0; r < s.mask.pixels.rows; ++r) {
      const std::uint8_t* mrow = s.mask.pixels.ptr<std::uint8_t>(r);
      for (int c = 0; c < s.mask.pixels.cols; ++c) {
        scores.push_back(prob_a[r][c]);
        labels.push_back(mrow[c] != 0 ? 1 : 0);
      }
    }
  }
  std::int64_t n_pos = 0;
  for (auto l : labels) n_pos += l;
  if (n_pos == 0)
    throw DataError(std::string("evaluate_model: no positive pixels in the evaluation set for ") +
                    to_string(lesion));

  MetricsReport rep;
  rep.model_name = model_name;
  rep.lesion = lesion;
  rep.threshold = threshold;
  rep.pr_points = pr_curve(scores, labels);
  rep.ap = ap_from_curve(rep.pr_points);
  auto f1 = f1_score(scores, labels, threshold);
  rep.f1 = f1.f1;
  rep.f1_degenerate = f1.degenerate;
  rep.n_images = static_cast<int>(samples.size());
  rep.n_pixels = static_cast<std::int64_t>(labels.size());
  rep.n_pixels_pos = n_pos;
  return rep;
}

namespace detail {

inline std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline cv::Scalar plot_color(std::size_t i) {
  static const cv::Scalar palette[] = {
      {180, 60, 30},  {40, 110, 200}, {60, 160, 60},  {30, 40, 180},
      {160, 60, 160}, {30, 140, 200}, {120, 120, 40}, {80, 80, 80},
  };
  return palette[i % (sizeof(palette) / sizeof(palette[0]))];
}

}  // namespace detail

// One PNG per lesion overlaying every model's PR curve, plus a combined CSV
// (model,lesion,recall,precision). Output bytes depend only on the reports,
// so re-rendering from the CSV reproduces the PNGs exactly.
inline std::vector<std::filesystem::path> render_pr_plot(
    const std::vector<MetricsReport>& reports, const std::filesystem::path& out_dir) {
  if (reports.empty()) throw DataError("render_pr_plot: no reports");
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;

  std::map<std::string, std::vector<const MetricsReport*>> by_lesion;
  for (const auto& r : reports) by_lesion[to_string(r.lesion)].push_back(&r);

  std::ostringstream csv;
  csv << "model,lesion,recall,precision\n";
  for (const auto& r : reports)
    for (const auto& p : r.pr_points)
      csv << r.model_name << ',' << to_string(r.lesion) << ',' << detail::format_g17(p.recall)
          << ',' << detail::format_g17(p.precision) << '\n';
  auto csv_path = out_dir / "pr_curves.csv";
  atomic_write_file(csv_path, csv.str());
  written.push_back(csv_path);

  const int width = 900, height = 700;
  const int ml = 80, mr = 30, mt = 50, mb = 70;
  auto to_px = [&](double recall, double precision) {
    int x = ml + static_cast<int>(std::lround(recall * (width - ml - mr)));
    int y = height - mb - static_cast<int>(std::lround(precision * (height - mt - mb)));
    return cv::Point(x, y);
  };

  for (const auto& [lesion_name, reps] : by_lesion) {
    cv::Mat canvas(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
    cv::rectangle(canvas, to_px(0, 1), to_px(1, 0), cv::Scalar(40, 40, 40), 1, cv::LINE_8);
    for (int g = 1; g < 5; ++g) {
      double v = g / 5.0;
      cv::line(canvas, to_px(v, 0), to_px(v, 1), cv::Scalar(225, 225, 225), 1, cv::LINE_8);
      cv::line(canvas, to_px(0, v), to_px(1, v), cv::Scalar(225, 225, 225), 1, cv::LINE_8);
      char lbl[8];
      std::snprintf(lbl, sizeof(lbl), "%.1f", v);
      cv::putText(canvas, lbl, to_px(v, 0) + cv::Point(-12, 20), cv::FONT_HERSHEY_SIMPLEX, 0.45,
                  cv::Scalar(60, 60, 60), 1, cv::LINE_8);
      cv::putText(canvas, lbl, to_px(0, v) + cv::Point(-40, 5), cv::FONT_HERSHEY_SIMPLEX, 0.45,
                  cv::Scalar(60, 60, 60), 1, cv::LINE_8);
    }
    cv::putText(canvas, "Precision-Recall: " + lesion_name, {ml, mt - 18},
                cv::FONT_HERSHEY_SIMPLEX, 0.7, cv::Scalar(20, 20, 20), 1, cv::LINE_8);
    cv::putText(canvas, "recall", {width / 2 - 30, height - 25}, cv::FONT_HERSHEY_SIMPLEX, 0.55,
                cv::Scalar(20, 20, 20), 1, cv::LINE_8);
    cv::putText(canvas, "precision", {10, mt + 10}, cv::FONT_HERSHEY_SIMPLEX, 0.55,
                cv::Scalar(20, 20, 20), 1, cv::LINE_8);

    for (std::size_t k = 0; k < reps.size(); ++k) {
      const auto& rep = *reps[k];
      auto color = detail::plot_color(k);
      for (std::size_t i = 1; i < rep.pr_points.size(); ++i) {
        // step interpolation: horizontal move to the new recall, then vertical
        auto a = to_px(rep.pr_points[i - 1].recall, rep.pr_points[i - 1].precision);
        auto b = to_px(rep.pr_points[i].recall, rep.pr_points[i].precision);
        cv::line(canvas, a, {b.x, a.y}, color, 2, cv::LINE_8);
        cv::line(canvas, {b.x, a.y}, b, color, 2, cv::LINE_8);
      }
      char tag[160];
      std::snprintf(tag, sizeof(tag), "%s (AP=%.4f)", rep.model_name.c_str(), rep.ap);
      cv::Point anchor(width - mr - 320, mt + 25 + static_cast<int>(k) * 22);
      cv::line(canvas, anchor, anchor + cv::Point(28, 0), color, 2, cv::LINE_8);
      cv::putText(canvas, tag, anchor + cv::Point(36, 5), cv::FONT_HERSHEY_SIMPLEX, 0.5,
                  cv::Scalar(20, 20, 20), 1, cv::LINE_8);
    }

    auto png_path = out_dir / ("pr_" + lesion_name + ".png");
    std::vector<std::uint8_t> buf;
    if (!cv::imencode(".png", canvas, buf))
      throw IoError("render_pr_plot: PNG encoding failed for " + png_path.string());
    atomic_write_file(png_path, std::string(buf.begin(), buf.end()));
    written.push_back(png_path);
  }
  return written;
}

// Rebuild skeleton reports (model, lesion, pr points) from the CSV written by
// render_pr_plot; enough to re-render identical plots.
inline std::vector<MetricsReport> parse_pr_csv(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw IoError("parse_pr_csv: cannot open " + csv_path.string());
  std::string line;
  if (!std::getline(in, line) || line != "model,lesion,recall,precision")
    throw DataError("parse_pr_csv: unexpected header in " + csv_path.string());
  std::vector<MetricsReport> reports;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string model, lesion, recall_s, precision_s;
    if (!std::getline(ss, model, ',') || !std::getline(ss, lesion, ',') ||
        !std::getline(ss, recall_s, ',') || !std::getline(ss, precision_s))
      throw DataError("parse_pr_csv: malformed row '" + line + "'");
    auto key = std::make_pair(model, lesion);
    auto it = index.find(key);
    if (it == index.end()) {
      MetricsReport r;
      r.model_name = model;
      r.lesion = parse_lesion(lesion);
      index.emplace(key, reports.size());
      reports.push_back(std::move(r));
      it = index.find(key);
    }
    reports[it->second].pr_points.push_back({std::stod(recall_s), std::stod(precision_s)});
  }
  for (auto& r : reports) r.ap = ap_from_curve(r.pr_points);
  return reports;
}

}  // namespace lesionseg
