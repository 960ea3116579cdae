#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <random>
#include <set>

#include "lesionseg/dataset.hpp"
#include "testutil.hpp"

using namespace lesionseg;

namespace {

namespace fs = std::filesystem;

// Image whose red channel encodes pixel coordinates, so any window can be
// located after cropping.
Sample coordinate_sample(int h, int w) {
  Sample s;
  s.image.pixels.create(h, w, CV_32FC3);
  s.mask.pixels.create(h, w, CV_8UC1);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      s.image.pixels.at<cv::Vec3f>(r, c) = {static_cast<float>(r * 10000 + c), 0.f, 0.f};
      s.mask.pixels.at<std::uint8_t>(r, c) = static_cast<std::uint8_t>((r + c) % 2);
    }
  s.image.source_id = "coords";
  s.source_id = "coords";
  s.mask.lesion = LesionType::EX;
  return s;
}

Sample disk_sample(int size, int radius) {
  Sample s;
  s.image.pixels = cv::Mat(size, size, CV_32FC3, cv::Scalar(0, 0, 0));
  s.mask.pixels = cv::Mat::zeros(size, size, CV_8UC1);
  cv::circle(s.mask.pixels, {size / 2, size / 2}, radius, cv::Scalar(1), cv::FILLED, cv::LINE_8);
  cv::circle(s.image.pixels, {size / 2, size / 2}, radius, cv::Scalar(1, 1, 1), cv::FILLED,
             cv::LINE_8);
  s.image.source_id = "disk";
  s.source_id = "disk";
  return s;
}

std::vector<std::string> sequential_ids(int n) {
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("id_" + std::to_string(i));
  return ids;
}

}  // namespace

// --- lesion enum ----------------------------------------------------------------------

TEST(Lesion, NamesRoundTrip) {
  for (auto t : {LesionType::MA, LesionType::SE, LesionType::EX, LesionType::HE})
    EXPECT_EQ(parse_lesion(to_string(t)), t);
  EXPECT_THROW(parse_lesion("XX"), ConfigError);
  EXPECT_THROW(parse_lesion("ma"), ConfigError);
}

// --- loader ---------------------------------------------------------------------------

TEST(LoadIdrid, ReadsAlignedBinaryPairs) {
  testutil::TempDir tmp;
  testutil::write_corpus(tmp.path(), LesionType::EX, 3, 2, 32, 7);
  auto pairs = load_idrid(tmp.path(), LesionType::EX, "train");
  ASSERT_EQ(pairs.size(), 3u);
  for (const auto& p : pairs) {
    p.image.validate();
    p.mask.validate();  // rejects anything outside {0,1}
    EXPECT_EQ(p.mask.lesion, LesionType::EX);
    EXPECT_EQ(p.image.pixels.size(), p.mask.pixels.size());
    EXPECT_GT(cv::countNonZero(p.mask.pixels), 0);
  }
  // sorted stem order
  EXPECT_EQ(pairs[0].image.source_id, "img_00");
  EXPECT_EQ(pairs[2].image.source_id, "img_02");

  auto test_pairs = load_idrid(tmp.path(), LesionType::EX, "test");
  EXPECT_EQ(test_pairs.size(), 2u);
}

TEST(LoadIdrid, ImagesWithoutAnnotationGetZeroMasks) {
  testutil::TempDir tmp;
  testutil::write_corpus(tmp.path(), LesionType::SE, 3, 0, 32, 9);
  fs::remove(tmp.path() / "masks/SE/train/img_01_SE.png");
  auto pairs = load_idrid(tmp.path(), LesionType::SE, "train");
  ASSERT_EQ(pairs.size(), 3u);
  EXPECT_GT(cv::countNonZero(pairs[0].mask.pixels), 0);
  EXPECT_EQ(cv::countNonZero(pairs[1].mask.pixels), 0);
  EXPECT_EQ(pairs[1].mask.pixels.size(), pairs[1].image.pixels.size());
}

TEST(LoadIdrid, AcceptsMasksNamedExactlyLikeTheImage) {
  testutil::TempDir tmp;
  testutil::write_corpus(tmp.path(), LesionType::HE, 1, 0, 32, 11);
  fs::rename(tmp.path() / "masks/HE/train/img_00_HE.png",
             tmp.path() / "masks/HE/train/img_00.png");
  auto pairs = load_idrid(tmp.path(), LesionType::HE, "train");
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_GT(cv::countNonZero(pairs[0].mask.pixels), 0);
}

TEST(LoadIdrid, MissingDirectoriesAreLoadErrors) {
  testutil::TempDir tmp;
  EXPECT_THROW(load_idrid(tmp.path(), LesionType::MA, "train"), DataError);
  testutil::write_corpus(tmp.path(), LesionType::MA, 1, 0, 32, 13);
  EXPECT_THROW(load_idrid(tmp.path(), LesionType::EX, "train"), DataError);  // no EX masks
  EXPECT_THROW(load_idrid(tmp.path(), LesionType::MA, "test"), DataError);   // no test split
}

TEST(LoadIdrid, DimensionMismatchNamesTheFile) {
  testutil::TempDir tmp;
  testutil::write_corpus(tmp.path(), LesionType::MA, 2, 0, 32, 15);
  cv::Mat wrong = cv::Mat::zeros(16, 16, CV_8UC1);
  wrong.at<std::uint8_t>(4, 4) = 255;
  cv::imwrite((tmp.path() / "masks/MA/train/img_01_MA.png").string(), wrong);
  try {
    load_idrid(tmp.path(), LesionType::MA, "train");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("img_01_MA"), std::string::npos) << e.what();
  }
}

TEST(LoadIdrid, LimitImagesTruncatesSortedList) {
  testutil::TempDir tmp;
  testutil::write_corpus(tmp.path(), LesionType::EX, 5, 0, 32, 17);
  DatasetConfig cfg;
  cfg.limit_images = 2;
  auto pairs = load_idrid(tmp.path(), LesionType::EX, "train", cfg);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0].image.source_id, "img_00");
  EXPECT_EQ(pairs[1].image.source_id, "img_01");
}

TEST(LoadIdrid, OfficialCountsWhenDatasetPresent) {
  const char* root = std::getenv("LESIONSEG_IDRID_ROOT");
  if (!root) GTEST_SKIP() << "set LESIONSEG_IDRID_ROOT to run against the official dataset";
  auto ma = load_idrid(root, LesionType::MA, "train");
  EXPECT_EQ(ma.size(), 54u);
  int ma_nonempty = 0;
  for (const auto& p : ma) ma_nonempty += cv::countNonZero(p.mask.pixels) > 0;
  EXPECT_EQ(ma_nonempty, 54);

  auto se = load_idrid(root, LesionType::SE, "train");
  EXPECT_EQ(se.size(), 54u);
  int se_nonempty = 0;
  for (const auto& p : se) se_nonempty += cv::countNonZero(p.mask.pixels) > 0;
  EXPECT_EQ(se_nonempty, 26);

  EXPECT_EQ(load_idrid(root, LesionType::MA, "test").size(), 27u);
}

// --- split -----------------------------------------------------------------------------

TEST(SplitTrainVal, FloorArithmeticOnOfficialSize) {
  auto m = split_train_val(sequential_ids(54), 0.8, 1234);
  EXPECT_EQ(m.train_ids.size(), 43u);
  EXPECT_EQ(m.val_ids.size(), 11u);
  EXPECT_EQ(m.seed, 1234u);
}

TEST(SplitTrainVal, HalfOfTwo) {
  auto m = split_train_val({"a", "b"}, 0.5, 9);
  EXPECT_EQ(m.train_ids.size(), 1u);
  EXPECT_EQ(m.val_ids.size(), 1u);
}

TEST(SplitTrainVal, DeterministicPerSeed) {
  auto a = split_train_val(sequential_ids(10), 0.8, 77);
  auto b = split_train_val(sequential_ids(10), 0.8, 77);
  EXPECT_EQ(a.train_ids, b.train_ids);
  EXPECT_EQ(a.val_ids, b.val_ids);
  auto c = split_train_val(sequential_ids(54), 0.8, 78);
  EXPECT_NE(split_train_val(sequential_ids(54), 0.8, 77).train_ids, c.train_ids);
}

TEST(SplitTrainVal, DisjointAndExhaustiveForAnySeed) {
  auto ids = sequential_ids(33);
  auto sorted_ids = ids;
  std::sort(sorted_ids.begin(), sorted_ids.end());
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    auto m = split_train_val(ids, 0.7, seed);
    EXPECT_EQ(m.train_ids.size(), 23u);  // floor(33*0.7)
    std::vector<std::string> all = m.train_ids;
    all.insert(all.end(), m.val_ids.begin(), m.val_ids.end());
    std::sort(all.begin(), all.end());
    EXPECT_EQ(all, sorted_ids) << "seed " << seed;  // disjoint union == input
  }
}

TEST(SplitTrainVal, RejectsBadInputs) {
  EXPECT_THROW(split_train_val({}, 0.8, 1), DataError);
  EXPECT_THROW(split_train_val({"a"}, 0.0, 1), ConfigError);
  EXPECT_THROW(split_train_val({"a"}, 1.0, 1), ConfigError);
}

TEST(SplitManifest, JsonRoundTripAndOverlapRejection) {
  SplitManifest m;
  m.train_ids = {"x", "y"};
  m.val_ids = {"z"};
  m.test_ids = {"t1", "t2"};
  m.seed = 42;
  m.lesion = LesionType::HE;
  auto back = SplitManifest::from_json(m.to_json());
  EXPECT_EQ(back.train_ids, m.train_ids);
  EXPECT_EQ(back.val_ids, m.val_ids);
  EXPECT_EQ(back.test_ids, m.test_ids);
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.lesion, LesionType::HE);

  auto j = m.to_json();
  j["val_ids"] = {"x"};  // collides with train
  EXPECT_THROW(SplitManifest::from_json(j), DataError);
}

// --- crop ------------------------------------------------------------------------------

TEST(RandomCrop, FullSizeCropIsIdentity) {
  auto s = coordinate_sample(24, 24);
  std::mt19937_64 rng(5);
  auto out = random_crop(s, 24, rng);
  EXPECT_EQ(cv::norm(out.image.pixels, s.image.pixels, cv::NORM_INF), 0.0);
  EXPECT_EQ(cv::norm(out.mask.pixels, s.mask.pixels, cv::NORM_INF), 0.0);
}

TEST(RandomCrop, WindowsImageAndMaskAtTheSameOffset) {
  auto s = coordinate_sample(40, 56);
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 10; ++rep) {
    auto out = random_crop(s, 16, rng);
    ASSERT_EQ(out.image.pixels.rows, 16);
    ASSERT_EQ(out.image.pixels.cols, 16);
    ASSERT_EQ(out.mask.pixels.rows, 16);
    ASSERT_EQ(out.mask.pixels.cols, 16);
    // decode the window origin from the coordinate-coded red channel
    float v = out.image.pixels.at<cv::Vec3f>(0, 0)[0];
    int r0 = static_cast<int>(v) / 10000, c0 = static_cast<int>(v) % 10000;
    ASSERT_LE(r0 + 16, 40);
    ASSERT_LE(c0 + 16, 56);
    cv::Mat expect_mask = s.mask.pixels(cv::Rect(c0, r0, 16, 16));
    EXPECT_EQ(cv::norm(out.mask.pixels, expect_mask, cv::NORM_INF), 0.0);
    EXPECT_LE(cv::countNonZero(out.mask.pixels), cv::countNonZero(s.mask.pixels));
  }
}

TEST(RandomCrop, OversizeIsRejected) {
  auto s = coordinate_sample(24, 32);
  std::mt19937_64 rng(7);
  EXPECT_THROW(random_crop(s, 33, rng), DataError);
  EXPECT_THROW(random_crop(s, 25, rng), DataError);  // limited by the smaller side
}

TEST(RandomCrop, ForegroundBiasAlwaysCoversALesionPixel) {
  Sample s = coordinate_sample(64, 64);
  s.mask.pixels.setTo(0);
  s.mask.pixels.at<std::uint8_t>(63, 63) = 1;  // single far-corner positive

  std::mt19937_64 biased(8);
  for (int rep = 0; rep < 20; ++rep) {
    auto out = random_crop(s, 16, biased, /*foreground_biased=*/true);
    EXPECT_EQ(cv::countNonZero(out.mask.pixels), 1) << "bias missed the lesion, rep " << rep;
  }

  std::mt19937_64 uniform(8);
  int misses = 0;
  for (int rep = 0; rep < 20; ++rep)
    misses += cv::countNonZero(random_crop(s, 16, uniform).mask.pixels) == 0;
  EXPECT_GT(misses, 0) << "uniform crops should normally miss a single corner pixel";

  s.mask.pixels.setTo(0);  // empty mask: bias falls back to uniform without crashing
  auto out = random_crop(s, 16, biased, true);
  EXPECT_EQ(cv::countNonZero(out.mask.pixels), 0);
}

// --- rotate ----------------------------------------------------------------------------

TEST(RandomRotate, ZeroMaxDegreesIsIdentity) {
  auto s = disk_sample(64, 20);
  std::mt19937_64 rng(9);
  auto out = random_rotate(s, 0.0, rng);
  EXPECT_EQ(cv::norm(out.image.pixels, s.image.pixels, cv::NORM_INF), 0.0);
  EXPECT_EQ(cv::norm(out.mask.pixels, s.mask.pixels, cv::NORM_INF), 0.0);
}

TEST(RandomRotate, MaskStaysBinary) {
  auto s = disk_sample(64, 20);
  std::mt19937_64 rng(10);
  for (int rep = 0; rep < 5; ++rep) {
    auto out = random_rotate(s, 20.0, rng);
    out.mask.validate();
    double mn, mx;
    cv::minMaxLoc(out.mask.pixels, &mn, &mx);
    EXPECT_EQ(mn, 0.0);
    EXPECT_EQ(mx, 1.0);
  }
}

TEST(RandomRotate, DiskAreaPreservedWithinTwoPercent) {
  auto s = disk_sample(128, 40);
  double area = cv::countNonZero(s.mask.pixels);
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 8; ++rep) {
    auto out = random_rotate(s, 20.0, rng);
    double rotated = cv::countNonZero(out.mask.pixels);
    EXPECT_NEAR(rotated, area, 0.02 * area) << "rep " << rep;
  }
}

TEST(RandomRotate, DeterministicPerSeedAndValidatesInput) {
  auto s = disk_sample(48, 12);
  std::mt19937_64 a(12), b(12);
  auto out1 = random_rotate(s, 20.0, a);
  auto out2 = random_rotate(s, 20.0, b);
  EXPECT_EQ(cv::norm(out1.image.pixels, out2.image.pixels, cv::NORM_INF), 0.0);
  EXPECT_EQ(cv::norm(out1.mask.pixels, out2.mask.pixels, cv::NORM_INF), 0.0);
  std::mt19937_64 c(13);
  EXPECT_THROW(random_rotate(s, -1.0, c), ConfigError);
}

TEST(Augmentation, FiducialStaysColocatedThroughCropAndRotate) {
  // bright 3x3 block in the image and the same block in the mask
  Sample s;
  s.image.pixels = cv::Mat(96, 96, CV_32FC3, cv::Scalar(0, 0, 0));
  s.mask.pixels = cv::Mat::zeros(96, 96, CV_8UC1);
  s.image.pixels(cv::Rect(60, 34, 3, 3)).setTo(cv::Scalar(1, 1, 1));
  s.mask.pixels(cv::Rect(60, 34, 3, 3)).setTo(1);
  s.source_id = "fiducial";
  s.image.source_id = "fiducial";

  std::mt19937_64 rng(14);
  for (int rep = 0; rep < 6; ++rep) {
    auto cropped = random_crop(s, 80, rng);
    auto rotated = random_rotate(cropped, 20.0, rng);
    cv::Mat gray;
    cv::extractChannel(rotated.image.pixels, gray, 0);
    cv::Mat img_pos;
    cv::findNonZero(gray > 0.5, img_pos);
    cv::Mat mask_pos;
    cv::findNonZero(rotated.mask.pixels, mask_pos);
    ASSERT_GT(img_pos.rows, 0);
    ASSERT_GT(mask_pos.rows, 0);
    cv::Scalar ic = cv::mean(img_pos), mc = cv::mean(mask_pos);
    EXPECT_NEAR(ic[0], mc[0], 1.0) << "x drift, rep " << rep;
    EXPECT_NEAR(ic[1], mc[1], 1.0) << "y drift, rep " << rep;
  }
}

// --- batches ---------------------------------------------------------------------------

TEST(MakeBatches, ShortFinalBatchKept) {
  auto samples = testutil::make_samples(10, 32, 51);
  auto stream = make_batches(samples, 4);
  EXPECT_EQ(stream.n_batches(), 3u);
  std::vector<std::int64_t> sizes;
  std::vector<std::string> ids;
  while (auto b = stream.next()) {
    sizes.push_back(b->images.size(0));
    EXPECT_EQ(b->images.size(0), b->masks.size(0));
    EXPECT_EQ(b->images.sizes().slice(1), (torch::IntArrayRef{3, 32, 32}));
    EXPECT_EQ(b->masks.sizes().slice(1), (torch::IntArrayRef{1, 32, 32}));
    for (const auto& id : b->ids) ids.push_back(id);
  }
  EXPECT_EQ(sizes, (std::vector<std::int64_t>{4, 4, 2}));
  // no rng: stable original order
  EXPECT_EQ(ids.front(), "mem_0");
  EXPECT_EQ(ids.back(), "mem_9");
}

TEST(MakeBatches, MaskTensorsAreBinaryFloats) {
  auto samples = testutil::make_samples(2, 16, 53);
  auto stream = make_batches(samples, 2);
  auto b = stream.next();
  ASSERT_TRUE(b.has_value());
  EXPECT_EQ(b->masks.dtype(), torch::kFloat);
  auto u = std::get<0>(torch::unique_consecutive(std::get<0>(torch::sort(b->masks.flatten()))));
  for (int i = 0; i < u.numel(); ++i) {
    double v = u[i].item<double>();
    EXPECT_TRUE(v == 0.0 || v == 1.0) << v;
  }
}

TEST(MakeBatches, ShuffleIsSeedDeterministic) {
  auto samples = testutil::make_samples(9, 16, 55);
  auto collect = [&](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto stream = make_batches(samples, 4, &rng);
    std::vector<std::string> ids;
    while (auto b = stream.next())
      for (const auto& id : b->ids) ids.push_back(id);
    return ids;
  };
  EXPECT_EQ(collect(3), collect(3));
  EXPECT_NE(collect(3), collect(4));
  auto shuffled = collect(3);
  auto sorted = shuffled;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::string> expect;
  for (int i = 0; i < 9; ++i) expect.push_back("mem_" + std::to_string(i));
  std::sort(expect.begin(), expect.end());
  EXPECT_EQ(sorted, expect);  // permutation, nothing dropped
}

TEST(MakeBatches, EmptyAndInvalidInputs) {
  std::vector<Sample> none;
  auto stream = make_batches(none, 4);
  EXPECT_EQ(stream.n_batches(), 0u);
  EXPECT_FALSE(stream.next().has_value());
  auto samples = testutil::make_samples(2, 16, 57);
  EXPECT_THROW(make_batches(samples, 0), ConfigError);
}

TEST(DatasetConfig, ValidatesRanges) {
  DatasetConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.batch_train, 4);
  EXPECT_EQ(cfg.batch_test, 1);
  EXPECT_EQ(cfg.crop, 512);
  EXPECT_DOUBLE_EQ(cfg.rotate_max_deg, 20.0);

  DatasetConfig bad = cfg;
  bad.split_ratio = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.crop = 100;  // not a multiple of 16
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.batch_train = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.rotate_max_deg = -5;
  EXPECT_THROW(bad.validate(), ConfigError);
}
