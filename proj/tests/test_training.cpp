#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "lesionseg/training.hpp"
#include "testutil.hpp"

using namespace lesionseg;

namespace {

namespace fs = std::filesystem;

struct ConstGenImpl : GeneratorBase {
  float value;
  explicit ConstGenImpl(float v) : value(v) {}
  SideOutputs forward(const torch::Tensor& images) override {
    auto m = torch::full({images.size(0), 1, images.size(2), images.size(3)}, value);
    return {{m}, m};
  }
  std::string kind() const override { return "const"; }
  int stride_divisor() const override { return 1; }
};

Batch single_batch(const std::vector<Sample>& samples) {
  auto stream = make_batches(samples, static_cast<int>(samples.size()));
  auto b = stream.next();
  return *b;
}

SplitManifest tiny_manifest(int n_train, int n_val) {
  SplitManifest m;
  for (int i = 0; i < n_train; ++i) m.train_ids.push_back("mem_" + std::to_string(i));
  for (int i = 0; i < n_val; ++i) m.val_ids.push_back("mem_" + std::to_string(n_train + i));
  m.seed = 7;
  m.lesion = LesionType::EX;
  return m;
}

// collects (epoch, step) -> seg loss entries from a log.jsonl
std::map<std::pair<int, int>, double> read_seg_log(const fs::path& log) {
  std::map<std::pair<int, int>, double> out;
  std::ifstream in(log);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (j.contains("step")) out[{j.at("epoch").get<int>(), j.at("step").get<int>()}] =
        j.at("seg").get<double>();
  }
  return out;
}

bool params_equal(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!torch::equal(a[i], b[i])) return false;
  return true;
}

}  // namespace

// --- learning-rate schedule -------------------------------------------------------------

TEST(LrSchedule, ReferenceValues) {
  EXPECT_DOUBLE_EQ(lr_at_epoch(0.001, 200, 0), 0.001);
  EXPECT_DOUBLE_EQ(lr_at_epoch(0.001, 200, 199), 0.001);
  EXPECT_DOUBLE_EQ(lr_at_epoch(0.001, 200, 200), 0.0009);
  EXPECT_NEAR(lr_at_epoch(0.001, 200, 400), 0.00081, 1e-18);
  // at epoch 100 the discriminator has decayed once, the generator has not
  EXPECT_DOUBLE_EQ(lr_at_epoch(0.001, 100, 100), 0.0009);
  EXPECT_DOUBLE_EQ(lr_at_epoch(0.001, 200, 100), 0.001);
}

TEST(LrSchedule, MatchesClosedFormOnRandomEpochs) {
  std::mt19937_64 rng(61);
  std::uniform_int_distribution<int> epoch_d(0, 20000), every_d(1, 500);
  std::uniform_real_distribution<double> lr_d(1e-5, 1.0);
  for (int rep = 0; rep < 1000; ++rep) {
    double lr0 = lr_d(rng);
    int every = every_d(rng), epoch = epoch_d(rng);
    double want = lr0 * std::pow(0.9, static_cast<double>(epoch / every));
    EXPECT_DOUBLE_EQ(lr_at_epoch(lr0, every, epoch), want);
  }
}

TEST(LrSchedule, RejectsBadArguments) {
  EXPECT_THROW(lr_at_epoch(0.001, 200, -1), ConfigError);
  EXPECT_THROW(lr_at_epoch(0.001, 0, 5), ConfigError);
}

// --- optimizer semantics ------------------------------------------------------------------

TEST(Sgd, WeightDecayContractsParametersWithZeroGradient) {
  TrainConfig cfg;
  cfg.lr_init = 0.1;
  auto w = torch::tensor({2.0}, torch::dtype(torch::kFloat64).requires_grad(true));
  auto opt = make_sgd({w}, cfg);

  // hand recurrence for libtorch SGD: g = grad + wd*w; buf = m*buf + g; w -= lr*buf
  double wd = cfg.weight_decay, m = cfg.momentum, lr = cfg.lr_init;
  double w_ref = 2.0, buf = 0.0;
  for (int step = 0; step < 5; ++step) {
    opt->zero_grad();
    (w * 0.0).sum().backward();  // gradient exactly zero: only decay acts
    opt->step();
    double g = 0.0 + wd * w_ref;
    buf = (step == 0) ? g : m * buf + g;
    w_ref -= lr * buf;
    EXPECT_NEAR(w.item<double>(), w_ref, 1e-12) << "step " << step;
  }
  EXPECT_LT(w.item<double>(), 2.0);  // strictly contracted
}

TEST(Sgd, MomentumMatchesHeavyBallRecurrenceOnQuadratic) {
  TrainConfig cfg;
  cfg.lr_init = 0.01;
  cfg.weight_decay = 0.0;
  auto w = torch::tensor({1.5}, torch::dtype(torch::kFloat64).requires_grad(true));
  auto opt = make_sgd({w}, cfg);

  const double a = 3.0, lr = 0.01, m = 0.9;
  double w_ref = 1.5, buf = 0.0;
  for (int step = 0; step < 50; ++step) {
    opt->zero_grad();
    (0.5 * a * w * w).sum().backward();  // grad = a*w
    opt->step();
    double g = a * w_ref;
    buf = (step == 0) ? g : m * buf + g;
    w_ref -= lr * buf;
    ASSERT_NEAR(w.item<double>(), w_ref, 1e-10) << "step " << step;
  }
}

TEST(Sgd, SetLrTakesEffect) {
  TrainConfig cfg;
  auto w = torch::tensor({1.0f}, torch::requires_grad());
  auto opt = make_sgd({w}, cfg);
  set_lr(*opt, 0.5);
  for (auto& group : opt->param_groups())
    EXPECT_DOUBLE_EQ(static_cast<torch::optim::SGDOptions&>(group.options()).lr(), 0.5);
}

// --- train_step ----------------------------------------------------------------------------

TEST(TrainStep, LambdaZeroNeverTouchesTheDiscriminator) {
  torch::manual_seed(71);
  auto gen = build_model("hednet", GeneratorConfig{.base_width = 4});
  auto disc = build_discriminator(DiscriminatorConfig{.patch_size = 64, .base_width = 4});
  TrainConfig tc;
  auto g_opt = make_sgd(gen->parameters(), tc);
  auto d_opt = make_sgd(disc->parameters(), tc);

  std::vector<torch::Tensor> disc_before;
  for (const auto& p : disc->parameters()) disc_before.push_back(p.clone());

  LossConfig lc;
  lc.lambda_gan = 0.0;
  auto batch = single_batch(testutil::make_samples(2, 32, 73));
  auto m = train_step(batch, gen, disc, g_opt.get(), d_opt.get(), lc);
  EXPECT_GT(m.seg_loss, 0.0);
  EXPECT_DOUBLE_EQ(m.gan_g_loss, 0.0);
  EXPECT_DOUBLE_EQ(m.gan_d_loss, 0.0);
  EXPECT_DOUBLE_EQ(m.total_loss, m.seg_loss);
  EXPECT_TRUE(params_equal(disc->parameters(), disc_before));

  // and the plain segmentation step runs without any discriminator at all
  auto m2 = train_step(batch, gen, nullptr, g_opt.get(), nullptr, lc);
  EXPECT_GT(m2.seg_loss, 0.0);
}

TEST(TrainStep, GeneratorRunIsBitwiseIndependentOfDiscriminatorExistence) {
  auto samples = testutil::make_samples(4, 32, 79);
  auto run = [&](bool with_disc) {
    torch::manual_seed(81);
    auto gen = build_model("hednet", GeneratorConfig{.base_width = 4});
    TrainConfig tc;
    auto g_opt = make_sgd(gen->parameters(), tc);
    DiscriminatorPtr disc;
    SgdPtr d_opt;
    if (with_disc) {
      disc = build_discriminator(DiscriminatorConfig{.patch_size = 64, .base_width = 4});
      d_opt = make_sgd(disc->parameters(), tc);
    }
    LossConfig lc;
    lc.lambda_gan = 0.0;
    for (int step = 0; step < 10; ++step) {
      auto stream = make_batches(samples, 2);
      while (auto b = stream.next())
        train_step(*b, gen, disc, g_opt.get(), d_opt.get(), lc);
    }
    return gen->parameters();
  };
  auto without = run(false);
  auto with = run(true);
  ASSERT_EQ(without.size(), with.size());
  for (std::size_t i = 0; i < with.size(); ++i)
    EXPECT_TRUE(torch::equal(without[i], with[i])) << "parameter " << i << " diverged";
}

TEST(TrainStep, AdversarialStepPopulatesAllLossTerms) {
  torch::manual_seed(83);
  auto gen = build_model("hednet", GeneratorConfig{.base_width = 4});
  auto disc = build_discriminator(DiscriminatorConfig{.patch_size = 64, .base_width = 4});
  TrainConfig tc;
  auto g_opt = make_sgd(gen->parameters(), tc);
  auto d_opt = make_sgd(disc->parameters(), tc);
  LossConfig lc;
  lc.lambda_gan = 0.01;

  auto batch = single_batch(testutil::make_samples(2, 64, 89));
  auto m = train_step(batch, gen, disc, g_opt.get(), d_opt.get(), lc);
  EXPECT_GT(m.seg_loss, 0.0);
  EXPECT_GT(m.gan_d_loss, 0.0);
  EXPECT_GT(m.gan_g_loss, 0.0);
  EXPECT_NEAR(m.total_loss, m.seg_loss + 0.01 * m.gan_g_loss, 1e-6);

  EXPECT_THROW(train_step(batch, gen, nullptr, g_opt.get(), nullptr, lc), ConfigError);
  EXPECT_THROW(train_step(batch, gen, disc, g_opt.get(), nullptr, lc), ConfigError);
  EXPECT_THROW(train_step(batch, nullptr, disc, nullptr, d_opt.get(), lc), ConfigError);
}

TEST(TrainStep, DiscriminatorStepDescendsAtSmallLr) {
  torch::manual_seed(97);
  auto gen = build_model("hednet", GeneratorConfig{.base_width = 4});
  auto disc = build_discriminator(DiscriminatorConfig{.patch_size = 64, .base_width = 4});
  auto batch = single_batch(testutil::make_samples(2, 64, 99));

  gen->eval();
  torch::Tensor fused;
  {
    torch::NoGradGuard ng;
    fused = gen->forward(batch.images).fused_map;
  }
  disc->train();
  auto d_loss = [&]() {
    auto real = discriminator_forward(disc, batch.images, batch.masks);
    auto fake = discriminator_forward(disc, batch.images, fused);
    return gan_discriminator_loss(real, fake);
  };

  torch::optim::SGD opt(disc->parameters(), torch::optim::SGDOptions(1e-4));
  opt.zero_grad();
  auto loss = d_loss();
  double before = loss.item<double>();
  loss.backward();
  opt.step();

  double after;
  {
    torch::NoGradGuard ng;
    after = d_loss().item<double>();
  }
  EXPECT_LE(after, before + 1e-9) << "loss went " << before << " -> " << after;
}

TEST(TrainStep, OverfitsOneBatch) {
  torch::manual_seed(101);
  auto gen = build_model("hednet", GeneratorConfig{.base_width = 4});
  TrainConfig tc;
  tc.lr_init = 0.05;
  auto g_opt = make_sgd(gen->parameters(), tc);
  LossConfig lc;
  lc.lambda_gan = 0.0;
  auto batch = single_batch(testutil::make_samples(2, 32, 103));

  double first = 0.0, last = 0.0;
  for (int step = 0; step < 120; ++step) {
    auto m = train_step(batch, gen, nullptr, g_opt.get(), nullptr, lc);
    if (step == 0) first = m.seg_loss;
    last = m.seg_loss;
    ASSERT_TRUE(std::isfinite(m.seg_loss));
  }
  EXPECT_LT(last, 0.5 * first) << "seg loss went " << first << " -> " << last;
}

TEST(TrainStep, NonFiniteLossNamesTheBatch) {
  torch::manual_seed(107);
  auto gen = build_model("hednet", GeneratorConfig{.base_width = 4});
  TrainConfig tc;
  auto g_opt = make_sgd(gen->parameters(), tc);
  LossConfig lc;
  lc.lambda_gan = 0.0;
  auto samples = testutil::make_samples(1, 32, 109);
  samples[0].image.pixels.at<cv::Vec3f>(3, 3)[0] = std::nanf("");
  auto batch = single_batch(samples);
  try {
    train_step(batch, gen, nullptr, g_opt.get(), nullptr, lc);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("mem_0"), std::string::npos) << e.what();
  }
}

// --- validate -------------------------------------------------------------------------------

TEST(Validate, PerfectStubAndUninformativeConstant) {
  auto samples = testutil::make_samples(3, 32, 113);
  auto perfect = validate(build_stub(), samples, LesionType::EX, 0.5, 32, 16);
  EXPECT_NEAR(perfect.ap, 1.0, 1e-9);
  EXPECT_NEAR(perfect.f1, 1.0, 1e-9);

  std::int64_t pos = 0, total = 0;
  for (const auto& s : samples) {
    pos += cv::countNonZero(s.mask.pixels);
    total += static_cast<std::int64_t>(s.mask.pixels.total());
  }
  double prevalence = static_cast<double>(pos) / static_cast<double>(total);
  auto flat = validate(std::make_shared<ConstGenImpl>(0.5f), samples, LesionType::EX, 0.5, 32, 16);
  EXPECT_NEAR(flat.ap, prevalence, 1e-9);

  auto again = validate(std::make_shared<ConstGenImpl>(0.5f), samples, LesionType::EX, 0.5, 32, 16);
  EXPECT_DOUBLE_EQ(flat.ap, again.ap);
  EXPECT_DOUBLE_EQ(flat.f1, again.f1);

  EXPECT_THROW(validate(build_stub(), {}, LesionType::EX), DataError);
}

// --- config serialization --------------------------------------------------------------------

TEST(TrainConfig, DefaultsMatchReferenceSchedule) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_DOUBLE_EQ(cfg.lr_init, 0.001);
  EXPECT_DOUBLE_EQ(cfg.lr_decay_factor, 0.9);
  EXPECT_EQ(cfg.g_decay_every, 200);
  EXPECT_EQ(cfg.d_decay_every, 100);
  EXPECT_DOUBLE_EQ(cfg.momentum, 0.9);
  EXPECT_DOUBLE_EQ(cfg.weight_decay, 0.0005);
  EXPECT_EQ(cfg.epochs, 5000);
  EXPECT_EQ(cfg.batch_train, 4);
  EXPECT_EQ(cfg.batch_test, 1);
  EXPECT_DOUBLE_EQ(cfg.lambda_gan, 0.01);
  EXPECT_DOUBLE_EQ(cfg.beta, 10.0);

  TrainConfig bad = cfg;
  bad.lr_init = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.momentum = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.epochs = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.lambda_gan = -0.5;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig cfg;
  cfg.lr_init = 0.002;
  cfg.epochs = 123;
  cfg.lambda_gan = 0.05;
  cfg.seed = 99;
  cfg.val_interval = 7;
  auto back =
      lesionseg::detail::train_cfg_from_json(lesionseg::detail::train_cfg_to_json(cfg));
  EXPECT_DOUBLE_EQ(back.lr_init, 0.002);
  EXPECT_EQ(back.epochs, 123);
  EXPECT_DOUBLE_EQ(back.lambda_gan, 0.05);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.val_interval, 7);
}

TEST(GeneratorConfigJson, PretrainedFlagNeverSurvivesReload) {
  GeneratorConfig cfg;
  cfg.pretrained_backbone = true;
  cfg.backbone_weights = "/nonexistent/weights.lstw";
  cfg.base_width = 32;
  auto back = lesionseg::detail::gen_cfg_from_json(lesionseg::detail::gen_cfg_to_json(cfg));
  // checkpoint weights already include the trunk; reloading must not demand the file
  EXPECT_FALSE(back.pretrained_backbone);
  EXPECT_EQ(back.base_width, 32);
}

// --- checkpointing -----------------------------------------------------------------------------

TEST(Checkpointing, RoundTripRestoresParamsAndOptimizerState) {
  testutil::TempDir tmp;
  torch::manual_seed(127);
  auto gen = build_model("hednet", GeneratorConfig{.base_width = 4});
  auto disc = build_discriminator(DiscriminatorConfig{.patch_size = 64, .base_width = 4});
  TrainConfig tc;
  tc.lr_init = 0.01;
  auto g_opt = make_sgd(gen->parameters(), tc);
  auto d_opt = make_sgd(disc->parameters(), tc);
  LossConfig lc;
  lc.lambda_gan = 0.01;
  auto samples = testutil::make_samples(2, 32, 131);
  auto batch = single_batch(samples);
  for (int i = 0; i < 2; ++i)
    train_step(batch, gen, disc, g_opt.get(), d_opt.get(), lc);  // fills momentum buffers

  FitOptions opts;
  opts.model_kind = "hednet_cgan";
  opts.gen_cfg = GeneratorConfig{.base_width = 4};
  opts.disc_cfg = DiscriminatorConfig{.patch_size = 64, .base_width = 4};
  opts.lesion = LesionType::EX;
  opts.config_hash = "cafef00d";
  TrainState st;
  st.epoch = 2;
  st.best_val_ap = 0.5;
  st.gen = gen;
  st.disc = disc;
  auto meta = lesionseg::detail::checkpoint_meta(tc, opts, tiny_manifest(2, 0), st);
  auto path = tmp.path() / "ckpt";
  save_checkpoint(path, gen, disc, g_opt.get(), d_opt.get(), meta);

  auto ck = load_checkpoint(path, /*with_optimizers=*/true);
  EXPECT_EQ(ck.meta.at("epoch").get<int>(), 2);
  EXPECT_EQ(ck.meta.at("config_hash").get<std::string>(), "cafef00d");
  EXPECT_EQ(ck.meta.at("model_kind").get<std::string>(), "hednet_cgan");
  ASSERT_NE(ck.gen, nullptr);
  ASSERT_NE(ck.disc, nullptr);
  ASSERT_NE(ck.g_opt, nullptr);
  ASSERT_NE(ck.d_opt, nullptr);
  EXPECT_TRUE(params_equal(ck.gen->parameters(), gen->parameters()));
  EXPECT_TRUE(params_equal(ck.disc->parameters(), disc->parameters()));

  // one more identical step on both copies: only possible to stay bitwise
  // aligned if the momentum buffers were restored too
  train_step(batch, gen, disc, g_opt.get(), d_opt.get(), lc);
  train_step(batch, ck.gen, ck.disc, ck.g_opt.get(), ck.d_opt.get(), lc);
  EXPECT_TRUE(params_equal(ck.gen->parameters(), gen->parameters()));
  EXPECT_TRUE(params_equal(ck.disc->parameters(), disc->parameters()));
}

TEST(Checkpointing, RejectsMissingAndIncompatibleFiles) {
  testutil::TempDir tmp;
  EXPECT_THROW(load_checkpoint(tmp.path() / "absent"), IoError);

  torch::manual_seed(137);
  auto gen = build_model("stub");
  nlohmann::json meta = {{"version", 2}, {"model_kind", "stub"}};
  auto path = tmp.path() / "bad_version";
  save_checkpoint(path, gen, nullptr, nullptr, nullptr, meta);
  EXPECT_THROW(load_checkpoint(path), IoError);
}

// --- fit ---------------------------------------------------------------------------------------

TEST(Fit, SmokeRunWritesRunArtifacts) {
  testutil::TempDir tmp;
  auto samples = testutil::make_samples(6, 32, 139);
  std::vector<Sample> train(samples.begin(), samples.begin() + 4);
  std::vector<Sample> val(samples.begin() + 4, samples.end());

  TrainConfig tc;
  tc.epochs = 2;
  tc.val_interval = 1;
  tc.batch_train = 2;
  tc.lambda_gan = 0.01;
  tc.seed = 11;
  FitOptions opts;
  opts.run_dir = tmp.path() / "run";
  opts.model_kind = "hednet_cgan";
  opts.gen_cfg = GeneratorConfig{.base_width = 4};
  opts.disc_cfg = DiscriminatorConfig{.patch_size = 64, .base_width = 4};
  opts.lesion = LesionType::EX;
  opts.eval_tile = 32;
  opts.eval_stride = 16;

  auto st = fit(tc, tiny_manifest(4, 2), train, val, opts);
  EXPECT_EQ(st.epoch, 2);
  EXPECT_GE(st.best_val_ap, 0.0);
  EXPECT_TRUE(fs::exists(opts.run_dir / "ckpt_latest"));
  EXPECT_TRUE(fs::exists(opts.run_dir / "ckpt_best"));
  EXPECT_TRUE(fs::exists(opts.run_dir / "manifest.json"));
  EXPECT_TRUE(fs::exists(opts.run_dir / "log.jsonl"));

  auto ck = load_checkpoint(opts.run_dir / "ckpt_latest");
  EXPECT_EQ(ck.meta.at("epoch").get<int>(), 2);
  EXPECT_TRUE(ck.meta.at("has_discriminator").get<bool>());
  auto manifest = SplitManifest::from_json(ck.meta.at("manifest"));
  EXPECT_EQ(manifest.train_ids.size(), 4u);

  auto log = read_seg_log(opts.run_dir / "log.jsonl");
  EXPECT_EQ(log.size(), 4u);  // 2 epochs x 2 steps
  for (const auto& [key, seg] : log) EXPECT_TRUE(std::isfinite(seg));
}

TEST(Fit, ResumeReproducesTheUninterruptedRun) {
  testutil::TempDir tmp;
  auto samples = testutil::make_samples(6, 64, 149);
  std::vector<Sample> train(samples.begin(), samples.begin() + 4);
  std::vector<Sample> val(samples.begin() + 4, samples.end());
  auto manifest = tiny_manifest(4, 2);

  TrainConfig tc;
  tc.epochs = 4;
  tc.val_interval = 2;
  tc.batch_train = 2;
  tc.lambda_gan = 0.01;
  tc.seed = 23;
  FitOptions opts;
  opts.model_kind = "hednet_cgan";
  opts.gen_cfg = GeneratorConfig{.base_width = 4};
  opts.disc_cfg = DiscriminatorConfig{.patch_size = 64, .base_width = 4};
  opts.lesion = LesionType::EX;
  opts.crop = 32;
  opts.rotate_max_deg = 10.0;
  opts.eval_tile = 32;
  opts.eval_stride = 16;

  FitOptions full_opts = opts;
  full_opts.run_dir = tmp.path() / "full";
  auto full = fit(tc, manifest, train, val, full_opts);

  FitOptions part_opts = opts;
  part_opts.run_dir = tmp.path() / "part";
  TrainConfig tc_half = tc;
  tc_half.epochs = 2;
  fit(tc_half, manifest, train, val, part_opts);
  FitOptions resume_opts = part_opts;
  resume_opts.resume_from = part_opts.run_dir / "ckpt_latest";
  auto resumed = fit(tc, manifest, train, val, resume_opts);

  EXPECT_EQ(full.epoch, resumed.epoch);
  auto log_full = read_seg_log(full_opts.run_dir / "log.jsonl");
  auto log_part = read_seg_log(part_opts.run_dir / "log.jsonl");
  int compared = 0;
  for (const auto& [key, seg] : log_full) {
    if (key.first < 2) continue;  // epochs after the interruption point
    ASSERT_TRUE(log_part.count(key)) << "missing epoch " << key.first << " step " << key.second;
    EXPECT_NEAR(log_part.at(key), seg, 1e-6) << "epoch " << key.first << " step " << key.second;
    ++compared;
  }
  EXPECT_EQ(compared, 4);  // 2 remaining epochs x 2 steps

  auto a = full.gen->parameters();
  auto b = resumed.gen->parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_LT((a[i] - b[i]).abs().max().item<double>(), 1e-6) << "parameter " << i;
}

TEST(Fit, NonFiniteLossWritesDiagnosticSnapshot) {
  testutil::TempDir tmp;
  auto samples = testutil::make_samples(3, 32, 151);
  samples[0].image.pixels.at<cv::Vec3f>(1, 1)[2] = std::nanf("");
  std::vector<Sample> train(samples.begin(), samples.begin() + 2);
  std::vector<Sample> val(samples.begin() + 2, samples.end());

  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_train = 2;
  tc.lambda_gan = 0.0;
  tc.seed = 3;
  FitOptions opts;
  opts.run_dir = tmp.path() / "run";
  opts.model_kind = "hednet";
  opts.gen_cfg = GeneratorConfig{.base_width = 4};
  opts.lesion = LesionType::EX;

  EXPECT_THROW(fit(tc, tiny_manifest(2, 1), train, val, opts), NumericalError);
  ASSERT_TRUE(fs::exists(opts.run_dir / "diagnostic.json"));
  auto diag = nlohmann::json::parse(read_text_file(opts.run_dir / "diagnostic.json"));
  EXPECT_EQ(diag.at("epoch").get<int>(), 0);
  auto ids = diag.at("batch_ids").get<std::vector<std::string>>();
  EXPECT_NE(std::find(ids.begin(), ids.end(), "mem_0"), ids.end());
  EXPECT_NE(diag.at("error").get<std::string>().find("NaN"), std::string::npos);
}

TEST(Fit, RejectsEmptySplitsAndAdversarialResumeWithoutDisc) {
  auto samples = testutil::make_samples(2, 32, 157);
  TrainConfig tc;
  tc.epochs = 1;
  FitOptions opts;
  opts.model_kind = "stub";
  EXPECT_THROW(fit(tc, tiny_manifest(0, 2), {}, samples, opts), DataError);
  EXPECT_THROW(fit(tc, tiny_manifest(2, 0), samples, {}, opts), DataError);

  // train a lambda=0 run, then try to resume it adversarially
  testutil::TempDir tmp;
  std::vector<Sample> train(samples.begin(), samples.begin() + 1);
  std::vector<Sample> val(samples.begin() + 1, samples.end());
  TrainConfig plain;
  plain.epochs = 1;
  plain.val_interval = 1;
  plain.lambda_gan = 0.0;
  plain.batch_train = 1;
  FitOptions run;
  run.run_dir = tmp.path() / "plain";
  run.model_kind = "hednet";
  run.gen_cfg = GeneratorConfig{.base_width = 4};
  run.lesion = LesionType::EX;
  run.eval_tile = 32;
  run.eval_stride = 16;
  fit(plain, tiny_manifest(1, 1), train, val, run);

  TrainConfig adv = plain;
  adv.epochs = 2;
  adv.lambda_gan = 0.01;
  FitOptions resume = run;
  resume.resume_from = run.run_dir / "ckpt_latest";
  EXPECT_THROW(fit(adv, tiny_manifest(1, 1), train, val, resume), ConfigError);
}
