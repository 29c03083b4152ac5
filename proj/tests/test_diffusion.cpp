#include <cmath>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace ncadiff;
using namespace ncadiff::testing;

TEST(Schedule, SingleStep) {
  const auto s = make_schedule(1, 0.5, 0.5);
  EXPECT_DOUBLE_EQ(s.alpha_bar_at(1), 0.5);
}

TEST(Schedule, Defaults) {
  const auto s = make_schedule();
  EXPECT_EQ(s.steps, 1000);
  EXPECT_DOUBLE_EQ(s.alpha_at(1), 0.9999);
  EXPECT_DOUBLE_EQ(s.beta_at(1000), 0.02);
  for (int t = 2; t <= 1000; ++t)
    ASSERT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
  // linear ramp
  EXPECT_NEAR(s.beta_at(500), 1e-4 + (0.02 - 1e-4) * 499.0 / 999.0, 1e-15);
}

TEST(Schedule, RangeChecked) {
  const auto s = make_schedule(10);
  EXPECT_THROW(s.beta_at(0), ConfigError);
  EXPECT_THROW(s.alpha_bar_at(11), ConfigError);
  EXPECT_THROW(make_schedule(0), ConfigError);
  EXPECT_THROW(make_schedule(10, 0.1, 1.0), ConfigError);
}

TEST(QSample, Limits) {
  const auto x0 = random_tensor<double>(1, 3, 4, 4, 1);
  const auto eps = random_tensor<double>(1, 3, 4, 4, 2);
  EXPECT_EQ(q_sample_ab(x0, 1.0, eps), x0);
  EXPECT_EQ(q_sample_ab(x0, 0.0, eps), eps);
  const auto q = q_sample_ab(x0, 0.25, eps);
  for (std::size_t i = 0; i < q.size(); ++i)
    EXPECT_DOUBLE_EQ(q.storage()[i], 0.5 * x0.storage()[i] + std::sqrt(0.75) * eps.storage()[i]);
}

TEST(QSample, PerBatchTimesteps) {
  const auto s = make_schedule(10);
  const auto x0 = random_tensor<double>(2, 3, 2, 2, 1);
  const auto eps = random_tensor<double>(2, 3, 2, 2, 2);
  const auto q = q_sample(x0, {1, 10}, eps, s);
  const double a1 = std::sqrt(s.alpha_bar_at(1)), a10 = std::sqrt(s.alpha_bar_at(10));
  EXPECT_DOUBLE_EQ(q(0, 0, 0, 0), a1 * x0(0, 0, 0, 0) + std::sqrt(1 - a1 * a1) * eps(0, 0, 0, 0));
  EXPECT_DOUBLE_EQ(q(1, 2, 1, 1), a10 * x0(1, 2, 1, 1) + std::sqrt(1 - a10 * a10) * eps(1, 2, 1, 1));
  EXPECT_THROW(q_sample(x0, std::vector<int>{1}, eps, s), ConfigError);
}

TEST(Loss, ClosedForms) {
  const auto n = random_tensor<double>(2, 3, 4, 4, 3);
  EXPECT_EQ(diffusion_loss(n, n), 0.0);
  auto p = n;
  for (auto &v : p.storage())
    v += 1.0;
  EXPECT_NEAR(diffusion_loss(p, n), 2.0, 1e-12);
  p = n;
  for (auto &v : p.storage())
    v += 0.5;
  EXPECT_NEAR(diffusion_loss(p, n), 0.75, 1e-12);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  const auto p = random_tensor<double>(1, 3, 3, 3, 4);
  const auto n = random_tensor<double>(1, 3, 3, 3, 5);
  const auto g = diffusion_loss_grad(p, n);
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto a = p, b = p;
    a.storage()[i] += 1e-7;
    b.storage()[i] -= 1e-7;
    EXPECT_NEAR(g.storage()[i], (diffusion_loss(a, n) - diffusion_loss(b, n)) / 2e-7, 1e-6);
  }
}

TEST(DdpmStep, OracleNoiseRecoversX0) {
  const auto s = make_schedule(1000);
  const auto x0 = random_tensor<double>(1, 3, 8, 8, 6);
  const auto eps = random_tensor<double>(1, 3, 8, 8, 7);
  const auto x1 = q_sample(x0, 1, eps, s);
  const auto rec = ddpm_step(x1, eps, 1, s);
  for (std::size_t i = 0; i < x0.size(); ++i)
    ASSERT_NEAR(rec.storage()[i], x0.storage()[i], 1e-6);
}

TEST(DdpmStep, ZeroNoisePredictionRescales) {
  const auto s = make_schedule(100);
  const auto x = random_tensor<double>(1, 3, 3, 3, 8);
  Tensor4<double> zero(1, 3, 3, 3);
  const auto out = ddpm_step(x, zero, 37, s, &zero);
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_NEAR(out.storage()[i], x.storage()[i] / std::sqrt(s.alpha_at(37)), 1e-15);
}

TEST(DdpmStep, AncestralVarianceIsBeta) {
  const auto s = make_schedule(100);
  const int t = 60;
  Tensor4<double> x(1, 3, 64, 64, 0.2), np(1, 3, 64, 64, 0.1);
  Stream zr(1, StreamTag::Ancestral);
  const auto z = standard_normal<double>(1, 3, 64, 64, zr);
  const auto out = ddpm_step(x, np, t, s, &z);
  double mean = 0, var = 0;
  for (double v : out.storage())
    mean += v;
  mean /= static_cast<double>(out.size());
  for (double v : out.storage())
    var += (v - mean) * (v - mean);
  var /= static_cast<double>(out.size() - 1);
  const double beta = s.beta_at(t), n = static_cast<double>(out.size());
  EXPECT_NEAR(var, beta, 3 * beta * std::sqrt(2.0 / (n - 1)));
  // last step is deterministic
  EXPECT_EQ(ddpm_step(x, np, 1, s, &z), ddpm_step(x, np, 1, s));
}

namespace {

Model<float> tiny_trained_like(ModelKind kind) {
  auto cfg = tiny_model(kind, 3);
  cfg.fire_rate = 0.8;
  Model<float> m(cfg);
  randomize(m, 77, 0.2);
  return m;
}

} // namespace

TEST(PredictNoise, ZeroOutputLayersPredictZero) {
  for (auto kind : {ModelKind::Diff, ModelKind::FourierDiff}) {
    auto m = Model<float>::initialized(tiny_model(kind), 1);
    const auto np = predict_noise(m, random_tensor<float>(2, 3, 8, 8, 1), {3, 9}, 10, PredictOptions{});
    for (float v : np.storage())
      EXPECT_EQ(v, 0.0f);
  }
}

TEST(PredictNoise, Deterministic) {
  const auto m = tiny_trained_like(ModelKind::FourierDiff);
  const auto x = random_tensor<float>(1, 3, 8, 8, 2);
  PredictOptions po;
  po.fire_key = {3, 4, 0};
  EXPECT_EQ(predict_noise(m, x, {5}, 10, po), predict_noise(m, x, {5}, 10, po));
}

TEST(Sample, FiniteClampedAnyShape) {
  const auto m = tiny_trained_like(ModelKind::Diff);
  const auto s = make_schedule(5);
  for (auto [h, w] : {std::pair{8, 8}, std::pair{12, 7}}) {
    const auto img = sample(m, h, w, s, 1);
    EXPECT_EQ(img.shape(), (std::array<int, 4>{1, 3, h, w}));
    for (float v : img.storage()) {
      ASSERT_TRUE(std::isfinite(v));
      ASSERT_LE(std::abs(v), 1.0f);
    }
  }
  EXPECT_EQ(sample(m, 8, 8, s, 9), sample(m, 8, 8, s, 9));
  EXPECT_NE(sample(m, 8, 8, s, 9), sample(m, 8, 8, s, 10));
  EXPECT_THROW(sample(m, 2, 8, s, 1), ConfigError);
}

TEST(SampleMasked, FullMaskEqualsSample) {
  const auto m = tiny_trained_like(ModelKind::Diff);
  const auto s = make_schedule(5);
  const auto known = random_tensor<float>(1, 3, 8, 8, 3);
  EXPECT_EQ(sample_masked(m, known, SampleMask::rectangle(8, 8, 0, 0, 8, 8), s, 4), sample(m, 8, 8, s, 4));
}

TEST(SampleMasked, EmptyMaskRejected) {
  const auto m = tiny_trained_like(ModelKind::Diff);
  EXPECT_THROW(sample_masked(m, random_tensor<float>(1, 3, 8, 8, 3), SampleMask::rectangle(8, 8, 0, 0, 0, 0),
                             make_schedule(5), 4),
               ConfigError);
}

TEST(SampleMasked, ContextBitIdentical) {
  const auto m = tiny_trained_like(ModelKind::FourierDiff);
  const auto known = random_tensor<float>(1, 3, 16, 16, 5);
  const auto mask = SampleMask::rectangle(16, 16, 4, 6, 5, 5);
  const auto out = sample_masked(m, known, mask, make_schedule(5), 6);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        if (!mask.mask[static_cast<std::size_t>(y) * 16 + x])
          ASSERT_EQ(out(0, c, y, x), known(0, c, y, x));
}

TEST(Upscale, OriginalsBitIdenticalAndSizeDoubles) {
  const auto m = tiny_trained_like(ModelKind::Diff);
  const auto low = random_tensor<float>(1, 3, 6, 5, 7);
  const auto up = upscale(m, low, make_schedule(10), 8);
  ASSERT_EQ(up.shape(), (std::array<int, 4>{1, 3, 12, 10}));
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 5; ++j)
        ASSERT_EQ(up(0, c, 2 * i, 2 * j), low(0, c, i, j));
  EXPECT_EQ(upscale_start_step(1000), 900);
  EXPECT_EQ(upscale_start_step(50), 45);
  EXPECT_EQ(upscale_start_step(1), 1);
}

TEST(Tiled, RejectsFourierAndOversizedCanvas) {
  const auto s = make_schedule(3);
  EXPECT_THROW(sample_tiled(tiny_trained_like(ModelKind::FourierDiff), 16, 16, s, 1, PositionMode::Disabled),
               ConfigError);
  const auto m = tiny_trained_like(ModelKind::Diff);
  EXPECT_THROW(sample_tiled(m, 4096, 4096, s, 1, PositionMode::Disabled, 1 << 20), ResourceError);
  EXPECT_EQ(sample_tiled(m, 12, 12, s, 2, PositionMode::Stretched), sample(m, 12, 12, s, 2));
}
