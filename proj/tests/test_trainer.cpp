#include <cmath>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace ncadiff;
using namespace ncadiff::testing;

namespace {

template <class T> std::vector<double> flatten(const Model<T> &m) {
  std::vector<double> out;
  m.for_each([&](const std::string &, const T *d, std::size_t n, const std::vector<int> &) {
    out.insert(out.end(), d, d + n);
  });
  return out;
}

template <class T> void fill(Model<T> &m, double v) {
  m.for_each([&](const std::string &, T *d, std::size_t n, const std::vector<int> &) { std::fill_n(d, n, T(v)); });
}

} // namespace

TEST(LearningRate, DecaysGeometrically) {
  TrainConfig tc;
  EXPECT_DOUBLE_EQ(tc.lr_at(0), 1.6e-3);
  EXPECT_DOUBLE_EQ(tc.lr_at(10), 1.6e-3 * std::pow(0.9999, 10));
}

TEST(Ema, FirstUpdate) {
  Model<double> w(tiny_model(ModelKind::Diff));
  fill(w, 2.5);
  EmaState<double> ema{w.zeros_like(), 0.99};
  ema_update(ema, w);
  for (double v : flatten(ema.shadow))
    ASSERT_NEAR(v, 0.025, 1e-15);
}

TEST(Ema, GeometricConvergence) {
  Model<double> w(tiny_model(ModelKind::FourierDiff));
  fill(w, -1.25);
  EmaState<double> ema{w.zeros_like(), 0.99};
  for (int k = 1; k <= 300; ++k) {
    ema_update(ema, w);
    const double want = -1.25 * (1.0 - std::pow(0.99, k));
    for (double v : flatten(ema.shadow))
      ASSERT_NEAR(v, want, 1e-12) << "k=" << k;
  }
}

TEST(Ema, FixedPoint) {
  Model<double> w(tiny_model(ModelKind::Diff));
  randomize(w, 3);
  EmaState<double> ema{w, 0.99};
  ema_update(ema, w);
  const auto a = flatten(ema.shadow), b = flatten(w);
  for (std::size_t i = 0; i < a.size(); ++i)
    ASSERT_NEAR(a[i], b[i], 1e-15);
}

TEST(Adam, MatchesScalarReference) {
  Model<double> p(tiny_model(ModelKind::Diff)), g(tiny_model(ModelKind::Diff));
  randomize(p, 1);
  TrainConfig tc;
  auto st = make_adam(p);
  // scalar reference on the first element of image.fc0.weight
  double x = p.image.fc0.weight(0, 0), m = 0, v = 0;
  for (int k = 1; k <= 5; ++k) {
    randomize(g, 100 + static_cast<std::uint64_t>(k));
    const double gk = g.image.fc0.weight(0, 0), lr = tc.lr_at(k - 1);
    adam_update(p, g, st, lr, tc);
    m = 0.9 * m + 0.1 * gk;
    v = 0.99 * v + 0.01 * gk * gk;
    x -= lr * (m / (1 - std::pow(0.9, k))) / (std::sqrt(v / (1 - std::pow(0.99, k))) + 1e-8);
    EXPECT_NEAR(p.image.fc0.weight(0, 0), x, 1e-15);
  }
  EXPECT_EQ(st.step, 5);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Model<double> p(tiny_model(ModelKind::Diff)), g(tiny_model(ModelKind::Diff));
  randomize(g, 8);
  TrainConfig tc;
  auto st = make_adam(p);
  const auto p0 = flatten(p);
  adam_update(p, g, st, 1e-3, tc);
  const auto pv = flatten(p), gv = flatten(g);
  for (std::size_t i = 0; i < pv.size(); ++i)
    if (std::abs(gv[i]) > 1e-3)
      ASSERT_NEAR(pv[i] - p0[i], -1e-3 * (gv[i] > 0 ? 1 : -1), 1e-8);
}

TEST(Trainer, FcOneBiasGradientMatchesFiniteDifferences) {
  auto m = Model<double>::initialized(tiny_model(ModelKind::Diff), 4);
  const auto x0 = random_tensor<double>(2, 3, 4, 4, 5);
  const auto sched = make_schedule(4);
  const auto g = loss_and_grad(m, x0, sched, 6, 0).second;
  for (int i = 0; i < m.image.fc1.bias.size(); ++i) {
    const double keep = m.image.fc1.bias[i];
    m.image.fc1.bias[i] = keep + 1e-5;
    const double up = loss_and_grad(m, x0, sched, 6, 0).first.loss;
    m.image.fc1.bias[i] = keep - 1e-5;
    const double down = loss_and_grad(m, x0, sched, 6, 0).first.loss;
    m.image.fc1.bias[i] = keep;
    const double fd = (up - down) / 2e-5;
    EXPECT_LT(std::abs(fd - g.image.fc1.bias[i]), 1e-3 * std::max(std::abs(fd), 1e-8)) << i;
  }
}

TEST(Trainer, LossFallsOnRepeatedImage) {
  auto cfg = tiny_model(ModelKind::Diff, 2);
  cfg.fire_rate = 0.9;
  TrainConfig tc;
  tc.seed = 3;
  auto st = TrainerState<float>::fresh(cfg, tc);
  const auto sched = make_schedule(20);
  Tensor4<float> x0(4, 3, 8, 8);
  const auto img = random_tensor<float>(1, 3, 8, 8, 9);
  for (int b = 0; b < 4; ++b)
    std::copy(img.storage().begin(), img.storage().end(), x0.storage().begin() + static_cast<long>(b * img.size()));
  const double before = loss_and_grad(st.live, x0, sched, 1234, 0).first.loss;
  for (int i = 0; i < 200; ++i)
    train_step(st, x0, sched, tc);
  const double after = loss_and_grad(st.live, x0, sched, 1234, 0).first.loss;
  EXPECT_LT(after, before);
  EXPECT_EQ(st.step, 200);
  EXPECT_EQ(st.adam.step, 200);
}

TEST(Trainer, GradientClipBoundsUpdate) {
  auto cfg = tiny_model(ModelKind::Diff);
  TrainConfig tc;
  tc.grad_clip = 1e-6;
  auto a = TrainerState<double>::fresh(cfg, tc);
  const auto x0 = random_tensor<double>(2, 3, 4, 4, 1);
  const auto sched = make_schedule(4);
  const auto grad = loss_and_grad(a.live, x0, sched, a.seed, 0).second;
  ASSERT_GT(global_norm(grad), 1e-6);
  EXPECT_NO_THROW(train_step(a, x0, sched, tc));
  tc.grad_clip = -1.0;
  EXPECT_THROW(tc.validate(), ConfigError);
}

TEST(Trainer, NonFiniteLossNamesTimesteps) {
  auto m = Model<double>::initialized(tiny_model(ModelKind::Diff), 1);
  m.image.fc1.bias[3] = std::numeric_limits<double>::quiet_NaN();
  try {
    loss_and_grad(m, random_tensor<double>(2, 3, 4, 4, 1), make_schedule(4), 0, 7);
    FAIL();
  } catch (const NumericError &e) {
    EXPECT_NE(std::string(e.what()).find("t = "), std::string::npos);
  }
}

TEST(Trainer, ValidationLossIsReproducible) {
  auto m = Model<float>(tiny_model(ModelKind::FourierDiff));
  randomize(m, 2, 0.1);
  std::vector<Tensor4<float>> batches{random_tensor<float>(2, 3, 8, 8, 1), random_tensor<float>(2, 3, 8, 8, 2)};
  const auto s = make_schedule(10);
  EXPECT_EQ(validation_loss(m, batches, s, 5), validation_loss(m, batches, s, 5));
  EXPECT_THROW(validation_loss(m, {}, s, 5), ConfigError);
}
