#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "diffusion.hpp"
#include "model.hpp"

namespace ncadiff {

struct TrainConfig {
  double lr = 1.6e-3;
  double lr_gamma = 0.9999; // multiplicative decay per optimizer step
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double adam_eps = 1e-8;
  std::int64_t steps = 200000;
  int batch = 16;
  double ema_decay = 0.99;
  std::uint64_t seed = 0;
  std::optional<double> grad_clip; // max global L2 norm
  std::int64_t checkpoint_every = 1000;
  std::int64_t val_every = 100;
  int val_batches = 4;

  double lr_at(std::int64_t step) const { return lr * std::pow(lr_gamma, static_cast<double>(step)); }

  void validate() const {
    if (!(lr > 0.0))
      throw ConfigError("train.lr must be > 0");
    if (!(lr_gamma > 0.0 && lr_gamma <= 1.0))
      throw ConfigError("train.lr_gamma must lie in (0, 1]");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw ConfigError("train.adam_beta1/adam_beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0))
      throw ConfigError("train.adam_eps must be > 0");
    if (steps < 1)
      throw ConfigError("train.steps must be >= 1");
    if (batch < 1)
      throw ConfigError("train.batch must be >= 1");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0))
      throw ConfigError("train.ema_decay must lie in [0, 1)");
    if (grad_clip && !(*grad_clip > 0.0))
      throw ConfigError("train.grad_clip must be > 0");
    if (checkpoint_every < 1 || val_every < 1 || val_batches < 1)
      throw ConfigError("train.checkpoint_every, val_every and val_batches must be >= 1");
  }
};

/// Exponential moving average of the weights, used for all sampling.
template <class T> struct EmaState {
  Model<T> shadow;
  double decay = 0.99;
};

/// shadow <- decay * shadow + (1 - decay) * params, elementwise.
template <class T> void ema_update(EmaState<T> &ema, const Model<T> &params) {
  std::vector<const T *> src;
  std::vector<std::size_t> sizes;
  params.for_each([&](const std::string &, const T *d, std::size_t n, const std::vector<int> &) {
    src.push_back(d);
    sizes.push_back(n);
  });
  std::size_t i = 0;
  const double a = ema.decay, b = 1.0 - ema.decay;
  ema.shadow.for_each([&](const std::string &name, T *d, std::size_t n, const std::vector<int> &) {
    if (i >= src.size() || sizes[i] != n)
      throw ConfigError("ema_update: shape mismatch at " + name);
    for (std::size_t k = 0; k < n; ++k)
      d[k] = static_cast<T>(a * static_cast<double>(d[k]) + b * static_cast<double>(src[i][k]));
    ++i;
  });
  if (i != src.size())
    throw ConfigError("ema_update: tensor count mismatch");
}

template <class T> struct AdamState {
  Model<T> m, v;
  std::int64_t step = 0; // number of updates applied
};

template <class T> AdamState<T> make_adam(const Model<T> &model) { return {model.zeros_like(), model.zeros_like(), 0}; }

namespace detail {

template <class T> std::vector<std::pair<T *, std::size_t>> flat_views(Model<T> &m) {
  std::vector<std::pair<T *, std::size_t>> out;
  m.for_each([&](const std::string &, T *d, std::size_t n, const std::vector<int> &) { out.emplace_back(d, n); });
  return out;
}

template <class T> std::vector<std::pair<const T *, std::size_t>> flat_views(const Model<T> &m) {
  std::vector<std::pair<const T *, std::size_t>> out;
  m.for_each([&](const std::string &, const T *d, std::size_t n, const std::vector<int> &) { out.emplace_back(d, n); });
  return out;
}

} // namespace detail

template <class T> double global_norm(const Model<T> &g) {
  double s = 0.0;
  for (auto [d, n] : detail::flat_views(g))
    for (std::size_t k = 0; k < n; ++k)
      s += static_cast<double>(d[k]) * static_cast<double>(d[k]);
  return std::sqrt(s);
}

/// Bias-corrected Adam step with learning rate `lr`.
template <class T>
void adam_update(Model<T> &params, const Model<T> &grad, AdamState<T> &st, double lr, const TrainConfig &cfg) {
  st.step += 1;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  auto p = detail::flat_views(params);
  auto g = detail::flat_views(grad);
  auto m = detail::flat_views(st.m);
  auto v = detail::flat_views(st.v);
  if (p.size() != g.size() || p.size() != m.size())
    throw ConfigError("adam_update: tensor count mismatch");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].second != g[i].second)
      throw ConfigError("adam_update: shape mismatch");
    for (std::size_t k = 0; k < p[i].second; ++k) {
      const double gk = static_cast<double>(g[i].first[k]);
      const double mk = b1 * static_cast<double>(m[i].first[k]) + (1.0 - b1) * gk;
      const double vk = b2 * static_cast<double>(v[i].first[k]) + (1.0 - b2) * gk * gk;
      m[i].first[k] = static_cast<T>(mk);
      v[i].first[k] = static_cast<T>(vk);
      const double upd = lr * (mk / c1) / (std::sqrt(vk / c2) + cfg.adam_eps);
      p[i].first[k] = static_cast<T>(static_cast<double>(p[i].first[k]) - upd);
    }
  }
}

/// Everything needed to continue a run bit-exactly. Randomness is derived
/// from (seed, step) alone, so the step counter is the full RNG state.
template <class T> struct TrainerState {
  Model<T> live;
  EmaState<T> ema;
  AdamState<T> adam;
  std::int64_t step = 0;
  std::uint64_t seed = 0;

  static TrainerState fresh(const ModelConfig &cfg, const TrainConfig &tc) {
    TrainerState s;
    s.live = Model<T>::initialized(cfg, tc.seed);
    s.ema = {s.live, tc.ema_decay};
    s.adam = make_adam(s.live);
    s.seed = tc.seed;
    return s;
  }
};

struct StepResult {
  double loss = 0.0;
  double lr = 0.0;
  std::vector<int> t;
};

/// Draws (t, eps) for a training step and returns the loss and gradients of
/// the live weights without updating anything.
template <class T>
std::pair<StepResult, Model<T>> loss_and_grad(const Model<T> &model, const Tensor4<T> &x0, const NoiseSchedule &sched,
                                              std::uint64_t seed, std::int64_t step) {
  StepResult r;
  Stream tr(seed, StreamTag::Timestep, {static_cast<std::uint64_t>(step)});
  r.t.resize(static_cast<std::size_t>(x0.batch()));
  for (auto &t : r.t)
    t = static_cast<int>(tr.integer(1, sched.steps));
  Stream er(seed, StreamTag::Noise, {static_cast<std::uint64_t>(step)});
  const Tensor4<T> eps = standard_normal<T>(x0.batch(), x0.channels(), x0.height(), x0.width(), er);
  const Tensor4<T> xt = q_sample(x0, r.t, eps, sched);
  PredictOptions po;
  po.fire_key = {seed, static_cast<std::uint64_t>(step), 0};
  std::string ts;
  for (int t : r.t)
    ts += (ts.empty() ? "" : ",") + std::to_string(t);
  PredictTape<T> tape;
  Tensor4<T> np;
  try {
    np = predict_noise(model, xt, r.t, sched.steps, po, &tape);
  } catch (const NumericError &e) {
    throw NumericError(e.stage(), e.step(),
                       "non-finite state at training step " + std::to_string(step) + " (t = " + ts + ")");
  }
  r.loss = diffusion_loss(np, eps);
  if (!std::isfinite(r.loss))
    throw NumericError("loss", static_cast<int>(step), "non-finite loss (t = " + ts + ")");
  Model<T> grad = predict_noise_backward(model, tape, diffusion_loss_grad(np, eps));
  return {r, std::move(grad)};
}

/// One optimizer step: sample t and eps, predict, L2 + L1 loss, Adam with
/// lr * gamma^step, then the EMA update.
template <class T>
StepResult train_step(TrainerState<T> &st, const Tensor4<T> &x0, const NoiseSchedule &sched, const TrainConfig &cfg) {
  auto [r, grad] = loss_and_grad(st.live, x0, sched, st.seed, st.step);
  if (cfg.grad_clip) {
    const double norm = global_norm(grad);
    if (norm > *cfg.grad_clip) {
      const double s = *cfg.grad_clip / norm;
      for (auto [d, n] : detail::flat_views(grad))
        for (std::size_t k = 0; k < n; ++k)
          d[k] = static_cast<T>(d[k] * s);
    }
  }
  r.lr = cfg.lr_at(st.step);
  adam_update(st.live, grad, st.adam, r.lr, cfg);
  ema_update(st.ema, st.live);
  st.step += 1;
  return r;
}

/// Mean loss over fixed (t, eps, fire) draws; identical across calls so
/// losses from different runs or checkpoints are comparable.
template <class T>
double validation_loss(const Model<T> &model, const std::vector<Tensor4<T>> &batches, const NoiseSchedule &sched,
                       std::uint64_t seed) {
  if (batches.empty())
    throw ConfigError("validation_loss: no validation batches");
  double total = 0.0;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    const auto &x0 = batches[i];
    Stream tr(seed, StreamTag::Validation, {i, 0});
    std::vector<int> t(static_cast<std::size_t>(x0.batch()));
    for (auto &v : t)
      v = static_cast<int>(tr.integer(1, sched.steps));
    Stream er(seed, StreamTag::Validation, {i, 1});
    const Tensor4<T> eps = standard_normal<T>(x0.batch(), x0.channels(), x0.height(), x0.width(), er);
    PredictOptions po;
    po.fire_key = {seed ^ 0x76616c6964ULL, i, 0};
    const auto np = predict_noise(model, q_sample(x0, t, eps, sched), t, sched.steps, po);
    total += diffusion_loss(np, eps);
  }
  return total / static_cast<double>(batches.size());
}

} // namespace ncadiff
