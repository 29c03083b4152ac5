#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "model.hpp"
#include "rng.hpp"

namespace ncadiff {

/// Linear beta schedule with derived alpha and cumulative alpha_bar. Index
/// with the 1-based diffusion step t via the accessors.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta, alpha, alpha_bar;

  double beta_at(int t) const { return beta[static_cast<std::size_t>(check(t) - 1)]; }
  double alpha_at(int t) const { return alpha[static_cast<std::size_t>(check(t) - 1)]; }
  double alpha_bar_at(int t) const { return alpha_bar[static_cast<std::size_t>(check(t) - 1)]; }

  int check(int t) const {
    if (t < 1 || t > steps)
      throw ConfigError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
    return t;
  }
};

inline NoiseSchedule make_schedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
  if (steps < 1)
    throw ConfigError("schedule.T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(static_cast<std::size_t>(steps));
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps > 1 ? static_cast<double>(i) / (steps - 1) : 0.0;
    s.beta[i] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

namespace detail {
template <class T> void require_same_shape(const Tensor4<T> &a, const Tensor4<T> &b, const char *what) {
  if (a.shape() != b.shape())
    throw ConfigError(std::string(what) + ": shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}
} // namespace detail

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
template <class T> Tensor4<T> q_sample_ab(const Tensor4<T> &x0, double alpha_bar, const Tensor4<T> &eps) {
  detail::require_same_shape(x0, eps, "q_sample");
  Tensor4<T> out = x0;
  const T a = static_cast<T>(std::sqrt(alpha_bar)), b = static_cast<T>(std::sqrt(1.0 - alpha_bar));
  for (std::size_t i = 0; i < out.size(); ++i)
    out.storage()[i] = a * x0.storage()[i] + b * eps.storage()[i];
  return out;
}

template <class T>
Tensor4<T> q_sample(const Tensor4<T> &x0, int t, const Tensor4<T> &eps, const NoiseSchedule &sched) {
  return q_sample_ab(x0, sched.alpha_bar_at(t), eps);
}

/// Per-batch-element timesteps.
template <class T>
Tensor4<T> q_sample(const Tensor4<T> &x0, const std::vector<int> &t, const Tensor4<T> &eps, const NoiseSchedule &sched) {
  detail::require_same_shape(x0, eps, "q_sample");
  if (static_cast<int>(t.size()) != x0.batch())
    throw ConfigError("q_sample: one timestep per batch element required");
  Tensor4<T> out = x0;
  const std::size_t per = out.size() / static_cast<std::size_t>(std::max(1, x0.batch()));
  for (int b = 0; b < x0.batch(); ++b) {
    const double ab = sched.alpha_bar_at(t[b]);
    const T a = static_cast<T>(std::sqrt(ab)), c = static_cast<T>(std::sqrt(1.0 - ab));
    for (std::size_t i = b * per; i < (b + 1) * per; ++i)
      out.storage()[i] = a * x0.storage()[i] + c * eps.storage()[i];
  }
  return out;
}

/// mean((pred - target)^2) + mean(|pred - target|)
template <class T> double diffusion_loss(const Tensor4<T> &pred, const Tensor4<T> &target) {
  detail::require_same_shape(pred, target, "diffusion_loss");
  double l2 = 0.0, l1 = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred.storage()[i]) - static_cast<double>(target.storage()[i]);
    l2 += d * d;
    l1 += std::abs(d);
  }
  const double n = static_cast<double>(pred.size());
  return l2 / n + l1 / n;
}

/// Gradient of diffusion_loss with respect to `pred`.
template <class T> Tensor4<T> diffusion_loss_grad(const Tensor4<T> &pred, const Tensor4<T> &target) {
  detail::require_same_shape(pred, target, "diffusion_loss_grad");
  Tensor4<T> g = pred;
  const T inv_n = T(1) / static_cast<T>(pred.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const T d = pred.storage()[i] - target.storage()[i];
    const T sign = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
    g.storage()[i] = (T(2) * d + sign) * inv_n;
  }
  return g;
}

template <class T> Tensor4<T> standard_normal(int b, int c, int h, int w, Stream &rng) {
  Tensor4<T> out(b, c, h, w);
  for (auto &v : out.storage())
    v = static_cast<T>(rng.normal());
  return out;
}

/// Options shared by every noise prediction.
struct PredictOptions {
  FireKey fire_key;
  /// [H*W] cells allowed to update; nullptr = all.
  const std::vector<std::uint8_t> *active = nullptr;
  std::optional<PositionMode> position;
};

inline constexpr std::uint64_t kImageBranchKey = 0;
inline constexpr std::uint64_t kFourierBranchKey = 1;

/// Activations of one predict_noise call kept for training.
template <class T> struct PredictTape {
  RolloutTape<T> image;
  std::optional<FourierTape<T>> fourier;
};

namespace detail {

inline std::vector<double> t_norms(const std::vector<int> &t, int total) {
  std::vector<double> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i)
    out[i] = static_cast<double>(t[i]) / total;
  return out;
}

} // namespace detail

/// Noise estimate n_p for x_t. Diff-NCA seeds the state directly; FourierDiff
/// seeds it through the Fourier stage. Both then run `steps` image-space
/// updates and read the noise channels.
template <class T>
Tensor4<T> predict_noise(const Model<T> &model, const Tensor4<T> &x_t, const std::vector<int> &t, int total_steps,
                         const PredictOptions &opt, PredictTape<T> *tape = nullptr) {
  const auto &cfg = model.config;
  if (x_t.channels() != kImageChannels)
    throw ConfigError("predict_noise: x_t must have 3 channels");
  if (static_cast<int>(t.size()) != x_t.batch())
    throw ConfigError("predict_noise: one timestep per batch element required");
  const auto tn = detail::t_norms(t, total_steps);

  StateGrid<T> state;
  if (cfg.kind == ModelKind::FourierDiff) {
    if (!model.fourier)
      throw ConfigError("predict_noise: FourierDiff model without Fourier rule");
    FourierStageOptions fo;
    fo.steps = cfg.fourier_steps;
    fo.window = cfg.fourier_window;
    fo.anchor = cfg.anchor;
    fo.fire_rate = cfg.fire_rate;
    fo.padding = cfg.fourier_padding;
    fo.t_norm = tn;
    fo.fire_key = {opt.fire_key.seed, opt.fire_key.outer, kFourierBranchKey};
    FourierTape<T> *ft = nullptr;
    if (tape)
      ft = &tape->fourier.emplace();
    state = fourier_stage(x_t, *model.fourier, cfg.channels, fo, ft);
  } else {
    state = seed_state(x_t, cfg.channels);
  }

  RolloutOptions ro;
  ro.steps = cfg.steps;
  ro.fire_rate = cfg.fire_rate;
  ro.padding = cfg.padding;
  ro.position = opt.position.value_or(cfg.position);
  ro.t_norm = tn;
  ro.fire_key = {opt.fire_key.seed, opt.fire_key.outer, kImageBranchKey};
  ro.active = opt.active;
  const int b = x_t.batch(), h = x_t.height(), w = x_t.width();
  const Mat<T> out = rollout_rows(detail::to_rows(state), model.image, b, h, w, ro, tape ? &tape->image : nullptr);
  Tensor4<T> np(b, kNoiseChannels, h, w);
  Eigen::Index row = 0;
  for (int bi = 0; bi < b; ++bi)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x, ++row)
        for (int c = 0; c < kNoiseChannels; ++c)
          np(bi, c, y, x) = out(row, kImageChannels + c);
  return np;
}

/// Gradients of every model tensor given dL/dn_p, from a taped prediction.
template <class T>
Model<T> predict_noise_backward(const Model<T> &model, const PredictTape<T> &tape, const Tensor4<T> &dnoise) {
  Model<T> grad = model.zeros_like();
  const auto &it = tape.image;
  Mat<T> dv = Mat<T>::Zero(static_cast<Eigen::Index>(it.batch) * it.height * it.width, model.config.channels);
  Eigen::Index row = 0;
  for (int b = 0; b < it.batch; ++b)
    for (int y = 0; y < it.height; ++y)
      for (int x = 0; x < it.width; ++x, ++row)
        for (int c = 0; c < kNoiseChannels; ++c)
          dv(row, kImageChannels + c) = dnoise(b, c, y, x);
  const Mat<T> dstate = rollout_backward(model.image, it, std::move(dv), grad.image);
  if (tape.fourier)
    fourier_stage_backward(*model.fourier, *tape.fourier, detail::from_rows(dstate, it.batch, it.height, it.width),
                           *grad.fourier);
  return grad;
}

/// One ancestral step: x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) n_p) / sqrt(alpha_t) + sigma_t z,
/// sigma_t = sqrt(beta_t). Pass no z (or t = 1) for the deterministic mean.
template <class T>
Tensor4<T> ddpm_step(const Tensor4<T> &x_t, const Tensor4<T> &n_p, int t, const NoiseSchedule &sched,
                     const Tensor4<T> *z = nullptr) {
  detail::require_same_shape(x_t, n_p, "ddpm_step");
  if (z)
    detail::require_same_shape(x_t, *z, "ddpm_step noise");
  const double beta = sched.beta_at(t), alpha = sched.alpha_at(t), ab = sched.alpha_bar_at(t);
  const double coef = beta / std::sqrt(1.0 - ab), inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  const double sigma = (t > 1 && z) ? std::sqrt(beta) : 0.0;
  Tensor4<T> out = x_t;
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = (static_cast<double>(x_t.storage()[i]) - coef * static_cast<double>(n_p.storage()[i])) * inv_sqrt_alpha;
    if (sigma != 0.0)
      v += sigma * static_cast<double>(z->storage()[i]);
    out.storage()[i] = static_cast<T>(v);
  }
  return out;
}

template <class T> void clamp_unit(Tensor4<T> &x) {
  for (auto &v : x.storage())
    v = std::clamp(v, T(-1), T(1));
}

struct SampleOptions {
  std::optional<PositionMode> position;
  /// Called after every reverse step with the step just completed.
  std::function<void(int t)> on_step;
};

namespace detail {

/// The reverse chain from `t_start` down to 1. `after_step` may project the
/// state (frozen context, blending) after each ddpm_step.
template <class T, class After>
Tensor4<T> reverse_chain(const Model<T> &model, Tensor4<T> x, int t_start, const NoiseSchedule &sched,
                         std::uint64_t seed, const std::vector<std::uint8_t> *active, const SampleOptions &so,
                         After &&after_step) {
  for (int t = t_start; t >= 1; --t) {
    PredictOptions po;
    po.fire_key = {seed, static_cast<std::uint64_t>(t), 0};
    po.active = active;
    po.position = so.position;
    const Tensor4<T> np = predict_noise(model, x, {t}, sched.steps, po);
    Stream zr(seed, StreamTag::Ancestral, {static_cast<std::uint64_t>(t)});
    const Tensor4<T> z = standard_normal<T>(x.batch(), x.channels(), x.height(), x.width(), zr);
    x = ddpm_step(x, np, t, sched, &z);
    after_step(x);
    if (!x.all_finite())
      throw NumericError("sample", t, "non-finite image after reverse step");
    if (so.on_step)
      so.on_step(t);
  }
  return x;
}

inline void check_geometry(int h, int w) {
  if (h < 3 || w < 3)
    throw ConfigError("canvas must be at least 3x3, got " + std::to_string(h) + "x" + std::to_string(w));
}

} // namespace detail

/// Full reverse chain from N(0, I) on an h x w canvas; returns [1, 3, h, w]
/// clamped to [-1, 1].
template <class T>
Tensor4<T> sample(const Model<T> &model, int h, int w, const NoiseSchedule &sched, std::uint64_t seed,
                  const SampleOptions &so = {}) {
  detail::check_geometry(h, w);
  Stream xr(seed, StreamTag::Noise, {static_cast<std::uint64_t>(sched.steps)});
  Tensor4<T> x = standard_normal<T>(1, kImageChannels, h, w, xr);
  x = detail::reverse_chain(model, std::move(x), sched.steps, sched, seed, nullptr, so, [](Tensor4<T> &) {});
  clamp_unit(x);
  return x;
}

/// Binary [H, W] mask; 1 = cell is resampled, 0 = frozen context.
struct SampleMask {
  int height = 0, width = 0;
  std::vector<std::uint8_t> mask;

  static SampleMask rectangle(int h, int w, int top, int left, int rh, int rw) {
    SampleMask m{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)};
    for (int y = std::max(0, top); y < std::min(h, top + rh); ++y)
      for (int x = std::max(0, left); x < std::min(w, left + rw); ++x)
        m.mask[static_cast<std::size_t>(y) * w + x] = 1;
    return m;
  }

  std::size_t active_count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
};

/// Inpainting: cells outside the mask hold the clean known values at every
/// step and never fire; cells inside run the full chain from noise.
template <class T>
Tensor4<T> sample_masked(const Model<T> &model, const Tensor4<T> &known, const SampleMask &mask,
                         const NoiseSchedule &sched, std::uint64_t seed, const SampleOptions &so = {}) {
  if (known.batch() != 1 || known.channels() != kImageChannels)
    throw ConfigError("sample_masked: known image must be [1,3,H,W]");
  detail::check_geometry(known.height(), known.width());
  if (mask.height != known.height() || mask.width != known.width() ||
      mask.mask.size() != static_cast<std::size_t>(mask.height) * mask.width)
    throw ConfigError("sample_masked: mask does not match image geometry");
  if (mask.active_count() == 0)
    throw ConfigError("sample_masked: mask selects no cells");
  const std::size_t plane = known.plane();
  auto freeze = [&](Tensor4<T> &x) {
    for (int c = 0; c < kImageChannels; ++c)
      for (std::size_t i = 0; i < plane; ++i)
        if (!mask.mask[i])
          x.storage()[c * plane + i] = known.storage()[c * plane + i];
  };
  Stream xr(seed, StreamTag::Noise, {static_cast<std::uint64_t>(sched.steps)});
  Tensor4<T> x = standard_normal<T>(1, kImageChannels, known.height(), known.width(), xr);
  freeze(x);
  x = detail::reverse_chain(model, std::move(x), sched.steps, sched, seed, &mask.mask, so, freeze);
  for (int c = 0; c < kImageChannels; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      if (mask.mask[i])
        x.storage()[c * plane + i] = std::clamp(x.storage()[c * plane + i], T(-1), T(1));
  return x;
}

inline int upscale_start_step(int total_steps) { return std::max(1, static_cast<int>(std::floor(0.9 * total_steps))); }

/// 2x upscaling. Originals sit at even (row, col); the three new cells per
/// block start from the nearest original, are noised to t* = floor(0.9 T),
/// denoised alone, and blended 2% back toward the nearest-neighbor value
/// after every reverse step.
template <class T>
Tensor4<T> upscale(const Model<T> &model, const Tensor4<T> &low, const NoiseSchedule &sched, std::uint64_t seed,
                   const SampleOptions &so = {}) {
  if (low.batch() != 1 || low.channels() != kImageChannels)
    throw ConfigError("upscale: input must be [1,3,H,W]");
  if (low.height() < 2 || low.width() < 2)
    throw ConfigError("upscale: input must be at least 2x2");
  const int h = 2 * low.height(), w = 2 * low.width();
  Tensor4<T> nn(1, kImageChannels, h, w);
  SampleMask fresh{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < kImageChannels; ++c)
        nn(0, c, y, x) = low(0, c, y / 2, x / 2);
      fresh.mask[static_cast<std::size_t>(y) * w + x] = (y % 2 == 0 && x % 2 == 0) ? 0 : 1;
    }
  const int t_star = upscale_start_step(sched.steps);
  Stream er(seed, StreamTag::Noise, {static_cast<std::uint64_t>(t_star)});
  const Tensor4<T> eps = standard_normal<T>(1, kImageChannels, h, w, er);
  Tensor4<T> x = q_sample(nn, t_star, eps, sched);
  const std::size_t plane = nn.plane();
  const T keep = static_cast<T>(0.98), blend = static_cast<T>(0.02);
  auto project = [&](Tensor4<T> &img, bool do_blend) {
    for (int c = 0; c < kImageChannels; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        auto &v = img.storage()[c * plane + i];
        const auto ref = nn.storage()[c * plane + i];
        if (!fresh.mask[i])
          v = ref;
        else if (do_blend)
          v = keep * v + blend * ref;
      }
  };
  project(x, false);
  x = detail::reverse_chain(model, std::move(x), t_star, sched, seed, &fresh.mask, so,
                            [&](Tensor4<T> &img) { project(img, true); });
  for (int c = 0; c < kImageChannels; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      if (fresh.mask[i])
        x.storage()[c * plane + i] = std::clamp(x.storage()[c * plane + i], T(-1), T(1));
  return x;
}

/// Rough peak working set of one inference rollout step on an h x w canvas.
inline std::size_t inference_bytes(const ModelConfig &cfg, int h, int w, std::size_t scalar_size) {
  const auto b = cfg.image_branch();
  const std::size_t cells = static_cast<std::size_t>(h) * w;
  const std::size_t per_cell = 3 * static_cast<std::size_t>(b.channels) + 9 * b.perceive_in() +
                               3 * b.concat_dim() + 4 * b.hidden + 2 * b.cond_hidden + b.embed_hidden +
                               b.embed_in() + 2 * b.e_dim + 9;
  return cells * per_cell * scalar_size + cells * 9 * sizeof(int);
}

inline constexpr std::size_t kDefaultTileMemoryLimit = std::size_t{4} << 30;

/// One reverse chain over an arbitrarily large canvas with a purely local
/// Diff-NCA; there are no tiles to stitch.
template <class T>
Tensor4<T> sample_tiled(const Model<T> &model, int h, int w, const NoiseSchedule &sched, std::uint64_t seed,
                        PositionMode position, std::size_t memory_limit = kDefaultTileMemoryLimit,
                        const SampleOptions &so = {}) {
  if (model.config.kind != ModelKind::Diff)
    throw ConfigError("tiled synthesis requires a Diff-NCA model; the Fourier window is bound to the training size");
  detail::check_geometry(h, w);
  const std::size_t need = inference_bytes(model.config, h, w, sizeof(T));
  if (need > memory_limit)
    throw ResourceError(need, memory_limit);
  SampleOptions opts = so;
  opts.position = position;
  return sample(model, h, w, sched, seed, opts);
}

} // namespace ncadiff
