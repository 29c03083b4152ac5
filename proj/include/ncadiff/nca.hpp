#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "conditioning.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace ncadiff {

enum class Padding { Reflect, Zero, Circular };

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kNormEps = 1e-5;

/// Replicated cell state [B, C, H, W]. Channels 0..2 hold the image, 3..5 the
/// predicted noise, the rest are hidden memory.
template <class T> using StateGrid = Tensor4<T>;

/// Builds the initial state: image channels from `noisy_image`, everything
/// else zero.
template <class T> StateGrid<T> seed_state(const Tensor4<T> &noisy_image, int channels) {
  if (noisy_image.channels() != kImageChannels)
    throw ConfigError("seed_state: channel axis is " + std::to_string(noisy_image.channels()) + ", expected 3");
  if (noisy_image.height() < 3)
    throw ConfigError("seed_state: height axis is " + std::to_string(noisy_image.height()) + ", must be >= 3");
  if (noisy_image.width() < 3)
    throw ConfigError("seed_state: width axis is " + std::to_string(noisy_image.width()) + ", must be >= 3");
  if (channels < kImageChannels + kNoiseChannels)
    throw ConfigError("seed_state: channel count " + std::to_string(channels) + " < 6 (image + noise)");
  StateGrid<T> s(noisy_image.batch(), channels, noisy_image.height(), noisy_image.width());
  assign_channels(s, 0, noisy_image);
  return s;
}

template <class T> Tensor4<T> read_noise_prediction(const StateGrid<T> &state) {
  return slice_channels(state, kImageChannels, kNoiseChannels);
}

template <class T> void write_noise_prediction(StateGrid<T> &state, const Tensor4<T> &noise) {
  if (noise.channels() != kNoiseChannels)
    throw ConfigError("write_noise_prediction: expected 3 channels");
  assign_channels(state, kImageChannels, noise);
}

/// Per-cell update mask [B, 1, H, W]; 1 = cell applies its update.
struct FireMask {
  int batch = 0, height = 0, width = 0;
  std::vector<std::uint8_t> mask;

  static FireMask filled(int b, int h, int w, bool on) {
    return FireMask{b, h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(b) * h * w, on ? 1 : 0)};
  }

  /// Bernoulli(rate) per cell in row-major (b, y, x) order.
  static FireMask draw(int b, int h, int w, double rate, Stream &rng) {
    if (!(rate > 0.0 && rate <= 1.0))
      throw ConfigError("fire_rate must lie in (0, 1]");
    FireMask m = filled(b, h, w, false);
    for (auto &v : m.mask)
      v = rng.bernoulli(rate) ? 1 : 0;
    return m;
  }

  std::uint8_t at(int b, int y, int x) const {
    return mask[(static_cast<std::size_t>(b) * height + y) * width + x];
  }

  double fired_fraction() const {
    std::size_t n = 0;
    for (auto v : mask)
      n += v;
    return mask.empty() ? 0.0 : static_cast<double>(n) / static_cast<double>(mask.size());
  }
};

/// Identifies the random stream a rollout draws its fire masks from. Masks
/// for NCA step k come from Stream(seed, Fire, {outer, branch, k}).
struct FireKey {
  std::uint64_t seed = 0;
  std::uint64_t outer = 0; // diffusion step while sampling, optimizer step while training
  std::uint64_t branch = 0;
};

namespace detail {

inline int pad_index(int i, int n, Padding mode) {
  if (i >= 0 && i < n)
    return i;
  switch (mode) {
  case Padding::Zero: return -1;
  case Padding::Circular: return (i % n + n) % n;
  case Padding::Reflect: return i < 0 ? -i : 2 * (n - 1) - i;
  }
  return -1;
}

/// For every cell and each of the 9 taps, the source row in the cell matrix
/// or -1 when the tap falls into zero padding.
inline std::vector<int> neighbor_table(int batch, int h, int w, Padding mode) {
  std::vector<int> table(static_cast<std::size_t>(batch) * h * w * 9);
  std::size_t k = 0;
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int sy = pad_index(y + dy, h, mode);
            const int sx = pad_index(x + dx, w, mode);
            table[k++] = (sy < 0 || sx < 0) ? -1 : (b * h + sy) * w + sx;
          }
  return table;
}

template <class T> Mat<T> im2col(const Mat<T> &a, const std::vector<int> &table) {
  const Eigen::Index n = a.rows(), cin = a.cols();
  Mat<T> col = Mat<T>::Zero(n, 9 * cin);
  for (Eigen::Index r = 0; r < n; ++r)
    for (int tap = 0; tap < 9; ++tap) {
      const int src = table[static_cast<std::size_t>(r) * 9 + tap];
      if (src >= 0)
        col.row(r).segment(tap * cin, cin) = a.row(src);
    }
  return col;
}

template <class T> void col2im_add(const Mat<T> &dcol, const std::vector<int> &table, Mat<T> &da) {
  const Eigen::Index n = da.rows(), cin = da.cols();
  for (Eigen::Index r = 0; r < n; ++r)
    for (int tap = 0; tap < 9; ++tap) {
      const int src = table[static_cast<std::size_t>(r) * 9 + tap];
      if (src >= 0)
        da.row(src) += dcol.row(r).segment(tap * cin, cin);
    }
}

template <class T> Mat<T> to_rows(const Tensor4<T> &t) {
  Mat<T> m(static_cast<Eigen::Index>(t.batch()) * t.height() * t.width(), t.channels());
  Eigen::Index row = 0;
  for (int b = 0; b < t.batch(); ++b)
    for (int y = 0; y < t.height(); ++y)
      for (int x = 0; x < t.width(); ++x, ++row)
        for (int c = 0; c < t.channels(); ++c)
          m(row, c) = t(b, c, y, x);
  return m;
}

template <class T> Tensor4<T> from_rows(const Mat<T> &m, int batch, int h, int w) {
  Tensor4<T> t(batch, static_cast<int>(m.cols()), h, w);
  Eigen::Index row = 0;
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x, ++row)
        for (int c = 0; c < t.channels(); ++c)
          t(b, c, y, x) = m(row, c);
  return t;
}

} // namespace detail

/// Activations of one update step kept for the backward pass.
template <class T> struct StepCache {
  Mat<T> v, e, enc;
  MlpCache<T> cond0, cond1;
  Mat<T> perceived, uhat, normed;
  RowVec<T> fire;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

/// One update of every cell, on the cell matrix `v` [N, C] with embedding
/// `e` [N, e_dim] and fire vector [N].
///
///   p  = perceive([v | e])             3x3 conv
///   z  = [p | v | e] * cond0(e)
///   u  = fc0(z)
///   a  = leaky_relu(norm(u)) * cond1(e)
///   v' = v + fire * fc1(a)
///
/// The normalization runs per cell over the h hidden channels.
template <class T>
Mat<T> step_forward(const CellRuleParams<T> &p, const Mat<T> &v, const Mat<T> &e, const RowVec<T> &fire,
                    const std::vector<int> &table, StepCache<T> *cache, const MlpCache<T> *cond0_in = nullptr,
                    const MlpCache<T> *cond1_in = nullptr) {
  const Eigen::Index n = v.rows();
  const int c = p.config.channels, ed = p.config.e_dim, d = p.config.concat_dim(), h = p.config.hidden;

  Mat<T> a(n, c + ed);
  a << v, e;
  const Mat<T> col = detail::im2col(a, table);
  Mat<T> perceived = detail::linear(p.perceive, col);

  MlpCache<T> c0 = cond0_in ? *cond0_in : mlp_forward(p.cond0a, p.cond0b, e);
  MlpCache<T> c1 = cond1_in ? *cond1_in : mlp_forward(p.cond1a, p.cond1b, e);

  Mat<T> z(n, d);
  z << perceived, v, e;
  z.array() *= c0.out.array();

  Mat<T> u = detail::linear(p.fc0, z);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(n);
  const T eps = static_cast<T>(kNormEps);
  for (Eigen::Index r = 0; r < n; ++r) {
    auto row = u.row(r);
    const T mean = row.mean();
    row.array() -= mean;
    const T var = row.squaredNorm() / static_cast<T>(h);
    rstd[r] = T(1) / std::sqrt(var + eps);
    row *= rstd[r];
  }
  // u now holds the normalized activations
  Mat<T> normed = (u.array().rowwise() * p.norm_scale.array()).rowwise() + p.norm_shift.array();
  const T slope = static_cast<T>(kLeakySlope);
  Mat<T> g = normed.unaryExpr([slope](T x) { return x > T(0) ? x : slope * x; });
  g.array() *= c1.out.array();

  Mat<T> o = detail::linear(p.fc1, g);
  Mat<T> out = v;
  out.array() += o.array().colwise() * fire.transpose().array();

  if (cache) {
    cache->v = v;
    cache->e = e;
    cache->cond0 = std::move(c0);
    cache->cond1 = std::move(c1);
    cache->perceived = std::move(perceived);
    cache->uhat = std::move(u);
    cache->normed = std::move(normed);
    cache->fire = fire;
    cache->rstd = std::move(rstd);
  }
  return out;
}

/// Backward through step_forward. Accumulates parameter gradients into
/// `grad` and returns (dv, de).
template <class T>
std::pair<Mat<T>, Mat<T>> step_backward(const CellRuleParams<T> &p, const StepCache<T> &cache,
                                        const std::vector<int> &table, const Mat<T> &dout,
                                        CellRuleParams<T> &grad) {
  const Eigen::Index n = dout.rows();
  const int c = p.config.channels, ed = p.config.e_dim, h = p.config.hidden;
  const T slope = static_cast<T>(kLeakySlope);

  Mat<T> dv = dout;
  Mat<T> d_o = dout.array().colwise() * cache.fire.transpose().array();

  const Mat<T> act = cache.normed.unaryExpr([slope](T x) { return x > T(0) ? x : slope * x; });
  const Mat<T> g = act.array() * cache.cond1.out.array();
  const Mat<T> dg = detail::linear_backward(p.fc1, g, d_o, grad.fc1);

  const Mat<T> dm1 = dg.array() * act.array();
  Mat<T> dnormed = dg.array() * cache.cond1.out.array();
  dnormed = dnormed.binaryExpr(cache.normed, [slope](T gr, T x) { return x > T(0) ? gr : slope * gr; });

  grad.norm_scale.noalias() += (dnormed.array() * cache.uhat.array()).matrix().colwise().sum();
  grad.norm_shift.noalias() += dnormed.colwise().sum();
  const Mat<T> duhat = dnormed.array().rowwise() * p.norm_scale.array();
  Mat<T> du(n, h);
  const T inv_h = T(1) / static_cast<T>(h);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean_d = duhat.row(r).sum() * inv_h;
    const T mean_dx = duhat.row(r).dot(cache.uhat.row(r)) * inv_h;
    du.row(r) = cache.rstd[r] * (duhat.row(r).array() - mean_d - cache.uhat.row(r).array() * mean_dx).matrix();
  }

  Mat<T> z(n, p.config.concat_dim());
  z << cache.perceived, cache.v, cache.e;
  const Mat<T> zz = z.array() * cache.cond0.out.array();
  const Mat<T> dzz = detail::linear_backward(p.fc0, zz, du, grad.fc0);
  const Mat<T> dz = dzz.array() * cache.cond0.out.array();
  const Mat<T> dm0 = dzz.array() * z.array();

  Mat<T> de = dz.rightCols(ed);
  dv += dz.middleCols(c, c);

  Mat<T> a(n, c + ed);
  a << cache.v, cache.e;
  const Mat<T> col = detail::im2col(a, table);
  const Mat<T> dcol = detail::linear_backward(p.perceive, col, Mat<T>(dz.leftCols(c)), grad.perceive);
  Mat<T> da = Mat<T>::Zero(n, c + ed);
  detail::col2im_add(dcol, table, da);
  dv += da.leftCols(c);
  de += da.rightCols(ed);

  de += mlp_backward(p.cond0a, p.cond0b, cache.e, cache.cond0, dm0, grad.cond0a, grad.cond0b, true);
  de += mlp_backward(p.cond1a, p.cond1b, cache.e, cache.cond1, dm1, grad.cond1a, grad.cond1b, true);
  return {std::move(dv), std::move(de)};
}

/// Fire mask as a per-row vector, optionally restricted to active cells
/// ([H*W] mask applied to every batch element).
template <class T>
RowVec<T> fire_vector(const FireMask &m, const std::vector<std::uint8_t> *active = nullptr) {
  RowVec<T> f(static_cast<Eigen::Index>(m.mask.size()));
  const std::size_t plane = static_cast<std::size_t>(m.height) * m.width;
  for (std::size_t i = 0; i < m.mask.size(); ++i) {
    const bool on = m.mask[i] && (!active || (*active)[i % plane]);
    f[static_cast<Eigen::Index>(i)] = on ? T(1) : T(0);
  }
  return f;
}

/// Single update on NCHW tensors. `e` is the [B, e_dim, H, W] embedding.
template <class T>
StateGrid<T> nca_step(const StateGrid<T> &state, const CellRuleParams<T> &params, const Tensor4<T> &e,
                      const FireMask &fire, Padding padding, int step_index = 0, const std::string &stage = "image") {
  if (state.channels() != params.config.channels)
    throw ConfigError("nca_step: state has " + std::to_string(state.channels()) + " channels, rule expects " +
                      std::to_string(params.config.channels));
  if (e.channels() != params.config.e_dim)
    throw ConfigError("nca_step: embedding channel mismatch");
  if (e.batch() != state.batch() || e.height() != state.height() || e.width() != state.width())
    throw ConfigError("nca_step: embedding spatial dims disagree with state");
  if (fire.batch != state.batch() || fire.height != state.height() || fire.width != state.width())
    throw ConfigError("nca_step: fire mask spatial dims disagree with state");
  const auto table = detail::neighbor_table(state.batch(), state.height(), state.width(), padding);
  const Mat<T> out = step_forward(params, detail::to_rows(state), detail::to_rows(e), fire_vector<T>(fire), table,
                                  static_cast<StepCache<T> *>(nullptr));
  if (!out.allFinite())
    throw NumericError(stage, step_index, "non-finite state after update");
  return detail::from_rows(out, state.batch(), state.height(), state.width());
}

/// How a rollout draws its conditioning and fire masks.
struct RolloutOptions {
  int steps = 20;
  double fire_rate = 0.9;
  Padding padding = Padding::Reflect;
  PositionMode position = PositionMode::Stretched;
  std::vector<double> t_norm; // per batch element
  FireKey fire_key;
  /// Optional [H*W] mask; cells with 0 never fire.
  const std::vector<std::uint8_t> *active = nullptr;
  /// Optional replacement for the seeded fire masks (tests).
  std::function<FireMask(int step)> fire_override;
  std::string stage = "image";
};

/// Per-step caches of a rollout that must be differentiated later.
template <class T> struct RolloutTape {
  int batch = 0, height = 0, width = 0;
  std::vector<int> table;
  std::vector<StepCache<T>> steps;
};

namespace detail {

template <class T>
FireMask rollout_fire(const RolloutOptions &opt, int k, int batch, int h, int w) {
  if (opt.fire_override)
    return opt.fire_override(k);
  Stream rng(opt.fire_key.seed, StreamTag::Fire,
             {opt.fire_key.outer, opt.fire_key.branch, static_cast<std::uint64_t>(k)});
  return FireMask::draw(batch, h, w, opt.fire_rate, rng);
}

template <class T> ConditioningInputs rollout_conditioning(const RolloutOptions &opt, int k, int batch, int h, int w) {
  ConditioningInputs in;
  in.batch = batch;
  in.height = h;
  in.width = w;
  in.t_norm = opt.t_norm;
  in.nca_step_norm = static_cast<double>(k) / opt.steps;
  in.position = opt.position;
  return in;
}

} // namespace detail

/// Runs `opt.steps` updates on a cell matrix. When `tape` is given, every
/// step's activations are retained for rollout_backward.
template <class T>
Mat<T> rollout_rows(Mat<T> v, const CellRuleParams<T> &params, int batch, int h, int w, const RolloutOptions &opt,
                    RolloutTape<T> *tape = nullptr) {
  if (opt.steps < 1)
    throw ConfigError("rollout: step count must be >= 1");
  if (static_cast<int>(opt.t_norm.size()) != batch)
    throw ConfigError("rollout: need one diffusion timestep per batch element");
  auto table = detail::neighbor_table(batch, h, w, opt.padding);
  if (tape) {
    tape->batch = batch;
    tape->height = h;
    tape->width = w;
    tape->steps.clear();
    tape->steps.resize(static_cast<std::size_t>(opt.steps));
  }
  for (int k = 0; k < opt.steps; ++k) {
    const auto in = detail::rollout_conditioning<T>(opt, k, batch, h, w);
    Mat<T> enc = encode_inputs<T>(in, params.config.enc_dim);
    const Mat<T> e = mlp_forward(params.embed0, params.embed1, enc).out;
    const FireMask fire = detail::rollout_fire<T>(opt, k, batch, h, w);
    StepCache<T> *cache = tape ? &tape->steps[static_cast<std::size_t>(k)] : nullptr;
    v = step_forward(params, v, e, fire_vector<T>(fire, opt.active), table, cache);
    if (cache)
      cache->enc = std::move(enc);
    if (!v.allFinite())
      throw NumericError(opt.stage, k, "non-finite state after update");
  }
  if (tape)
    tape->table = std::move(table);
  return v;
}

/// Backpropagates `dv` (gradient w.r.t. the final cell matrix) through a
/// taped rollout. Parameter gradients accumulate into `grad`; the return
/// value is the gradient w.r.t. the initial cell matrix.
template <class T>
Mat<T> rollout_backward(const CellRuleParams<T> &params, const RolloutTape<T> &tape, Mat<T> dv,
                        CellRuleParams<T> &grad) {
  for (auto it = tape.steps.rbegin(); it != tape.steps.rend(); ++it) {
    auto [dprev, de] = step_backward(params, *it, tape.table, dv, grad);
    const auto emb = mlp_forward(params.embed0, params.embed1, it->enc);
    mlp_backward(params.embed0, params.embed1, it->enc, emb, de, grad.embed0, grad.embed1, false);
    dv = std::move(dprev);
  }
  return dv;
}

/// `opt.steps` applications of nca_step with regenerated conditioning and a
/// fresh fire mask per step.
template <class T> StateGrid<T> rollout(const StateGrid<T> &state, const CellRuleParams<T> &params, const RolloutOptions &opt) {
  if (state.channels() != params.config.channels)
    throw ConfigError("rollout: state/rule channel mismatch");
  const Mat<T> out = rollout_rows(detail::to_rows(state), params, state.batch(), state.height(), state.width(), opt);
  return detail::from_rows(out, state.batch(), state.height(), state.width());
}

} // namespace ncadiff
