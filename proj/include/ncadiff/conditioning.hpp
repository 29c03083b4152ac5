#pragma once

#include <cmath>
#include <vector>

#include "params.hpp"
#include "tensor.hpp"

namespace ncadiff {

enum class PositionMode { Stretched, Disabled };

/// (sin(v w_k), cos(v w_k)) pairs with w_k = 10000^(-2k/enc_dim).
inline std::vector<double> sinusoidal_encode(double value, int enc_dim) {
  if (enc_dim < 2 || enc_dim % 2 != 0)
    throw ConfigError("sinusoidal_encode: enc_dim must be even and >= 2, got " + std::to_string(enc_dim));
  std::vector<double> out(static_cast<std::size_t>(enc_dim));
  for (int k = 0; k < enc_dim / 2; ++k) {
    const double w = std::pow(10000.0, -2.0 * k / enc_dim);
    out[2 * k] = std::sin(value * w);
    out[2 * k + 1] = std::cos(value * w);
  }
  return out;
}

/// Encoding used by the embedding MLP. enc_dim == 1 passes the normalized
/// scalar through unchanged (the narrow Diff-NCA layout); otherwise sinusoidal.
inline void encode_scalar(double value, int enc_dim, double *out) {
  if (enc_dim == 1) {
    out[0] = value;
    return;
  }
  const auto v = sinusoidal_encode(value, enc_dim);
  std::copy(v.begin(), v.end(), out);
}

/// Per-cell conditioning scalars for one NCA step over a [B, H, W] grid.
struct ConditioningInputs {
  int batch = 1;
  int height = 1;
  int width = 1;
  std::vector<double> t_norm;  // one per batch element, diffusion step / T
  double nca_step_norm = 0.0;  // NCA step index / step count
  PositionMode position = PositionMode::Stretched;

  static double normalized_coord(int i, int n) { return n > 1 ? -1.0 + 2.0 * i / (n - 1) : 0.0; }

  double pos_x(int x) const { return position == PositionMode::Disabled ? 0.0 : normalized_coord(x, width); }
  double pos_y(int y) const { return position == PositionMode::Disabled ? 0.0 : normalized_coord(y, height); }
};

/// Encoded scalars for every cell: rows ordered (b, y, x), columns
/// [enc(x) | enc(y) | enc(t) | enc(step)].
template <class T> Mat<T> encode_inputs(const ConditioningInputs &in, int enc_dim) {
  if (static_cast<int>(in.t_norm.size()) != in.batch)
    throw ConfigError("conditioning: t_norm has " + std::to_string(in.t_norm.size()) + " entries for batch " +
                      std::to_string(in.batch));
  if (in.height < 1 || in.width < 1)
    throw ConfigError("conditioning: grid dims must be >= 1");
  const int width = kConditioningScalars * enc_dim;
  Mat<T> enc(static_cast<Eigen::Index>(in.batch) * in.height * in.width, width);
  std::vector<double> xs(static_cast<std::size_t>(in.width) * enc_dim), ys(static_cast<std::size_t>(in.height) * enc_dim);
  for (int x = 0; x < in.width; ++x)
    encode_scalar(in.pos_x(x), enc_dim, &xs[static_cast<std::size_t>(x) * enc_dim]);
  for (int y = 0; y < in.height; ++y)
    encode_scalar(in.pos_y(y), enc_dim, &ys[static_cast<std::size_t>(y) * enc_dim]);
  std::vector<double> step(static_cast<std::size_t>(enc_dim)), tt(static_cast<std::size_t>(enc_dim));
  encode_scalar(in.nca_step_norm, enc_dim, step.data());
  Eigen::Index row = 0;
  for (int b = 0; b < in.batch; ++b) {
    encode_scalar(in.t_norm[b], enc_dim, tt.data());
    for (int y = 0; y < in.height; ++y)
      for (int x = 0; x < in.width; ++x, ++row) {
        for (int k = 0; k < enc_dim; ++k) {
          enc(row, k) = static_cast<T>(xs[static_cast<std::size_t>(x) * enc_dim + k]);
          enc(row, enc_dim + k) = static_cast<T>(ys[static_cast<std::size_t>(y) * enc_dim + k]);
          enc(row, 2 * enc_dim + k) = static_cast<T>(tt[k]);
          enc(row, 3 * enc_dim + k) = static_cast<T>(step[k]);
        }
      }
  }
  return enc;
}

namespace detail {

template <class T> inline T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }

// Array form lets Eigen vectorise exp.
template <class T> Mat<T> sigmoid(const Mat<T> &x) { return ((-x.array()).exp() + T(1)).inverse().matrix(); }

template <class T> Mat<T> silu(const Mat<T> &x) { return (x.array() * sigmoid(x).array()).matrix(); }

/// d silu(x) / dx applied to an upstream gradient.
template <class T> Mat<T> silu_backward(const Mat<T> &x, const Mat<T> &grad) {
  const Mat<T> s = sigmoid(x);
  return (grad.array() * s.array() * (T(1) + x.array() * (T(1) - s.array()))).matrix();
}

template <class T> Mat<T> linear(const Linear<T> &l, const Mat<T> &x) {
  // bias first, then accumulate: skips the zero fill a plain GEMM assignment does
  Mat<T> y = l.bias.replicate(x.rows(), 1);
  y.noalias() += x * l.weight.transpose();
  return y;
}

/// Accumulates weight/bias gradients of y = x W^T + b and returns dx.
template <class T> Mat<T> linear_backward(const Linear<T> &l, const Mat<T> &x, const Mat<T> &dy, Linear<T> &grad) {
  grad.weight.noalias() += dy.transpose() * x;
  grad.bias.noalias() += dy.colwise().sum();
  Mat<T> dx(dy.rows(), l.in());
  dx.noalias() = dy * l.weight;
  return dx;
}

template <class T> void linear_backward_no_input(const Mat<T> &x, const Mat<T> &dy, Linear<T> &grad) {
  grad.weight.noalias() += dy.transpose() * x;
  grad.bias.noalias() += dy.colwise().sum();
}

} // namespace detail

/// Two-layer pointwise MLP with SiLU: used both for the embedding map and for
/// the multiplicative conditioning blocks.
template <class T> struct MlpCache {
  Mat<T> pre; // first layer pre-activation
  Mat<T> sig; // sigmoid(pre), kept so backward needs no exp
  Mat<T> out;
};

template <class T> MlpCache<T> mlp_forward(const Linear<T> &first, const Linear<T> &second, const Mat<T> &x) {
  MlpCache<T> c;
  c.pre = detail::linear(first, x);
  c.sig = detail::sigmoid(c.pre);
  c.out = detail::linear(second, (c.pre.array() * c.sig.array()).matrix().eval());
  return c;
}

/// Backward through mlp_forward. Returns dx when `want_input_grad` is set.
template <class T>
Mat<T> mlp_backward(const Linear<T> &first, const Linear<T> &second, const Mat<T> &x, const MlpCache<T> &c,
                    const Mat<T> &dout, Linear<T> &gfirst, Linear<T> &gsecond, bool want_input_grad) {
  const Mat<T> act = (c.pre.array() * c.sig.array()).matrix();
  const Mat<T> dact = detail::linear_backward(second, act, dout, gsecond);
  const Mat<T> dpre = (dact.array() * c.sig.array() * (T(1) + c.pre.array() * (T(1) - c.sig.array()))).matrix();
  if (!want_input_grad) {
    detail::linear_backward_no_input(x, dpre, gfirst);
    return {};
  }
  return detail::linear_backward(first, x, dpre, gfirst);
}

/// Per-cell embedding e as a [B, e_dim, H, W] tensor.
template <class T>
Tensor4<T> build_embedding_map(const ConditioningInputs &in, const CellRuleParams<T> &params) {
  const Mat<T> enc = encode_inputs<T>(in, params.config.enc_dim);
  const Mat<T> e = mlp_forward(params.embed0, params.embed1, enc).out;
  Tensor4<T> out(in.batch, params.config.e_dim, in.height, in.width);
  Eigen::Index row = 0;
  for (int b = 0; b < in.batch; ++b)
    for (int y = 0; y < in.height; ++y)
      for (int x = 0; x < in.width; ++x, ++row)
        for (int c = 0; c < params.config.e_dim; ++c)
          out(b, c, y, x) = e(row, c);
  return out;
}

enum class CondBlock { Concat, Hidden };

/// Multiplier produced by a conditioning block from a [B, e_dim, H, W] map:
/// [B, concat_dim, H, W] for CondBlock::Concat and [B, h, H, W] for Hidden.
template <class T> Tensor4<T> cond_scale(const Tensor4<T> &e, const CellRuleParams<T> &params, CondBlock block) {
  if (e.channels() != params.config.e_dim)
    throw ConfigError("cond_scale: embedding has " + std::to_string(e.channels()) + " channels, expected " +
                      std::to_string(params.config.e_dim));
  Mat<T> rows(static_cast<Eigen::Index>(e.batch()) * e.height() * e.width(), e.channels());
  Eigen::Index row = 0;
  for (int b = 0; b < e.batch(); ++b)
    for (int y = 0; y < e.height(); ++y)
      for (int x = 0; x < e.width(); ++x, ++row)
        for (int c = 0; c < e.channels(); ++c)
          rows(row, c) = e(b, c, y, x);
  const auto &a = block == CondBlock::Concat ? params.cond0a : params.cond1a;
  const auto &s = block == CondBlock::Concat ? params.cond0b : params.cond1b;
  const Mat<T> m = mlp_forward(a, s, rows).out;
  Tensor4<T> out(e.batch(), static_cast<int>(m.cols()), e.height(), e.width());
  row = 0;
  for (int b = 0; b < e.batch(); ++b)
    for (int y = 0; y < e.height(); ++y)
      for (int x = 0; x < e.width(); ++x, ++row)
        for (int c = 0; c < out.channels(); ++c)
          out(b, c, y, x) = m(row, c);
  return out;
}

} // namespace ncadiff
