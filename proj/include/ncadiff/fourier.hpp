#pragma once

#include <cmath>
#include <complex>
#include <memory>
#include <mutex>
#include <vector>

#include <fftw3.h>

#include "nca.hpp"

namespace ncadiff {

/// Per-channel 2-D spectrum stored as interleaved planes: channel 2c holds the
/// real part and 2c + 1 the imaginary part of input channel c. The layout is
/// DC-centered (fftshift) when `shifted` is set.
template <class T> struct Spectrum {
  Tensor4<T> data;
  bool shifted = true;

  int source_channels() const { return data.channels() / 2; }
};

template <class T> struct FourierWindow {
  Tensor4<T> data; // [B, 2C, size, size]
  int row = 0, col = 0;
  int size() const { return data.height(); }
};

enum class WindowAnchor {
  Centered,   // block [N/2 - size/2, N/2 + size/2) around DC
  FromCenter, // block starting exactly at DC, [N/2, N/2 + size)
};

namespace detail {

inline std::mutex &fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

/// In-place batched 2-D complex DFT over `count` planes of h x w.
/// sign = FFTW_FORWARD (unnormalized) or FFTW_BACKWARD (unnormalized).
inline void fft_planes(std::vector<std::complex<double>> &buf, int count, int h, int w, int sign) {
  if (count == 0)
    return;
  auto *ptr = reinterpret_cast<fftw_complex *>(buf.data());
  int dims[2] = {h, w};
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan = fftw_plan_many_dft(2, dims, count, ptr, nullptr, 1, h * w, ptr, nullptr, 1, h * w, sign, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  std::lock_guard lock(fftw_planner_mutex());
  fftw_destroy_plan(plan);
}

/// Unshifted frequency index stored at shifted position i.
inline int unshift(int i, int n) { return ((i - n / 2) % n + n) % n; }
/// Shifted position of the conjugate partner of shifted position i.
inline int mirror_shifted(int i, int n) { return ((2 * (n / 2) - i) % n + n) % n; }

template <class T>
std::vector<std::complex<double>> planes_from_tensor(const Tensor4<T> &x) {
  std::vector<std::complex<double>> buf(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    buf[i] = static_cast<double>(x.storage()[i]);
  return buf;
}

} // namespace detail

/// Per-channel 2-D DFT (unnormalized), returned in DC-centered layout.
template <class T> Spectrum<T> fft2(const Tensor4<T> &x) {
  const int b = x.batch(), c = x.channels(), h = x.height(), w = x.width();
  auto buf = detail::planes_from_tensor(x);
  detail::fft_planes(buf, b * c, h, w, FFTW_FORWARD);
  Spectrum<T> s{Tensor4<T>(b, 2 * c, h, w), true};
  for (int bi = 0; bi < b; ++bi)
    for (int ci = 0; ci < c; ++ci) {
      const std::size_t base = (static_cast<std::size_t>(bi) * c + ci) * h * w;
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const auto &v = buf[base + static_cast<std::size_t>(detail::unshift(i, h)) * w + detail::unshift(j, w)];
          s.data(bi, 2 * ci, i, j) = static_cast<T>(v.real());
          s.data(bi, 2 * ci + 1, i, j) = static_cast<T>(v.imag());
        }
    }
  return s;
}

template <class T> struct InverseResultT {
  Tensor4<T> image;
  /// Largest |imaginary part| of the inverse transform that was discarded.
  double max_imag_residue = 0.0;
};

/// Inverse of fft2 (1/(HW) normalization); keeps the real part and reports
/// the discarded imaginary residue.
template <class T> InverseResultT<T> ifft2_real(const Spectrum<T> &spec) {
  if (!spec.shifted)
    throw ConfigError("ifft2_real: expects a DC-centered spectrum");
  const int b = spec.data.batch(), c = spec.source_channels(), h = spec.data.height(), w = spec.data.width();
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(b) * c * h * w);
  for (int bi = 0; bi < b; ++bi)
    for (int ci = 0; ci < c; ++ci) {
      const std::size_t base = (static_cast<std::size_t>(bi) * c + ci) * h * w;
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          buf[base + static_cast<std::size_t>(detail::unshift(i, h)) * w + detail::unshift(j, w)] = {
              static_cast<double>(spec.data(bi, 2 * ci, i, j)), static_cast<double>(spec.data(bi, 2 * ci + 1, i, j))};
    }
  detail::fft_planes(buf, b * c, h, w, FFTW_BACKWARD);
  InverseResultT<T> out{Tensor4<T>(b, c, h, w), 0.0};
  const double norm = 1.0 / (static_cast<double>(h) * w);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    out.image.storage()[i] = static_cast<T>(buf[i].real() * norm);
    out.max_imag_residue = std::max(out.max_imag_residue, std::abs(buf[i].imag() * norm));
  }
  return out;
}

/// Top-left corner of a size x size window inside an h x w shifted spectrum.
inline std::pair<int, int> window_origin(int h, int w, int size, WindowAnchor anchor) {
  if (size < 1 || size > std::min(h, w))
    throw ConfigError("fourier window of size " + std::to_string(size) + " does not fit a " + std::to_string(h) +
                      "x" + std::to_string(w) + " spectrum");
  std::pair<int, int> o = anchor == WindowAnchor::Centered ? std::pair{h / 2 - size / 2, w / 2 - size / 2}
                                                             : std::pair{h / 2, w / 2};
  if (o.first + size > h || o.second + size > w)
    throw ConfigError("fourier window of size " + std::to_string(size) + " anchored at DC overruns the spectrum");
  return o;
}

template <class T>
FourierWindow<T> extract_window(const Spectrum<T> &spec, int size = 16, WindowAnchor anchor = WindowAnchor::Centered) {
  const auto [r0, c0] = window_origin(spec.data.height(), spec.data.width(), size, anchor);
  FourierWindow<T> win{Tensor4<T>(spec.data.batch(), spec.data.channels(), size, size), r0, c0};
  for (int b = 0; b < spec.data.batch(); ++b)
    for (int ch = 0; ch < spec.data.channels(); ++ch)
      for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j)
          win.data(b, ch, i, j) = spec.data(b, ch, r0 + i, c0 + j);
  return win;
}

/// Replaces the window's coefficients. With `enforce_symmetry`, conjugate
/// partners are made consistent afterwards: pairs inside the window are
/// averaged, partners outside it are overwritten, self-conjugate bins lose
/// their imaginary part.
template <class T>
Spectrum<T> write_window(const Spectrum<T> &spec, const FourierWindow<T> &win, bool enforce_symmetry = false) {
  if (win.data.batch() != spec.data.batch() || win.data.channels() != spec.data.channels())
    throw ConfigError("write_window: window batch/channels do not match spectrum");
  const int h = spec.data.height(), w = spec.data.width(), n = win.size();
  if (win.row < 0 || win.col < 0 || win.row + n > h || win.col + n > w)
    throw ConfigError("write_window: window origin (" + std::to_string(win.row) + "," + std::to_string(win.col) +
                      ") does not match this spectrum");
  Spectrum<T> out = spec;
  for (int b = 0; b < spec.data.batch(); ++b)
    for (int ch = 0; ch < spec.data.channels(); ++ch)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          out.data(b, ch, win.row + i, win.col + j) = win.data(b, ch, i, j);
  if (!enforce_symmetry)
    return out;
  auto inside = [&](int i, int j) { return i >= win.row && i < win.row + n && j >= win.col && j < win.col + n; };
  for (int b = 0; b < spec.data.batch(); ++b)
    for (int ch = 0; ch < spec.source_channels(); ++ch)
      for (int i = win.row; i < win.row + n; ++i)
        for (int j = win.col; j < win.col + n; ++j) {
          const int mi = detail::mirror_shifted(i, h), mj = detail::mirror_shifted(j, w);
          T &re = out.data(b, 2 * ch, i, j);
          T &im = out.data(b, 2 * ch + 1, i, j);
          T &mre = out.data(b, 2 * ch, mi, mj);
          T &mim = out.data(b, 2 * ch + 1, mi, mj);
          if (mi == i && mj == j) {
            im = T(0);
          } else if (!inside(mi, mj)) {
            mre = re;
            mim = -im;
          } else if (std::make_pair(i, j) < std::make_pair(mi, mj)) {
            const T avg_re = (re + mre) / T(2), avg_im = (im - mim) / T(2);
            re = avg_re;
            im = avg_im;
            mre = avg_re;
            mim = -avg_im;
          }
        }
  return out;
}

template <class T> struct LowpassResult {
  Tensor4<T> image;
  double kept_fraction = 0.0;
};

/// Keeps only the centered keep x keep block of each channel's spectrum.
template <class T> LowpassResult<T> lowpass_preview(const Tensor4<T> &image, int keep = 16) {
  auto spec = fft2(image);
  const int h = image.height(), w = image.width();
  const auto [r0, c0] = window_origin(h, w, keep, WindowAnchor::Centered);
  for (int b = 0; b < spec.data.batch(); ++b)
    for (int ch = 0; ch < spec.data.channels(); ++ch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          if (i < r0 || i >= r0 + keep || j < c0 || j >= c0 + keep)
            spec.data(b, ch, i, j) = T(0);
  return {ifft2_real(spec).image, static_cast<double>(keep) * keep / (static_cast<double>(h) * w)};
}

struct FourierStageOptions {
  int steps = 32;
  int window = 16;
  WindowAnchor anchor = WindowAnchor::Centered;
  double fire_rate = 0.9;
  Padding padding = Padding::Zero;
  std::vector<double> t_norm;
  FireKey fire_key;
  std::function<FireMask(int step)> fire_override;
};

/// Activations of a Fourier stage needed to differentiate through it.
template <class T> struct FourierTape {
  RolloutTape<T> rollout;
  int batch = 0, channels = 0, height = 0, width = 0;
  int row = 0, col = 0, window = 0;
};

/// Global-communication stage. The noisy image is seeded into a full state,
/// transformed, and the low-frequency window (scaled by 1/sqrt(HW) so white
/// noise keeps unit variance) becomes the state of the Fourier-branch rule.
/// After `steps` updates the window is written back, transformed to image
/// space, and the image channels are reset to the exact noisy input.
template <class T>
StateGrid<T> fourier_stage(const Tensor4<T> &noisy_image, const CellRuleParams<T> &fourier_rule, int image_channels,
                           const FourierStageOptions &opt, FourierTape<T> *tape = nullptr) {
  if (fourier_rule.config.channels != 2 * image_channels)
    throw ConfigError("fourier_stage: Fourier rule must have 2*C = " + std::to_string(2 * image_channels) +
                      " channels, has " + std::to_string(fourier_rule.config.channels));
  const auto seed = seed_state(noisy_image, image_channels);
  const int b = seed.batch(), h = seed.height(), w = seed.width();
  const double scale = std::sqrt(static_cast<double>(h) * w);

  // Only the image channels of the seed are nonzero.
  const auto image_spec = fft2(noisy_image);
  Spectrum<T> spec{Tensor4<T>(b, 2 * image_channels, h, w), true};
  assign_channels(spec.data, 0, image_spec.data);

  auto win = extract_window(spec, opt.window, opt.anchor);
  Mat<T> rows = detail::to_rows(win.data) / static_cast<T>(scale);

  RolloutOptions ro;
  ro.steps = opt.steps;
  ro.fire_rate = opt.fire_rate;
  ro.padding = opt.padding;
  ro.position = PositionMode::Stretched;
  ro.t_norm = opt.t_norm;
  ro.fire_key = opt.fire_key;
  ro.fire_override = opt.fire_override;
  ro.stage = "fourier-stage";
  RolloutTape<T> *rtape = tape ? &tape->rollout : nullptr;
  rows = rollout_rows(std::move(rows), fourier_rule, b, opt.window, opt.window, ro, rtape);
  win.data = detail::from_rows(Mat<T>(rows * static_cast<T>(scale)), b, opt.window, opt.window);

  auto out = ifft2_real(write_window(spec, win)).image;
  assign_channels(out, 0, noisy_image);
  if (!out.all_finite())
    throw NumericError("fourier-stage", opt.steps, "non-finite state after inverse transform");
  if (tape) {
    tape->batch = b;
    tape->channels = image_channels;
    tape->height = h;
    tape->width = w;
    tape->row = win.row;
    tape->col = win.col;
    tape->window = opt.window;
  }
  return out;
}

/// Backward through fourier_stage given the gradient w.r.t. its output state.
/// The image channels are overwritten by the stage, so they carry no
/// gradient. The adjoint of Re(ifft2(.)) restricted to the window is
/// fft2(.) / (HW), which combined with the window scaling gives
/// fft2(g) / sqrt(HW).
template <class T>
void fourier_stage_backward(const CellRuleParams<T> &fourier_rule, const FourierTape<T> &tape,
                            const Tensor4<T> &dstate, CellRuleParams<T> &grad) {
  Tensor4<T> g = dstate;
  for (int bi = 0; bi < g.batch(); ++bi)
    for (int c = 0; c < kImageChannels; ++c)
      std::fill_n(&g(bi, c, 0, 0), g.plane(), T(0));
  const auto gspec = fft2(g);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(tape.height) * tape.width);
  Tensor4<T> dwin(tape.batch, 2 * tape.channels, tape.window, tape.window);
  for (int bi = 0; bi < tape.batch; ++bi)
    for (int ch = 0; ch < dwin.channels(); ++ch)
      for (int i = 0; i < tape.window; ++i)
        for (int j = 0; j < tape.window; ++j)
          dwin(bi, ch, i, j) = static_cast<T>(gspec.data(bi, ch, tape.row + i, tape.col + j) * inv_scale);
  rollout_backward(fourier_rule, tape.rollout, detail::to_rows(dwin), grad);
}

} // namespace ncadiff
