#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"

namespace ncadiff {

/// Dense 4-D tensor in [batch, channel, height, width] order.
template <class T> class Tensor4 {
public:
  Tensor4() = default;
  Tensor4(int b, int c, int h, int w, T fill = T(0)) : shape_{b, c, h, w} {
    if (b < 0 || c < 0 || h < 0 || w < 0)
      throw ConfigError("Tensor4: negative extent");
    data_.assign(static_cast<std::size_t>(b) * c * h * w, fill);
  }

  int batch() const { return shape_[0]; }
  int channels() const { return shape_[1]; }
  int height() const { return shape_[2]; }
  int width() const { return shape_[3]; }
  const std::array<int, 4> &shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(shape_[2]) * shape_[3]; }

  std::size_t index(int b, int c, int y, int x) const {
    return ((static_cast<std::size_t>(b) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }
  T &operator()(int b, int c, int y, int x) { return data_[index(b, c, y, x)]; }
  const T &operator()(int b, int c, int y, int x) const { return data_[index(b, c, y, x)]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T> &storage() { return data_; }
  const std::vector<T> &storage() const { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor4 &o) const { return shape_ == o.shape_ && data_ == o.data_; }

  template <class U> Tensor4<U> cast() const {
    Tensor4<U> out(shape_[0], shape_[1], shape_[2], shape_[3]);
    std::transform(data_.begin(), data_.end(), out.storage().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

private:
  std::array<int, 4> shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

/// An image batch [B,3,H,W] sliced out of a larger channel stack.
template <class T> Tensor4<T> slice_channels(const Tensor4<T> &src, int first, int count) {
  if (first < 0 || first + count > src.channels())
    throw ConfigError("slice_channels: channel range out of bounds");
  Tensor4<T> out(src.batch(), count, src.height(), src.width());
  const auto plane = src.plane();
  for (int b = 0; b < src.batch(); ++b)
    for (int c = 0; c < count; ++c)
      std::copy_n(&src(b, first + c, 0, 0), plane, &out(b, c, 0, 0));
  return out;
}

template <class T> void assign_channels(Tensor4<T> &dst, int first, const Tensor4<T> &src) {
  if (src.batch() != dst.batch() || src.height() != dst.height() || src.width() != dst.width() ||
      first < 0 || first + src.channels() > dst.channels())
    throw ConfigError("assign_channels: shape mismatch");
  const auto plane = dst.plane();
  for (int b = 0; b < dst.batch(); ++b)
    for (int c = 0; c < src.channels(); ++c)
      std::copy_n(&src(b, c, 0, 0), plane, &dst(b, first + c, 0, 0));
}

inline std::string shape_string(const std::array<int, 4> &s) {
  return "[" + std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]) +
         "," + std::to_string(s[3]) + "]";
}

} // namespace ncadiff
