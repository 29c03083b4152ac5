#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <png.h>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace ncadiff {

using Image = Tensor4<float>; // [1, 3, H, W] in [-1, 1]

inline float byte_to_unit(std::uint8_t b) { return static_cast<float>(b) / 127.5f - 1.0f; }

inline std::uint8_t unit_to_byte(double x) {
  const double c = std::clamp(x, -1.0, 1.0);
  return static_cast<std::uint8_t>(std::lround((c + 1.0) * 127.5));
}

/// Loads any PNG as 8-bit RGB mapped to [-1, 1].
inline Image read_png(const std::filesystem::path &path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  Image out(1, 3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out(0, c, y, x) = byte_to_unit(buf[(static_cast<std::size_t>(y) * w + x) * 3 + c]);
  return out;
}

/// Writes batch element `b` as an 8-bit RGB PNG: clamp, round((x + 1) * 127.5).
template <class T> void write_png(const std::filesystem::path &path, const Tensor4<T> &image, int b = 0) {
  if (image.channels() != 3)
    throw ConfigError("write_png: expected 3 channels, got " + std::to_string(image.channels()));
  if (b < 0 || b >= image.batch())
    throw ConfigError("write_png: batch index out of range");
  const int h = image.height(), w = image.width();
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = static_cast<double>(image(b, c, y, x));
        if (!std::isfinite(v))
          throw ConfigError("write_png: non-finite pixel at (" + std::to_string(y) + "," + std::to_string(x) + ")");
        buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] = unit_to_byte(v);
      }
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
}

template <class T> void export_png(const Tensor4<T> &image, const std::filesystem::path &path) { write_png(path, image); }

enum class Split { Train = 0, Validation = 1, Test = 2 };

inline const char *split_name(Split s) {
  switch (s) {
  case Split::Train: return "train";
  case Split::Validation: return "val";
  case Split::Test: return "test";
  }
  return "?";
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Split membership from a hash of the item name, so adding items never
/// moves existing ones.
inline Split split_of(std::string_view name, const std::array<double, 3> &fractions) {
  const double u = static_cast<double>(splitmix64(fnv1a64(name)) >> 11) * 0x1.0p-53;
  if (u < fractions[0])
    return Split::Train;
  if (u < fractions[0] + fractions[1])
    return Split::Validation;
  return Split::Test;
}

enum class SyntheticKind { Blobs, BicolorHalves };

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::Blobs;
  int size = 16;
  int count = 256;
  std::uint64_t seed = 0;
};

struct DatasetSpec {
  std::optional<std::string> root;
  std::optional<SyntheticSpec> synthetic;
  int patch_size = 64;
  std::array<double, 3> split{0.8, 0.1, 0.1};
  std::optional<std::array<int, 2>> resize; // (height, width)
  std::optional<int> downscale_factor;

  void validate() const {
    if (root.has_value() == synthetic.has_value())
      throw ConfigError("data: exactly one of data.root and data.synthetic must be set");
    if (patch_size < 3)
      throw ConfigError("data.patch_size must be >= 3");
    for (double f : split)
      if (f < 0.0)
        throw ConfigError("data.split fractions must be non-negative");
    if (std::abs(split[0] + split[1] + split[2] - 1.0) > 1e-9)
      throw ConfigError("data.split must sum to 1");
    if (downscale_factor && *downscale_factor < 1)
      throw ConfigError("data.downscale_factor must be >= 1");
    if (resize && ((*resize)[0] < 1 || (*resize)[1] < 1))
      throw ConfigError("data.resize must be positive");
    if (synthetic && (synthetic->size < 3 || synthetic->count < 1))
      throw ConfigError("data.synthetic: size >= 3 and count >= 1 required");
  }
};

struct Dataset {
  std::vector<Image> images;
  std::vector<std::string> names;
  std::vector<Split> splits;
  int skipped = 0;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (splits[i] == s)
        out.push_back(i);
    return out;
  }
};

/// Integer-factor box filter downscale.
inline Image box_downscale(const Image &img, int factor) {
  if (factor < 1)
    throw ConfigError("box_downscale: factor must be >= 1");
  const int h = img.height() / factor, w = img.width() / factor;
  if (h < 1 || w < 1)
    throw ConfigError("box_downscale: image smaller than factor");
  Image out(1, 3, h, w);
  const float inv = 1.0f / static_cast<float>(factor * factor);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float s = 0.0f;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx)
            s += img(0, c, y * factor + dy, x * factor + dx);
        out(0, c, y, x) = s * inv;
      }
  return out;
}

/// Bilinear resize with half-pixel centers.
inline Image resize_bilinear(const Image &img, int h, int w) {
  Image out(1, 3, h, w);
  const double sy = static_cast<double>(img.height()) / h, sx = static_cast<double>(img.width()) / w;
  for (int y = 0; y < h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height() - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, img.height() - 1);
    const double ay = fy - y0;
    for (int x = 0; x < w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width() - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, img.width() - 1);
      const double ax = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = img(0, c, y0, x0) * (1 - ax) + img(0, c, y0, x1) * ax;
        const double bot = img(0, c, y1, x0) * (1 - ax) + img(0, c, y1, x1) * ax;
        out(0, c, y, x) = static_cast<float>(top * (1 - ay) + bot * ay);
      }
    }
  }
  return out;
}

/// Non-overlapping-by-default grid of patches, row-major.
inline std::vector<Image> extract_patches(const Image &img, int patch, int stride) {
  if (patch < 1 || stride < 1)
    throw ConfigError("extract_patches: patch and stride must be >= 1");
  std::vector<Image> out;
  for (int y = 0; y + patch <= img.height(); y += stride)
    for (int x = 0; x + patch <= img.width(); x += stride) {
      Image p(1, 3, patch, patch);
      for (int c = 0; c < 3; ++c)
        for (int dy = 0; dy < patch; ++dy)
          std::copy_n(&img(0, c, y + dy, x), patch, &p(0, c, dy, 0));
      out.push_back(std::move(p));
    }
  return out;
}

/// Copies a patch x patch crop at a uniformly random offset into `dst` at
/// batch index `b`.
inline void random_crop_into(const Image &img, int patch, Stream &rng, Tensor4<float> &dst, int b) {
  if (img.height() < patch || img.width() < patch)
    throw ConfigError("random_crop: image smaller than patch");
  const int y0 = static_cast<int>(rng.integer(0, img.height() - patch));
  const int x0 = static_cast<int>(rng.integer(0, img.width() - patch));
  for (int c = 0; c < 3; ++c)
    for (int dy = 0; dy < patch; ++dy)
      std::copy_n(&img(0, c, y0 + dy, x0), patch, &dst(b, c, dy, 0));
}

/// `batch` random crops drawn from the items of one split.
inline Tensor4<float> sample_batch(const Dataset &ds, Split split, int batch, int patch, Stream &rng) {
  const auto idx = ds.indices(split);
  if (idx.empty())
    throw ConfigError(std::string("dataset has no items in split ") + split_name(split));
  Tensor4<float> out(batch, 3, patch, patch);
  for (int b = 0; b < batch; ++b) {
    const auto i = idx[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(idx.size()) - 1))];
    random_crop_into(ds.images[i], patch, rng, out, b);
  }
  return out;
}

/// Stacks the first `count` items of a split (top-left patch crops) in order.
inline std::vector<Tensor4<float>> fixed_batches(const Dataset &ds, Split split, int batch, int patch, int batches) {
  const auto idx = ds.indices(split);
  if (idx.empty())
    throw ConfigError(std::string("dataset has no items in split ") + split_name(split));
  std::vector<Tensor4<float>> out;
  std::size_t k = 0;
  for (int i = 0; i < batches; ++i) {
    Tensor4<float> t(batch, 3, patch, patch);
    for (int b = 0; b < batch; ++b, ++k) {
      const auto &img = ds.images[idx[k % idx.size()]];
      if (img.height() < patch || img.width() < patch)
        throw ConfigError("fixed_batches: image smaller than patch");
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < patch; ++y)
          std::copy_n(&img(0, c, y, 0), patch, &t(b, c, y, 0));
    }
    out.push_back(std::move(t));
  }
  return out;
}

namespace detail {

inline Image make_blobs(int size, Stream &rng) {
  Image img(1, 3, size, size);
  std::array<double, 3> bg{};
  for (auto &c : bg)
    c = rng.uniform(0.0, 0.4);
  std::vector<double> px(static_cast<std::size_t>(3) * size * size);
  for (int c = 0; c < 3; ++c)
    std::fill_n(px.begin() + static_cast<std::ptrdiff_t>(c) * size * size, size * size, bg[c]);
  const int blobs = static_cast<int>(rng.integer(2, 5));
  for (int k = 0; k < blobs; ++k) {
    std::array<double, 3> col{};
    for (auto &c : col)
      c = rng.uniform();
    const double cy = rng.uniform(0.0, size), cx = rng.uniform(0.0, size);
    const double sigma = rng.uniform(size / 10.0, size / 4.0);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        const double a = std::exp(-d2 / (2.0 * sigma * sigma));
        for (int c = 0; c < 3; ++c) {
          auto &v = px[(static_cast<std::size_t>(c) * size + y) * size + x];
          v = v * (1.0 - a) + col[c] * a;
        }
      }
  }
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        img(0, c, y, x) =
            static_cast<float>(std::clamp(2.0 * px[(static_cast<std::size_t>(c) * size + y) * size + x] - 1.0, -1.0, 1.0));
  return img;
}

/// Left half a random color c, right half its complement 1 - c (in [0, 1]
/// terms), i.e. exactly the negated value after mapping to [-1, 1].
inline Image make_bicolor(int size, Stream &rng) {
  Image img(1, 3, size, size);
  for (int c = 0; c < 3; ++c) {
    const float left = static_cast<float>(2.0 * rng.uniform() - 1.0);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        img(0, c, y, x) = x < size / 2 ? left : -left;
  }
  return img;
}

} // namespace detail

inline Dataset make_synthetic(const SyntheticSpec &spec, const std::array<double, 3> &split = {0.8, 0.1, 0.1}) {
  if (spec.size < 3 || spec.count < 1)
    throw ConfigError("make_synthetic: size >= 3 and count >= 1 required");
  Dataset ds;
  for (int i = 0; i < spec.count; ++i) {
    Stream rng(spec.seed, StreamTag::Synthetic, {static_cast<std::uint64_t>(spec.kind), static_cast<std::uint64_t>(i)});
    ds.images.push_back(spec.kind == SyntheticKind::Blobs ? detail::make_blobs(spec.size, rng)
                                                           : detail::make_bicolor(spec.size, rng));
    char name[32];
    std::snprintf(name, sizeof name, "synthetic_%06d", i);
    ds.names.emplace_back(name);
    ds.splits.push_back(split_of(ds.names.back(), split));
  }
  return ds;
}

/// Scans `spec.root` recursively for .png files (lexicographic order),
/// applies the optional downscale/resize, and assigns splits by name hash.
inline Dataset ingest(const DatasetSpec &spec, std::ostream &warn = std::cerr) {
  spec.validate();
  if (spec.synthetic)
    return make_synthetic(*spec.synthetic, spec.split);
  const std::filesystem::path root(*spec.root);
  if (!std::filesystem::is_directory(root))
    throw IoError("dataset root is not a directory: " + root.string());
  std::vector<std::filesystem::path> files;
  for (const auto &entry : std::filesystem::recursive_directory_iterator(root))
    if (entry.is_regular_file() && entry.path().extension() == ".png")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  Dataset ds;
  for (const auto &f : files) {
    Image img;
    try {
      img = read_png(f);
    } catch (const IoError &e) {
      warn << "warning: skipping " << f.string() << ": " << e.what() << "\n";
      ++ds.skipped;
      continue;
    }
    if (spec.downscale_factor && *spec.downscale_factor > 1)
      img = box_downscale(img, *spec.downscale_factor);
    if (spec.resize)
      img = resize_bilinear(img, (*spec.resize)[0], (*spec.resize)[1]);
    if (img.height() < spec.patch_size || img.width() < spec.patch_size) {
      warn << "warning: skipping " << f.string() << ": smaller than patch size\n";
      ++ds.skipped;
      continue;
    }
    const auto rel = std::filesystem::relative(f, root).generic_string();
    ds.names.push_back(rel);
    ds.splits.push_back(split_of(rel, spec.split));
    ds.images.push_back(std::move(img));
  }
  if (ds.images.empty())
    throw IoError("dataset at " + root.string() + " contains no usable PNG files");
  return ds;
}

} // namespace ncadiff
