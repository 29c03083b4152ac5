#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "fourier.hpp"
#include "nca.hpp"
#include "params.hpp"

namespace ncadiff {

enum class ModelKind { Diff, FourierDiff };

/// Architecture and rollout settings shared by training and sampling.
struct ModelConfig {
  ModelKind kind = ModelKind::FourierDiff;
  int channels = 96; // c, image branch state channels
  int hidden = 512;  // h
  int steps = 20;    // s, image-space NCA steps
  int fourier_steps = 32;
  int fourier_window = 16;
  WindowAnchor anchor = WindowAnchor::Centered;
  int e_dim = 4;
  int enc_dim = 4;
  double fire_rate = 0.9;
  Padding padding = Padding::Reflect;
  Padding fourier_padding = Padding::Zero;
  PositionMode position = PositionMode::Stretched;

  BranchConfig image_branch() const {
    BranchConfig b;
    b.channels = channels;
    b.hidden = hidden;
    b.e_dim = e_dim;
    b.enc_dim = enc_dim;
    return b;
  }

  BranchConfig fourier_branch() const {
    BranchConfig b = image_branch();
    b.channels = 2 * channels;
    return b;
  }

  void validate() const {
    if (channels < kImageChannels + kNoiseChannels)
      throw ConfigError("model.c must be >= 6, got " + std::to_string(channels));
    if (hidden < 1)
      throw ConfigError("model.h must be >= 1");
    if (steps < 1)
      throw ConfigError("model.s must be >= 1");
    if (kind == ModelKind::FourierDiff && (fourier_steps < 1 || fourier_window < 1))
      throw ConfigError("model.fourier_steps and model.fourier_window must be >= 1");
    if (!(fire_rate > 0.0 && fire_rate <= 1.0))
      throw ConfigError("model.fire_rate must lie in (0, 1]");
    image_branch().validate();
  }
};

/// Diff-NCA (image rule only) or FourierDiff-NCA (image + Fourier rule).
template <class T> struct Model {
  ModelConfig config;
  CellRuleParams<T> image;
  std::optional<CellRuleParams<T>> fourier;

  Model() = default;
  explicit Model(const ModelConfig &cfg) : config(cfg), image(cfg.image_branch()) {
    cfg.validate();
    if (cfg.kind == ModelKind::FourierDiff)
      fourier.emplace(cfg.fourier_branch());
  }

  static Model initialized(const ModelConfig &cfg, std::uint64_t seed) {
    Model m(cfg);
    init_params(m.image, seed, 0);
    if (m.fourier)
      init_params(*m.fourier, seed, 1);
    return m;
  }

  Model zeros_like() const {
    Model z;
    z.config = config;
    z.image = image.zeros_like();
    if (fourier)
      z.fourier = fourier->zeros_like();
    return z;
  }

  /// Visits every tensor with a branch-qualified name ("image.fc0.weight").
  template <class F> void for_each(F &&f) { visit(*this, f); }
  template <class F> void for_each(F &&f) const { visit(*this, f); }

  std::int64_t count() const { return image.count() + (fourier ? fourier->count() : 0); }

private:
  template <class Self, class F> static void visit(Self &self, F &f) {
    self.image.for_each([&](const std::string &n, auto *d, std::size_t s, const std::vector<int> &shape) {
      f("image." + n, d, s, shape);
    });
    if (self.fourier)
      self.fourier->for_each([&](const std::string &n, auto *d, std::size_t s, const std::vector<int> &shape) {
        f("fourier." + n, d, s, shape);
      });
  }
};

/// Scalar count of all learnable tensors for a configuration.
inline std::int64_t count_parameters(const ModelConfig &cfg) {
  cfg.validate();
  std::int64_t n = CellRuleParams<float>(cfg.image_branch()).count();
  if (cfg.kind == ModelKind::FourierDiff)
    n += CellRuleParams<float>(cfg.fourier_branch()).count();
  return n;
}

template <class T> std::int64_t count_parameters(const CellRuleParams<T> &p) { return p.count(); }
template <class T> std::int64_t count_parameters(const Model<T> &m) { return m.count(); }

template <class U, class T> Model<U> cast_model(const Model<T> &m) {
  Model<U> out;
  out.config = m.config;
  out.image = cast_params<U>(m.image);
  if (m.fourier)
    out.fourier = cast_params<U>(*m.fourier);
  return out;
}

} // namespace ncadiff
