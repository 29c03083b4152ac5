#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "errors.hpp"
#include "rng.hpp"

namespace ncadiff {

template <class T> using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T> using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

inline constexpr int kImageChannels = 3;
inline constexpr int kNoiseChannels = 3;
/// Scalars fed to the sinusoidal embedding: x, y, diffusion step, NCA step.
inline constexpr int kConditioningScalars = 4;

/// Layer widths of one NCA branch.
struct BranchConfig {
  int channels = 96;     // state channels C of this branch
  int hidden = 512;      // h
  int e_dim = 4;         // embedding output channels
  int enc_dim = 4;       // sinusoidal features per conditioning scalar
  int cond_hidden = 128; // width inside the multiplicative conditioning blocks
  int embed_hidden = 256;

  int perceive_in() const { return channels + e_dim; }
  int concat_dim() const { return 2 * channels + e_dim; }
  int embed_in() const { return kConditioningScalars * enc_dim; }

  void validate() const {
    if (channels < 1 || hidden < 1 || e_dim < 1 || cond_hidden < 1 || embed_hidden < 1)
      throw ConfigError("branch: widths must be positive");
    if (enc_dim < 1 || (enc_dim > 1 && enc_dim % 2 != 0))
      throw ConfigError("branch: enc_dim must be 1 or even");
  }
};

/// Learnable tensors of a pointwise layer: weight [out, in] and bias [out].
template <class T> struct Linear {
  Mat<T> weight;
  RowVec<T> bias;

  Linear() = default;
  Linear(int out, int in) : weight(Mat<T>::Zero(out, in)), bias(RowVec<T>::Zero(out)) {}
  int in() const { return static_cast<int>(weight.cols()); }
  int out() const { return static_cast<int>(weight.rows()); }
};

/// All learnable weights of one NCA branch.
///
/// The perceive kernel is stored tap-major: weight row o holds the 3x3 taps
/// in (ky, kx) order, each tap contributing `perceive_in()` consecutive input
/// channels. The shape reported for it is therefore [C, 3, 3, C + e_dim].
template <class T> struct CellRuleParams {
  BranchConfig config;
  Linear<T> perceive; // [C, 9 * (C + e)]
  Linear<T> fc0;      // [h, 2C + e]
  Linear<T> fc1;      // [C, h]
  RowVec<T> norm_scale, norm_shift;
  Linear<T> embed0, embed1; // [256, 4 * enc], [e, 256]
  Linear<T> cond0a, cond0b; // [128, e], [2C + e, 128]
  Linear<T> cond1a, cond1b; // [128, e], [h, 128]

  CellRuleParams() = default;
  explicit CellRuleParams(const BranchConfig &cfg) : config(cfg) {
    cfg.validate();
    const int c = cfg.channels, h = cfg.hidden, e = cfg.e_dim;
    perceive = Linear<T>(c, 9 * cfg.perceive_in());
    fc0 = Linear<T>(h, cfg.concat_dim());
    fc1 = Linear<T>(c, h);
    norm_scale = RowVec<T>::Ones(h);
    norm_shift = RowVec<T>::Zero(h);
    embed0 = Linear<T>(cfg.embed_hidden, cfg.embed_in());
    embed1 = Linear<T>(e, cfg.embed_hidden);
    cond0a = Linear<T>(cfg.cond_hidden, e);
    cond0b = Linear<T>(cfg.concat_dim(), cfg.cond_hidden);
    cond1a = Linear<T>(cfg.cond_hidden, e);
    cond1b = Linear<T>(h, cfg.cond_hidden);
  }

  /// Same shapes, every entry zero. Used for gradient accumulators.
  CellRuleParams zeros_like() const {
    CellRuleParams z(config);
    z.norm_scale.setZero();
    return z;
  }

  /// Calls f(name, data pointer, element count, shape) for every tensor, in
  /// a fixed order.
  template <class F> void for_each(F &&f) { visit(*this, f); }
  template <class F> void for_each(F &&f) const { visit(*this, f); }

  std::int64_t count() const {
    std::int64_t n = 0;
    for_each([&](const std::string &, const T *, std::size_t size, const std::vector<int> &) {
      n += static_cast<std::int64_t>(size);
    });
    return n;
  }

private:
  template <class Self, class F> static void visit(Self &self, F &f) {
    const auto &cfg = self.config;
    const int pin = cfg.perceive_in();
    auto lin = [&](const std::string &name, auto &layer, std::vector<int> wshape) {
      f(name + ".weight", layer.weight.data(), static_cast<std::size_t>(layer.weight.size()), wshape);
      f(name + ".bias", layer.bias.data(), static_cast<std::size_t>(layer.bias.size()),
        std::vector<int>{layer.out()});
    };
    lin("perceive", self.perceive, {cfg.channels, 3, 3, pin});
    lin("fc0", self.fc0, {self.fc0.out(), self.fc0.in()});
    lin("fc1", self.fc1, {self.fc1.out(), self.fc1.in()});
    f(std::string("norm.scale"), self.norm_scale.data(), static_cast<std::size_t>(self.norm_scale.size()),
      std::vector<int>{cfg.hidden});
    f(std::string("norm.shift"), self.norm_shift.data(), static_cast<std::size_t>(self.norm_shift.size()),
      std::vector<int>{cfg.hidden});
    lin("embed.0", self.embed0, {self.embed0.out(), self.embed0.in()});
    lin("embed.2", self.embed1, {self.embed1.out(), self.embed1.in()});
    lin("cond0.0", self.cond0a, {self.cond0a.out(), self.cond0a.in()});
    lin("cond0.2", self.cond0b, {self.cond0b.out(), self.cond0b.in()});
    lin("cond1.0", self.cond1a, {self.cond1a.out(), self.cond1a.in()});
    lin("cond1.2", self.cond1b, {self.cond1b.out(), self.cond1b.in()});
  }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias, unit
/// norm scale, zero norm shift. When `zero_output` is set the final fc1 layer
/// starts at zero so the untrained rule is the identity map.
template <class T>
void init_params(CellRuleParams<T> &p, std::uint64_t seed, std::uint64_t branch_key, bool zero_output = true) {
  Stream rng(seed, StreamTag::Init, {branch_key});
  auto fill = [&](Linear<T> &layer) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in()));
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i)
      layer.weight.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i)
      layer.bias[i] = static_cast<T>(rng.uniform(-bound, bound));
  };
  fill(p.perceive);
  fill(p.fc0);
  fill(p.fc1);
  fill(p.embed0);
  fill(p.embed1);
  fill(p.cond0a);
  fill(p.cond0b);
  fill(p.cond1a);
  fill(p.cond1b);
  p.norm_scale.setOnes();
  p.norm_shift.setZero();
  if (zero_output) {
    p.fc1.weight.setZero();
    p.fc1.bias.setZero();
  }
}

template <class U, class T> CellRuleParams<U> cast_params(const CellRuleParams<T> &src) {
  CellRuleParams<U> out(src.config);
  std::vector<const T *> ptrs;
  src.for_each([&](const std::string &, const T *d, std::size_t, const std::vector<int> &) { ptrs.push_back(d); });
  std::size_t i = 0;
  out.for_each([&](const std::string &, U *d, std::size_t n, const std::vector<int> &) {
    for (std::size_t k = 0; k < n; ++k)
      d[k] = static_cast<U>(ptrs[i][k]);
    ++i;
  });
  return out;
}

} // namespace ncadiff
