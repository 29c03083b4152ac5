#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ncadiff {

/// Invalid shapes, configuration values or preconditions.
class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite value produced inside a rollout. Carries the NCA step index and
/// the stage that produced it ("image", "fourier-stage", "loss", ...).
class NumericError : public std::runtime_error {
public:
  NumericError(std::string stage, int step, const std::string &what)
      : std::runtime_error(stage + " step " + std::to_string(step) + ": " + what),
        stage_(std::move(stage)), step_(step) {}

  const std::string &stage() const noexcept { return stage_; }
  int step() const noexcept { return step_; }

private:
  std::string stage_;
  int step_;
};

class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A request whose estimated working set exceeds the configured limit. Raised
/// before any allocation happens.
class ResourceError : public std::runtime_error {
public:
  ResourceError(std::size_t requested, std::size_t limit)
      : std::runtime_error("sized request of " + std::to_string(requested) + " bytes exceeds limit of " +
                           std::to_string(limit) + " bytes"),
        requested_(requested), limit_(limit) {}

  std::size_t requested() const noexcept { return requested_; }
  std::size_t limit() const noexcept { return limit_; }

private:
  std::size_t requested_, limit_;
};

class CheckpointError : public std::runtime_error {
public:
  enum class Kind { CorruptManifest, Truncated, VersionMismatch, ShapeMismatch };

  CheckpointError(Kind kind, const std::string &what)
      : std::runtime_error(std::string(kind_name(kind)) + ": " + what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

  static const char *kind_name(Kind k) {
    switch (k) {
    case Kind::CorruptManifest: return "corrupt manifest";
    case Kind::Truncated: return "truncated payload";
    case Kind::VersionMismatch: return "version mismatch";
    case Kind::ShapeMismatch: return "shape mismatch";
    }
    return "checkpoint error";
  }

private:
  Kind kind_;
};

} // namespace ncadiff
