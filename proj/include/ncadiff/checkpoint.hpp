#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "trainer.hpp"

namespace ncadiff {

// Layout:
//   8 bytes   magic "NCADIFF1"
//   8 bytes   header length L, little-endian u64
//   L bytes   JSON header {format_version, payload_bytes, tensors[], metadata}
//   payload   little-endian f32, tensors at their byte_offset
inline constexpr char kCheckpointMagic[] = "NCADIFF1";
inline constexpr int kCheckpointVersion = 1;

struct TensorEntry {
  std::string name;
  std::vector<int> shape;
  std::uint64_t byte_offset = 0;
  std::uint64_t count = 0;
};

/// A loaded checkpoint before it is bound to a model structure.
struct CheckpointFile {
  std::vector<TensorEntry> manifest;
  std::vector<float> payload; // element i at byte offset 4 * i
  json metadata;

  const TensorEntry *find(const std::string &name) const {
    for (const auto &e : manifest)
      if (e.name == name)
        return &e;
    return nullptr;
  }
};

namespace detail {

inline void put_u64(std::string &out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const unsigned char *p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f32(std::string &out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline float get_f32(const unsigned char *p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i)
    bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

} // namespace detail

/// Serializes named f32 tensors plus metadata; written to a temporary file
/// and renamed into place.
class CheckpointWriter {
public:
  void add(const std::string &name, const float *data, std::size_t count, const std::vector<int> &shape) {
    TensorEntry e{name, shape, static_cast<std::uint64_t>(payload_.size()) * 4, count};
    entries_.push_back(e);
    payload_.insert(payload_.end(), data, data + count);
  }

  template <class T> void add_model(const std::string &prefix, const Model<T> &m) {
    static_assert(std::is_same_v<T, float>, "checkpoints store f32");
    m.for_each([&](const std::string &n, const float *d, std::size_t c, const std::vector<int> &s) {
      add(prefix + n, d, c, s);
    });
  }

  void write(const std::filesystem::path &path, const json &metadata) const {
    json tensors = json::array();
    for (const auto &e : entries_)
      tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"dtype", "f32"}, {"byte_offset", e.byte_offset}});
    const json header{{"format_version", kCheckpointVersion},
                      {"payload_bytes", payload_.size() * 4},
                      {"tensors", tensors},
                      {"metadata", metadata}};
    const std::string hs = header.dump();
    std::string bytes(kCheckpointMagic, 8);
    detail::put_u64(bytes, hs.size());
    bytes += hs;
    bytes.reserve(bytes.size() + payload_.size() * 4);
    for (float f : payload_)
      detail::put_f32(bytes, f);

    if (path.has_parent_path())
      std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out)
        throw IoError("cannot write checkpoint " + tmp.string());
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!out)
        throw IoError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

private:
  std::vector<TensorEntry> entries_;
  std::vector<float> payload_;
};

inline CheckpointFile read_checkpoint_file(const std::filesystem::path &path) {
  using Kind = CheckpointError::Kind;
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16) {
    if (bytes.size() >= 7 && std::memcmp(bytes.data(), kCheckpointMagic, 7) == 0)
      throw CheckpointError(Kind::Truncated, path.string() + ": file ends inside the preamble");
    throw CheckpointError(Kind::CorruptManifest, path.string() + ": not a checkpoint");
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, 7) != 0)
    throw CheckpointError(Kind::CorruptManifest, path.string() + ": bad magic");
  if (bytes[7] != static_cast<unsigned char>(kCheckpointMagic[7]))
    throw CheckpointError(Kind::VersionMismatch,
                          path.string() + ": format " + std::string(1, static_cast<char>(bytes[7])) + ", expected 1");
  const std::uint64_t header_len = detail::get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - 16)
    throw CheckpointError(Kind::Truncated, path.string() + ": file ends inside the manifest");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception &e) {
    throw CheckpointError(Kind::CorruptManifest, path.string() + ": " + e.what());
  }
  CheckpointFile file;
  std::uint64_t payload_bytes = 0;
  try {
    if (header.at("format_version").get<int>() != kCheckpointVersion)
      throw CheckpointError(Kind::VersionMismatch, path.string() + ": manifest format_version " +
                                                       header.at("format_version").dump());
    payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    for (const auto &t : header.at("tensors")) {
      TensorEntry e;
      e.name = t.at("name").get<std::string>();
      e.shape = t.at("shape").get<std::vector<int>>();
      e.byte_offset = t.at("byte_offset").get<std::uint64_t>();
      if (t.at("dtype").get<std::string>() != "f32")
        throw CheckpointError(Kind::CorruptManifest, e.name + ": unsupported dtype");
      e.count = 1;
      for (int s : e.shape) {
        if (s < 0)
          throw CheckpointError(Kind::CorruptManifest, e.name + ": negative extent");
        e.count *= static_cast<std::uint64_t>(s);
      }
      file.manifest.push_back(e);
    }
    file.metadata = header.value("metadata", json::object());
  } catch (const json::exception &e) {
    throw CheckpointError(Kind::CorruptManifest, path.string() + ": " + e.what());
  }

  // offsets must tile the payload exactly, without overlap
  auto sorted = file.manifest;
  std::sort(sorted.begin(), sorted.end(), [](auto &a, auto &b) { return a.byte_offset < b.byte_offset; });
  std::uint64_t cursor = 0;
  for (const auto &e : sorted) {
    if (e.byte_offset != cursor || e.byte_offset % 4 != 0)
      throw CheckpointError(Kind::CorruptManifest, e.name + ": overlapping or misaligned byte_offset");
    cursor += e.count * 4;
  }
  if (cursor != payload_bytes)
    throw CheckpointError(Kind::CorruptManifest, "payload_bytes disagrees with manifest element counts");

  const std::uint64_t available = bytes.size() - 16 - header_len;
  if (available < payload_bytes)
    throw CheckpointError(Kind::Truncated, path.string() + ": payload has " + std::to_string(available) +
                                               " bytes, manifest needs " + std::to_string(payload_bytes));
  if (available > payload_bytes)
    throw CheckpointError(Kind::CorruptManifest, path.string() + ": trailing bytes after payload");
  const unsigned char *p = bytes.data() + 16 + header_len;
  file.payload.resize(payload_bytes / 4);
  for (std::size_t i = 0; i < file.payload.size(); ++i)
    file.payload[i] = detail::get_f32(p + 4 * i);
  return file;
}

/// Copies tensors named prefix + name into `m`, checking shapes.
inline void bind_model(const CheckpointFile &file, const std::string &prefix, Model<float> &m) {
  m.for_each([&](const std::string &n, float *d, std::size_t c, const std::vector<int> &shape) {
    const auto *e = file.find(prefix + n);
    if (!e)
      throw CheckpointError(CheckpointError::Kind::CorruptManifest, "missing tensor " + prefix + n);
    if (e->shape != shape || e->count != c)
      throw CheckpointError(CheckpointError::Kind::ShapeMismatch, prefix + n);
    std::copy_n(file.payload.begin() + static_cast<std::ptrdiff_t>(e->byte_offset / 4), c, d);
  });
}

/// Live weights, EMA shadow, Adam moments, step counter and run config.
inline void save_checkpoint(const std::filesystem::path &path, const TrainerState<float> &st, const RunConfig &rc) {
  CheckpointWriter w;
  w.add_model("live.", st.live);
  w.add_model("ema.", st.ema.shadow);
  w.add_model("adam_m.", st.adam.m);
  w.add_model("adam_v.", st.adam.v);
  const json meta{{"config", to_json(rc)},
                  {"model", to_json(st.live.config)},
                  {"step", st.step},
                  {"adam_step", st.adam.step},
                  {"ema_decay", st.ema.decay},
                  {"rng", {{"seed", st.seed}, {"step", st.step}}}};
  w.write(path, meta);
}

struct LoadedCheckpoint {
  TrainerState<float> state;
  RunConfig config;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path &path) {
  const auto file = read_checkpoint_file(path);
  LoadedCheckpoint out;
  try {
    const auto &meta = file.metadata;
    out.config = run_config_from_json(meta.at("config"));
    const ModelConfig mc = model_config_from_json(meta.at("model"));
    out.state.live = Model<float>(mc);
    out.state.ema = {Model<float>(mc), meta.at("ema_decay").get<double>()};
    out.state.adam = {Model<float>(mc), Model<float>(mc), meta.at("adam_step").get<std::int64_t>()};
    out.state.step = meta.at("step").get<std::int64_t>();
    out.state.seed = meta.at("rng").at("seed").get<std::uint64_t>();
  } catch (const json::exception &e) {
    throw CheckpointError(CheckpointError::Kind::CorruptManifest, path.string() + ": metadata: " + e.what());
  } catch (const ConfigError &e) {
    throw CheckpointError(CheckpointError::Kind::CorruptManifest, path.string() + ": metadata: " + e.what());
  }
  bind_model(file, "live.", out.state.live);
  bind_model(file, "ema.", out.state.ema.shadow);
  bind_model(file, "adam_m.", out.state.adam.m);
  bind_model(file, "adam_v.", out.state.adam.v);
  return out;
}

/// FNV-1a over the file bytes; recorded in output sidecars.
inline std::string file_fingerprint(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

} // namespace ncadiff
