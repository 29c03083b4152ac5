#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "data.hpp"
#include "diffusion.hpp"
#include "model.hpp"
#include "trainer.hpp"

namespace ncadiff {

using json = nlohmann::json;

struct ScheduleConfig {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  NoiseSchedule make() const { return make_schedule(steps, beta_start, beta_end); }
};

/// Everything a command needs: architecture, schedule, optimization, data.
struct RunConfig {
  std::string preset = "paper-default";
  ModelConfig model;
  ScheduleConfig schedule;
  TrainConfig train;
  DatasetSpec data;
  std::string out_dir = "runs/default";

  void validate() const {
    model.validate();
    schedule.make();
    train.validate();
    data.validate();
    if (model.kind == ModelKind::FourierDiff)
      window_origin(data.patch_size, data.patch_size, model.fourier_window, model.anchor);
  }
};

inline std::vector<std::string> preset_names() {
  return {"paper-default", "paper-1.85m", "ablation-s10", "ablation-s30", "ablation-h256", "ablation-c48",
          "diff-paper", "desk", "desk-fourier"};
}

/// Named starting points; individual keys override them.
inline RunConfig preset(const std::string &name) {
  RunConfig rc;
  rc.preset = name;
  rc.data.synthetic = SyntheticSpec{SyntheticKind::Blobs, 64, 1024, 0};
  auto &m = rc.model;
  if (name == "paper-default") {
  } else if (name == "paper-1.85m") {
    m.channels = 128;
    m.hidden = 640;
  } else if (name == "ablation-s10") {
    m.steps = 10;
  } else if (name == "ablation-s30") {
    m.steps = 30;
  } else if (name == "ablation-h256") {
    m.hidden = 256;
  } else if (name == "ablation-c48") {
    m.channels = 48;
  } else if (name == "diff-paper") {
    m.kind = ModelKind::Diff;
    m.e_dim = 2;
    m.enc_dim = 1;
  } else if (name == "desk" || name == "desk-fourier") {
    m.kind = name == "desk" ? ModelKind::Diff : ModelKind::FourierDiff;
    m.channels = 32;
    m.hidden = 64;
    m.steps = 8;
    m.fourier_steps = 16;
    m.fourier_window = 8;
    rc.schedule.steps = 50;
    rc.train.batch = 8;
    rc.train.steps = 2000;
    rc.train.checkpoint_every = 500;
    rc.train.val_every = 100;
    rc.train.val_batches = 2;
    rc.data.patch_size = 16;
    rc.data.synthetic = SyntheticSpec{SyntheticKind::Blobs, 16, 512, 0};
    rc.out_dir = "runs/desk";
  } else {
    std::string known;
    for (const auto &p : preset_names())
      known += (known.empty() ? "" : ", ") + p;
    throw ConfigError("config.preset: unknown preset '" + name + "' (known: " + known + ")");
  }
  return rc;
}

namespace detail {

/// Reads one JSON object, remembering which keys were consumed so leftovers
/// can be reported with their full path.
class ObjectReader {
public:
  ObjectReader(const json &obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object())
      throw ConfigError(path_ + ": expected an object");
  }

  template <class V> void get(const std::string &key, V &out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end())
      return;
    try {
      out = it->template get<V>();
    } catch (const json::exception &) {
      throw ConfigError(path_ + "." + key + ": wrong type (" + std::string(it->type_name()) + ")");
    }
  }

  const json *child(const std::string &key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  const std::string &path() const { return path_; }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (!seen_.count(it.key()))
        throw ConfigError(path_ + "." + it.key() + ": unknown key");
  }

private:
  const json &obj_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class E> E parse_enum(const std::string &path, const std::string &v, const std::map<std::string, E> &table) {
  auto it = table.find(v);
  if (it == table.end()) {
    std::string known;
    for (const auto &[k, _] : table)
      known += (known.empty() ? "" : "|") + k;
    throw ConfigError(path + ": invalid value '" + v + "' (expected " + known + ")");
  }
  return it->second;
}

template <class E> std::string enum_name(E v, const std::map<std::string, E> &table) {
  for (const auto &[k, e] : table)
    if (e == v)
      return k;
  return "?";
}

inline const std::map<std::string, ModelKind> &kind_table() {
  static const std::map<std::string, ModelKind> t{{"diff", ModelKind::Diff}, {"fourierdiff", ModelKind::FourierDiff}};
  return t;
}
inline const std::map<std::string, Padding> &padding_table() {
  static const std::map<std::string, Padding> t{
      {"reflect", Padding::Reflect}, {"zero", Padding::Zero}, {"circular", Padding::Circular}};
  return t;
}
inline const std::map<std::string, PositionMode> &position_table() {
  static const std::map<std::string, PositionMode> t{{"stretched", PositionMode::Stretched},
                                                     {"disabled", PositionMode::Disabled}};
  return t;
}
inline const std::map<std::string, WindowAnchor> &anchor_table() {
  static const std::map<std::string, WindowAnchor> t{{"centered", WindowAnchor::Centered},
                                                     {"from-center", WindowAnchor::FromCenter}};
  return t;
}
inline const std::map<std::string, SyntheticKind> &synthetic_table() {
  static const std::map<std::string, SyntheticKind> t{{"blobs", SyntheticKind::Blobs},
                                                      {"bicolor-halves", SyntheticKind::BicolorHalves}};
  return t;
}

} // namespace detail

inline json to_json(const ModelConfig &m) {
  using namespace detail;
  return json{{"model", enum_name(m.kind, kind_table())},
              {"c", m.channels},
              {"h", m.hidden},
              {"s", m.steps},
              {"fourier_steps", m.fourier_steps},
              {"fourier_window", m.fourier_window},
              {"window_anchor", enum_name(m.anchor, anchor_table())},
              {"e_dim", m.e_dim},
              {"enc_dim", m.enc_dim},
              {"fire_rate", m.fire_rate},
              {"padding", enum_name(m.padding, padding_table())},
              {"fourier_padding", enum_name(m.fourier_padding, padding_table())},
              {"position_mode", enum_name(m.position, position_table())}};
}

/// Model keys live at the top level of a run config.
inline void read_model_keys(detail::ObjectReader &r, ModelConfig &m) {
  using namespace detail;
  std::string s;
  if (r.child("model")) {
    r.get("model", s);
    m.kind = parse_enum(r.path() + ".model", s, kind_table());
  }
  r.get("c", m.channels);
  r.get("h", m.hidden);
  r.get("s", m.steps);
  r.get("fourier_steps", m.fourier_steps);
  r.get("fourier_window", m.fourier_window);
  r.get("e_dim", m.e_dim);
  r.get("enc_dim", m.enc_dim);
  r.get("fire_rate", m.fire_rate);
  auto read_enum = [&](const char *key, auto &field, const auto &table) {
    if (r.child(key)) {
      std::string v;
      r.get(key, v);
      field = parse_enum(r.path() + "." + key, v, table);
    }
  };
  read_enum("window_anchor", m.anchor, anchor_table());
  read_enum("padding", m.padding, padding_table());
  read_enum("fourier_padding", m.fourier_padding, padding_table());
  read_enum("position_mode", m.position, position_table());
}

inline ModelConfig model_config_from_json(const json &j, const std::string &path = "model") {
  ModelConfig m;
  detail::ObjectReader r(j, path);
  read_model_keys(r, m);
  r.finish();
  m.validate();
  return m;
}

inline json to_json(const TrainConfig &t) {
  json j{{"lr", t.lr},
         {"lr_gamma", t.lr_gamma},
         {"adam_beta1", t.adam_beta1},
         {"adam_beta2", t.adam_beta2},
         {"adam_eps", t.adam_eps},
         {"steps", t.steps},
         {"batch", t.batch},
         {"ema_decay", t.ema_decay},
         {"seed", t.seed},
         {"checkpoint_every", t.checkpoint_every},
         {"val_every", t.val_every},
         {"val_batches", t.val_batches}};
  j["grad_clip"] = t.grad_clip ? json(*t.grad_clip) : json(nullptr);
  return j;
}

inline json to_json(const RunConfig &rc) {
  json j = to_json(rc.model);
  j["preset"] = rc.preset;
  j["schedule"] = {{"T", rc.schedule.steps}, {"beta_start", rc.schedule.beta_start}, {"beta_end", rc.schedule.beta_end}};
  j["train"] = to_json(rc.train);
  json d{{"patch_size", rc.data.patch_size}, {"split", rc.data.split}};
  if (rc.data.root)
    d["root"] = *rc.data.root;
  if (rc.data.synthetic)
    d["synthetic"] = {{"kind", detail::enum_name(rc.data.synthetic->kind, detail::synthetic_table())},
                      {"size", rc.data.synthetic->size},
                      {"count", rc.data.synthetic->count},
                      {"seed", rc.data.synthetic->seed}};
  if (rc.data.resize)
    d["resize"] = *rc.data.resize;
  if (rc.data.downscale_factor)
    d["downscale_factor"] = *rc.data.downscale_factor;
  j["data"] = d;
  j["out_dir"] = rc.out_dir;
  return j;
}

/// Parses and validates a run config. Every unknown key and every type or
/// range violation is reported with its key path before any compute starts.
inline RunConfig run_config_from_json(const json &j) {
  using namespace detail;
  if (!j.is_object())
    throw ConfigError("config: expected a JSON object");
  std::string preset_name = "paper-default";
  if (auto it = j.find("preset"); it != j.end()) {
    if (!it->is_string())
      throw ConfigError("config.preset: wrong type");
    preset_name = it->get<std::string>();
  }
  RunConfig rc = preset(preset_name);
  ObjectReader r(j, "config");
  r.child("preset");
  read_model_keys(r, rc.model);
  r.get("out_dir", rc.out_dir);

  if (const json *s = r.child("schedule")) {
    ObjectReader sr(*s, "config.schedule");
    sr.get("T", rc.schedule.steps);
    sr.get("beta_start", rc.schedule.beta_start);
    sr.get("beta_end", rc.schedule.beta_end);
    sr.finish();
  }
  if (const json *t = r.child("train")) {
    ObjectReader tr(*t, "config.train");
    auto &tc = rc.train;
    tr.get("lr", tc.lr);
    tr.get("lr_gamma", tc.lr_gamma);
    tr.get("adam_beta1", tc.adam_beta1);
    tr.get("adam_beta2", tc.adam_beta2);
    tr.get("adam_eps", tc.adam_eps);
    tr.get("steps", tc.steps);
    tr.get("batch", tc.batch);
    tr.get("ema_decay", tc.ema_decay);
    tr.get("seed", tc.seed);
    tr.get("checkpoint_every", tc.checkpoint_every);
    tr.get("val_every", tc.val_every);
    tr.get("val_batches", tc.val_batches);
    if (const json *gc = tr.child("grad_clip")) {
      if (gc->is_null())
        tc.grad_clip.reset();
      else if (gc->is_number())
        tc.grad_clip = gc->get<double>();
      else
        throw ConfigError("config.train.grad_clip: wrong type");
    }
    tr.finish();
  }
  if (const json *d = r.child("data")) {
    ObjectReader dr(*d, "config.data");
    auto &ds = rc.data;
    dr.get("patch_size", ds.patch_size);
    dr.get("split", ds.split);
    if (const json *root = dr.child("root")) {
      if (!root->is_string())
        throw ConfigError("config.data.root: wrong type");
      ds.root = root->get<std::string>();
      ds.synthetic.reset();
    }
    if (const json *syn = dr.child("synthetic")) {
      ObjectReader sr(*syn, "config.data.synthetic");
      SyntheticSpec sp = ds.synthetic.value_or(SyntheticSpec{});
      if (sr.child("kind")) {
        std::string k;
        sr.get("kind", k);
        sp.kind = parse_enum("config.data.synthetic.kind", k, synthetic_table());
      }
      sr.get("size", sp.size);
      sr.get("count", sp.count);
      sr.get("seed", sp.seed);
      sr.finish();
      ds.synthetic = sp;
      if (dr.child("root") && ds.root)
        throw ConfigError("config.data: root and synthetic are mutually exclusive");
    }
    if (const json *rs = dr.child("resize")) {
      if (rs->is_null())
        ds.resize.reset();
      else
        try {
          ds.resize = rs->get<std::array<int, 2>>();
        } catch (const json::exception &) {
          throw ConfigError("config.data.resize: expected [height, width]");
        }
    }
    if (const json *df = dr.child("downscale_factor")) {
      if (df->is_null())
        ds.downscale_factor.reset();
      else if (df->is_number_integer())
        ds.downscale_factor = df->get<int>();
      else
        throw ConfigError("config.data.downscale_factor: wrong type");
    }
    dr.finish();
  }
  r.finish();
  try {
    rc.validate();
  } catch (const ConfigError &e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return rc;
}

/// Sets a dotted key ("train.steps") in a JSON document. The value is parsed
/// as JSON when possible and stored as a string otherwise.
inline void apply_override(json &doc, const std::string &assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception &) {
    value = raw;
  }
  json *node = &doc;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.'))
    parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]))
      (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
    if (!node->is_object())
      throw ConfigError("override '" + key + "': " + parts[i] + " is not an object");
  }
  (*node)[parts.back()] = value;
}

inline json read_json_file(const std::string &path) {
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error &e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
}

} // namespace ncadiff
