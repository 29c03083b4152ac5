// ncadiff command-line driver: train, sample, inpaint, upscale, tile,
// lowpass-demo, eval-export, inspect.
//
// Exit codes: 0 ok, 2 configuration error, 3 numeric failure, 4 I/O.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <ncadiff/ncadiff.hpp>

namespace fs = std::filesystem;
using namespace ncadiff;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

struct ConfigArgs {
  std::string config_path;
  std::string preset_name;
  std::vector<std::string> overrides;
};

RunConfig load_run_config(const ConfigArgs &a) {
  json doc = a.config_path.empty() ? json::object() : read_json_file(a.config_path);
  if (!a.preset_name.empty())
    doc["preset"] = a.preset_name;
  for (const auto &o : a.overrides)
    apply_override(doc, o);
  return run_config_from_json(doc);
}

void write_json(const fs::path &path, const json &j) {
  if (path.has_parent_path())
    fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

fs::path sidecar_path(const fs::path &png) {
  auto p = png;
  p.replace_extension(".json");
  return p;
}

struct LoadedModel {
  LoadedCheckpoint ckpt;
  Model<float> model;
  std::string fingerprint;
};

LoadedModel load_model(const std::string &path, const std::string &weights) {
  LoadedModel lm{load_checkpoint(path), {}, file_fingerprint(path)};
  if (weights == "ema")
    lm.model = lm.ckpt.state.ema.shadow;
  else if (weights == "live")
    lm.model = lm.ckpt.state.live;
  else
    throw ConfigError("--weights must be ema or live");
  return lm;
}

json provenance(const std::string &command, const LoadedModel &lm, const std::string &ckpt_path,
                const std::string &weights, std::uint64_t seed) {
  return json{{"command", command},
              {"checkpoint", ckpt_path},
              {"checkpoint_fnv1a64", lm.fingerprint},
              {"checkpoint_step", lm.ckpt.state.step},
              {"weights", weights},
              {"seed", seed},
              {"config", to_json(lm.ckpt.config)}};
}

/// Prints progress as "t=..." every `every` reverse steps.
SampleOptions progress_options(bool quiet, int every = 10) {
  SampleOptions so;
  if (!quiet)
    so.on_step = [every](int t) {
      if (t % every == 0 || t == 1)
        std::cerr << "  t=" << t << "\n";
    };
  return so;
}

int cmd_train(const ConfigArgs &ca, const std::string &resume) {
  RunConfig rc;
  TrainerState<float> st;
  if (!resume.empty()) {
    auto loaded = load_checkpoint(resume);
    json doc = to_json(loaded.config);
    for (const auto &o : ca.overrides)
      apply_override(doc, o);
    rc = run_config_from_json(doc);
    if (to_json(rc.model) != to_json(loaded.state.live.config))
      throw ConfigError("--resume: model keys cannot change when resuming");
    st = std::move(loaded.state);
    st.ema.decay = rc.train.ema_decay;
  } else {
    rc = load_run_config(ca);
    st = TrainerState<float>::fresh(rc.model, rc.train);
  }
  const fs::path out(rc.out_dir);
  fs::create_directories(out / "checkpoints");
  write_json(out / "config.json", to_json(rc));
  const TrainingContext ctx(rc);
  std::cerr << "model: " << count_parameters(st.live) << " parameters, dataset: " << ctx.dataset.images.size()
            << " items (" << ctx.dataset.indices(Split::Train).size() << " train)\n";

  const fs::path log_path = out / "loss_log.csv";
  if (!resume.empty())
    truncate_loss_log(log_path, st.step);
  else
    truncate_loss_log(log_path, -1);
  std::ofstream log(log_path, std::ios::app);
  if (!log)
    throw IoError("cannot append to " + log_path.string());

  TrainingHooks hooks;
  hooks.on_row = [&](const TrainLogRow &r) {
    log << format_row(r) << "\n";
    log.flush();
    if (r.val_loss)
      std::cerr << "step " << r.step << " train " << r.train_loss << " val " << *r.val_loss << "\n";
  };
  hooks.on_checkpoint = [&](const TrainerState<float> &s) {
    char name[64];
    std::snprintf(name, sizeof name, "step_%08lld.ncadiff", static_cast<long long>(s.step));
    save_checkpoint(out / "checkpoints" / name, s, rc);
    save_checkpoint(out / "model.ncadiff", s, rc);
  };
  train_loop(ctx, st, rc.train.steps, hooks);
  std::cerr << "wrote " << (out / "model.ncadiff").string() << "\n";
  return kExitOk;
}

int cmd_sample(const std::string &ckpt, const std::string &weights, int h, int w, std::uint64_t seed,
               const std::string &out, bool quiet) {
  const auto lm = load_model(ckpt, weights);
  const auto sched = lm.ckpt.config.schedule.make();
  const auto img = sample(lm.model, h, w, sched, seed, progress_options(quiet));
  write_png(out, img);
  auto meta = provenance("sample", lm, ckpt, weights, seed);
  meta["height"] = h;
  meta["width"] = w;
  meta["output"] = out;
  write_json(sidecar_path(out), meta);
  return kExitOk;
}

SampleMask parse_mask(const std::string &rect, const std::string &mask_png, int h, int w) {
  if (rect.empty() == mask_png.empty())
    throw ConfigError("inpaint: give exactly one of --rect and --mask");
  if (!rect.empty()) {
    int top = 0, left = 0, rh = 0, rw = 0;
    if (std::sscanf(rect.c_str(), "%d,%d,%d,%d", &top, &left, &rh, &rw) != 4)
      throw ConfigError("--rect expects top,left,height,width");
    return SampleMask::rectangle(h, w, top, left, rh, rw);
  }
  const auto m = read_png(mask_png);
  if (m.height() != h || m.width() != w)
    throw ConfigError("--mask geometry does not match --image");
  SampleMask sm{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      sm.mask[static_cast<std::size_t>(y) * w + x] = m(0, 0, y, x) > 0.0f ? 1 : 0;
  return sm;
}

int cmd_inpaint(const std::string &ckpt, const std::string &weights, const std::string &image, const std::string &rect,
                const std::string &mask_png, std::uint64_t seed, const std::string &out, bool quiet) {
  const auto lm = load_model(ckpt, weights);
  const auto known = read_png(image);
  const auto mask = parse_mask(rect, mask_png, known.height(), known.width());
  const auto img = sample_masked(lm.model, known, mask, lm.ckpt.config.schedule.make(), seed, progress_options(quiet));
  write_png(out, img);
  auto meta = provenance("inpaint", lm, ckpt, weights, seed);
  meta["image"] = image;
  meta["rect"] = rect;
  meta["mask"] = mask_png;
  meta["active_cells"] = mask.active_count();
  meta["output"] = out;
  write_json(sidecar_path(out), meta);
  return kExitOk;
}

int cmd_upscale(const std::string &ckpt, const std::string &weights, const std::string &image, std::uint64_t seed,
                const std::string &out, bool quiet) {
  const auto lm = load_model(ckpt, weights);
  const auto low = read_png(image);
  const auto sched = lm.ckpt.config.schedule.make();
  const auto img = upscale(lm.model, low, sched, seed, progress_options(quiet));
  write_png(out, img);
  auto meta = provenance("upscale", lm, ckpt, weights, seed);
  meta["image"] = image;
  meta["start_step"] = upscale_start_step(sched.steps);
  meta["height"] = img.height();
  meta["width"] = img.width();
  meta["output"] = out;
  write_json(sidecar_path(out), meta);
  return kExitOk;
}

int cmd_tile(const std::string &ckpt, const std::string &weights, int h, int w, std::uint64_t seed,
             const std::string &position, double limit_gib, const std::string &out, bool quiet) {
  const auto lm = load_model(ckpt, weights);
  const auto pos = detail::parse_enum("--position", position, detail::position_table());
  const auto limit = static_cast<std::size_t>(limit_gib * static_cast<double>(std::size_t{1} << 30));
  const auto img = sample_tiled(lm.model, h, w, lm.ckpt.config.schedule.make(), seed, pos, limit, progress_options(quiet));
  write_png(out, img);
  auto meta = provenance("tile", lm, ckpt, weights, seed);
  meta["height"] = h;
  meta["width"] = w;
  meta["position_mode"] = position;
  meta["output"] = out;
  write_json(sidecar_path(out), meta);
  return kExitOk;
}

int cmd_lowpass(const std::string &image, int keep, const std::string &out_dir) {
  const auto img = read_png(image);
  const auto res = lowpass_preview(img, keep);
  const fs::path out(out_dir);
  write_png(out / "before.png", img);
  write_png(out / "after.png", res.image);
  char kept[32];
  std::snprintf(kept, sizeof kept, "kept %.2f%%", 100.0 * res.kept_fraction);
  write_json(out / "lowpass.json", json{{"command", "lowpass-demo"},
                                        {"image", image},
                                        {"keep", keep},
                                        {"kept_fraction", res.kept_fraction},
                                        {"summary", kept}});
  std::cout << kept << "\n";
  return kExitOk;
}

int cmd_eval_export(const std::string &ckpt, const std::string &weights, int n, std::uint64_t seed,
                    const std::string &out_dir, bool quiet) {
  if (n < 1)
    throw ConfigError("eval-export: --n must be >= 1");
  const auto lm = load_model(ckpt, weights);
  const auto &rc = lm.ckpt.config;
  const int patch = rc.data.patch_size;

  // real images: stride-grid patches of the test split, in dataset order
  const auto ds = ingest(rc.data);
  std::vector<Image> real;
  for (auto i : ds.indices(Split::Test)) {
    for (auto &p : extract_patches(ds.images[i], patch, patch)) {
      real.push_back(std::move(p));
      if (static_cast<int>(real.size()) == n)
        break;
    }
    if (static_cast<int>(real.size()) == n)
      break;
  }
  if (static_cast<int>(real.size()) < n)
    throw ConfigError("eval-export: test split provides " + std::to_string(real.size()) + " images, " +
                      std::to_string(n) + " requested");

  const fs::path out(out_dir);
  const auto sched = rc.schedule.make();
  json seeds = json::array();
  for (int i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%05d.png", i);
    write_png(out / "real" / name, real[static_cast<std::size_t>(i)]);
    const std::uint64_t s = seed + static_cast<std::uint64_t>(i);
    if (!quiet)
      std::cerr << "sample " << i + 1 << "/" << n << "\n";
    write_png(out / "samples" / name, sample(lm.model, patch, patch, sched, s));
    seeds.push_back({{"file", std::string("samples/") + name}, {"seed", s}});
  }
  auto meta = provenance("eval-export", lm, ckpt, weights, seed);
  meta["n"] = n;
  meta["size"] = patch;
  meta["samples"] = seeds;
  write_json(out / "export.json", meta);
  return kExitOk;
}

int cmd_inspect(const std::string &ckpt, const ConfigArgs &ca) {
  Model<float> model;
  if (!ckpt.empty()) {
    model = load_checkpoint(ckpt).state.live;
  } else {
    model = Model<float>(load_run_config(ca).model);
  }
  std::printf("%-28s %-22s %12s\n", "tensor", "shape", "count");
  model.for_each([](const std::string &name, const float *, std::size_t n, const std::vector<int> &shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i)
      s += (i ? "," : "") + std::to_string(shape[i]);
    s += "]";
    std::printf("%-28s %-22s %12zu\n", name.c_str(), s.c_str(), n);
  });
  std::printf("total parameters: %lld\n", static_cast<long long>(count_parameters(model)));
  return kExitOk;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Diffusion models with neural cellular automata denoisers"};
  app.require_subcommand(1);

  ConfigArgs ca;
  std::string resume, ckpt, weights = "ema", out, image, rect, mask, position = "disabled", out_dir;
  int height = 64, width = 64, keep = 16, n = 8;
  std::uint64_t seed = 0;
  double limit_gib = 4.0;
  bool quiet = false;

  auto add_config = [&](CLI::App *sub) {
    sub->add_option("--config", ca.config_path, "Run config JSON");
    sub->add_option("--preset", ca.preset_name, "Preset applied before config keys");
    sub->add_option("--set", ca.overrides, "Override a config key, e.g. train.steps=100");
  };
  auto add_model = [&](CLI::App *sub) {
    sub->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
    sub->add_option("--weights", weights, "ema or live")->capture_default_str();
    sub->add_option("--seed", seed, "Sampling seed")->capture_default_str();
    sub->add_flag("--quiet", quiet, "No progress output");
  };

  auto *train = app.add_subcommand("train", "Train a model");
  add_config(train);
  train->add_option("--resume", resume, "Continue from a checkpoint");

  auto *samp = app.add_subcommand("sample", "Sample one image");
  add_model(samp);
  samp->add_option("--height", height)->capture_default_str();
  samp->add_option("--width", width)->capture_default_str();
  samp->add_option("--out", out, "Output PNG")->required();

  auto *inp = app.add_subcommand("inpaint", "Resample a region of an image");
  add_model(inp);
  inp->add_option("--image", image, "Known image PNG")->required();
  inp->add_option("--rect", rect, "top,left,height,width of the region to resample");
  inp->add_option("--mask", mask, "PNG mask; nonzero red channel = resample");
  inp->add_option("--out", out, "Output PNG")->required();

  auto *ups = app.add_subcommand("upscale", "Upscale an image by 2");
  add_model(ups);
  ups->add_option("--image", image, "Input PNG")->required();
  ups->add_option("--out", out, "Output PNG")->required();

  auto *tile = app.add_subcommand("tile", "Large-canvas synthesis with a Diff-NCA model");
  add_model(tile);
  height = 512;
  width = 512;
  tile->add_option("--height", height)->capture_default_str();
  tile->add_option("--width", width)->capture_default_str();
  tile->add_option("--position", position, "Position conditioning: disabled|stretched")->capture_default_str();
  tile->add_option("--memory-limit-gib", limit_gib, "Refuse canvases whose working set exceeds this")
      ->capture_default_str();
  tile->add_option("--out", out, "Output PNG")->required();

  auto *low = app.add_subcommand("lowpass-demo", "Show what a centered Fourier window keeps");
  low->add_option("--image", image, "Input PNG")->required();
  low->add_option("--keep", keep, "Window size")->capture_default_str();
  low->add_option("--out-dir", out_dir, "Output directory")->required();

  auto *ev = app.add_subcommand("eval-export", "Export samples and test images for external scoring");
  add_model(ev);
  ev->add_option("--n", n, "Images per side")->capture_default_str();
  ev->add_option("--out-dir", out_dir, "Output directory")->required();

  auto *insp = app.add_subcommand("inspect", "Print parameter shapes and the total count");
  insp->add_option("--checkpoint", ckpt, "Checkpoint file");
  add_config(insp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }
  // subcommands other than tile keep the 64x64 sample default
  if (!tile->parsed()) {
    if (samp->parsed() && samp->count("--height") == 0)
      height = 64;
    if (samp->parsed() && samp->count("--width") == 0)
      width = 64;
  }

  try {
    if (train->parsed())
      return cmd_train(ca, resume);
    if (samp->parsed())
      return cmd_sample(ckpt, weights, height, width, seed, out, quiet);
    if (inp->parsed())
      return cmd_inpaint(ckpt, weights, image, rect, mask, seed, out, quiet);
    if (ups->parsed())
      return cmd_upscale(ckpt, weights, image, seed, out, quiet);
    if (tile->parsed())
      return cmd_tile(ckpt, weights, height, width, seed, position, limit_gib, out, quiet);
    if (low->parsed())
      return cmd_lowpass(image, keep, out_dir);
    if (ev->parsed())
      return cmd_eval_export(ckpt, weights, n, seed, out_dir, quiet);
    if (insp->parsed())
      return cmd_inspect(ckpt, ca);
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ResourceError &e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError &e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const CheckpointError &e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitIo;
  } catch (const IoError &e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error &e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitOk;
}
