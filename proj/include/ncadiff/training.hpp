#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "trainer.hpp"

namespace ncadiff {

struct TrainLogRow {
  std::int64_t step = 0; // 1-based count of completed optimizer steps
  double train_loss = 0.0;
  std::optional<double> val_loss;
  double lr = 0.0;
};

inline constexpr const char *kLossLogHeader = "step,train_loss,val_loss,lr";

inline std::string format_row(const TrainLogRow &r) {
  char buf[128];
  char val[40] = "";
  if (r.val_loss)
    std::snprintf(val, sizeof val, "%.9g", *r.val_loss);
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%s,%.9g", static_cast<long long>(r.step), r.train_loss, val, r.lr);
  return buf;
}

struct TrainingHooks {
  std::function<void(const TrainLogRow &)> on_row;
  /// Called every checkpoint_every steps and after the final step.
  std::function<void(const TrainerState<float> &)> on_checkpoint;
};

/// Data, schedule and fixed validation batches for one run.
struct TrainingContext {
  RunConfig config;
  Dataset dataset;
  NoiseSchedule schedule;
  std::vector<Tensor4<float>> val_batches;

  explicit TrainingContext(RunConfig rc, std::ostream &warn = std::cerr)
      : config(std::move(rc)), dataset(ingest(config.data, warn)), schedule(config.schedule.make()) {
    if (dataset.indices(Split::Train).empty())
      throw ConfigError("dataset has no training items");
    val_batches = fixed_batches(dataset, dataset.indices(Split::Validation).empty() ? Split::Train : Split::Validation,
                                config.train.batch, config.data.patch_size, config.train.val_batches);
  }
};

/// Advances `st` until st.step == until. Validation (EMA weights) runs every
/// val_every steps and at the final step.
inline std::vector<TrainLogRow> train_loop(const TrainingContext &ctx, TrainerState<float> &st, std::int64_t until,
                                           const TrainingHooks &hooks = {}) {
  const auto &tc = ctx.config.train;
  std::vector<TrainLogRow> rows;
  while (st.step < until) {
    Stream br(st.seed, StreamTag::Batch, {static_cast<std::uint64_t>(st.step)});
    const auto x0 = sample_batch(ctx.dataset, Split::Train, tc.batch, ctx.config.data.patch_size, br);
    const auto r = train_step(st, x0, ctx.schedule, tc);
    TrainLogRow row{st.step, r.loss, std::nullopt, r.lr};
    if (st.step % tc.val_every == 0 || st.step == tc.steps)
      row.val_loss = validation_loss(st.ema.shadow, ctx.val_batches, ctx.schedule, st.seed);
    rows.push_back(row);
    if (hooks.on_row)
      hooks.on_row(row);
    if (hooks.on_checkpoint && (st.step % tc.checkpoint_every == 0 || st.step == until))
      hooks.on_checkpoint(st);
  }
  return rows;
}

/// Rewrites `path` keeping only the header and rows with step <= last_step,
/// so a resumed run appends exactly where the checkpoint left off.
inline void truncate_loss_log(const std::filesystem::path &path, std::int64_t last_step) {
  std::vector<std::string> keep{kLossLogHeader};
  if (std::ifstream in(path); in) {
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty())
        continue;
      if (std::stoll(line.substr(0, line.find(','))) <= last_step)
        keep.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw IoError("cannot write " + path.string());
  for (const auto &l : keep)
    out << l << "\n";
}

} // namespace ncadiff
