#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "asap/loss.hpp"
#include "asap/network.hpp"
#include "asap/synth.hpp"

namespace asap {

struct TrainConfig {
  std::size_t batch_size = 4;
  real momentum = real(0.9);
  real weight_decay = real(1e-4);
  real base_lr = real(0.01);
  real poly_power = real(0.9);
  std::uint64_t max_steps = 0;
  std::uint64_t eval_every = 0;  // 0: evaluate only after the last step
  std::uint64_t seed = 0;
  LossWeights loss;
  synth::AugmentConfig augment;

  void validate() const;
};

/// base * (1 - step / max_steps)^power
real poly_lr(const TrainConfig& cfg, std::uint64_t step);

/// One velocity buffer per ParamStore entry (empty for buffers).
struct OptimizerState {
  std::vector<std::vector<real>> velocity;
  void ensure(const ParamStore& store);
};

/// v <- m v + (g + wd p); p <- p - lr v. Weight decay touches conv weights
/// only. Entries without a gradient are treated as g = 0. Every gradient is
/// checked before anything is written.
void sgd_step(ParamStore& store, OptimizerState& opt, real lr, const TrainConfig& cfg);

struct TrainState {
  std::uint64_t step = 0;
  std::mt19937_64 rng;
  OptimizerState optimizer;

  explicit TrainState(std::uint64_t seed = 0) : rng(seed) {}
};

struct TraceRow {
  std::uint64_t step = 0;  // 1-based index of the completed step
  real lr = 0;
  real loss = 0;
  std::optional<double> miou;  // set on evaluation steps
  bool operator==(const TraceRow&) const = default;
};

struct Dataset {
  std::vector<synth::Sample> train;
  std::vector<synth::Sample> val;
};

struct TrainHooks {
  // Called after every completed step.
  std::function<void(const TraceRow&)> on_step;
  std::function<void(const std::string&)> warn;
};

/// Runs steps state.step .. min(stop_at, max_steps) - 1. The schedule always
/// refers to cfg.max_steps, so a run split at any step and resumed from a
/// checkpoint follows the uninterrupted trajectory bit for bit.
std::vector<TraceRow> train_loop(AsapNet& model, const Dataset& data, const TrainConfig& cfg,
                                 TrainState& state, std::optional<std::uint64_t> stop_at = {},
                                 const TrainHooks& hooks = {});

/// Inference-mode confusion matrix over `samples`. Batch norms that have
/// never seen a training batch are first calibrated with one no-grad
/// training-mode pass over the leading batch.
ConfusionMatrix evaluate(AsapNet& model, const std::vector<synth::Sample>& samples,
                         std::size_t batch_size = 4);

// Checkpoint layout (all integers little-endian):
//   "ASAP" u32 version
//   u32 meta length, meta bytes (free text, e.g. the resolved run config)
//   u64 step, u32 rng length, rng bytes (textual engine state)
//   u32 entry count, then per entry:
//     u32 name length, name, u8 kind, u8 element bytes (4|8), u32 rank, u64 dims...,
//     payload, u8 has_velocity, [velocity payload]
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const AsapNet& model,
                     const TrainState& state, const std::string& meta = "");
/// Restores parameters, buffers and optimizer state into a model built with
/// the same configuration. Returns the stored meta text.
std::string load_checkpoint(const std::filesystem::path& path, AsapNet& model, TrainState& state);
/// Reads only the meta text.
std::string read_checkpoint_meta(const std::filesystem::path& path);

/// Tab separated "step lr loss miou"; miou is "-" on non-evaluation steps.
std::string trace_header();
std::string format_trace_row(const TraceRow& row);

}  // namespace asap
