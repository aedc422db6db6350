#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "asap/config.hpp"
#include "asap/gradcheck.hpp"
#include "asap/trainer.hpp"

namespace asap {

// Whole-model finite-difference audit.

enum class GradObjective {
  training_loss,  // pred + alpha aux1 + beta aux2 on random labels
  mean_logit,     // mean of the prediction logits
};

struct ModelGradCheckOptions {
  GradObjective objective = GradObjective::training_loss;
  std::size_t height = 32;
  std::size_t width = 32;
  // Coordinates sampled per parameter tensor; the input image is checked
  // at the same number of coordinates.
  std::size_t per_tensor = 6;
  std::uint64_t seed = 1;
  double step = 1e-5;
  double tolerance = 1e-4;
  // A central difference of an O(1) double loss at h = 1e-5 cannot resolve
  // derivatives finer than ulp(f) / 2h, about 2e-11. Gradients below the
  // floor are therefore compared with absolute tolerance floor * tolerance.
  double floor = 1e-6;
};

struct TensorCheck {
  std::string name;
  GradCheckReport report;
};

struct ModelGradCheckReport {
  std::vector<TensorCheck> tensors;
  double max_rel_error = 0;
  std::string worst;
  std::size_t checked = 0;
  std::size_t kinks = 0;
  bool passed = false;
};

/// Checks d(objective)/d(parameter) for every trainable tensor and the input
/// on an N=1 input, with the model in training mode.
ModelGradCheckReport model_gradcheck(const NetworkConfig& cfg, const ModelGradCheckOptions& opts = {});

// Ablation variants.

const std::vector<std::string>& variant_names();
/// full, no_attention, horizontal_attention, ln_only, in_only, no_ffdn
NetworkConfig apply_variant(NetworkConfig cfg, const std::string& variant);

struct AblationRow {
  std::string variant;
  std::size_t params = 0;
  double miou = 0;
  std::optional<double> pole_iou;
  MiouReport report;
};

AblationRow run_variant(const std::string& variant, const RunConfig& cfg, const Dataset& data,
                        const TrainHooks& hooks = {});

/// Generates the train and validation splits described by cfg in memory.
/// Validation scenes use indices offset by 1'000'000 from the training ones.
Dataset make_dataset(const RunConfig& cfg);

}  // namespace asap
