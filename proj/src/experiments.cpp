#include "asap/experiments.hpp"

#include <algorithm>
#include <random>

namespace asap {

ModelGradCheckReport model_gradcheck(const NetworkConfig& cfg, const ModelGradCheckOptions& opts) {
  AsapNet model(cfg);
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<real> pixels(3 * opts.height * opts.width);
  for (auto& v : pixels) v = static_cast<real>(unit(rng));
  Tensor image = Tensor::from(Shape{1, 3, opts.height, opts.width}, pixels, true);
  LabelMap labels(1, opts.height, opts.width);
  for (auto& l : labels.data)
    l = static_cast<std::int32_t>(std::uniform_int_distribution<std::size_t>(0, cfg.n_classes - 1)(rng));

  // Zero-initialized blocks would hide whole gradient paths, so start from a
  // random point of parameter space.
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (auto& e : model.params().entries()) {
    if (e.kind == ParamKind::buffer) continue;
    for (auto& v : e.tensor.mutable_data()) v += static_cast<real>(jitter(rng));
  }

  const LossWeights weights;
  auto objective = [&] {
    const ModelOutput out = model.forward(image, true);
    if (opts.objective == GradObjective::mean_logit) return mean(out.logits);
    return total_loss(out.logits, out.aux1, out.aux2, labels, weights).total;
  };

  GradCheckOptions gc;
  gc.step = opts.step;
  gc.tolerance = opts.tolerance;
  gc.floor = opts.floor;
  auto sample = [&](std::size_t numel) {
    std::vector<std::size_t> idx;
    if (numel <= opts.per_tensor) {
      for (std::size_t i = 0; i < numel; ++i) idx.push_back(i);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, numel - 1);
      while (idx.size() < opts.per_tensor) {
        const auto i = pick(rng);
        if (std::find(idx.begin(), idx.end(), i) == idx.end()) idx.push_back(i);
      }
    }
    return idx;
  };

  ModelGradCheckReport report;
  auto run = [&](const std::string& name, Tensor leaf) {
    gc.indices = sample(leaf.numel());
    const GradCheckReport r = finite_diff_check_leaf(objective, leaf, gc);
    report.checked += r.checked;
    report.kinks += r.kinks;
    if (r.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = r.max_rel_error;
      report.worst = name;
    }
    report.tensors.push_back({name, r});
  };
  run("input", image);
  for (auto& e : model.params().entries())
    if (e.kind != ParamKind::buffer) run(e.name, e.tensor);
  report.passed = report.checked > 0 && report.max_rel_error < opts.tolerance;
  return report;
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"full",    "no_attention", "horizontal_attention",
                                              "ln_only", "in_only",      "no_ffdn"};
  return names;
}

NetworkConfig apply_variant(NetworkConfig cfg, const std::string& variant) {
  cfg.fusion = FusionMode::ffdn;
  cfg.attention = AttentionMode::vertical;
  if (variant == "full") {
  } else if (variant == "no_attention") {
    cfg.attention = AttentionMode::none;
  } else if (variant == "horizontal_attention") {
    cfg.attention = AttentionMode::horizontal;
  } else if (variant == "ln_only") {
    cfg.fusion = FusionMode::ln_only;
  } else if (variant == "in_only") {
    cfg.fusion = FusionMode::in_only;
  } else if (variant == "no_ffdn") {
    cfg.fusion = FusionMode::none;
  } else {
    throw ContractError("unknown variant '" + variant + "'");
  }
  return cfg;
}

AblationRow run_variant(const std::string& variant, const RunConfig& cfg, const Dataset& data,
                        const TrainHooks& hooks) {
  AsapNet model(apply_variant(cfg.model, variant));
  TrainConfig tc = cfg.train;
  TrainState state(tc.seed);
  train_loop(model, data, tc, state, {}, hooks);

  AblationRow row;
  row.variant = variant;
  row.params = model.params().trainable_count();
  row.report = miou(evaluate(model, data.val, tc.batch_size));
  row.miou = row.report.mean;
  if (row.report.iou.size() > synth::pole) row.pole_iou = row.report.iou[synth::pole];
  return row;
}

Dataset make_dataset(const RunConfig& cfg) {
  Dataset d;
  d.train.reserve(cfg.train_count);
  for (std::size_t i = 0; i < cfg.train_count; ++i) d.train.push_back(synth::generate_scene(cfg.data, i));
  d.val.reserve(cfg.val_count);
  for (std::size_t i = 0; i < cfg.val_count; ++i)
    d.val.push_back(synth::generate_scene(cfg.data, 1'000'000 + i));
  return d;
}

}  // namespace asap
