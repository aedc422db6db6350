// asap: dataset generation, training, evaluation and analysis.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "asap/config.hpp"
#include "asap/experiments.hpp"
#include "asap/flops.hpp"
#include "asap/synth.hpp"
#include "asap/trainer.hpp"

namespace fs = std::filesystem;
using namespace asap;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

class UsageError : public Error {
 public:
  using Error::Error;
};

std::pair<std::size_t, std::size_t> parse_size(const std::string& text) {
  // "HxW" or a single edge for square inputs
  const auto x = text.find('x');
  try {
    if (x == std::string::npos) {
      const auto s = std::stoul(text);
      return {s, s};
    }
    return {std::stoul(text.substr(0, x)), std::stoul(text.substr(x + 1))};
  } catch (const std::exception&) {
    throw UsageError("bad size '" + text + "', expected HxW");
  }
}

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!path.empty()) cfg.merge_file(path);
  cfg.merge_overrides(overrides);
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IOError("cannot write " + path.string());
  os << text;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IOError("cannot create directory " + dir.string());
}

Dataset load_dataset(const fs::path& root, std::size_t n_classes) {
  Dataset d;
  d.train = synth::read_split(root, "train", n_classes);
  if (fs::exists(root / "val.txt")) d.val = synth::read_split(root, "val", n_classes);
  return d;
}

std::string fmt_iou(const std::optional<double>& v) {
  if (!v) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << *v;
  return os.str();
}

void print_report(const MiouReport& r) {
  for (std::size_t k = 0; k < r.iou.size(); ++k) {
    std::cout << std::left << std::setw(12) << synth::class_name(k) << fmt_iou(r.iou[k]) << '\n';
  }
  std::cout << std::left << std::setw(12) << "mIoU" << fmt_iou(r.mean) << '\n';
}

// ---------------------------------------------------------------- verbs

struct GenArgs {
  std::string out;
  std::size_t count = 10;
  std::string size = "64x128";
  std::uint64_t seed = 0;
  std::string split = "train";
  std::size_t first_index = 0;
};

int cmd_gen(const GenArgs& a) {
  synth::SceneSpec spec;
  std::tie(spec.height, spec.width) = parse_size(a.size);
  spec.seed = a.seed;
  try {
    spec.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  std::vector<synth::Sample> samples;
  for (std::size_t i = 0; i < a.count; ++i) samples.push_back(synth::generate_scene(spec, a.first_index + i));
  synth::write_split(a.out, a.split, samples);

  const auto hist = synth::class_histogram(samples, spec.n_classes);
  std::uint64_t total = 0;
  for (auto h : hist) total += h;
  std::cout << "wrote " << a.count << " scenes to " << (fs::path(a.out) / a.split).string() << '\n';
  std::cout << "class\tpixels\tfraction\n";
  for (std::size_t k = 0; k < hist.size(); ++k) {
    std::cout << synth::class_name(k) << '\t' << hist[k] << '\t' << std::fixed << std::setprecision(4)
              << (total ? static_cast<double>(hist[k]) / static_cast<double>(total) : 0.0) << '\n';
  }
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> set;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> max_steps;
  std::optional<std::uint64_t> stop_at;
  std::string resume;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = resolve_config(a.config, a.set);
  if (a.max_steps) cfg.train.max_steps = *a.max_steps;
  const fs::path out(a.out);
  ensure_dir(out);
  const std::string echo = cfg.to_text();
  write_text(out / "config.ini", echo);

  const Dataset data = load_dataset(a.data, cfg.model.n_classes);
  AsapNet model(cfg.model);
  TrainState state(cfg.train.seed);
  if (!a.resume.empty()) {
    load_checkpoint(a.resume, model, state);
    std::cout << "resumed at step " << state.step << '\n';
  }

  std::ofstream trace(out / "trace.tsv", a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!trace) throw IOError("cannot write " + (out / "trace.tsv").string());
  if (a.resume.empty()) trace << trace_header() << '\n';
  TrainHooks hooks;
  hooks.on_step = [&](const TraceRow& row) {
    trace << format_trace_row(row) << '\n';
    trace.flush();
    if (row.miou) std::cout << format_trace_row(row) << std::endl;
  };
  hooks.warn = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
  const auto rows = train_loop(model, data, cfg.train, state, a.stop_at, hooks);
  save_checkpoint(out / "checkpoint.bin", model, state, echo);
  std::cout << "steps " << state.step << ", checkpoint " << (out / "checkpoint.bin").string() << '\n';
  if (!rows.empty()) std::cout << "final loss " << rows.back().loss << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string split = "val";
};

int cmd_eval(const EvalArgs& a) {
  RunConfig cfg;
  cfg.merge_text(read_checkpoint_meta(a.ckpt), a.ckpt);
  AsapNet model(cfg.model);
  TrainState state;
  load_checkpoint(a.ckpt, model, state);
  const auto samples = synth::read_split(a.data, a.split, cfg.model.n_classes);
  const ConfusionMatrix cm = evaluate(model, samples, cfg.train.batch_size);
  std::cout << "split " << a.split << ", " << samples.size() << " scenes, step " << state.step << '\n';
  print_report(miou(cm));
  return kExitOk;
}

struct AblateArgs {
  std::string config;
  std::vector<std::string> set;
  std::string data;
  std::vector<std::string> variants;
  std::string out;
};

int cmd_ablate(const AblateArgs& a) {
  const RunConfig cfg = resolve_config(a.config, a.set);
  std::vector<std::string> variants = a.variants.empty() ? variant_names() : a.variants;
  for (const auto& v : variants) {
    if (std::find(variant_names().begin(), variant_names().end(), v) == variant_names().end()) {
      throw UsageError("unknown variant '" + v + "'");
    }
  }
  const Dataset data = a.data.empty() ? make_dataset(cfg) : load_dataset(a.data, cfg.model.n_classes);
  if (data.val.empty()) throw UsageError("ablate needs a validation split");

  std::ostringstream table;
  table << "variant\tparams\tmiou\tpole_iou\n";
  for (const auto& v : variants) {
    std::cerr << "training " << v << "...\n";
    const AblationRow row = run_variant(v, cfg, data);
    table << row.variant << '\t' << row.params << '\t' << fmt_iou(row.miou) << '\t'
          << fmt_iou(row.pole_iou) << '\n';
  }
  std::cout << table.str();
  if (!a.out.empty()) {
    ensure_dir(a.out);
    write_text(fs::path(a.out) / "config.ini", cfg.to_text());
    write_text(fs::path(a.out) / "ablation.tsv", table.str());
  }
  return kExitOk;
}

struct FlopsArgs {
  std::string config;
  std::vector<std::string> set;
  std::string size = "512x1024";
  bool tsv = false;
};

int cmd_flops(const FlopsArgs& a) {
  const RunConfig cfg = resolve_config(a.config, a.set);
  const auto [h, w] = parse_size(a.size);
  const auto report = flops::flops_report(cfg.model, h, w);
  std::cout << "# model at " << h << "x" << w << '\n';
  std::cout << (a.tsv ? flops::to_tsv(report) : flops::to_text(report)) << '\n';

  const auto op = flops::fit_operating_point();
  std::cout << "# operating point\n"
            << "attention: C=" << op.attention.channels << " C_hat=" << op.attention.reduced
            << " H=" << op.attention.height << " W=" << op.attention.width << '\n'
            << "fusion: C=" << op.fusion.channels << " levels=" << op.fusion.levels
            << " P1=" << op.fusion.height << "x" << op.fusion.width << '\n';
  std::cout << "variant\tgflops\tpublished\n" << std::setprecision(4);
  std::cout << "attn_conventional\t" << op.conventional_gflops << "\t87.52\n"
            << "attn_vertical\t" << op.vertical_gflops << "\t0.22\n"
            << "attn_horizontal\t"
            << static_cast<double>(flops::flops_attention(flops::VariantKind::attn_horizontal,
                                                          op.attention).total_flops()) / 1e9
            << "\t0.22\n"
            << "general_fusion\t" << op.general_gflops << "\t1.08\n"
            << "ffdn\t" << op.ffdn_gflops << "\t0.54\n";

  const double vert_over_conv = 1.0 / op.attention_ratio();
  const bool attn_ok = vert_over_conv >= 0.002 && vert_over_conv <= 0.003;
  const bool fusion_ok = op.fusion_ratio() >= 1.6 && op.fusion_ratio() <= 2.4;
  std::cout << std::setprecision(6) << "check\tvalue\trange\tresult\n"
            << "vertical/conventional\t" << vert_over_conv << "\t[0.002, 0.003]\t"
            << (attn_ok ? "PASS" : "FAIL") << '\n'
            << "general/ffdn\t" << op.fusion_ratio() << "\t[1.6, 2.4]\t" << (fusion_ok ? "PASS" : "FAIL")
            << '\n';
  return attn_ok && fusion_ok ? kExitOk : kExitCheckFailed;
}

struct GradcheckArgs {
  std::string config;
  std::vector<std::string> set;
  std::string size = "32";
  std::size_t per_tensor = 6;
  std::uint64_t seed = 1;
  bool verbose = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const RunConfig cfg = resolve_config(a.config, a.set);
  ModelGradCheckOptions opts;
  std::tie(opts.height, opts.width) = parse_size(a.size);
  opts.per_tensor = a.per_tensor;
  opts.seed = a.seed;
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = model_gradcheck(cfg.model, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (a.verbose) {
    std::cout << "tensor\tchecked\tkinks\tmax_rel_error\tanalytic\tnumeric\n";
    for (const auto& t : r.tensors) {
      std::cout << t.name << '\t' << t.report.checked << '\t' << t.report.kinks << '\t'
                << t.report.max_rel_error << '\t' << t.report.worst_analytic << '\t'
                << t.report.worst_numeric << '\n';
    }
  }
  std::cout << "input 1x3x" << opts.height << "x" << opts.width << ", " << r.tensors.size()
            << " tensors, " << r.checked << " coordinates, " << r.kinks << " kinks skipped\n"
            << "max relative error " << r.max_rel_error << " (" << r.worst << "), tolerance "
            << opts.tolerance << ", " << std::fixed << std::setprecision(1) << secs << " s\n"
            << (r.passed ? "PASS" : "FAIL") << '\n';
  return r.passed ? kExitOk : kExitCheckFailed;
}

struct BenchArgs {
  std::string ckpt;
  std::string config;
  std::vector<std::string> set;
  std::string size = "64x128";
  std::string input_size;
  std::size_t iters = 50;
};

int cmd_bench(const BenchArgs& a) {
  RunConfig cfg = resolve_config(a.config, a.set);
  if (!a.ckpt.empty()) {
    cfg = RunConfig{};
    cfg.merge_text(read_checkpoint_meta(a.ckpt), a.ckpt);
  }
  AsapNet model(cfg.model);
  TrainState state;
  if (!a.ckpt.empty()) load_checkpoint(a.ckpt, model, state);

  const auto [raw_h, raw_w] = parse_size(a.size);
  auto round32 = [](std::size_t v) { return std::max<std::size_t>(32, (v + 16) / 32 * 32); };
  auto [in_h, in_w] = a.input_size.empty() ? std::pair{round32(raw_h), round32(raw_w)}
                                           : parse_size(a.input_size);
  if (in_h % 32 || in_w % 32) throw UsageError("network input size must be a multiple of 32");

  std::mt19937_64 rng(cfg.data.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<real> pixels(3 * raw_h * raw_w);
  for (auto& v : pixels) v = static_cast<real>(unit(rng));
  const Tensor frame = Tensor::from(Shape{1, 3, raw_h, raw_w}, pixels);

  NoGradGuard no_grad;
  if (a.ckpt.empty()) model.forward(resize(frame, in_h, in_w, ResizeMode::bilinear), true);
  auto once = [&] {
    const Tensor input = resize(frame, in_h, in_w, ResizeMode::bilinear);
    return model.forward(input, false).logits;
  };
  for (int i = 0; i < 10; ++i) once();

  std::vector<double> ms;
  for (std::size_t i = 0; i < a.iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor out = once();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    std::cout << "sample\t" << i << '\t' << std::fixed << std::setprecision(3) << ms.back() << " ms\n";
  }
  std::vector<double> sorted = ms;
  std::sort(sorted.begin(), sorted.end());
  auto pct = [&](double p) {
    const auto idx = static_cast<std::size_t>(std::ceil(p * static_cast<double>(sorted.size()))) - 1;
    return sorted[std::min(idx, sorted.size() - 1)];
  };
  double mean = 0;
  for (double v : ms) mean += v;
  mean /= static_cast<double>(ms.size());
  std::cout << "frame " << raw_h << "x" << raw_w << " -> input " << in_h << "x" << in_w
            << " (resize timed), warmup 10, iters " << ms.size() << '\n'
            << "mean " << mean << " ms, p50 " << pct(0.5) << " ms, p95 " << pct(0.95) << " ms, "
            << std::setprecision(1) << 1000.0 / mean << " fps\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ASAP segmentation toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a synthetic dataset split");
  g->add_option("--out", gen.out, "dataset root")->required();
  g->add_option("--count", gen.count, "number of scenes")->capture_default_str();
  g->add_option("--size", gen.size, "scene size HxW")->capture_default_str();
  g->add_option("--seed", gen.seed, "scene seed")->capture_default_str();
  g->add_option("--split", gen.split, "split name")->capture_default_str();
  g->add_option("--first-index", gen.first_index, "index of the first scene")->capture_default_str();

  TrainArgs train;
  std::uint64_t max_steps = 0;
  auto* t = app.add_subcommand("train", "train a model");
  t->add_option("--config", train.config, "config file");
  t->add_option("--set", train.set, "override section.key=value")->allow_extra_args(false);
  t->add_option("--data", train.data, "dataset root with train (and val) splits")->required();
  t->add_option("--out", train.out, "run directory")->required();
  auto* ms_opt = t->add_option("--max-steps", max_steps, "override train.max_steps");
  t->add_option("--resume", train.resume, "checkpoint to resume from");
  t->add_option("--stop-at", train.stop_at, "stop after this step without changing the schedule");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  e->add_option("--ckpt", eval.ckpt, "checkpoint")->required();
  e->add_option("--data", eval.data, "dataset root")->required();
  e->add_option("--split", eval.split, "split name")->capture_default_str();

  AblateArgs ablate;
  auto* ab = app.add_subcommand("ablate", "train and compare model variants");
  ab->add_option("--config", ablate.config, "config file");
  ab->add_option("--set", ablate.set, "override section.key=value")->allow_extra_args(false);
  ab->add_option("--data", ablate.data, "dataset root (generated in memory when omitted)");
  ab->add_option("--variant", ablate.variants, "variant (repeatable); all when omitted")
      ->allow_extra_args(false);
  ab->add_option("--out", ablate.out, "directory for the table and config echo");

  FlopsArgs fl;
  auto* f = app.add_subcommand("flops", "analytic FLOP report");
  f->add_option("--config", fl.config, "config file");
  f->add_option("--set", fl.set, "override section.key=value")->allow_extra_args(false);
  f->add_option("--size", fl.size, "input size HxW")->capture_default_str();
  f->add_flag("--tsv", fl.tsv, "tab separated per-layer table");

  GradcheckArgs gc;
  auto* gck = app.add_subcommand("gradcheck", "whole-model finite-difference audit");
  gck->add_option("--config", gc.config, "config file");
  gck->add_option("--set", gc.set, "override section.key=value")->allow_extra_args(false);
  gck->add_option("--size", gc.size, "input size HxW or edge")->capture_default_str();
  gck->add_option("--per-tensor", gc.per_tensor, "coordinates per tensor")->capture_default_str();
  gck->add_option("--seed", gc.seed, "sampling seed")->capture_default_str();
  gck->add_flag("--verbose", gc.verbose, "per-tensor table");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "forward latency including input resize");
  b->add_option("--ckpt", bench.ckpt, "checkpoint (fresh model when omitted)");
  b->add_option("--config", bench.config, "config file for a fresh model");
  b->add_option("--set", bench.set, "override section.key=value")->allow_extra_args(false);
  b->add_option("--size", bench.size, "raw frame size HxW")->capture_default_str();
  b->add_option("--input-size", bench.input_size, "network input HxW (frame rounded to 32 when omitted)");
  b->add_option("--iters", bench.iters, "timed iterations")->capture_default_str()->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) {
      if (*ms_opt) train.max_steps = max_steps;
      return cmd_train(train);
    }
    if (*e) return cmd_eval(eval);
    if (*ab) return cmd_ablate(ablate);
    if (*f) return cmd_flops(fl);
    if (*gck) return cmd_gradcheck(gc);
    if (*b) return cmd_bench(bench);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitCheckFailed;
  }
  return kExitUsage;
}
