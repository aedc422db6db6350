// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "asap/experiments.hpp"
#include "asap/flops.hpp"
#include "asap/layers.hpp"
#include "asap/loss.hpp"
#include "asap/network.hpp"
#include "asap/trainer.hpp"

using namespace asap;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<real> v(shape.numel());
  for (auto& x : v) x = real(d(rng));
  return Tensor::from(std::move(shape), std::move(v));
}

double max_abs_diff(std::span<const real> a, std::span<const real> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

std::pair<double, double> moments(std::span<const real> v, std::size_t start, std::size_t n) {
  long double m = 0, s = 0;
  for (std::size_t i = 0; i < n; ++i) m += v[start + i];
  m /= n;
  for (std::size_t i = 0; i < n; ++i) s += (v[start + i] - m) * (v[start + i] - m);
  return {double(m), double(s / n)};
}

struct Outcome {
  bool pass;
  std::string detail;
};

// 1. whole-model finite differences
Outcome gradient_audit() {
  const auto t0 = Clock::now();
  ModelGradCheckOptions opts;  // 1x3x32x32, training loss, h = 1e-5
  const ModelGradCheckReport r = model_gradcheck(NetworkConfig{}, opts);
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << "max_rel_error " << r.max_rel_error << " at " << r.worst << ", " << r.checked << " coordinates ("
     << r.kinks << " kinks skipped), " << std::fixed << std::setprecision(1) << secs << " s";
  return {r.passed && r.max_rel_error < 1e-4 && secs < 300, os.str()};
}

// 2. normalization statistics
Outcome normalization() {
  std::mt19937_64 rng(2);
  const NormParams p = NormParams::make(4);
  double ln_mean = 0, ln_var = 0, in_mean = 0, in_var = 0;
  for (int t = 0; t < 100; ++t) {
    const Tensor x = random_tensor(Shape{2, 4, 6, 5}, rng, -3, 5);
    const Tensor y = layer_norm(x, p);
    for (std::size_t n = 0; n < 2; ++n) {
      const auto [m, v] = moments(y.data(), n * 120, 120);
      ln_mean = std::max(ln_mean, std::abs(m));
      ln_var = std::max(ln_var, std::abs(v - 1));
    }
    const Tensor z = instance_norm(random_tensor(Shape{2, 4, 6, 5}, rng, -3, 5), p);
    for (std::size_t g = 0; g < 8; ++g) {
      const auto [m, v] = moments(z.data(), g * 30, 30);
      in_mean = std::max(in_mean, std::abs(m));
      in_var = std::max(in_var, std::abs(v - 1));
    }
  }
  std::ostringstream os;
  os << "layer norm |mean| " << ln_mean << " |var-1| " << ln_var << "; instance norm |mean| " << in_mean
     << " |var-1| " << in_var;
  return {ln_mean < 1e-6 && in_mean < 1e-6 && ln_var < 1e-4 && in_var < 1e-4, os.str()};
}

void randomize(DirectionalAttention& attn, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> d(-scale, scale);
  for (ConvParams* p : {&attn.query(), &attn.key(), &attn.value()}) {
    for (auto& v : p->weight.mutable_data()) v = real(d(rng));
    if (p->bias.defined())
      for (auto& v : p->bias.mutable_data()) v = real(d(rng));
  }
}

Tensor permute_rows(const Tensor& f, const std::vector<std::size_t>& perm) {
  const auto& s = f.shape();
  const std::size_t nc = s[0] * s[1], h = s[2], w = s[3];
  std::vector<real> out(f.numel());
  for (std::size_t b = 0; b < nc; ++b)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(b * h + y) * w + x] = f.data()[(b * h + perm[y]) * w + x];
  return Tensor::from(s, out);
}

// 3. attention contracts
Outcome attention() {
  std::mt19937_64 rng(3);

  ParamStore s1(31);
  DirectionalAttention a1(s1, AttentionConfig{16, 4}, AttentionMode::vertical);
  randomize(a1, rng, 2.0);
  double row_err = 0;
  for (int t = 0; t < 20; ++t) {
    Tensor a;
    a1.forward(random_tensor(Shape{2, 16, 4, 9}, rng, -3, 3), &a);
    for (std::size_t r = 0; r < 18; ++r) {
      long double s = 0;
      for (std::size_t i = 0; i < 9; ++i) s += a.data()[r * 9 + i];
      row_err = std::max(row_err, double(std::abs(s - 1)));
    }
  }

  ParamStore s2(32);
  DirectionalAttention a2(s2, AttentionConfig{16, 0}, AttentionMode::vertical);
  for (ConvParams* p : {&a2.query(), &a2.key(), &a2.value()}) {
    for (auto& v : p->weight.mutable_data()) v = 0;
    if (p->bias.defined())
      for (auto& v : p->bias.mutable_data()) v = 0;
  }
  const Tensor f = random_tensor(Shape{2, 16, 5, 7}, rng);
  const double identity_err = max_abs_diff(a2.forward(f).data(), f.data());

  ParamStore s3(33);
  DirectionalAttention a3(s3, AttentionConfig{8, 0}, AttentionMode::vertical);
  randomize(a3, rng, 1.0);
  double perm_err = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t h = 2 + t % 6;
    const Tensor x = random_tensor(Shape{2, 8, h, 6}, rng);
    std::vector<std::size_t> perm(h);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const Tensor px = permute_rows(x, perm);
    const Tensor lhs = sub(a3.forward(px), px);
    const Tensor rhs = permute_rows(sub(a3.forward(x), x), perm);
    perm_err = std::max(perm_err, max_abs_diff(lhs.data(), rhs.data()));
  }

  std::ostringstream os;
  os << "row sum error " << row_err << ", identity error " << identity_err << ", permutation error " << perm_err;
  return {row_err < 1e-9 && identity_err == 0 && perm_err < 1e-9, os.str()};
}

// 4. analytic complexity
Outcome complexity() {
  using namespace flops;
  std::mt19937_64 rng(4);
  int exact = 0;
  for (int t = 0; t < 20; ++t) {
    VariantDims d;
    d.channels = 1 + rng() % 256;
    d.reduced = 1 + rng() % d.channels;
    d.height = 1 + rng() % 128;
    d.width = 1 + rng() % 256;
    const auto conv = attention_quadratic_flops(flops_attention(VariantKind::attn_conventional, d));
    const auto vert = attention_quadratic_flops(flops_attention(VariantKind::attn_vertical, d));
    exact += conv == vert * d.height * d.height;
  }
  const OperatingPoint op = fit_operating_point();
  const double ar = op.attention_ratio(), fr = op.fusion_ratio();
  std::ostringstream os;
  os << exact << "/20 exact H^2 ratios; attention ratio " << ar << " (C=" << op.attention.channels
     << " C_hat=" << op.attention.reduced << " H=" << op.attention.height << " W=" << op.attention.width
     << "), fusion ratio " << fr << ", fit max log error " << op.max_log_error;
  return {exact == 20 && ar >= 350 && ar <= 450 && fr >= 1.6 && fr <= 2.4, os.str()};
}

// Independent hard-pixel selection: long double losses and a full sort.
std::vector<std::size_t> oracle_kept(const Tensor& logits, const LabelMap& labels, double threshold,
                                     std::size_t min_kept) {
  const auto& s = logits.shape();
  const std::size_t k = s[1], hw = s[2] * s[3];
  std::vector<std::pair<long double, std::size_t>> all;
  std::vector<std::size_t> hard;
  for (std::size_t idx = 0; idx < labels.size(); ++idx) {
    if (labels.data[idx] == kIgnoreLabel) continue;
    const std::size_t b = idx / hw, p = idx % hw;
    long double z = 0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp((long double)logits.data()[(b * k + c) * hw + p]);
    const long double lp =
        (long double)logits.data()[(b * k + std::size_t(labels.data[idx])) * hw + p] - std::log(z);
    all.push_back({-lp, idx});
    if (std::exp(lp) < threshold) hard.push_back(idx);
  }
  if (hard.size() >= min_kept) return hard;
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < std::min(min_kept, all.size()); ++i) kept.push_back(all[i].second);
  std::sort(kept.begin(), kept.end());
  return kept;
}

// 5. hard example mining
Outcome ohem() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  int equal = 0, fallback = 0;
  for (int t = 0; t < 100; ++t) {
    const double spread = 1 + (t % 10) * 1.5;
    Tensor logits = random_tensor(Shape{2, 4, 8, 8}, rng, -spread, spread);
    LabelMap labels(2, 8, 8);
    for (auto& v : labels.data) v = (t % 3 == 0 && u(rng) < 0.1) ? kIgnoreLabel : std::int32_t(rng() % 4);
    if (t % 2 == 1)
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels.data[i] != kIgnoreLabel)
          logits.mutable_data()[(i / 64 * 4 + std::size_t(labels.data[i])) * 64 + i % 64] += real(spread);
    LossWeights w;
    if (t % 4 == 1) w.ohem_min_kept = 60;
    const auto expect = oracle_kept(logits, labels, 0.7, w.min_kept_for(128));
    equal += ohem_select(logits, labels, w).kept == expect;
    fallback += expect.size() == w.min_kept_for(128);
  }
  std::ostringstream os;
  os << equal << "/100 kept sets equal (" << fallback << " batches used the min_kept fallback)";
  return {equal == 100, os.str()};
}

// 6. mIoU examples
Outcome miou_examples() {
  const MiouReport a = miou(ConfusionMatrix::from_counts(3, {4, 0, 0, 0, 2, 0, 0, 0, 7}));
  const MiouReport b = miou(ConfusionMatrix::from_counts(2, {3, 1, 1, 3}));
  LabelMap truth(1, 2, 5), pred(1, 2, 5, 0);
  for (std::size_t i = 5; i < 10; ++i) truth.data[i] = 1;
  ConfusionMatrix cm(2);
  cm.add(truth, pred);
  const MiouReport c = miou(cm);
  std::ostringstream os;
  os << "diagonal " << a.mean << ", symmetric " << b.mean << ", all-zero prediction " << c.mean;
  const bool ok = a.mean == 1.0 && *b.iou[0] == 0.6 && *b.iou[1] == 0.6 && b.mean == 0.6 && *c.iou[0] == 0.5 &&
                  *c.iou[1] == 0.0 && c.mean == 0.25;
  return {ok, os.str()};
}

// 7. toy training
Outcome toy_training() {
  const auto t0 = Clock::now();
  synth::SceneSpec spec;  // 64x128, 5 classes
  spec.seed = 7;
  Dataset data;
  for (std::size_t i = 0; i < 400; ++i) data.train.push_back(synth::generate_scene(spec, i));
  for (std::size_t i = 0; i < 100; ++i) data.val.push_back(synth::generate_scene(spec, 100000 + i));

  auto run = [&](AttentionMode mode, std::uint64_t seed) {
    NetworkConfig nc;
    nc.backbone.stage_channels = {8, 16, 32, 64};
    nc.backbone.blocks_per_stage = 1;
    nc.width = 16;
    nc.attention = mode;
    nc.seed = seed;
    TrainConfig tc;
    tc.max_steps = 2000;
    tc.batch_size = 4;
    tc.base_lr = real(0.01);
    tc.eval_every = 500;
    tc.seed = seed;
    AsapNet model(nc);
    TrainState state(seed);
    train_loop(model, data, tc, state);
    const MiouReport r = miou(evaluate(model, data.val));
    std::cout << "  " << std::left << std::setw(9) << to_string(mode) << " seed " << seed << "  mIoU "
              << std::fixed << std::setprecision(4) << r.mean << "  pole IoU " << r.iou[synth::pole].value_or(0)
              << "  (" << std::setprecision(0) << seconds_since(t0) << " s elapsed)" << std::endl;
    return r;
  };

  double full_miou = 0, pole_v = 0, pole_n = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const MiouReport v = run(AttentionMode::vertical, seed);
    const MiouReport n = run(AttentionMode::none, seed);
    if (seed == 1) full_miou = v.mean;
    pole_v += v.iou[synth::pole].value_or(0) / 3;
    pole_n += n.iou[synth::pole].value_or(0) / 3;
  }
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << std::setprecision(4) << "full variant mIoU " << full_miou << " (floor 0.55); mean pole IoU vertical "
     << pole_v << " vs none " << pole_n << "; " << std::fixed << std::setprecision(0) << secs << " s";
  return {full_miou >= 0.55 && pole_v > pole_n && secs <= 900, os.str()};
}

bool same_params(const AsapNet& a, const AsapNet& b) {
  const auto& ea = a.params().entries();
  const auto& eb = b.params().entries();
  if (ea.size() != eb.size()) return false;
  for (std::size_t i = 0; i < ea.size(); ++i) {
    const auto x = ea[i].tensor.data(), y = eb[i].tensor.data();
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size() * sizeof(real)) != 0) return false;
  }
  return true;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// 8. reproducibility
Outcome reproducibility() {
  NetworkConfig nc;
  nc.backbone.stage_channels = {4, 8, 8, 16};
  nc.backbone.blocks_per_stage = 1;
  nc.width = 8;
  synth::SceneSpec spec;
  spec.width = 64;
  spec.height = 32;
  Dataset data;
  for (std::size_t i = 0; i < 8; ++i) data.train.push_back(synth::generate_scene(spec, i));
  for (std::size_t i = 0; i < 4; ++i) data.val.push_back(synth::generate_scene(spec, 1000 + i));
  TrainConfig tc;
  tc.batch_size = 2;
  tc.max_steps = 6;
  tc.eval_every = 3;
  tc.seed = 5;

  AsapNet a(nc), b(nc);
  TrainState sa(21), sb(21);
  const auto ta = train_loop(a, data, tc, sa);
  const auto tb = train_loop(b, data, tc, sb);
  const bool traces = ta == tb && same_params(a, b);

  const fs::path dir = fs::temp_directory_path() / "asap_acceptance";
  fs::create_directories(dir);
  save_checkpoint(dir / "a.bin", a, sa, "meta");
  NetworkConfig other = nc;
  other.seed = 77;
  AsapNet loaded(other);
  TrainState sl(0);
  load_checkpoint(dir / "a.bin", loaded, sl);
  save_checkpoint(dir / "b.bin", loaded, sl, "meta");
  const bool round_trip = same_params(a, loaded) && sl.rng == sa.rng && sl.step == sa.step &&
                          slurp(dir / "a.bin") == slurp(dir / "b.bin");

  AsapNet first(nc);
  TrainState s1(21);
  auto part = train_loop(first, data, tc, s1, 4);
  save_checkpoint(dir / "k.bin", first, s1);
  AsapNet second(nc);
  TrainState s2(0);
  load_checkpoint(dir / "k.bin", second, s2);
  const auto rest = train_loop(second, data, tc, s2);
  part.insert(part.end(), rest.begin(), rest.end());
  const bool resume = part == ta && same_params(second, a);
  fs::remove_all(dir);

  std::ostringstream os;
  os << "checkpoint round trip " << (round_trip ? "bit exact" : "differs") << ", same-seed traces "
     << (traces ? "identical" : "differ") << ", resume at step 4 of 6 " << (resume ? "matches" : "diverges");
  return {round_trip && traces && resume, os.str()};
}

// 9. loss composition
Outcome loss_composition() {
  auto head = [](double target) {
    return Tensor::from(Shape{1, 2, 1, 1}, {0, real(std::log(std::expm1(target)))});
  };
  const LossBreakdown spot = total_loss(head(1.0), head(0.5), head(0.5), LabelMap(1, 1, 1, 0), LossWeights{});
  const double spot_value = spot.total.item();

  std::mt19937_64 rng(9);
  LabelMap labels(2, 4, 4);
  for (auto& v : labels.data) v = std::int32_t(rng() % 3);
  const Tensor p = random_tensor(Shape{2, 3, 4, 4}, rng), a1 = random_tensor(Shape{2, 3, 4, 4}, rng),
               a2 = random_tensor(Shape{2, 3, 4, 4}, rng);
  double worst = 0;
  for (const auto [alpha, beta] : {std::pair{0.4, 0.4}, std::pair{0.0, 0.0}, std::pair{1.5, 0.25}}) {
    LossWeights w;
    w.alpha = real(alpha);
    w.beta = real(beta);
    const LossBreakdown b = total_loss(p, a1, a2, labels, w);
    const double expect = ohem_ce(p, labels, w).item() + alpha * ohem_ce(a1, labels, w).item() +
                          beta * ohem_ce(a2, labels, w).item();
    worst = std::max(worst, std::abs(b.total.item() - expect));
  }
  std::ostringstream os;
  os << std::setprecision(17) << "spot value " << spot_value << ", linearity error " << worst;
  return {std::abs(spot_value - 1.4) < 1e-12 && worst < 1e-12, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  // Criteria can be selected by number, e.g. `acceptance 2 5`.
  const std::vector<std::pair<int, std::function<Outcome()>>> all{
      {1, gradient_audit}, {2, normalization},  {3, attention},       {4, complexity},       {5, ohem},
      {6, miou_examples},  {7, toy_training},   {8, reproducibility}, {9, loss_composition},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& [id, check] : all) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), id) == selected.end()) continue;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << o.detail << std::endl;
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
