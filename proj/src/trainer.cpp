#include "asap/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace asap {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ContractError("batch_size must be >= 1");
  if (!(base_lr > 0)) throw ContractError("base_lr must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw ContractError("momentum must be in [0, 1)");
  if (!(weight_decay >= 0)) throw ContractError("weight_decay must be >= 0");
  if (!(poly_power > 0)) throw ContractError("poly_power must be positive");
  loss.validate();
}

real poly_lr(const TrainConfig& cfg, std::uint64_t step) {
  if (cfg.max_steps == 0) return cfg.base_lr;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(cfg.max_steps);
  return static_cast<real>(cfg.base_lr * std::pow(std::max(frac, 0.0), static_cast<double>(cfg.poly_power)));
}

void OptimizerState::ensure(const ParamStore& store) {
  const auto& entries = store.entries();
  if (velocity.size() == entries.size()) return;
  if (!velocity.empty()) throw StateError("optimizer state does not match the parameter table");
  velocity.resize(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].kind != ParamKind::buffer) velocity[i].assign(entries[i].tensor.numel(), 0);
}

void sgd_step(ParamStore& store, OptimizerState& opt, real lr, const TrainConfig& cfg) {
  opt.ensure(store);
  auto& entries = store.entries();
  for (const auto& e : entries) {
    if (e.kind == ParamKind::buffer || !e.tensor.has_grad()) continue;
    for (real g : e.tensor.grad())
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + e.name);
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    if (e.kind == ParamKind::buffer) continue;
    const real wd = e.kind == ParamKind::conv_weight ? cfg.weight_decay : real(0);
    auto p = e.tensor.mutable_data();
    auto& v = opt.velocity[i];
    const bool has_grad = e.tensor.has_grad();
    std::span<const real> g = has_grad ? e.tensor.grad() : std::span<const real>{};
    for (std::size_t j = 0; j < p.size(); ++j) {
      const real gj = has_grad ? g[j] : real(0);
      v[j] = cfg.momentum * v[j] + (gj + wd * p[j]);
      p[j] -= lr * v[j];
    }
  }
}

// ---------------------------------------------------------------- loop

namespace {

std::vector<synth::Sample> draw_batch(const std::vector<synth::Sample>& pool, const TrainConfig& cfg,
                                      std::mt19937_64& rng) {
  std::vector<synth::Sample> batch;
  batch.reserve(cfg.batch_size);
  for (std::size_t b = 0; b < cfg.batch_size; ++b) {
    const auto idx = std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng);
    batch.push_back(synth::augment(pool[idx], cfg.augment, rng));
  }
  return batch;
}

}  // namespace

std::vector<TraceRow> train_loop(AsapNet& model, const Dataset& data, const TrainConfig& cfg,
                                 TrainState& state, std::optional<std::uint64_t> stop_at,
                                 const TrainHooks& hooks) {
  cfg.validate();
  std::vector<TraceRow> trace;
  const std::uint64_t end = std::min(cfg.max_steps, stop_at.value_or(cfg.max_steps));
  if (state.step >= end) return trace;
  if (data.train.empty()) throw ContractError("train_loop: empty training set");
  state.optimizer.ensure(model.params());

  while (state.step < end) {
    const real lr = poly_lr(cfg, state.step);
    auto [image, labels] = synth::make_batch(draw_batch(data.train, cfg, state.rng));
    model.params().zero_grad();
    LossBreakdown loss;
    try {
      const ModelOutput out = model.forward(image, true);
      loss = total_loss(out.logits, out.aux1, out.aux2, labels, cfg.loss);
    } catch (const DegenerateBatchError& e) {
      if (hooks.warn) hooks.warn("step " + std::to_string(state.step + 1) + " skipped: " + e.what());
      ++state.step;
      continue;
    }
    loss.total.backward();
    sgd_step(model.params(), state.optimizer, lr, cfg);
    ++state.step;

    TraceRow row{state.step, lr, loss.total.item(), std::nullopt};
    const bool periodic = cfg.eval_every > 0 && state.step % cfg.eval_every == 0;
    if ((periodic || state.step == cfg.max_steps) && !data.val.empty()) {
      row.miou = miou(evaluate(model, data.val, cfg.batch_size)).mean;
    }
    trace.push_back(row);
    if (hooks.on_step) hooks.on_step(row);
  }
  return trace;
}

ConfusionMatrix evaluate(AsapNet& model, const std::vector<synth::Sample>& samples,
                         std::size_t batch_size) {
  if (batch_size == 0) throw ContractError("evaluate: batch_size must be >= 1");
  ConfusionMatrix cm(model.config().n_classes);
  if (samples.empty()) return cm;
  NoGradGuard no_grad;
  bool untracked = false;
  for (const auto& e : model.params().entries())
    if (e.kind == ParamKind::buffer && e.tensor.numel() == 1 && e.tensor.item() == 0 &&
        e.name.ends_with(".tracked"))
      untracked = true;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const auto stop = std::min(samples.size(), start + batch_size);
    const std::vector<synth::Sample> chunk(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                           samples.begin() + static_cast<std::ptrdiff_t>(stop));
    auto [image, labels] = synth::make_batch(chunk);
    if (untracked) {
      model.forward(image, true);
      untracked = false;
    }
    cm.add(labels, predict(model.forward(image, false).logits));
  }
  return cm;
}

// ---------------------------------------------------------------- checkpoint

namespace {

using RealBits = std::conditional_t<sizeof(real) == 8, std::uint64_t, std::uint32_t>;

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  void reals(std::span<const real> values) {
    for (real v : values) {
      const auto bits = std::bit_cast<RealBits>(v);
      for (std::size_t i = 0; i < sizeof(real); ++i) u8(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
  }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string data, std::string source) : buf_(std::move(data)), source_(std::move(source)) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  std::string bytes() {
    const auto n = u32();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void reals(std::span<real> out) {
    for (auto& v : out) {
      RealBits bits = 0;
      for (std::size_t i = 0; i < sizeof(real); ++i) bits |= static_cast<RealBits>(u8()) << (8 * i);
      v = std::bit_cast<real>(bits);
    }
  }
  std::string magic() {
    need(4);
    std::string m = buf_.substr(0, 4);
    pos_ = 4;
    return m;
  }
  bool at_end() const { return pos_ == buf_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(source_ + ": " + what);
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) fail("truncated checkpoint");
  }
  std::string buf_;
  std::string source_;
  std::size_t pos_ = 0;
};

Reader open_checkpoint(const std::filesystem::path& path, std::string& meta) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IOError("cannot open checkpoint " + path.string());
  std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  Reader r(std::move(data), path.string());
  if (r.magic() != "ASAP") r.fail("bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  meta = r.bytes();
  return r;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const AsapNet& model,
                     const TrainState& state, const std::string& meta) {
  Writer w;
  for (char c : std::string("ASAP")) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kCheckpointVersion);
  w.bytes(meta);
  w.u64(state.step);
  std::ostringstream rng;
  rng << state.rng;
  w.bytes(rng.str());

  const auto& entries = model.params().entries();
  const bool has_opt = state.optimizer.velocity.size() == entries.size();
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    w.bytes(e.name);
    w.u8(static_cast<std::uint8_t>(e.kind));
    w.u8(static_cast<std::uint8_t>(sizeof(real)));
    const auto& dims = e.tensor.shape().dims();
    w.u32(static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) w.u64(d);
    w.reals(e.tensor.data());
    const bool v = has_opt && !state.optimizer.velocity[i].empty();
    w.u8(v ? 1 : 0);
    if (v) w.reals(state.optimizer.velocity[i]);
  }

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IOError("cannot write checkpoint " + path.string());
  os.write(w.str().data(), static_cast<std::streamsize>(w.str().size()));
  if (!os) throw IOError("write failed for " + path.string());
}

std::string load_checkpoint(const std::filesystem::path& path, AsapNet& model, TrainState& state) {
  std::string meta;
  Reader r = open_checkpoint(path, meta);
  const auto step = r.u64();
  std::mt19937_64 rng;
  {
    std::istringstream is(r.bytes());
    is >> rng;
    if (!is) r.fail("corrupt rng state");
  }

  auto& entries = model.params().entries();
  if (r.u32() != entries.size()) r.fail("parameter count does not match the model");
  // Stage everything first so a mismatch leaves the model untouched.
  std::vector<std::vector<real>> values(entries.size()), velocity(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (r.bytes() != e.name) r.fail("parameter " + std::to_string(i) + " is not " + e.name);
    if (r.u8() != static_cast<std::uint8_t>(e.kind)) r.fail("kind mismatch for " + e.name);
    if (r.u8() != sizeof(real)) r.fail("element type mismatch for " + e.name);
    const auto rank = r.u32();
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = r.u64();
    if (dims != e.tensor.shape().dims()) r.fail("shape mismatch for " + e.name);
    values[i].resize(e.tensor.numel());
    r.reals(values[i]);
    if (r.u8()) {
      velocity[i].resize(e.tensor.numel());
      r.reals(velocity[i]);
    }
  }
  if (!r.at_end()) r.fail("trailing bytes");

  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto dst = entries[i].tensor.mutable_data();
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
  state.step = step;
  state.rng = rng;
  state.optimizer.velocity.clear();
  state.optimizer.ensure(model.params());
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (!velocity[i].empty()) state.optimizer.velocity[i] = std::move(velocity[i]);
  return meta;
}

std::string read_checkpoint_meta(const std::filesystem::path& path) {
  std::string meta;
  open_checkpoint(path, meta);
  return meta;
}

std::string trace_header() { return "step\tlr\tloss\tmiou"; }

std::string format_trace_row(const TraceRow& row) {
  std::ostringstream os;
  os.precision(9);
  os << row.step << '\t' << row.lr << '\t' << row.loss << '\t';
  if (row.miou) {
    os << *row.miou;
  } else {
    os << '-';
  }
  return os.str();
}

}  // namespace asap
