#include "asap/network.hpp"

#include <algorithm>
#include <cmath>

namespace asap {

// ---------------------------------------------------------------- ParamStore

ConvParams ParamStore::conv(const std::string& name, std::size_t in, std::size_t out,
                            std::size_t kernel, std::size_t stride, bool bias, bool zero_init) {
  ConvParams p;
  const std::size_t fan_in = in * kernel * kernel;
  std::vector<real> w(out * fan_in, real(0));
  if (!zero_init) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : w) v = static_cast<real>(dist(rng_));
  }
  p.weight = Tensor::from(Shape{out, in, kernel, kernel}, std::move(w), true);
  p.stride = stride;
  p.padding = kernel / 2;
  entries_.push_back({name + ".weight", p.weight, ParamKind::conv_weight});
  if (bias) {
    p.bias = Tensor::zeros(Shape{out}, true);
    entries_.push_back({name + ".bias", p.bias, ParamKind::bias});
  }
  return p;
}

NormParams ParamStore::norm(const std::string& name, std::size_t channels) {
  NormParams p = NormParams::make(channels);
  entries_.push_back({name + ".gamma", p.gamma, ParamKind::norm_affine});
  entries_.push_back({name + ".beta", p.beta, ParamKind::norm_affine});
  entries_.push_back({name + ".running_mean", p.running_mean, ParamKind::buffer});
  entries_.push_back({name + ".running_var", p.running_var, ParamKind::buffer});
  entries_.push_back({name + ".tracked", p.tracked, ParamKind::buffer});
  return p;
}

const ParamEntry& ParamStore::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw ContractError("no parameter named " + name);
}

std::size_t ParamStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.kind != ParamKind::buffer) n += e.tensor.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

// ---------------------------------------------------------------- blocks

ConvBlock::ConvBlock(ParamStore& store, const std::string& name, std::size_t in,
                     std::size_t out, std::size_t stride)
    : conv(store.conv(name + ".conv", in, out, 3, stride, false)), bn(store.norm(name + ".bn", out)) {}

Tensor ConvBlock::forward(const Tensor& x, bool training) {
  return relu(batch_norm(conv2d(x, conv), bn, training));
}

ResidualUnit::ResidualUnit(ParamStore& store, const std::string& name, std::size_t channels)
    : first(store, name + ".a", channels, channels, 1),
      conv(store.conv(name + ".b.conv", channels, channels, 3, 1, false)),
      bn(store.norm(name + ".b.bn", channels)) {}

Tensor ResidualUnit::forward(const Tensor& x, bool training) {
  Tensor y = batch_norm(conv2d(first.forward(x, training), conv), bn, training);
  return relu(x + y);
}

// ---------------------------------------------------------------- backbone

std::size_t backbone_param_count(const BackboneConfig& cfg) {
  auto block = [](std::size_t in, std::size_t out) { return 9 * in * out + 2 * out; };
  std::size_t total = block(3, cfg.stage_channels[0]);
  std::size_t in = cfg.stage_channels[0];
  for (auto c : cfg.stage_channels) {
    total += block(in, c) + (cfg.blocks_per_stage - 1) * 2 * block(c, c);
    in = c;
  }
  return total;
}

Backbone::Backbone(ParamStore& store, const BackboneConfig& cfg) {
  if (cfg.blocks_per_stage == 0) throw ContractError("blocks_per_stage must be >= 1");
  stem_ = ConvBlock(store, "backbone.stem", 3, cfg.stage_channels[0], 2);
  std::size_t in = cfg.stage_channels[0];
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string name = "backbone.stage" + std::to_string(s + 1);
    const std::size_t c = cfg.stage_channels[s];
    if (c == 0) throw ContractError("stage channels must be positive");
    down_[s] = ConvBlock(store, name + ".down", in, c, 2);
    for (std::size_t b = 1; b < cfg.blocks_per_stage; ++b)
      units_[s].emplace_back(store, name + ".unit" + std::to_string(b), c);
    in = c;
  }
}

std::array<Tensor, 4> Backbone::forward(const Tensor& image, bool training) {
  const auto& s = image.shape();
  if (s.rank() != 4 || s[1] != 3) {
    throw ShapeError("backbone expects [N,3,H,W] input, got " + s.str());
  }
  if (s[2] % 32 != 0 || s[3] % 32 != 0) {
    throw ShapeError("backbone input H and W must be multiples of 32, got " + s.str());
  }
  std::array<Tensor, 4> out;
  Tensor x = stem_.forward(image, training);
  for (std::size_t i = 0; i < 4; ++i) {
    x = down_[i].forward(x, training);
    for (auto& u : units_[i]) x = u.forward(x, training);
    out[i] = x;
  }
  return out;
}

// ---------------------------------------------------------------- *FPN

StarFpn::StarFpn(ParamStore& store, const std::array<std::size_t, 4>& in_channels,
                 std::size_t width) {
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string name = "neck.p" + std::to_string(i + 1);
    lateral_[i] = store.conv(name + ".lateral", in_channels[i], width, 1, 1, true);
    refine_[i] = ConvBlock(store, name + ".refine", width, width, 1);
  }
}

std::array<Tensor, 4> StarFpn::merge(const std::array<Tensor, 4>& stages) const {
  for (std::size_t i = 0; i + 1 < 4; ++i) {
    const auto& a = stages[i].shape();
    const auto& b = stages[i + 1].shape();
    if (a.rank() != 4 || b.rank() != 4 || a[2] != 2 * b[2] || a[3] != 2 * b[3]) {
      throw ShapeError("star_fpn: stage strides must double, got " + a.str() + " then " +
                       b.str());
    }
  }
  std::array<Tensor, 4> merged;
  merged[3] = conv2d(stages[3], lateral_[3]);
  for (std::size_t i = 3; i-- > 0;) {
    merged[i] = conv2d(stages[i], lateral_[i]) + upsample_nearest(merged[i + 1], 2);
  }
  return merged;
}

FeaturePyramid StarFpn::forward(const std::array<Tensor, 4>& stages, bool training) {
  auto merged = merge(stages);
  FeaturePyramid pyr;
  for (std::size_t i = 0; i < 4; ++i) pyr.levels[i] = refine_[i].forward(merged[i], training);
  return pyr;
}

// ---------------------------------------------------------------- FFDN

Ffdn::Ffdn(ParamStore& store, std::size_t width, FusionMode mode) : mode_(mode) {
  if (mode_ == FusionMode::none) return;
  for (std::size_t i = 0; i < 4; ++i)
    proj_[i] = store.conv("ffdn.proj" + std::to_string(i + 1), width, width, 1, 1, true);
  if (mode_ != FusionMode::in_only) {
    ln_ = NormParams::make(width);
    store.entries().push_back({"ffdn.ln.gamma", ln_.gamma, ParamKind::norm_affine});
    store.entries().push_back({"ffdn.ln.beta", ln_.beta, ParamKind::norm_affine});
  }
  if (mode_ != FusionMode::ln_only) {
    in_ = NormParams::make(width);
    store.entries().push_back({"ffdn.in.gamma", in_.gamma, ParamKind::norm_affine});
    store.entries().push_back({"ffdn.in.beta", in_.beta, ParamKind::norm_affine});
  }
}

Tensor Ffdn::fuse(const FeaturePyramid& pyr) const {
  const auto& s1 = pyr.p(1).shape();
  for (std::size_t i = 2; i <= 4; ++i) {
    const auto& s = pyr.p(i).shape();
    if (s[1] != s1[1] || s1[2] != (s[2] << (i - 1)) || s1[3] != (s[3] << (i - 1))) {
      throw ShapeError("ffdn: pyramid level " + std::to_string(i) + " has shape " + s.str() +
                       ", inconsistent with P1 " + s1.str());
    }
  }
  Tensor sum = conv2d(pyr.p(1), proj_[0]);
  for (std::size_t i = 1; i < 4; ++i) {
    sum = sum + resize(conv2d(pyr.levels[i], proj_[i]), s1[2], s1[3], ResizeMode::bilinear);
  }
  return sum;
}

Tensor Ffdn::forward(const FeaturePyramid& pyr) const {
  if (mode_ == FusionMode::none) return pyr.p(1);
  const Tensor s = fuse(pyr);
  switch (mode_) {
    case FusionMode::ln_only:
      return layer_norm(s, ln_);
    case FusionMode::in_only:
      return instance_norm(s, in_);
    default:
      return layer_norm(s, ln_) + instance_norm(s, in_);
  }
}

// ---------------------------------------------------------------- attention

std::size_t AttentionConfig::reduced_channels() const {
  const std::size_t r = reduced ? reduced : std::max<std::size_t>(1, channels / 8);
  if (r < 1 || r > channels) throw ContractError("attention: reduced channels must be in [1, C]");
  return r;
}

DirectionalAttention::DirectionalAttention(ParamStore& store, const AttentionConfig& cfg,
                                           AttentionMode mode)
    : mode_(mode) {
  if (mode_ == AttentionMode::none) return;
  const std::size_t c = cfg.channels, r = cfg.reduced_channels();
  q_ = store.conv("attention.query", c, r, 1, 1, true);
  // A key bias shifts every logit of a softmax row equally; it would never
  // receive gradient.
  k_ = store.conv("attention.key", c, r, 1, 1, false);
  // Zero value projection: the block starts as the identity map.
  v_ = store.conv("attention.value", c, c, 1, 1, true, true);
}

Tensor DirectionalAttention::vertical(const Tensor& f, Tensor* attention_map) const {
  const auto& s = f.shape();
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  const Tensor pooled = avg_pool(f, h, 1);  // [N, C, 1, W]
  const std::size_t r = q_.out_channels();
  const Tensor q = reshape(conv2d(pooled, q_), Shape{n, r, w});
  const Tensor k = reshape(conv2d(pooled, k_), Shape{n, r, w});
  const Tensor v = reshape(conv2d(pooled, v_), Shape{n, c, w});
  // logits[j, i] = Q_j . K_i
  const Tensor a = softmax_lastdim(bmm(transpose_last2(q), k));
  if (attention_map) *attention_map = a;
  // attended[c, j] = sum_i V[c, i] A[j, i]
  const Tensor attended = reshape(bmm(v, transpose_last2(a)), Shape{n, c, 1, w});
  return resize(attended, h, w, ResizeMode::row_tile) + f;
}

Tensor DirectionalAttention::forward(const Tensor& f, Tensor* attention_map) const {
  if (f.shape().rank() != 4) throw ShapeError("attention expects NCHW, got " + f.shape().str());
  switch (mode_) {
    case AttentionMode::none:
      return f;
    case AttentionMode::horizontal:
      return transpose_hw(vertical(transpose_hw(f), attention_map));
    default:
      return vertical(f, attention_map);
  }
}

// ---------------------------------------------------------------- heads

SegHead::SegHead(ParamStore& store, const std::string& name, std::size_t width,
                 std::size_t n_classes)
    : block_(store, name + ".block", width, width, 1),
      cls_(store.conv(name + ".classifier", width, n_classes, 1, 1, true)) {}

Tensor SegHead::forward(const Tensor& x, std::size_t height, std::size_t width, bool training) {
  return resize(conv2d(block_.forward(x, training), cls_), height, width, ResizeMode::bilinear);
}

// ---------------------------------------------------------------- model

AsapNet::AsapNet(const NetworkConfig& cfg)
    : cfg_(cfg),
      store_(cfg.seed),
      backbone_(store_, cfg.backbone),
      neck_(store_, cfg.backbone.stage_channels, cfg.width),
      ffdn_(store_, cfg.width, cfg.fusion),
      attention_(store_, AttentionConfig{cfg.width, cfg.reduced_channels}, cfg.attention),
      head_(store_, "head", cfg.width, cfg.n_classes),
      aux1_(store_, "aux1", cfg.width, cfg.n_classes),
      aux2_(store_, "aux2", cfg.width, cfg.n_classes) {
  if (cfg.n_classes < 1) throw ContractError("n_classes must be >= 1");
}

ModelOutput AsapNet::forward(const Tensor& image, bool training) {
  const std::size_t h = image.shape()[2], w = image.shape()[3];
  const auto stages = backbone_.forward(image, training);
  const FeaturePyramid pyr = neck_.forward(stages, training);
  const Tensor fused = ffdn_.forward(pyr);
  const Tensor attended = attention_.forward(fused);
  ModelOutput out;
  out.logits = head_.forward(attended, h, w, training);
  if (training) {
    out.aux1 = aux1_.forward(pyr.p(3), h, w, training);
    out.aux2 = aux2_.forward(pyr.p(4), h, w, training);
  }
  return out;
}

std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::ffdn: return "ffdn";
    case FusionMode::ln_only: return "ln_only";
    case FusionMode::in_only: return "in_only";
    case FusionMode::none: return "none";
  }
  return "?";
}

std::string to_string(AttentionMode m) {
  switch (m) {
    case AttentionMode::vertical: return "vertical";
    case AttentionMode::horizontal: return "horizontal";
    case AttentionMode::none: return "none";
  }
  return "?";
}

FusionMode fusion_mode_from(const std::string& s) {
  for (auto m : {FusionMode::ffdn, FusionMode::ln_only, FusionMode::in_only, FusionMode::none})
    if (to_string(m) == s) return m;
  throw ContractError("unknown fusion mode: " + s);
}

AttentionMode attention_mode_from(const std::string& s) {
  for (auto m : {AttentionMode::vertical, AttentionMode::horizontal, AttentionMode::none})
    if (to_string(m) == s) return m;
  throw ContractError("unknown attention mode: " + s);
}

}  // namespace asap
