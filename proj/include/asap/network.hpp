#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "asap/layers.hpp"
#include "asap/tensor.hpp"

namespace asap {

enum class ParamKind { conv_weight, bias, norm_affine, buffer };

struct ParamEntry {
  std::string name;
  Tensor tensor;
  ParamKind kind;
};

/// Ordered registry of every parameter and buffer of a model. The order is
/// the construction order and is what checkpoints and optimizers iterate.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : rng_(seed) {}

  ConvParams conv(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
                  std::size_t stride, bool bias, bool zero_init = false);
  NormParams norm(const std::string& name, std::size_t channels);

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<ParamEntry>& entries() { return entries_; }
  const ParamEntry& find(const std::string& name) const;

  std::size_t trainable_count() const;
  void zero_grad();

 private:
  std::mt19937_64 rng_;
  std::vector<ParamEntry> entries_;
};

/// conv3x3 -> batch norm -> relu
struct ConvBlock {
  ConvParams conv;
  NormParams bn;

  ConvBlock() = default;
  ConvBlock(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
            std::size_t stride);
  Tensor forward(const Tensor& x, bool training);
};

/// Two conv blocks with an identity shortcut; relu after the sum.
struct ResidualUnit {
  ConvBlock first;
  ConvParams conv;
  NormParams bn;

  ResidualUnit() = default;
  ResidualUnit(ParamStore& store, const std::string& name, std::size_t channels);
  Tensor forward(const Tensor& x, bool training);
};

struct BackboneConfig {
  std::array<std::size_t, 4> stage_channels{16, 32, 64, 128};
  std::size_t blocks_per_stage = 2;
};

/// Closed-form trainable parameter count of the backbone.
std::size_t backbone_param_count(const BackboneConfig& cfg);

class Backbone {
 public:
  Backbone(ParamStore& store, const BackboneConfig& cfg);
  // Stage features at strides 4, 8, 16, 32. H and W must be multiples of 32.
  std::array<Tensor, 4> forward(const Tensor& image, bool training);

 private:
  ConvBlock stem_;
  std::array<ConvBlock, 4> down_;
  std::array<std::vector<ResidualUnit>, 4> units_;
};

/// P1..P4 at strides 4/8/16/32 with a common channel width.
struct FeaturePyramid {
  std::array<Tensor, 4> levels;
  const Tensor& p(std::size_t i) const { return levels.at(i - 1); }
};

class StarFpn {
 public:
  StarFpn(ParamStore& store, const std::array<std::size_t, 4>& in_channels, std::size_t width);
  // Lateral projections summed top-down with nearest 2x upsampling.
  std::array<Tensor, 4> merge(const std::array<Tensor, 4>& stages) const;
  FeaturePyramid forward(const std::array<Tensor, 4>& stages, bool training);

  std::array<ConvParams, 4>& laterals() { return lateral_; }

 private:
  std::array<ConvParams, 4> lateral_;
  std::array<ConvBlock, 4> refine_;
};

enum class FusionMode { ffdn, ln_only, in_only, none };

/// Projects every level with a 1x1 conv, resizes to P1, sums, and combines
/// a layer-normalized and an instance-normalized view of the sum.
class Ffdn {
 public:
  Ffdn(ParamStore& store, std::size_t width, FusionMode mode);
  Tensor forward(const FeaturePyramid& pyr) const;
  Tensor fuse(const FeaturePyramid& pyr) const;  // the pre-norm sum S

  std::array<ConvParams, 4>& projections() { return proj_; }
  NormParams& ln() { return ln_; }
  NormParams& in() { return in_; }
  FusionMode mode() const { return mode_; }

 private:
  FusionMode mode_;
  std::array<ConvParams, 4> proj_;
  NormParams ln_;
  NormParams in_;
};

struct AttentionConfig {
  std::size_t channels = 32;
  std::size_t reduced = 0;  // 0 selects max(1, channels / 8)
  std::size_t reduced_channels() const;
};

enum class AttentionMode { vertical, horizontal, none };

/// Self-attention over width positions of the H x 1 average-pooled map,
/// tiled back over H and added to the input. Horizontal mode runs the same
/// block on the H/W-transposed map.
class DirectionalAttention {
 public:
  DirectionalAttention(ParamStore& store, const AttentionConfig& cfg, AttentionMode mode);
  // `attention_map`, when given, receives A as [N, W, W] (rows sum to 1).
  Tensor forward(const Tensor& f, Tensor* attention_map = nullptr) const;

  ConvParams& query() { return q_; }
  ConvParams& key() { return k_; }
  ConvParams& value() { return v_; }
  AttentionMode mode() const { return mode_; }

 private:
  Tensor vertical(const Tensor& f, Tensor* attention_map) const;

  AttentionMode mode_;
  ConvParams q_, k_, v_;
};

/// conv block -> 1x1 classifier -> bilinear resize to the input size.
class SegHead {
 public:
  SegHead(ParamStore& store, const std::string& name, std::size_t width, std::size_t n_classes);
  Tensor forward(const Tensor& x, std::size_t height, std::size_t width, bool training);

  ConvBlock& block() { return block_; }
  ConvParams& classifier() { return cls_; }

 private:
  ConvBlock block_;
  ConvParams cls_;
};

struct NetworkConfig {
  BackboneConfig backbone;
  std::size_t width = 32;
  std::size_t n_classes = 5;
  std::size_t reduced_channels = 0;
  FusionMode fusion = FusionMode::ffdn;
  AttentionMode attention = AttentionMode::vertical;
  std::uint64_t seed = 1;
};

struct ModelOutput {
  Tensor logits;
  Tensor aux1;  // from P3, train mode only
  Tensor aux2;  // from P4, train mode only
};

class AsapNet {
 public:
  explicit AsapNet(const NetworkConfig& cfg);
  AsapNet(const AsapNet&) = delete;
  AsapNet& operator=(const AsapNet&) = delete;

  ModelOutput forward(const Tensor& image, bool training);

  const NetworkConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  Backbone& backbone() { return backbone_; }
  StarFpn& neck() { return neck_; }
  Ffdn& fusion() { return ffdn_; }
  DirectionalAttention& attention() { return attention_; }
  SegHead& head() { return head_; }
  SegHead& aux_head(std::size_t i) { return i == 1 ? aux1_ : aux2_; }

 private:
  NetworkConfig cfg_;
  ParamStore store_;
  Backbone backbone_;
  StarFpn neck_;
  Ffdn ffdn_;
  DirectionalAttention attention_;
  SegHead head_;
  SegHead aux1_;
  SegHead aux2_;
};

std::string to_string(FusionMode m);
std::string to_string(AttentionMode m);
FusionMode fusion_mode_from(const std::string& s);
AttentionMode attention_mode_from(const std::string& s);

}  // namespace asap
