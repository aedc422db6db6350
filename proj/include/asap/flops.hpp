#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "asap/network.hpp"

namespace asap::flops {

// A multiply-add counts as 2 flops throughout.

struct LayerCost {
  std::string name;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
  std::string formula_ref;
};

struct CostBreakdown {
  std::vector<LayerCost> rows;

  std::uint64_t total_flops() const;
  std::uint64_t total_params() const;
  std::uint64_t flops_of(const std::string& name) const;  // 0 when absent
  void append(const CostBreakdown& other, const std::string& prefix = "");
};

enum class VariantKind { general_fusion, ffdn, attn_conventional, attn_horizontal, attn_vertical };

struct VariantDims {
  std::uint64_t channels = 1;  // C
  std::uint64_t reduced = 1;   // C-hat, query/key width
  std::uint64_t height = 1;    // H of the attended / fused map (P1 for fusion)
  std::uint64_t width = 1;     // W
  std::uint64_t levels = 4;    // pyramid levels fused

  void validate() const;
};

std::uint64_t flops_conv(std::uint64_t kernel, std::uint64_t c_in, std::uint64_t c_out,
                         std::uint64_t h_out, std::uint64_t w_out);
/// Mean, variance, subtract and scale passes over the output volume.
std::uint64_t flops_norm(std::uint64_t c, std::uint64_t h, std::uint64_t w);

CostBreakdown flops_attention(VariantKind kind, const VariantDims& dims);
CostBreakdown flops_fusion(VariantKind kind, const VariantDims& dims);

/// affinity + aggregation rows only (the quadratic terms).
std::uint64_t attention_quadratic_flops(const CostBreakdown& attention);

std::string to_string(VariantKind kind);

/// Operating point at which the modeled totals are compared with the
/// published GFLOPs: a 1:2 (H:W) map, searched jointly over H, attention
/// channels (C, C-hat) and fusion channels.
struct OperatingPoint {
  VariantDims attention;
  VariantDims fusion;
  double conventional_gflops = 0;
  double vertical_gflops = 0;
  double general_gflops = 0;
  double ffdn_gflops = 0;
  double max_log_error = 0;  // worst |ln(model / target)| over the four totals

  double attention_ratio() const { return conventional_gflops / vertical_gflops; }
  double fusion_ratio() const { return general_gflops / ffdn_gflops; }
};

struct Targets {
  double conventional = 87.52;
  double vertical = 0.22;
  double general = 1.08;
  double ffdn = 0.54;
};

OperatingPoint fit_operating_point(const Targets& targets = {});

/// Inference-path cost of every layer of the model for an N=1 input.
/// Auxiliary heads are train-only and excluded.
CostBreakdown flops_report(const NetworkConfig& cfg, std::size_t height, std::size_t width);

std::string to_tsv(const CostBreakdown& b);
std::string to_text(const CostBreakdown& b);

}  // namespace asap::flops
