#pragma once

#include <cstddef>

#include "asap/tensor.hpp"

namespace asap {

struct ConvParams {
  Tensor weight;  // [C_out, C_in, K, K]
  Tensor bias;    // [C_out] or undefined
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return weight.shape()[0]; }
  std::size_t in_channels() const { return weight.shape()[1]; }
  std::size_t kernel() const { return weight.shape()[2]; }
};

/// Affine parameters plus (batch norm only) running statistics.
struct NormParams {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
  real epsilon = real(1e-5);
  real momentum = real(0.1);
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
  Tensor tracked;       // [1], number of running-stat updates

  static NormParams make(std::size_t channels, real epsilon = real(1e-5));
  std::size_t channels() const { return gamma.numel(); }
};

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                          std::size_t padding);

/// Zero-padded cross-correlation over a batch of NCHW maps.
Tensor conv2d(const Tensor& x, const ConvParams& p);

/// Training mode normalizes each channel over (N, H, W) with population
/// variance and folds the batch statistics into the running estimates.
Tensor batch_norm(const Tensor& x, NormParams& p, bool training);

/// One mean/std pair per sample, shared by all C*H*W activations.
Tensor layer_norm(const Tensor& x, const NormParams& p);

/// One mean/std pair per (sample, channel) over H*W.
Tensor instance_norm(const Tensor& x, const NormParams& p);

/// Non-overlapping average pooling; the kernel must tile the input exactly.
Tensor avg_pool(const Tensor& x, std::size_t kernel_h, std::size_t kernel_w);

enum class ResizeMode { bilinear, row_tile };

/// Bilinear uses the half-pixel (align_corners = false) convention.
/// row_tile replicates a single-row map to `height` rows.
Tensor resize(const Tensor& x, std::size_t height, std::size_t width, ResizeMode mode);

Tensor upsample_nearest(const Tensor& x, std::size_t factor);

/// Numerically stabilized softmax over the last axis.
Tensor softmax_lastdim(const Tensor& x);

/// NCHW -> NCWH.
Tensor transpose_hw(const Tensor& x);

}  // namespace asap
