#include "asap/layers.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace asap {

namespace {

void require_4d(const Tensor& x, const char* op) {
  if (x.shape().rank() != 4) {
    throw ShapeError(std::string(op) + " expects NCHW input, got " + x.shape().str());
  }
}

struct Dims4 {
  std::size_t n, c, h, w;
  explicit Dims4(const Shape& s) : n(s[0]), c(s[1]), h(s[2]), w(s[3]) {}
};

// Unfold one sample [C, H, W] into [C*K*K, Ho*Wo].
void im2col(const real* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, real* col) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        real* row = col + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                          static_cast<std::ptrdiff_t>(pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                ix < static_cast<std::ptrdiff_t>(w);
            row[oy * wo + ox] = inside ? x[(ci * h + iy) * w + ix] : real(0);
          }
        }
      }
}

void col2im(const real* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, real* x) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const real* row = col + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                          static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            x[(ci * h + iy) * w + ix] += row[oy * wo + ox];
          }
        }
      }
}

// Shared normalization kernel. Element (n, c, s) belongs to group
// group_of(n, c); statistics are population mean/var per group.
struct GroupStats {
  std::vector<real> mean;
  std::vector<real> var;
};

template <class GroupOf>
GroupStats group_stats(const Tensor& x, std::size_t n_groups, GroupOf group_of) {
  // Extended-precision accumulators keep the statistics smooth enough for
  // finite-difference checks of deep stacks.
  const Dims4 d(x.shape());
  const std::size_t hw = d.h * d.w;
  const auto v = x.data();
  std::vector<long double> mean(n_groups, 0), var(n_groups, 0);
  std::vector<std::size_t> count(n_groups, 0);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c) {
      const auto g = group_of(n, c);
      const real* p = v.data() + (n * d.c + c) * hw;
      long double acc = 0;
      for (std::size_t i = 0; i < hw; ++i) acc += p[i];
      mean[g] += acc;
      count[g] += hw;
    }
  for (std::size_t g = 0; g < n_groups; ++g) mean[g] /= static_cast<long double>(count[g]);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c) {
      const auto g = group_of(n, c);
      const real* p = v.data() + (n * d.c + c) * hw;
      const long double m = mean[g];
      long double acc = 0;
      for (std::size_t i = 0; i < hw; ++i) acc += (p[i] - m) * (p[i] - m);
      var[g] += acc;
    }
  GroupStats s{std::vector<real>(n_groups), std::vector<real>(n_groups)};
  for (std::size_t g = 0; g < n_groups; ++g) {
    s.mean[g] = static_cast<real>(mean[g]);
    s.var[g] = static_cast<real>(var[g] / static_cast<long double>(count[g]));
  }
  return s;
}

template <class GroupOf>
Tensor normalize(const Tensor& x, const NormParams& p, std::size_t n_groups, GroupOf group_of,
                 const GroupStats& stats, const char* op) {
  const Dims4 d(x.shape());
  if (p.channels() != d.c || p.beta.numel() != d.c) {
    throw ShapeError(std::string(op) + ": affine parameters have " +
                     std::to_string(p.channels()) + " channels, input has " +
                     std::to_string(d.c));
  }
  if (!(p.epsilon > 0)) throw ContractError(std::string(op) + ": epsilon must be positive");
  const std::size_t hw = d.h * d.w;
  std::vector<real> inv_std(n_groups);
  for (std::size_t g = 0; g < n_groups; ++g)
    inv_std[g] = real(1) / std::sqrt(stats.var[g] + p.epsilon);

  const auto v = x.data();
  const auto gamma = p.gamma.data();
  const auto beta = p.beta.data();
  std::vector<real> xhat(v.size());
  std::vector<real> out(v.size());
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c) {
      const auto g = group_of(n, c);
      const std::size_t base = (n * d.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        xhat[base + i] = (v[base + i] - stats.mean[g]) * inv_std[g];
        out[base + i] = gamma[c] * xhat[base + i] + beta[c];
      }
    }

  return detail::make_result(
      x.shape(), std::move(out), {x, p.gamma, p.beta}, op,
      [d, hw, n_groups, group_of, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& gamma = self.inputs[1]->data;
        const auto& dy = self.grad;
        if (detail::wants_grad(self, 1) || detail::wants_grad(self, 2)) {
          std::vector<real> dg(d.c, 0), db(d.c, 0);
          for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t c = 0; c < d.c; ++c) {
              const std::size_t base = (n * d.c + c) * hw;
              for (std::size_t i = 0; i < hw; ++i) {
                dg[c] += dy[base + i] * xhat[base + i];
                db[c] += dy[base + i];
              }
            }
          if (detail::wants_grad(self, 1)) {
            auto& g = self.inputs[1]->ensure_grad();
            for (std::size_t c = 0; c < d.c; ++c) g[c] += dg[c];
          }
          if (detail::wants_grad(self, 2)) {
            auto& g = self.inputs[2]->ensure_grad();
            for (std::size_t c = 0; c < d.c; ++c) g[c] += db[c];
          }
        }
        if (!detail::wants_grad(self, 0)) return;
        // dx = r (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)) per group
        std::vector<real> m1(n_groups, 0), m2(n_groups, 0);
        std::vector<std::size_t> count(n_groups, 0);
        for (std::size_t n = 0; n < d.n; ++n)
          for (std::size_t c = 0; c < d.c; ++c) {
            const auto g = group_of(n, c);
            const std::size_t base = (n * d.c + c) * hw;
            real a1 = 0, a2 = 0;
            for (std::size_t i = 0; i < hw; ++i) {
              const real dxh = dy[base + i] * gamma[c];
              a1 += dxh;
              a2 += dxh * xhat[base + i];
            }
            m1[g] += a1;
            m2[g] += a2;
            count[g] += hw;
          }
        for (std::size_t g = 0; g < n_groups; ++g) {
          m1[g] /= static_cast<real>(count[g]);
          m2[g] /= static_cast<real>(count[g]);
        }
        auto& gx = self.inputs[0]->ensure_grad();
        for (std::size_t n = 0; n < d.n; ++n)
          for (std::size_t c = 0; c < d.c; ++c) {
            const auto g = group_of(n, c);
            const std::size_t base = (n * d.c + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              const real dxh = dy[base + i] * gamma[c];
              gx[base + i] += inv_std[g] * (dxh - m1[g] - xhat[base + i] * m2[g]);
            }
          }
      });
}

}  // namespace

NormParams NormParams::make(std::size_t channels, real epsilon) {
  NormParams p;
  p.gamma = Tensor::full(Shape{channels}, real(1), true);
  p.beta = Tensor::zeros(Shape{channels}, true);
  p.epsilon = epsilon;
  p.running_mean = Tensor::zeros(Shape{channels});
  p.running_var = Tensor::full(Shape{channels}, real(1));
  p.tracked = Tensor::zeros(Shape{1});
  return p;
}

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                          std::size_t padding) {
  if (stride == 0) throw ContractError("conv stride must be positive");
  if (in + 2 * padding < kernel) {
    throw ShapeError("conv kernel " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

Tensor conv2d(const Tensor& x, const ConvParams& p) {
  require_4d(x, "conv2d");
  const Dims4 d(x.shape());
  const auto& ws = p.weight.shape();
  if (ws.rank() != 4 || ws[2] != ws[3]) {
    throw ShapeError("conv2d weight must be [C_out, C_in, K, K], got " + ws.str());
  }
  if (ws[1] != d.c) {
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(d.c) +
                     ", weight expects " + std::to_string(ws[1]));
  }
  const bool has_bias = p.bias.defined();
  if (has_bias && p.bias.numel() != ws[0]) throw ShapeError("conv2d bias length mismatch");
  const std::size_t cout = ws[0], k = ws[2], stride = p.stride, pad = p.padding;
  const std::size_t ho = conv_out_size(d.h, k, stride, pad);
  const std::size_t wo = conv_out_size(d.w, k, stride, pad);
  const std::size_t ckk = d.c * k * k, hw_out = ho * wo, hw_in = d.h * d.w;
  const bool direct = k == 1 && stride == 1 && pad == 0;

  std::vector<real> out(d.n * cout * hw_out);
  std::vector<real> cols;
  if (!direct) cols.resize(d.n * ckk * hw_out);
  const real* xv = x.data().data();
  const real* wv = p.weight.data().data();
  for (std::size_t n = 0; n < d.n; ++n) {
    const real* col = xv + n * d.c * hw_in;
    if (!direct) {
      real* dst = cols.data() + n * ckk * hw_out;
      im2col(xv + n * d.c * hw_in, d.c, d.h, d.w, k, stride, pad, ho, wo, dst);
      col = dst;
    }
    real* o = out.data() + n * cout * hw_out;
    gemm(false, false, cout, hw_out, ckk, wv, col, o, false);
    if (has_bias) {
      const auto b = p.bias.data();
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t i = 0; i < hw_out; ++i) o[co * hw_out + i] += b[co];
    }
  }

  std::vector<Tensor> inputs{x, p.weight};
  if (has_bias) inputs.push_back(p.bias);
  return detail::make_result(
      Shape{d.n, cout, ho, wo}, std::move(out), std::move(inputs), "conv2d",
      [d, cout, k, stride, pad, ho, wo, ckk, hw_out, hw_in, direct, has_bias,
       cols = std::move(cols)](detail::Node& self) {
        const real* xv = self.inputs[0]->data.data();
        const real* wv = self.inputs[1]->data.data();
        const bool gx = detail::wants_grad(self, 0);
        const bool gw = detail::wants_grad(self, 1);
        const bool gb = has_bias && detail::wants_grad(self, 2);
        real* dx = gx ? self.inputs[0]->ensure_grad().data() : nullptr;
        real* dw = gw ? self.inputs[1]->ensure_grad().data() : nullptr;
        real* db = gb ? self.inputs[2]->ensure_grad().data() : nullptr;
        std::vector<real> dcol(gx && !direct ? ckk * hw_out : 0);
        for (std::size_t n = 0; n < d.n; ++n) {
          const real* dout = self.grad.data() + n * cout * hw_out;
          const real* col = direct ? xv + n * d.c * hw_in : cols.data() + n * ckk * hw_out;
          if (gw) gemm(false, true, cout, ckk, hw_out, dout, col, dw, true);
          if (gb) {
            for (std::size_t co = 0; co < cout; ++co) {
              real acc = 0;
              for (std::size_t i = 0; i < hw_out; ++i) acc += dout[co * hw_out + i];
              db[co] += acc;
            }
          }
          if (gx) {
            if (direct) {
              gemm(true, false, ckk, hw_out, cout, wv, dout, dx + n * d.c * hw_in, true);
            } else {
              gemm(true, false, ckk, hw_out, cout, wv, dout, dcol.data(), false);
              col2im(dcol.data(), d.c, d.h, d.w, k, stride, pad, ho, wo, dx + n * d.c * hw_in);
            }
          }
        }
      });
}

Tensor batch_norm(const Tensor& x, NormParams& p, bool training) {
  require_4d(x, "batch_norm");
  const Dims4 d(x.shape());
  auto group_of = [](std::size_t, std::size_t c) { return c; };
  if (training) {
    GroupStats stats = group_stats(x, d.c, group_of);
    Tensor out = normalize(x, p, d.c, group_of, stats, "batch_norm");
    auto rm = p.running_mean.mutable_data();
    auto rv = p.running_var.mutable_data();
    for (std::size_t c = 0; c < d.c; ++c) {
      rm[c] = (1 - p.momentum) * rm[c] + p.momentum * stats.mean[c];
      rv[c] = (1 - p.momentum) * rv[c] + p.momentum * stats.var[c];
    }
    p.tracked.mutable_data()[0] += 1;
    return out;
  }
  if (p.tracked.item() == 0) {
    throw StateError("batch_norm: eval mode before any running statistics were recorded");
  }
  GroupStats stats{std::vector<real>(p.running_mean.data().begin(), p.running_mean.data().end()),
                   std::vector<real>(p.running_var.data().begin(), p.running_var.data().end())};
  // Running statistics are constants here, so the general kernel's group
  // terms must not be differentiated: use the affine form directly.
  const std::size_t hw = d.h * d.w;
  std::vector<real> scale_c(d.c), shift_c(d.c);
  const auto gamma = p.gamma.data();
  const auto beta = p.beta.data();
  for (std::size_t c = 0; c < d.c; ++c) {
    const real r = real(1) / std::sqrt(stats.var[c] + p.epsilon);
    scale_c[c] = r;
    shift_c[c] = -stats.mean[c] * r;
  }
  const auto v = x.data();
  std::vector<real> xhat(v.size()), out(v.size());
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t e = (n * d.c + c) * hw + i;
        xhat[e] = v[e] * scale_c[c] + shift_c[c];
        out[e] = gamma[c] * xhat[e] + beta[c];
      }
  return detail::make_result(
      x.shape(), std::move(out), {x, p.gamma, p.beta}, "batch_norm_eval",
      [d, hw, scale_c = std::move(scale_c), xhat = std::move(xhat)](detail::Node& self) {
        const auto& gamma = self.inputs[1]->data;
        const auto& dy = self.grad;
        const bool gx = detail::wants_grad(self, 0);
        const bool gg = detail::wants_grad(self, 1);
        const bool gb = detail::wants_grad(self, 2);
        real* dx = gx ? self.inputs[0]->ensure_grad().data() : nullptr;
        real* dg = gg ? self.inputs[1]->ensure_grad().data() : nullptr;
        real* db = gb ? self.inputs[2]->ensure_grad().data() : nullptr;
        for (std::size_t n = 0; n < d.n; ++n)
          for (std::size_t c = 0; c < d.c; ++c)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t e = (n * d.c + c) * hw + i;
              if (gx) dx[e] += dy[e] * gamma[c] * scale_c[c];
              if (gg) dg[c] += dy[e] * xhat[e];
              if (gb) db[c] += dy[e];
            }
      });
}

Tensor layer_norm(const Tensor& x, const NormParams& p) {
  require_4d(x, "layer_norm");
  const Dims4 d(x.shape());
  auto group_of = [](std::size_t n, std::size_t) { return n; };
  return normalize(x, p, d.n, group_of, group_stats(x, d.n, group_of), "layer_norm");
}

Tensor instance_norm(const Tensor& x, const NormParams& p) {
  require_4d(x, "instance_norm");
  const Dims4 d(x.shape());
  const std::size_t channels = d.c;
  auto group_of = [channels](std::size_t n, std::size_t c) { return n * channels + c; };
  return normalize(x, p, d.n * d.c, group_of, group_stats(x, d.n * d.c, group_of),
                   "instance_norm");
}

Tensor avg_pool(const Tensor& x, std::size_t kh, std::size_t kw) {
  require_4d(x, "avg_pool");
  const Dims4 d(x.shape());
  if (kh == 0 || kw == 0) throw ContractError("avg_pool kernel must be positive");
  if (kh > d.h || kw > d.w) {
    throw ShapeError("avg_pool kernel (" + std::to_string(kh) + "," + std::to_string(kw) +
                     ") larger than input " + x.shape().str());
  }
  if (d.h % kh != 0 || d.w % kw != 0) {
    throw ShapeError("avg_pool kernel must tile the input exactly");
  }
  const std::size_t ho = d.h / kh, wo = d.w / kw;
  const real inv = real(1) / static_cast<real>(kh * kw);
  const auto v = x.data();
  std::vector<real> out(d.n * d.c * ho * wo, real(0));
  for (std::size_t nc = 0; nc < d.n * d.c; ++nc)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t xw = 0; xw < d.w; ++xw)
        out[(nc * ho + y / kh) * wo + xw / kw] += v[(nc * d.h + y) * d.w + xw];
  for (auto& o : out) o *= inv;
  return detail::make_result(Shape{d.n, d.c, ho, wo}, std::move(out), {x}, "avg_pool",
                             [d, kh, kw, ho, wo, inv](detail::Node& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               for (std::size_t nc = 0; nc < d.n * d.c; ++nc)
                                 for (std::size_t y = 0; y < d.h; ++y)
                                   for (std::size_t xw = 0; xw < d.w; ++xw)
                                     g[(nc * d.h + y) * d.w + xw] +=
                                         self.grad[(nc * ho + y / kh) * wo + xw / kw] * inv;
                             });
}

namespace {

struct LerpTable {
  std::vector<std::size_t> lo, hi;
  std::vector<real> frac;
};

LerpTable lerp_table(std::size_t in, std::size_t out) {
  LerpTable t{std::vector<std::size_t>(out), std::vector<std::size_t>(out),
              std::vector<real>(out)};
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.frac[i] = static_cast<real>(src - static_cast<double>(lo));
  }
  return t;
}

}  // namespace

Tensor resize(const Tensor& x, std::size_t height, std::size_t width, ResizeMode mode) {
  require_4d(x, "resize");
  if (height == 0 || width == 0) throw ContractError("resize target must be >= 1");
  const Dims4 d(x.shape());
  const auto v = x.data();
  if (mode == ResizeMode::row_tile) {
    if (d.h != 1) {
      throw ContractError("resize(row_tile) requires a single-row input, got " +
                          x.shape().str());
    }
    if (width != d.w) throw ContractError("resize(row_tile) cannot change the width");
    std::vector<real> out(d.n * d.c * height * d.w);
    for (std::size_t nc = 0; nc < d.n * d.c; ++nc)
      for (std::size_t y = 0; y < height; ++y)
        std::copy_n(v.data() + nc * d.w, d.w, out.data() + (nc * height + y) * d.w);
    return detail::make_result(Shape{d.n, d.c, height, d.w}, std::move(out), {x}, "row_tile",
                               [d, height](detail::Node& self) {
                                 auto& g = self.inputs[0]->ensure_grad();
                                 for (std::size_t nc = 0; nc < d.n * d.c; ++nc)
                                   for (std::size_t y = 0; y < height; ++y)
                                     for (std::size_t xw = 0; xw < d.w; ++xw)
                                       g[nc * d.w + xw] += self.grad[(nc * height + y) * d.w + xw];
                               });
  }

  const LerpTable ty = lerp_table(d.h, height);
  const LerpTable tx = lerp_table(d.w, width);
  std::vector<real> out(d.n * d.c * height * width);
  for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
    const real* src = v.data() + nc * d.h * d.w;
    real* dst = out.data() + nc * height * width;
    for (std::size_t y = 0; y < height; ++y) {
      const real fy = ty.frac[y];
      const real* r0 = src + ty.lo[y] * d.w;
      const real* r1 = src + ty.hi[y] * d.w;
      for (std::size_t xw = 0; xw < width; ++xw) {
        const real fx = tx.frac[xw];
        const real top = r0[tx.lo[xw]] * (1 - fx) + r0[tx.hi[xw]] * fx;
        const real bot = r1[tx.lo[xw]] * (1 - fx) + r1[tx.hi[xw]] * fx;
        dst[y * width + xw] = top * (1 - fy) + bot * fy;
      }
    }
  }
  return detail::make_result(
      Shape{d.n, d.c, height, width}, std::move(out), {x}, "resize_bilinear",
      [d, height, width, ty, tx](detail::Node& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t nc = 0; nc < d.n * d.c; ++nc) {
          real* gs = g.data() + nc * d.h * d.w;
          const real* go = self.grad.data() + nc * height * width;
          for (std::size_t y = 0; y < height; ++y) {
            const real fy = ty.frac[y];
            real* r0 = gs + ty.lo[y] * d.w;
            real* r1 = gs + ty.hi[y] * d.w;
            for (std::size_t xw = 0; xw < width; ++xw) {
              const real fx = tx.frac[xw];
              const real gv = go[y * width + xw];
              r0[tx.lo[xw]] += gv * (1 - fy) * (1 - fx);
              r0[tx.hi[xw]] += gv * (1 - fy) * fx;
              r1[tx.lo[xw]] += gv * fy * (1 - fx);
              r1[tx.hi[xw]] += gv * fy * fx;
            }
          }
        }
      });
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  require_4d(x, "upsample_nearest");
  if (factor == 0) throw ContractError("upsample factor must be positive");
  const Dims4 d(x.shape());
  const std::size_t ho = d.h * factor, wo = d.w * factor;
  const auto v = x.data();
  std::vector<real> out(d.n * d.c * ho * wo);
  for (std::size_t nc = 0; nc < d.n * d.c; ++nc)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xw = 0; xw < wo; ++xw)
        out[(nc * ho + y) * wo + xw] = v[(nc * d.h + y / factor) * d.w + xw / factor];
  return detail::make_result(Shape{d.n, d.c, ho, wo}, std::move(out), {x}, "upsample_nearest",
                             [d, ho, wo, factor](detail::Node& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               for (std::size_t nc = 0; nc < d.n * d.c; ++nc)
                                 for (std::size_t y = 0; y < ho; ++y)
                                   for (std::size_t xw = 0; xw < wo; ++xw)
                                     g[(nc * d.h + y / factor) * d.w + xw / factor] +=
                                         self.grad[(nc * ho + y) * wo + xw];
                             });
}

Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t cols = x.shape().dims().back();
  const std::size_t rows = x.numel() / cols;
  const auto v = x.data();
  std::vector<real> out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const real* in = v.data() + r * cols;
    real* o = out.data() + r * cols;
    real mx = in[0];
    for (std::size_t c = 0; c < cols; ++c) {
      if (std::isnan(in[c])) throw NumericError("softmax: NaN input");
      mx = std::max(mx, in[c]);
    }
    real z = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      z += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  auto y = out;
  return detail::make_result(x.shape(), std::move(out), {x}, "softmax",
                             [rows, cols, y = std::move(y)](detail::Node& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const real* yr = y.data() + r * cols;
                                 const real* dy = self.grad.data() + r * cols;
                                 real dot = 0;
                                 for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * yr[c];
                                 for (std::size_t c = 0; c < cols; ++c)
                                   g[r * cols + c] += yr[c] * (dy[c] - dot);
                               }
                             });
}

Tensor transpose_hw(const Tensor& x) {
  require_4d(x, "transpose_hw");
  return transpose_last2(x);
}

}  // namespace asap
