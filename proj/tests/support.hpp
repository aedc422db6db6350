#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "asap/layers.hpp"
#include "asap/tensor.hpp"

namespace testing {

using asap::real;
using asap::Shape;
using asap::Tensor;

inline std::vector<real> uniform(std::size_t n, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<real> v(n);
  for (auto& x : v) x = static_cast<real>(d(rng));
  return v;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = false,
                            double lo = -1, double hi = 1) {
  const auto n = shape.numel();
  return Tensor::from(std::move(shape), uniform(n, rng, lo, hi), requires_grad);
}

inline double max_abs_diff(std::span<const real> a, std::span<const real> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

// Weighted sum with fixed random weights: a scalar objective whose gradient
// reaches every output element with a different coefficient.
inline Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  const Tensor w = random_tensor(y.shape(), rng);
  return asap::sum(asap::mul(y, w));
}

// Direct six-loop cross-correlation. `mults` counts multiplications.
inline std::vector<double> reference_conv(const std::vector<double>& x, std::size_t n, std::size_t c,
                                          std::size_t h, std::size_t w,
                                          const std::vector<double>& weight, std::size_t cout,
                                          std::size_t k, std::size_t stride, std::size_t pad,
                                          const std::vector<double>* bias,
                                          std::uint64_t* mults = nullptr, std::uint64_t* adds = nullptr) {
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  std::vector<double> out(n * cout * ho * wo, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = bias ? (*bias)[co] : 0.0;
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                // padded taps still cost a multiply-add in a dense kernel
                double xv = 0.0;
                if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                    ix < static_cast<std::ptrdiff_t>(w))
                  xv = x[((b * c + ci) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
                acc += xv * weight[((co * c + ci) * k + ky) * k + kx];
                if (mults) ++*mults;
                if (adds) ++*adds;
              }
          out[((b * cout + co) * ho + oy) * wo + ox] = acc;
        }
  return out;
}

}  // namespace testing
