#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace asap {

inline constexpr std::int32_t kIgnoreLabel = 255;

/// Integer class map laid out N x H x W (row-major).
struct LabelMap {
  std::size_t n = 1;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::int32_t> data;

  LabelMap() = default;
  LabelMap(std::size_t n_, std::size_t h_, std::size_t w_, std::int32_t fill = 0)
      : n(n_), h(h_), w(w_), data(n_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::int32_t& at(std::size_t b, std::size_t y, std::size_t x) { return data[(b * h + y) * w + x]; }
  std::int32_t at(std::size_t b, std::size_t y, std::size_t x) const {
    return data[(b * h + y) * w + x];
  }
  bool operator==(const LabelMap&) const = default;
};

}  // namespace asap
