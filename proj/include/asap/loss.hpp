#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "asap/labels.hpp"
#include "asap/tensor.hpp"

namespace asap {

class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};
class DegenerateMetricError : public Error {
 public:
  using Error::Error;
};

struct LossWeights {
  real alpha = real(0.4);
  real beta = real(0.4);
  real ohem_threshold = real(0.7);
  std::size_t ohem_min_kept = 0;  // 0 selects max(1, N*H*W / 16)
  std::int32_t ignore_label = kIgnoreLabel;

  void validate() const;
  std::size_t min_kept_for(std::size_t total_pixels) const;
};

struct OhemSelection {
  std::vector<real> pixel_loss;  // per pixel cross entropy (0 for ignored)
  std::vector<real> correct_prob;
  std::vector<std::size_t> kept;  // flat pixel indices, ascending
};

/// Per-pixel cross entropy and the OHEM kept set: pixels whose correct-class
/// probability is below the threshold, or the min_kept highest-loss pixels
/// when there are fewer hard ones.
OhemSelection ohem_select(const Tensor& logits, const LabelMap& labels, const LossWeights& w);

/// Mean cross entropy over the OHEM kept set.
Tensor ohem_ce(const Tensor& logits, const LabelMap& labels, const LossWeights& w);

struct LossBreakdown {
  Tensor total;
  real pred = 0;
  real aux1 = 0;
  real aux2 = 0;
};

/// pred + alpha * aux1 + beta * aux2, each term an independent ohem_ce.
LossBreakdown total_loss(const Tensor& pred, const Tensor& aux1, const Tensor& aux2,
                         const LabelMap& labels, const LossWeights& w);

/// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n_classes);
  static ConfusionMatrix from_counts(std::size_t n_classes, std::vector<std::uint64_t> counts);

  void add(const LabelMap& truth, const LabelMap& prediction,
           std::int32_t ignore_label = kIgnoreLabel);
  void add(std::size_t truth, std::size_t prediction, std::uint64_t count = 1);
  void merge(const ConfusionMatrix& other);

  std::size_t classes() const { return n_; }
  std::uint64_t at(std::size_t truth, std::size_t prediction) const;
  std::uint64_t total() const;
  const std::vector<std::uint64_t>& counts() const { return counts_; }
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

struct MiouReport {
  std::vector<std::optional<double>> iou;  // nullopt: class absent from truth and prediction
  double mean = 0.0;
};

MiouReport miou(const ConfusionMatrix& cm);

/// Per-pixel argmax over the class axis of [N, K, H, W] logits.
LabelMap predict(const Tensor& logits);

}  // namespace asap
