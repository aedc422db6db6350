#include "asap/loss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace asap {

void LossWeights::validate() const {
  if (!(alpha >= 0) || !(beta >= 0)) throw ContractError("loss weights must be >= 0");
  if (!(ohem_threshold > 0 && ohem_threshold < 1)) {
    throw ContractError("ohem_threshold must lie in (0, 1)");
  }
}

std::size_t LossWeights::min_kept_for(std::size_t total_pixels) const {
  if (ohem_min_kept) return ohem_min_kept;
  return std::max<std::size_t>(1, total_pixels / 16);
}

namespace {

struct Dims {
  std::size_t n, k, h, w;
};

Dims check_logits(const Tensor& logits, const LabelMap& labels) {
  const auto& s = logits.shape();
  if (s.rank() != 4) throw ShapeError("logits must be [N,K,H,W], got " + s.str());
  if (labels.n != s[0] || labels.h != s[2] || labels.w != s[3]) {
    throw ShapeError("labels do not match logits " + s.str());
  }
  return {s[0], s[1], s[2], s[3]};
}

}  // namespace

OhemSelection ohem_select(const Tensor& logits, const LabelMap& labels, const LossWeights& w) {
  w.validate();
  const Dims d = check_logits(logits, labels);
  const std::size_t hw = d.h * d.w, total = d.n * hw;
  const auto x = logits.data();
  OhemSelection sel{std::vector<real>(total, 0), std::vector<real>(total, 0), {}};
  std::vector<std::size_t> valid;
  valid.reserve(total);
  for (std::size_t b = 0; b < d.n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t idx = b * hw + p;
      const std::int32_t label = labels.data[idx];
      if (label == w.ignore_label) continue;
      if (label < 0 || static_cast<std::size_t>(label) >= d.k) {
        throw ContractError("label " + std::to_string(label) + " outside [0, " +
                            std::to_string(d.k) + ")");
      }
      const real* base = x.data() + b * d.k * hw + p;
      real mx = base[0];
      for (std::size_t c = 1; c < d.k; ++c) mx = std::max(mx, base[c * hw]);
      real z = 0;
      for (std::size_t c = 0; c < d.k; ++c) z += std::exp(base[c * hw] - mx);
      const real log_prob = base[static_cast<std::size_t>(label) * hw] - mx - std::log(z);
      sel.pixel_loss[idx] = -log_prob;
      sel.correct_prob[idx] = std::exp(log_prob);
      valid.push_back(idx);
    }
  if (valid.empty()) throw DegenerateBatchError("ohem_ce: no scorable pixels in batch");

  std::vector<std::size_t> hard;
  for (auto idx : valid)
    if (sel.correct_prob[idx] < w.ohem_threshold) hard.push_back(idx);
  const std::size_t min_kept = w.min_kept_for(total);
  if (hard.size() >= min_kept) {
    sel.kept = std::move(hard);
  } else {
    const std::size_t keep = std::min(min_kept, valid.size());
    std::stable_sort(valid.begin(), valid.end(), [&](std::size_t a, std::size_t b) {
      return sel.pixel_loss[a] > sel.pixel_loss[b];
    });
    valid.resize(keep);
    std::sort(valid.begin(), valid.end());
    sel.kept = std::move(valid);
  }
  return sel;
}

Tensor ohem_ce(const Tensor& logits, const LabelMap& labels, const LossWeights& w) {
  OhemSelection sel = ohem_select(logits, labels, w);
  const Dims d = check_logits(logits, labels);
  const std::size_t hw = d.h * d.w;
  long double acc = 0;
  for (auto idx : sel.kept) acc += sel.pixel_loss[idx];
  const real inv = real(1) / static_cast<real>(sel.kept.size());

  std::vector<std::uint8_t> mask(sel.pixel_loss.size(), 0);
  for (auto idx : sel.kept) mask[idx] = 1;
  KinkProbe::record(mask);

  std::vector<std::int32_t> kept_labels;
  kept_labels.reserve(sel.kept.size());
  for (auto idx : sel.kept) kept_labels.push_back(labels.data[idx]);
  return detail::make_result(
      Shape{1}, {static_cast<real>(acc * inv)}, {logits}, "ohem_ce",
      [d, hw, inv, kept = std::move(sel.kept),
       kept_labels = std::move(kept_labels)](detail::Node& self) {
        // d/dz_c = (softmax_c - [c == y]) / |kept|
        const auto& x = self.inputs[0]->data;
        auto& g = self.inputs[0]->ensure_grad();
        const real scale = self.grad[0] * inv;
        for (std::size_t i = 0; i < kept.size(); ++i) {
          const std::size_t b = kept[i] / hw, p = kept[i] % hw;
          const std::size_t base = b * d.k * hw + p;
          real mx = x[base];
          for (std::size_t c = 1; c < d.k; ++c) mx = std::max(mx, x[base + c * hw]);
          real z = 0;
          for (std::size_t c = 0; c < d.k; ++c) z += std::exp(x[base + c * hw] - mx);
          for (std::size_t c = 0; c < d.k; ++c) {
            const real prob = std::exp(x[base + c * hw] - mx) / z;
            const real target = static_cast<std::int32_t>(c) == kept_labels[i] ? real(1) : real(0);
            g[base + c * hw] += scale * (prob - target);
          }
        }
      });
}

LossBreakdown total_loss(const Tensor& pred, const Tensor& aux1, const Tensor& aux2,
                         const LabelMap& labels, const LossWeights& w) {
  if (pred.shape() != aux1.shape() || pred.shape() != aux2.shape()) {
    throw ShapeError("total_loss: prediction and auxiliary logits must share a shape");
  }
  const Tensor lp = ohem_ce(pred, labels, w);
  const Tensor l1 = ohem_ce(aux1, labels, w);
  const Tensor l2 = ohem_ce(aux2, labels, w);
  LossBreakdown out;
  out.total = lp + scale(l1, w.alpha) + scale(l2, w.beta);
  out.pred = lp.item();
  out.aux1 = l1.item();
  out.aux2 = l2.item();
  return out;
}

// ---------------------------------------------------------------- metrics

ConfusionMatrix::ConfusionMatrix(std::size_t n_classes)
    : n_(n_classes), counts_(n_classes * n_classes, 0) {
  if (n_classes == 0) throw ContractError("confusion matrix needs at least one class");
}

ConfusionMatrix ConfusionMatrix::from_counts(std::size_t n_classes,
                                             std::vector<std::uint64_t> counts) {
  ConfusionMatrix cm(n_classes);
  if (counts.size() != n_classes * n_classes) throw ShapeError("confusion counts size mismatch");
  cm.counts_ = std::move(counts);
  return cm;
}

void ConfusionMatrix::add(std::size_t truth, std::size_t prediction, std::uint64_t count) {
  if (truth >= n_ || prediction >= n_) throw ContractError("confusion index out of range");
  counts_[truth * n_ + prediction] += count;
}

void ConfusionMatrix::add(const LabelMap& truth, const LabelMap& prediction,
                          std::int32_t ignore_label) {
  if (truth.data.size() != prediction.data.size()) {
    throw ShapeError("confusion: truth and prediction sizes differ");
  }
  for (std::size_t i = 0; i < truth.data.size(); ++i) {
    if (truth.data[i] == ignore_label) continue;
    add(static_cast<std::size_t>(truth.data[i]), static_cast<std::size_t>(prediction.data[i]));
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw ShapeError("confusion: class count mismatch in merge");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::at(std::size_t truth, std::size_t prediction) const {
  return counts_.at(truth * n_ + prediction);
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

MiouReport miou(const ConfusionMatrix& cm) {
  const std::size_t n = cm.classes();
  MiouReport r;
  r.iou.resize(n);
  double acc = 0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < n; ++k) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < n; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    const std::uint64_t tp = cm.at(k, k);
    const std::uint64_t denom = row + col - tp;  // TP + FN + FP
    if (denom == 0) continue;
    r.iou[k] = static_cast<double>(tp) / static_cast<double>(denom);
    acc += *r.iou[k];
    ++present;
  }
  if (present == 0) throw DegenerateMetricError("miou: every class is empty");
  r.mean = acc / static_cast<double>(present);
  return r;
}

LabelMap predict(const Tensor& logits) {
  const auto& s = logits.shape();
  if (s.rank() != 4) throw ShapeError("predict expects [N,K,H,W], got " + s.str());
  const std::size_t n = s[0], k = s[1], hw = s[2] * s[3];
  LabelMap out(n, s[2], s[3]);
  const auto x = logits.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      const real* base = x.data() + b * k * hw + p;
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (base[c * hw] > base[best * hw]) best = c;
      out.data[b * hw + p] = static_cast<std::int32_t>(best);
    }
  return out;
}

}  // namespace asap
