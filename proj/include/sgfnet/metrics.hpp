#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sgfnet/tensor.hpp"

namespace sgfnet {

/// K x K counts, rows = ground truth, cols = prediction.
struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::uint64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes) : k(classes), counts(classes * classes, 0) {}

  std::uint64_t& operator()(std::size_t gt, std::size_t pred) { return counts[gt * k + pred]; }
  std::uint64_t operator()(std::size_t gt, std::size_t pred) const { return counts[gt * k + pred]; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    if (other.k != k) throw DimensionError("ConfusionMatrix: merging " + std::to_string(other.k) + " into " + std::to_string(k));
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
    return *this;
  }

  bool operator==(const ConfusionMatrix&) const = default;
};

template <class Label>
void accumulate(ConfusionMatrix& cm, std::span<const Label> pred, std::span<const Label> gt) {
  if (pred.size() != gt.size()) {
    throw DimensionError("accumulate: prediction has " + std::to_string(pred.size()) + " pixels, labels " +
                         std::to_string(gt.size()));
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const auto g = static_cast<std::size_t>(gt[i]), p = static_cast<std::size_t>(pred[i]);
    if (g >= cm.k || p >= cm.k) throw RangeError("accumulate: class index out of range for K=" + std::to_string(cm.k));
    ++cm(g, p);
  }
}

struct SegMetrics {
  std::vector<double> acc;  // NaN for classes absent from the ground truth
  std::vector<double> iou;
  std::vector<bool> present;
  double macc = 0.0;
  double miou = 0.0;
};

/// Per-class accuracy and IoU; means run over classes present in the ground truth.
inline SegMetrics metrics(const ConfusionMatrix& cm) {
  const std::size_t k = cm.k;
  SegMetrics m;
  m.acc.assign(k, std::numeric_limits<double>::quiet_NaN());
  m.iou.assign(k, std::numeric_limits<double>::quiet_NaN());
  m.present.assign(k, false);
  std::size_t present = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += cm(c, j);
      col += cm(j, c);
    }
    if (row == 0) continue;
    const double tp = static_cast<double>(cm(c, c));
    m.acc[c] = tp / static_cast<double>(row);
    m.iou[c] = tp / static_cast<double>(row + col - cm(c, c));
    m.present[c] = true;
    m.macc += m.acc[c];
    m.miou += m.iou[c];
    ++present;
  }
  if (present == 0) throw RangeError("metrics: confusion matrix is empty");
  m.macc /= static_cast<double>(present);
  m.miou /= static_cast<double>(present);
  return m;
}

}  // namespace sgfnet
