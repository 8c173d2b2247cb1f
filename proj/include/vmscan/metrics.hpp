#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace vmscan {

/// Per-class prediction/ground-truth counts. Rows are ground truth, columns
/// are predictions. Pixels whose ground truth is in the excluded set are
/// skipped entirely; excluded classes contribute to no IoU.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(long num_classes, std::set<long> excluded = {})
      : k_(num_classes), excluded_(std::move(excluded)),
        counts_(static_cast<size_t>(num_classes * num_classes), 0) {
    if (num_classes < 1)
      throw std::invalid_argument("ConfusionMatrix: need at least one class");
  }

  long num_classes() const { return k_; }
  const std::set<long>& excluded() const { return excluded_; }

  uint64_t count(long gt, long pred) const {
    return counts_[static_cast<size_t>(gt * k_ + pred)];
  }

  uint64_t total() const {
    uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  void update(const std::vector<int>& pred, const std::vector<int>& gt) {
    if (pred.size() != gt.size())
      throw std::invalid_argument("ConfusionMatrix::update: shape mismatch");
    for (size_t i = 0; i < pred.size(); ++i) {
      const long g = gt[i], p = pred[i];
      if (g < 0 || g >= k_ || p < 0 || p >= k_)
        throw std::invalid_argument("ConfusionMatrix::update: class id out of range");
      if (excluded_.count(g)) continue;
      counts_[static_cast<size_t>(g * k_ + p)] += 1;
    }
  }

  /// Associative merge for parallel evaluation shards.
  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    if (other.k_ != k_ || other.excluded_ != excluded_)
      throw std::invalid_argument("ConfusionMatrix: merge of incompatible matrices");
    for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
  }

  /// IoU_c = TP / (TP + FP + FN). Excluded classes and classes absent from
  /// both prediction and ground truth get NaN and are skipped by miou().
  std::vector<double> iou_per_class() const {
    std::vector<double> iou(static_cast<size_t>(k_),
                            std::numeric_limits<double>::quiet_NaN());
    for (long c = 0; c < k_; ++c) {
      if (excluded_.count(c)) continue;
      uint64_t tp = count(c, c), fp = 0, fn = 0;
      for (long o = 0; o < k_; ++o) {
        if (o == c) continue;
        fp += count(o, c);
        fn += count(c, o);
      }
      const uint64_t denom = tp + fp + fn;
      if (denom == 0) continue;  // degenerate class, not scored
      iou[static_cast<size_t>(c)] = static_cast<double>(tp) / static_cast<double>(denom);
    }
    return iou;
  }

  /// Mean over non-excluded, non-degenerate classes.
  double miou() const {
    double acc = 0.0;
    long n = 0;
    for (double v : iou_per_class()) {
      if (std::isnan(v)) continue;
      acc += v;
      ++n;
    }
    return n > 0 ? acc / static_cast<double>(n) : 0.0;
  }

 private:
  long k_;
  std::set<long> excluded_;
  std::vector<uint64_t> counts_;
};

}  // namespace vmscan
