#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "usrn/grid.hpp"

namespace usrn {

/// K x K pixel counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  int classes() const { return static_cast<int>(counts_.rows()); }
  void add(int truth, int pred, std::int64_t n = 1);
  /// Adds every pixel where neither grid is ignored.
  void accumulate(const LabelGrid& truth, const LabelGrid& pred);
  ConfusionMatrix& merge(const ConfusionMatrix& other);

  std::int64_t total() const { return counts_.sum(); }
  std::int64_t operator()(int truth, int pred) const { return counts_(truth, pred); }
  const Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>& counts() const { return counts_; }

 private:
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts_;
};

struct IoUReport {
  /// TP / (TP + FP + FN); NaN where the denominator is zero.
  std::vector<double> per_class;
  /// False for classes excluded from the mean.
  std::vector<bool> defined;
  double mean = 0.0;
  /// Minimum over defined classes.
  double min = 0.0;
};

IoUReport miou(const ConfusionMatrix& cm);

/// Class balance rate in percent: 100 * (1 - sigma / sigma_star), with
/// population standard deviations of the counts and of (N, 0, ..., 0).
double cbr(std::span<const long> counts);

/// Chance-corrected pair-counting agreement between two partitions.
double adjusted_rand_index(std::span<const int> a, std::span<const int> b);

}  // namespace usrn
