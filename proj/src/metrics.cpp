#include "usrn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "usrn/error.hpp"

namespace usrn {

ConfusionMatrix::ConfusionMatrix(int num_classes) {
  if (num_classes < 1) throw ConfigError("confusion matrix needs at least one class");
  counts_.setZero(num_classes, num_classes);
}

void ConfusionMatrix::add(int truth, int pred, std::int64_t n) {
  if (truth < 0 || truth >= classes() || pred < 0 || pred >= classes())
    throw DataError("confusion matrix index out of range");
  counts_(truth, pred) += n;
}

void ConfusionMatrix::accumulate(const LabelGrid& truth, const LabelGrid& pred) {
  if (truth.pixels() != pred.pixels()) throw DataError("truth and prediction grids differ in size");
  for (int p = 0; p < truth.pixels(); ++p) {
    if (truth.is_ignored(p) || pred.is_ignored(p)) continue;
    add(truth.at(p), pred.at(p));
  }
}

ConfusionMatrix& ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes() != classes()) throw DataError("cannot merge confusion matrices of different size");
  counts_ += other.counts_;
  return *this;
}

IoUReport miou(const ConfusionMatrix& cm) {
  const int k = cm.classes();
  IoUReport r;
  r.per_class.assign(static_cast<std::size_t>(k), std::numeric_limits<double>::quiet_NaN());
  r.defined.assign(static_cast<std::size_t>(k), false);
  double sum = 0.0;
  int n = 0;
  r.min = 1.0;
  for (int c = 0; c < k; ++c) {
    const auto tp = cm(c, c);
    const auto fn = cm.counts().row(c).sum() - tp;
    const auto fp = cm.counts().col(c).sum() - tp;
    const auto denom = tp + fp + fn;
    if (denom == 0) continue;
    const double iou = static_cast<double>(tp) / static_cast<double>(denom);
    r.per_class[static_cast<std::size_t>(c)] = iou;
    r.defined[static_cast<std::size_t>(c)] = true;
    sum += iou;
    r.min = std::min(r.min, iou);
    ++n;
  }
  r.mean = n > 0 ? sum / n : 0.0;
  if (n == 0) r.min = 0.0;
  return r;
}

double cbr(std::span<const long> counts) {
  const auto c = static_cast<double>(counts.size());
  if (counts.size() < 2) throw DataError("class balance rate needs at least two classes");
  double total = 0.0, sq = 0.0;
  for (long n : counts) {
    if (n < 0) throw DataError("class counts must be non-negative");
    total += static_cast<double>(n);
    sq += static_cast<double>(n) * static_cast<double>(n);
  }
  if (total <= 0.0) throw DataError("class counts must not all be zero");
  const double mean = total / c;
  const double sigma = std::sqrt(std::max(0.0, sq / c - mean * mean));
  const double sigma_star = std::sqrt(total * total / c - mean * mean);
  return 100.0 * (1.0 - sigma / sigma_star);
}

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw DataError("label sequences differ in length");
  const auto n = static_cast<double>(a.size());
  if (a.size() < 2) return 1.0;
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> rows, cols;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1.0;
    rows[a[i]] += 1.0;
    cols[b[i]] += 1.0;
  }
  auto pairs = [](double m) { return m * (m - 1.0) / 2.0; };
  double index = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& [_, m] : joint) index += pairs(m);
  for (const auto& [_, m] : rows) sum_a += pairs(m);
  for (const auto& [_, m] : cols) sum_b += pairs(m);
  const double expected = sum_a * sum_b / pairs(n);
  const double max_index = 0.5 * (sum_a + sum_b);
  // Both partitions trivial (all-singletons or one block) and identical.
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

}  // namespace usrn
