#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace usrn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Tolerance on per-pixel probability normalization.
inline constexpr double kProbTolerance = 1e-6;

/// H x W grid of D-dimensional pixel features. Pixels are stored one per
/// row in row-major pixel order (index = y * width + x), channels as columns.
struct FeatureGrid {
  int height = 0;
  int width = 0;
  Matrix values;

  FeatureGrid() = default;
  FeatureGrid(int h, int w, int d) : height(h), width(w), values(Matrix::Zero(h * w, d)) {}
  FeatureGrid(int h, int w, Matrix v) : height(h), width(w), values(std::move(v)) {}

  int dim() const { return static_cast<int>(values.cols()); }
  int pixels() const { return height * width; }
  int index(int y, int x) const { return y * width + x; }

  /// Throws DataError on bad geometry or non-finite values.
  void validate() const;
};

/// H x W grid of K-dimensional probability vectors, same pixel layout.
struct ProbGrid {
  int height = 0;
  int width = 0;
  Matrix probs;

  int classes() const { return static_cast<int>(probs.cols()); }
  int pixels() const { return height * width; }

  /// True when every row is non-negative and sums to 1 within tol.
  bool is_normalized(double tol = kProbTolerance) const;
};

/// Per-pixel indices in [0, num_labels) or the reserved ignore value
/// num_labels.
struct LabelGrid {
  int height = 0;
  int width = 0;
  int num_labels = 0;
  std::vector<int> labels;

  LabelGrid() = default;
  LabelGrid(int h, int w, int k, int fill)
      : height(h), width(w), num_labels(k), labels(static_cast<std::size_t>(h * w), fill) {}

  static LabelGrid ignored(int h, int w, int k) { return LabelGrid(h, w, k, k); }

  int ignore_index() const { return num_labels; }
  int pixels() const { return height * width; }
  int& at(int p) { return labels[static_cast<std::size_t>(p)]; }
  int at(int p) const { return labels[static_cast<std::size_t>(p)]; }
  bool is_ignored(int p) const { return at(p) == num_labels; }

  /// Number of non-ignored pixels.
  int valid_count() const;
  /// Per-label pixel histogram (ignored pixels excluded).
  std::vector<long> histogram() const;
  /// Throws DataError if any entry is outside [0, num_labels].
  void validate() const;
};

// A batch of equally-sized images behaves as one tall grid, since every
// model operation is per pixel.
FeatureGrid stack(std::span<const FeatureGrid> grids);
LabelGrid stack(std::span<const LabelGrid> grids);

/// Row-wise softmax with max subtraction.
template <typename Derived>
Matrix softmax_rows(const Eigen::MatrixBase<Derived>& logits) {
  Matrix out = logits.colwise() - logits.rowwise().maxCoeff();
  out = out.array().exp().matrix();
  out.array().colwise() /= out.rowwise().sum().array();
  return out;
}

/// Row-wise Shannon entropy (natural log) with 0 ln 0 = 0. Terms are summed
/// in sorted order, so permuted rows give bit-identical values.
template <typename Derived>
Vector entropy_rows(const Eigen::MatrixBase<Derived>& probs) {
  Vector out(probs.rows());
  std::vector<double> row(static_cast<std::size_t>(probs.cols()));
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    for (Eigen::Index c = 0; c < probs.cols(); ++c) row[static_cast<std::size_t>(c)] = probs(r, c);
    std::sort(row.begin(), row.end());
    double h = 0.0;
    for (double p : row)
      if (p > 0.0) h -= p * std::log(p);
    out(r) = h;
  }
  return out;
}

/// Index of the row maximum; ties resolve to the lowest index.
template <typename Derived>
int argmax_row(const Eigen::MatrixBase<Derived>& m, Eigen::Index row) {
  int best = 0;
  for (Eigen::Index c = 1; c < m.cols(); ++c)
    if (m(row, c) > m(row, best)) best = static_cast<int>(c);
  return best;
}

}  // namespace usrn
