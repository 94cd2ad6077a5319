#include "usrn/grid.hpp"

#include "usrn/error.hpp"

#include <string>

namespace usrn {

void FeatureGrid::validate() const {
  if (height < 1 || width < 1 || dim() < 1)
    throw DataError("feature grid must have positive height, width and dim");
  if (values.rows() != static_cast<Eigen::Index>(height) * width)
    throw DataError("feature grid storage does not match its geometry");
  if (!values.allFinite()) throw DataError("feature grid contains non-finite values");
}

bool ProbGrid::is_normalized(double tol) const {
  if ((probs.array() < 0.0).any() || (probs.array() > 1.0 + tol).any()) return false;
  return ((probs.rowwise().sum().array() - 1.0).abs() <= tol).all();
}

int LabelGrid::valid_count() const {
  int n = 0;
  for (int v : labels) n += v != num_labels;
  return n;
}

std::vector<long> LabelGrid::histogram() const {
  std::vector<long> h(static_cast<std::size_t>(num_labels), 0);
  for (int v : labels)
    if (v >= 0 && v < num_labels) ++h[static_cast<std::size_t>(v)];
  return h;
}

void LabelGrid::validate() const {
  if (labels.size() != static_cast<std::size_t>(height * width))
    throw DataError("label grid storage does not match its geometry");
  for (int v : labels)
    if (v < 0 || v > num_labels)
      throw DataError("label index " + std::to_string(v) + " outside [0, " +
                      std::to_string(num_labels) + "]");
}

FeatureGrid stack(std::span<const FeatureGrid> grids) {
  if (grids.empty()) return {};
  const int w = grids.front().width;
  const int d = grids.front().dim();
  int h = 0;
  for (const auto& g : grids) {
    if (g.width != w || g.dim() != d) throw DataError("cannot stack grids of different width or dim");
    h += g.height;
  }
  FeatureGrid out(h, w, d);
  Eigen::Index row = 0;
  for (const auto& g : grids) {
    out.values.middleRows(row, g.values.rows()) = g.values;
    row += g.values.rows();
  }
  return out;
}

LabelGrid stack(std::span<const LabelGrid> grids) {
  if (grids.empty()) return {};
  LabelGrid out;
  out.width = grids.front().width;
  out.num_labels = grids.front().num_labels;
  for (const auto& g : grids) {
    if (g.width != out.width || g.num_labels != out.num_labels)
      throw DataError("cannot stack label grids of different width or label count");
    out.height += g.height;
    out.labels.insert(out.labels.end(), g.labels.begin(), g.labels.end());
  }
  return out;
}

}  // namespace usrn
