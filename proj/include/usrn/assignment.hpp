#pragma once

#include <vector>

#include "usrn/grid.hpp"

namespace usrn {

/// Minimum-cost assignment of every row to a distinct column (rows <= cols),
/// Hungarian method with potentials, O(rows^2 cols). Returns the column of
/// each row.
std::vector<int> solve_assignment(const Matrix& cost);

}  // namespace usrn
