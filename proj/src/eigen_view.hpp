#pragma once

#include "kvprune/numerics.hpp"

#include <Eigen/Dense>

namespace kvprune::detail {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

inline ECMap view(const Matrix & m) { return ECMap(m.data(), (Eigen::Index) m.rows(), (Eigen::Index) m.cols()); }
inline EMap view(Matrix & m) { return EMap(m.data(), (Eigen::Index) m.rows(), (Eigen::Index) m.cols()); }

} // namespace kvprune::detail
