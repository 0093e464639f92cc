#pragma once

#include <Eigen/Core>

namespace objsdf {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Dense row-major matrix. Rows index batch entries, columns features.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace objsdf
