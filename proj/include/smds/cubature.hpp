#pragma once

#include "smds/common.hpp"

namespace smds {

/// Fifth-degree spherical radial cubature rule for standard Gaussian
/// expectations in dimension d: 2d^2+1 points with weights summing to 1.
/// Weights on the axis points are negative for d > 4, which is fine for the
/// moment computations here.
struct CubatureSet {
  Mat points;   // d x (2d^2+1), column a is the point xi_a
  Vec weights;  // 2d^2+1

  int dim() const { return static_cast<int>(points.rows()); }
  int count() const { return static_cast<int>(points.cols()); }
};

CubatureSet cubature_points(int d);

}  // namespace smds
