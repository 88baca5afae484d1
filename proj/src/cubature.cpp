#include "smds/cubature.hpp"

#include <cmath>

namespace smds {

CubatureSet cubature_points(int d) {
  if (d < 1) throw ConfigError("cubature_points: dimension must be >= 1");
  const int P = 2 * d * d + 1;
  CubatureSet cub;
  cub.points = Mat::Zero(d, P);
  cub.weights = Vec::Zero(P);

  const double dp2 = static_cast<double>(d) + 2.0;
  const double scale = std::sqrt(dp2);
  const double w_center = 2.0 / dp2;
  const double w_axis = (4.0 - d) / (2.0 * dp2 * dp2);
  const double w_diag = 1.0 / (dp2 * dp2);

  int a = 0;
  cub.weights(a) = w_center;
  ++a;
  for (int j = 0; j < d; ++j) {
    for (double sign : {1.0, -1.0}) {
      cub.points(j, a) = sign * scale;
      cub.weights(a) = w_axis;
      ++a;
    }
  }
  const double off = scale / std::sqrt(2.0);
  for (int j = 0; j < d; ++j) {
    for (int k = j + 1; k < d; ++k) {
      for (double sj : {1.0, -1.0}) {
        for (double sk : {1.0, -1.0}) {
          cub.points(j, a) = sj * off;
          cub.points(k, a) = sk * off;
          cub.weights(a) = w_diag;
          ++a;
        }
      }
    }
  }
  return cub;
}

}  // namespace smds
