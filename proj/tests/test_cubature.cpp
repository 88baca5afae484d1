#include <doctest.h>

#include <cmath>
#include <vector>

#include "smds/cubature.hpp"

using smds::CubatureSet;

namespace {

// E[prod z_i^p_i] for independent standard normals: product of (p_i - 1)!!
// over even p_i, zero if any p_i is odd.
double gaussian_monomial_moment(const std::vector<int>& powers) {
  double prod = 1.0;
  for (int p : powers) {
    if (p % 2 == 1) return 0.0;
    for (int k = p - 1; k >= 1; k -= 2) prod *= k;
  }
  return prod;
}

double cubature_monomial(const CubatureSet& cub, const std::vector<int>& powers) {
  double acc = 0.0;
  for (int a = 0; a < cub.count(); ++a) {
    double term = cub.weights(a);
    for (int i = 0; i < cub.dim(); ++i) {
      term *= std::pow(cub.points(i, a), powers[i]);
    }
    acc += term;
  }
  return acc;
}

void check_all_monomials(const CubatureSet& cub, std::vector<int>& powers,
                         int dim_index, int degree_left) {
  if (dim_index == cub.dim()) {
    CHECK(cubature_monomial(cub, powers) ==
          doctest::Approx(gaussian_monomial_moment(powers)).epsilon(1e-8).scale(1.0));
    return;
  }
  for (int p = 0; p <= degree_left; ++p) {
    powers[dim_index] = p;
    check_all_monomials(cub, powers, dim_index + 1, degree_left - p);
  }
  powers[dim_index] = 0;
}

}  // namespace

TEST_CASE("one dimensional rule reduces to three known points") {
  CubatureSet cub = smds::cubature_points(1);
  REQUIRE(cub.count() == 3);
  CHECK(cub.points(0, 0) == 0.0);
  CHECK(cub.points(0, 1) == doctest::Approx(std::sqrt(3.0)).epsilon(1e-15));
  CHECK(cub.points(0, 2) == doctest::Approx(-std::sqrt(3.0)).epsilon(1e-15));
  CHECK(cub.weights(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(cub.weights(1) == doctest::Approx(1.0 / 6.0).epsilon(1e-15));
  CHECK(cub.weights(2) == doctest::Approx(1.0 / 6.0).epsilon(1e-15));
}

TEST_CASE("fourth moment comes out exact in one dimension") {
  CubatureSet cub = smds::cubature_points(1);
  double m4 = 0.0;
  for (int a = 0; a < cub.count(); ++a) {
    m4 += cub.weights(a) * std::pow(cub.points(0, a), 4);
  }
  CHECK(m4 == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("point count and weight sum for several dimensions") {
  for (int d : {1, 2, 3, 4, 5, 10}) {
    CubatureSet cub = smds::cubature_points(d);
    CHECK(cub.count() == 2 * d * d + 1);
    CHECK(cub.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("point set is symmetric under negation away from the center") {
  CubatureSet cub = smds::cubature_points(4);
  CHECK(cub.points.col(0).cwiseAbs().maxCoeff() == 0.0);
  for (int a = 1; a < cub.count(); ++a) {
    bool found = false;
    for (int b = 1; b < cub.count() && !found; ++b) {
      found = (cub.points.col(a) + cub.points.col(b)).cwiseAbs().maxCoeff() < 1e-12;
    }
    CHECK(found);
  }
}

TEST_CASE("axis weights go negative above dimension four") {
  CubatureSet cub = smds::cubature_points(10);
  CHECK(cub.weights(1) < 0.0);
  CHECK(cub.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("all monomials of total degree up to five integrate exactly") {
  for (int d : {1, 2, 3, 5}) {
    CubatureSet cub = smds::cubature_points(d);
    std::vector<int> powers(d, 0);
    check_all_monomials(cub, powers, 0, 5);
  }
}
