#include <doctest.h>

#include <cmath>

#include "smds/rng.hpp"

using smds::Rng;

TEST_CASE("raw stream is reproducible across platforms") {
  Rng r(42);
  CHECK(r.next_u64() == 13679457532755275413ull);
  CHECK(r.next_u64() == 2949826092126892291ull);
  CHECK(r.next_u64() == 5139283748462763858ull);

  Rng u(42);
  CHECK(u.uniform() == doctest::Approx(0.74156487877182331).epsilon(1e-15));
  CHECK(u.uniform() == doctest::Approx(0.1599103928769201).epsilon(1e-15));

  Rng n(42);
  CHECK(n.normal() == doctest::Approx(0.41471975043153059).epsilon(1e-15));
  CHECK(n.normal() == doctest::Approx(-0.89188621362775633).epsilon(1e-15));

  Rng p(42);
  CHECK(p.poisson(3.0) == 2);
  CHECK(p.poisson(3.0) == 1);
  CHECK(p.poisson(0.5) == 1);

  CHECK(smds::derive_seed(7, 3) == 15335542593575262643ull);
  CHECK(Rng(9).spawn(2).next_u64() == 16284272917781330017ull);
}

TEST_CASE("same seed gives same sequence, different seeds diverge") {
  Rng a(123), b(123), c(124);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 100; ++i) {
    uint64_t va = a.next_u64();
    all_equal = all_equal && (va == b.next_u64());
    any_diff = any_diff || (va != c.next_u64());
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("uniform stays in [0,1) with mean near one half") {
  Rng r(7);
  const int N = 100000;
  double sum = 0.0;
  for (int i = 0; i < N; ++i) {
    double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  CHECK(sum / N == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("normal moments match the standard Gaussian") {
  Rng r(11);
  const int N = 200000;
  double s1 = 0.0, s2 = 0.0;
  for (int i = 0; i < N; ++i) {
    double z = r.normal();
    s1 += z;
    s2 += z * z;
  }
  double mean = s1 / N;
  double var = s2 / N - mean * mean;
  CHECK(mean == doctest::Approx(0.0).epsilon(1).scale(0.01));
  CHECK(var == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("poisson moments match for small and large means") {
  for (double lambda : {0.06, 3.0, 80.0}) {
    Rng r(static_cast<uint64_t>(lambda * 1000) + 5);
    const int N = 100000;
    double s1 = 0.0, s2 = 0.0;
    for (int i = 0; i < N; ++i) {
      double k = static_cast<double>(r.poisson(lambda));
      REQUIRE(k >= 0);
      s1 += k;
      s2 += k * k;
    }
    double mean = s1 / N;
    double var = s2 / N - mean * mean;
    double se_mean = 3.0 * std::sqrt(lambda / N);
    CHECK(std::abs(mean - lambda) < se_mean + 0.02 * lambda);
    CHECK(var == doctest::Approx(lambda).epsilon(0.06));
  }
}

TEST_CASE("spawn streams are independent of the parent stream") {
  Rng parent(5);
  Rng child = parent.spawn(1);
  uint64_t before = parent.next_u64();
  Rng parent2(5);
  parent2.spawn(1);
  CHECK(parent2.next_u64() == before);
  CHECK(child.next_u64() != before);
}
