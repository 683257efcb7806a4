#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "doctest.h"
#include "evaq/rng.hpp"

using namespace evaq;

TEST_CASE("splitmix64 reference stream") {
  // Vectors from the reference implementation seeded with 1234567.
  std::uint64_t s = 1234567;
  CHECK(splitmix64(s) == 6457827717110365317ull);
  CHECK(splitmix64(s) == 3203168211198807973ull);
  CHECK(splitmix64(s) == 9817491932198370423ull);
}

TEST_CASE("fnv1a64 known digests") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
}

TEST_CASE("derive_seed decorrelates stages") {
  const auto a = derive_seed(1, "synth");
  const auto b = derive_seed(1, "split");
  const auto c = derive_seed(2, "synth");
  CHECK(a != b);
  CHECK(a != c);
  CHECK(derive_seed(1, "synth") == a);
  CHECK(derive_seed(1, std::uint64_t{0}) != derive_seed(1, std::uint64_t{1}));
}

TEST_CASE("Rng determinism and uniform bounds") {
  Rng r1(42), r2(42);
  for (int i = 0; i < 100; ++i) CHECK(r1.next() == r2.next());

  Rng r(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform01();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  for (int i = 0; i < 1000; ++i) {
    const auto v = r.below(13);
    CHECK(v < 13);
  }
  CHECK_THROWS_AS(r.below(0), Error);
  for (int i = 0; i < 200; ++i) {
    const auto v = r.range(-3, 3);
    CHECK(v >= -3);
    CHECK(v <= 3);
  }
}

TEST_CASE("Rng normal moments") {
  Rng r(11);
  const int n = 20000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::fabs(mean) < 0.03);
  CHECK(std::fabs(var - 1.0) < 0.05);
}

TEST_CASE("Rng shuffle is a permutation and seed-stable") {
  std::vector<int> v{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<int> w = v;
  Rng r1(5), r2(5);
  r1.shuffle(v);
  r2.shuffle(w);
  CHECK(v == w);
  CHECK(std::set<int>(v.begin(), v.end()).size() == 10);
}

TEST_CASE("ZipfSampler bounds and mean targeting") {
  const std::size_t max_v = 60;
  const double target = 12.0;
  const double expo = ZipfSampler::exponent_for_mean(max_v, target);
  ZipfSampler law(max_v, expo);
  CHECK(law.mean() == doctest::Approx(target).epsilon(1e-9));

  Rng rng(3);
  double sum = 0;
  const int n = 50000;
  for (int i = 0; i < n; ++i) {
    const auto k = law.sample(rng);
    CHECK(k >= 1);
    CHECK(k <= max_v);
    sum += static_cast<double>(k);
  }
  CHECK(sum / n == doctest::Approx(target).epsilon(0.05));
}

TEST_CASE("ZipfSampler rejects unreachable means") {
  CHECK_THROWS_AS(ZipfSampler::exponent_for_mean(10, 0.5), Error);
  CHECK_THROWS_AS(ZipfSampler::exponent_for_mean(10, 10.5), Error);
  CHECK_THROWS_AS(ZipfSampler(0, 1.0), Error);
}
