#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "evaq/error.hpp"

namespace evaq {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Seed for a named stage, decorrelated from the root seed and from
/// every other stage name.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stage) {
  std::uint64_t s = root ^ fnv1a64(stage);
  splitmix64(s);
  return splitmix64(s);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
  std::uint64_t s = root ^ (0x9e3779b97f4a7c15ull * (index + 0x632be59bd9b4e019ull));
  splitmix64(s);
  return splitmix64(s);
}

/// xoshiro256++ with splitmix64 seeding. Self-contained so streams are
/// reproducible across platforms and standard library versions.
class Rng {
public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  std::uint64_t next() {
    auto rotl = [](std::uint64_t x, int k) {
      return (x << k) | (x >> (64 - k));
    };
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [0, n), unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) fail("usage", "Rng::below called with n = 0");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next();
    } while (x >= limit);
    return x % n;
  }

  std::int64_t range(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) fail("usage", "Rng::range with hi < lo");
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  /// Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform01() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      using std::swap;
      swap(v[i - 1], v[j]);
    }
  }

private:
  std::uint64_t s_[4]{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Discrete Zipf-like sampler on {1..max_value} with P(k) proportional to
/// k^-exponent, drawn by inverse CDF. The exponent solving for a target mean
/// is found by bisection, so volume laws can be stated by their mean.
class ZipfSampler {
public:
  ZipfSampler(std::size_t max_value, double exponent) : cdf_(max_value) {
    if (max_value == 0) fail("usage", "ZipfSampler needs max_value >= 1");
    double total = 0.0;
    for (std::size_t k = 1; k <= max_value; ++k) {
      total += std::pow(static_cast<double>(k), -exponent);
      cdf_[k - 1] = total;
    }
    for (auto& c : cdf_) c /= total;
    cdf_.back() = 1.0;
  }

  static double mean_for_exponent(std::size_t max_value, double exponent) {
    double num = 0.0, den = 0.0;
    for (std::size_t k = 1; k <= max_value; ++k) {
      const double w = std::pow(static_cast<double>(k), -exponent);
      num += w * static_cast<double>(k);
      den += w;
    }
    return num / den;
  }

  /// Exponent such that the distribution mean matches target_mean.
  static double exponent_for_mean(std::size_t max_value, double target_mean) {
    const double lo_mean = mean_for_exponent(max_value, 8.0);
    const double hi_mean = mean_for_exponent(max_value, -8.0);
    if (target_mean <= lo_mean || target_mean >= hi_mean)
      fail("config", "ZipfSampler: target mean out of reachable range");
    double lo = -8.0, hi = 8.0;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (mean_for_exponent(max_value, mid) > target_mean)
        lo = mid;
      else
        hi = mid;
    }
    return 0.5 * (lo + hi);
  }

  std::size_t sample(Rng& rng) const {
    const double u = rng.uniform01();
    std::size_t lo = 0, hi = cdf_.size() - 1;
    while (lo < hi) {
      const std::size_t mid = (lo + hi) / 2;
      if (cdf_[mid] <= u)
        lo = mid + 1;
      else
        hi = mid;
    }
    return lo + 1;
  }

  double mean() const {
    double m = 0.0, prev = 0.0;
    for (std::size_t k = 1; k <= cdf_.size(); ++k) {
      m += static_cast<double>(k) * (cdf_[k - 1] - prev);
      prev = cdf_[k - 1];
    }
    return m;
  }

private:
  std::vector<double> cdf_;
};

} // namespace evaq
