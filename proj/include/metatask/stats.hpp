#pragma once

#include <boost/math/distributions/chi_squared.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "metatask/error.hpp"

namespace metatask::stats {

struct ChiSquare {
  double statistic = 0.0;
  double dof = 0.0;
  double p_value = 1.0;
};

/// Pearson goodness-of-fit of observed counts against expected probabilities.
/// Cells with zero expected probability must have zero count.
inline ChiSquare chi_square_gof(std::span<const std::int64_t> observed, std::span<const double> expected_prob) {
  if (observed.size() != expected_prob.size() || observed.size() < 2)
    throw ArgumentError("chi-square needs matching observed/expected vectors with >= 2 cells");
  double n = 0, psum = 0;
  for (auto o : observed) n += static_cast<double>(o);
  for (double p : expected_prob) psum += p;
  ChiSquare r;
  int cells = 0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double e = n * expected_prob[i] / psum;
    if (e <= 0) {
      if (observed[i] != 0) return {std::numeric_limits<double>::infinity(), 0, 0.0};
      continue;
    }
    const double d = static_cast<double>(observed[i]) - e;
    r.statistic += d * d / e;
    ++cells;
  }
  r.dof = cells - 1;
  if (r.dof < 1) return r;
  boost::math::chi_squared dist(r.dof);
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.statistic));
  return r;
}

inline double mean(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double s = 0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

/// Sample standard deviation (n - 1); 0 for fewer than two values.
inline double stddev(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean(x);
  double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(x.size() - 1));
}

/// Adjusted Rand index between two labelings of the same items.
inline double adjusted_rand(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw ArgumentError("labelings differ in length");
  const auto n = static_cast<double>(a.size());
  if (a.size() < 2) return 1.0;
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1;
    ra[a[i]] += 1;
    rb[b[i]] += 1;
  }
  auto c2 = [](double x) { return x * (x - 1) / 2; };
  double sij = 0, sa = 0, sb = 0;
  for (auto& [k, v] : joint) sij += c2(v);
  for (auto& [k, v] : ra) sa += c2(v);
  for (auto& [k, v] : rb) sb += c2(v);
  const double expected = sa * sb / c2(n);
  const double maxi = (sa + sb) / 2;
  if (maxi == expected) return 1.0;
  return (sij - expected) / (maxi - expected);
}

}  // namespace metatask::stats
