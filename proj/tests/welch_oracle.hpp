#pragma once

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <utility>
#include <vector>

namespace cmrlm::testing {

// Welch p-value through Boost's Student-t distribution, independent of our incomplete beta.
inline double boost_welch_p(const std::vector<double>& a, const std::vector<double>& b) {
  auto moments = [](const std::vector<double>& v) {
    long double m = 0, s = 0;
    for (double x : v) m += x;
    m /= v.size();
    for (double x : v) s += (x - m) * (x - m);
    return std::pair<long double, long double>(m, s / (v.size() - 1));
  };
  const auto [ma, sa] = moments(a);
  const auto [mb, sb] = moments(b);
  const long double va = sa / a.size(), vb = sb / b.size();
  const long double t = (ma - mb) / std::sqrt(va + vb);
  const long double df = (va + vb) * (va + vb) / (va * va / (a.size() - 1) + vb * vb / (b.size() - 1));
  boost::math::students_t_distribution<long double> dist(df);
  return static_cast<double>(2 * boost::math::cdf(boost::math::complement(dist, std::fabs(t))));
}

}  // namespace cmrlm::testing
