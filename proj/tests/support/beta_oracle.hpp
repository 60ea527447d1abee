#pragma once

// Beta CDF by direct numerical integration of the density, independent of the
// sampler under test. The substitution u = t^a removes the t^(a-1)
// singularity at 0; the right half uses I_x(a, b) = 1 - I_{1-x}(b, a).

#include <algorithm>
#include <cmath>
#include <vector>

namespace catlab::testing {

class BetaCdfOracle {
 public:
  BetaCdfOracle(double a, double b, std::size_t grid = 200000)
      : left_(a, b, grid), right_(b, a, grid) {
    total_ = left_.integral(0.5) + right_.integral(0.5);
  }

  double cdf(double x) const {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    if (x <= 0.5) return left_.integral(x) / total_;
    return 1.0 - right_.integral(1.0 - x) / total_;
  }

 private:
  // Unnormalized integral of t^(a-1) (1-t)^(b-1) over [0, x], x <= 0.5,
  // tabulated on a uniform u grid with cumulative trapezoid sums.
  struct HalfTable {
    HalfTable(double a, double b, std::size_t n) : a(a), umax(std::pow(0.5, a)), cum(n + 1, 0.0) {
      const double h = umax / static_cast<double>(n);
      auto f = [&](double u) { return std::pow(1.0 - std::pow(u, 1.0 / a), b - 1.0) / a; };
      double prev = f(0.0);
      for (std::size_t k = 1; k <= n; ++k) {
        const double cur = f(h * static_cast<double>(k));
        cum[k] = cum[k - 1] + 0.5 * h * (prev + cur);
        prev = cur;
      }
    }
    double integral(double x) const {
      const double u = std::pow(x, a);
      const double pos = u / umax * static_cast<double>(cum.size() - 1);
      const std::size_t k = std::min(static_cast<std::size_t>(pos), cum.size() - 2);
      const double frac = pos - static_cast<double>(k);
      return cum[k] + frac * (cum[k + 1] - cum[k]);
    }
    double a;
    double umax;
    std::vector<double> cum;
  };

  HalfTable left_;
  HalfTable right_;
  double total_ = 1.0;
};

/// Two-sided one-sample KS statistic; `sorted` must be ascending.
template <class Cdf>
double ks_statistic(const std::vector<double>& sorted, const Cdf& cdf) {
  const double n = static_cast<double>(sorted.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const double f = cdf(sorted[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

/// Asymptotic KS critical value at significance 0.01.
inline double ks_critical_001(std::size_t n) { return 1.6276 / std::sqrt(static_cast<double>(n)); }

}  // namespace catlab::testing
