#pragma once

// Statistical primitives behind certification: the standard normal CDF and
// quantile, the exact one-sided Clopper-Pearson lower bound and the exact
// two-sided binomial test. Everything here is a pure function of doubles.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>

#include "dsmooth/errors.hpp"

namespace dsmooth::numerics {

/// A real number in [0, 1].
class Probability {
 public:
  constexpr Probability() = default;
  explicit Probability(double value) : value_(value) {
    if (!(value >= 0.0 && value <= 1.0)) {
      throw DomainError("probability outside [0,1]: " + std::to_string(value));
    }
  }
  [[nodiscard]] constexpr double value() const noexcept { return value_; }
  friend constexpr auto operator<=>(Probability, Probability) = default;

 private:
  double value_ = 0.0;
};

/// Significance level alpha in the open interval (0, 1).
class ConfidenceLevel {
 public:
  explicit ConfidenceLevel(double alpha) : alpha_(alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) {
      throw DomainError("alpha must lie in (0,1): " + std::to_string(alpha));
    }
  }
  [[nodiscard]] constexpr double alpha() const noexcept { return alpha_; }

 private:
  double alpha_;
};

/// Phi(z). Uses erfc so both tails keep full relative precision.
inline Probability std_normal_cdf(double z) {
  if (!std::isfinite(z)) throw DomainError("std_normal_cdf: non-finite argument");
  return Probability(0.5 * std::erfc(-z / std::numbers::sqrt2));
}

/// Standard normal density.
inline double std_normal_pdf(double z) noexcept {
  return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

namespace detail {

// Rational approximation of the lower half of Phi^{-1} (relative error ~1e-9),
// valid for 0 < p <= 0.5.
inline double probit_initial_guess(double p) noexcept {
  constexpr std::array<double, 6> a{-3.969683028665376e+01, 2.209460984245205e+02,
                                    -2.759285104469687e+02, 1.383577518672690e+02,
                                    -3.066479806614716e+01, 2.506628277459239e+00};
  constexpr std::array<double, 5> b{-5.447609879822406e+01, 1.615858368580409e+02,
                                    -1.556989798598866e+02, 6.680131188771972e+01,
                                    -1.328068155288572e+01};
  constexpr std::array<double, 6> c{-7.784894002430293e-03, -3.223964580411365e-01,
                                    -2.400758277161838e+00, -2.549732539343734e+00,
                                    4.374664141464968e+00,  2.938163982698783e+00};
  constexpr std::array<double, 4> d{7.784695709041462e-03, 3.224671290700398e-01,
                                    2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;

  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double q = p - 0.5;
  const double r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

// Lower half (p <= 0.5): initial guess plus at most three Halley steps on erfc.
inline double probit_lower(double p) noexcept {
  double x = probit_initial_guess(p);
  for (int step = 0; step < 3; ++step) {
    const double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
    const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
    const double dx = u / (1.0 + 0.5 * x * u);
    x -= dx;
    if (std::abs(dx) <= 1e-16 * std::max(1.0, std::abs(x))) break;
  }
  return x;
}

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
  constexpr int max_iter = 100000;
  constexpr double eps = 1e-16;
  constexpr double tiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) return h;
  }
  throw DomainError("incomplete beta continued fraction did not converge");
}

}  // namespace detail

/// Phi^{-1}(p) for 0 < p < 1. Accurate to ~1e-15 relative in both tails.
inline double std_normal_quantile(Probability p) {
  const double v = p.value();
  if (v <= 0.0 || v >= 1.0) {
    throw DomainError("std_normal_quantile: p must lie strictly inside (0,1)");
  }
  if (v > 0.5) return -detail::probit_lower(1.0 - v);  // 1 - v is exact here
  return detail::probit_lower(v);
}

/// Regularized incomplete beta function I_x(a, b) for a, b > 0.
inline double regularized_incomplete_beta(double x, double a, double b) {
  if (!(a > 0.0 && b > 0.0)) throw DomainError("incomplete beta needs a, b > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw DomainError("incomplete beta needs x in [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * detail::beta_continued_fraction(a, b, x) / a;
  }
  return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// Exact one-sided (1 - alpha) lower confidence bound on a binomial proportion.
///
/// For 0 < k < n this is the p with I_p(k, n - k + 1) = alpha, found by
/// bisection. k = 0 gives 0 and k = n gives alpha^(1/n) in closed form.
inline Probability clopper_pearson_lower(std::uint64_t successes, std::uint64_t trials,
                                         ConfidenceLevel alpha) {
  if (trials == 0) throw ArgumentError("clopper_pearson_lower: trials must be >= 1");
  if (successes > trials) throw ArgumentError("clopper_pearson_lower: successes > trials");
  if (successes == 0) return Probability(0.0);
  const double n = static_cast<double>(trials);
  if (successes == trials) return Probability(std::pow(alpha.alpha(), 1.0 / n));

  const double a = static_cast<double>(successes);
  const double b = n - a + 1.0;
  double lo = 0.0;
  double hi = a / n;  // the bound never exceeds the point estimate
  for (int iter = 0; iter < 200 && hi - lo > 1e-17; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (regularized_incomplete_beta(mid, a, b) < alpha.alpha()) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return Probability(lo);
}

/// Exact two-sided binomial test of H0: success probability = p0.
///
/// The p-value sums the probability of every outcome that is no more likely
/// than the observed one (relative slack 1e-7 absorbs rounding in the pmf).
inline Probability binomial_two_sided_pvalue(std::uint64_t successes, std::uint64_t trials,
                                             Probability p0) {
  if (trials == 0) throw ArgumentError("binomial_two_sided_pvalue: trials must be >= 1");
  if (successes > trials) throw ArgumentError("binomial_two_sided_pvalue: successes > trials");
  const double p = p0.value();
  if (p == 0.0) return Probability(successes == 0 ? 1.0 : 0.0);
  if (p == 1.0) return Probability(successes == trials ? 1.0 : 0.0);

  const double n = static_cast<double>(trials);
  const double log_p = std::log(p);
  const double log_q = std::log1p(-p);
  const double lg_n1 = std::lgamma(n + 1.0);
  auto log_pmf = [&](double k) {
    return lg_n1 - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) + k * log_p + (n - k) * log_q;
  };
  const double observed = log_pmf(static_cast<double>(successes));
  const double threshold = observed + std::log1p(1e-7);
  double total = 0.0;
  for (std::uint64_t i = 0; i <= trials; ++i) {
    const double lp = log_pmf(static_cast<double>(i));
    if (lp <= threshold) total += std::exp(lp);
  }
  return Probability(std::min(1.0, total));
}

}  // namespace dsmooth::numerics
