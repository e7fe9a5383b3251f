// SPDX-License-Identifier: Apache-2.0
#pragma once

// Aggregate operators over one tensor snapshot, the outlier rules applied to
// parameter distributions, and the paired-outcome association tests.
//
// Conventions (used everywhere in the toolkit):
//   * moments are population moments (divide by n);
//   * kurt is EXCESS kurtosis, m4/m2^2 - 3, so a Gaussian scores 0 and the
//     "|kurt| > 3" rule flags heavy tails and extremely flat/bimodal shapes
//     alike;
//   * quantiles interpolate linearly at rank h = (n-1)p on the sorted data;
//   * a constant vector is "degenerate": var = skew = kurt = 0.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "trainwatch/error.hpp"

namespace trainwatch {

inline constexpr double kDefaultSparsityEps = 1e-6;

struct LayerStats {
  std::size_t count = 0;
  double max = 0.0;
  double min = 0.0;
  double median = 0.0;
  double mean = 0.0;
  double var = 0.0;
  double std = 0.0;
  double skew = 0.0;
  double kurt = 0.0;
  double spar = 0.0;

  bool degenerate() const noexcept { return var == 0.0; }
  double max_abs() const noexcept { return std::max(std::abs(max), std::abs(min)); }
  double range() const noexcept { return max - min; }
  /// Root mean square of the entries, sqrt(mean^2 + var).
  double rms() const noexcept { return std::sqrt(mean * mean + var); }
  /// Euclidean norm of the tensor, sqrt(n) * rms.
  double l2_norm() const noexcept { return std::sqrt(static_cast<double>(count)) * rms(); }

  friend bool operator==(const LayerStats&, const LayerStats&) = default;
};

namespace detail {

// Neumaier-compensated summation.
class CompensatedSum {
 public:
  void add(double x) noexcept {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x))
      comp_ += (sum_ - t) + x;
    else
      comp_ += (x - t) + sum_;
    sum_ = t;
  }
  double value() const noexcept { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

}  // namespace detail

/// Linear-interpolation quantile of already-sorted data, h = (n-1)p.
inline double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw InvalidArgument("quantile of empty data");
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("quantile probability outside [0,1]");
  const double h = static_cast<double>(sorted.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline double quantile(std::span<const double> values, double p) {
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return quantile_sorted(sorted, p);
}

inline double median(std::span<const double> values) { return quantile(values, 0.5); }

inline LayerStats compute_stats(std::span<const double> values, double sparsity_eps = kDefaultSparsityEps) {
  if (values.empty()) throw InvalidArgument("compute_stats: empty vector");
  if (!(sparsity_eps >= 0.0)) throw InvalidArgument("compute_stats: sparsity epsilon must be non-negative");

  LayerStats s;
  s.count = values.size();
  const double n = static_cast<double>(s.count);

  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  s.min = sorted.front();
  s.max = sorted.back();
  s.median = quantile_sorted(sorted, 0.5);

  detail::CompensatedSum total;
  std::size_t near_zero = 0;
  for (double x : values) {
    total.add(x);
    if (std::abs(x) <= sparsity_eps) ++near_zero;
  }
  s.spar = static_cast<double>(near_zero) / n;
  // Rounding can push the mean a few ulps outside [min, max].
  s.mean = std::clamp(total.value() / n, s.min, s.max);

  if (s.min == s.max) return s;  // degenerate: var, skew, kurt stay 0

  detail::CompensatedSum m2, m3, m4;
  for (double x : values) {
    const double d = x - s.mean;
    const double d2 = d * d;
    m2.add(d2);
    m3.add(d2 * d);
    m4.add(d2 * d2);
  }
  const double c2 = m2.value() / n;
  const double c3 = m3.value() / n;
  const double c4 = m4.value() / n;
  s.var = c2;
  s.std = std::sqrt(c2);
  s.skew = c3 / (c2 * s.std);
  s.kurt = c4 / (c2 * c2) - 3.0;
  return s;
}

// ---------------------------------------------------------------------------
// Outlier rules

enum class OutlierMethod { zscore, iqr, shape };

struct OutlierThresholds {
  double z_max = 3.0;
  double iqr_k = 1.5;
  double skew_max = 1.0;
  double kurt_max = 3.0;
};

struct OutlierReport {
  OutlierMethod method = OutlierMethod::zscore;
  std::vector<std::size_t> flagged_indices;
  double mu = 0.0;
  double sigma = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double iqr = 0.0;
  double skew = 0.0;
  double kurt = 0.0;
  bool degenerate = false;
  /// shape method only: whether the distribution counts as distorted.
  bool distorted = false;
  OutlierThresholds thresholds_used;
};

/// Flags {i : |x_i - mu| > z_max * sigma}; population sigma.
inline OutlierReport detect_outliers_zscore(std::span<const double> values, double z_max = 3.0) {
  if (values.size() < 2) throw InvalidArgument("z-score outliers need at least 2 values");
  const LayerStats s = compute_stats(values);
  OutlierReport r;
  r.method = OutlierMethod::zscore;
  r.mu = s.mean;
  r.sigma = s.std;
  r.thresholds_used.z_max = z_max;
  r.degenerate = s.degenerate();
  if (r.degenerate) return r;
  const double limit = z_max * s.std;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (std::abs(values[i] - s.mean) > limit) r.flagged_indices.push_back(i);
  return r;
}

/// Flags values outside [Q1 - k*IQR, Q3 + k*IQR].
inline OutlierReport detect_outliers_iqr(std::span<const double> values, double k = 1.5) {
  if (values.size() < 4) throw InvalidArgument("IQR outliers need at least 4 values");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  OutlierReport r;
  r.method = OutlierMethod::iqr;
  r.thresholds_used.iqr_k = k;
  r.q1 = quantile_sorted(sorted, 0.25);
  r.q3 = quantile_sorted(sorted, 0.75);
  r.iqr = r.q3 - r.q1;
  r.degenerate = r.iqr == 0.0;
  const LayerStats s = compute_stats(values);
  r.mu = s.mean;
  r.sigma = s.std;
  const double lo = r.q1 - k * r.iqr;
  const double hi = r.q3 + k * r.iqr;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (values[i] < lo || values[i] > hi) r.flagged_indices.push_back(i);
  return r;
}

/// True iff skew > skew_max or |kurt| > kurt_max (kurt is excess kurtosis).
inline bool detect_shape_distortion(const LayerStats& stats, double skew_max = 1.0, double kurt_max = 3.0) noexcept {
  return stats.skew > skew_max || std::abs(stats.kurt) > kurt_max;
}

inline OutlierReport shape_report(std::span<const double> values, double skew_max = 1.0, double kurt_max = 3.0) {
  const LayerStats s = compute_stats(values);
  OutlierReport r;
  r.method = OutlierMethod::shape;
  r.mu = s.mean;
  r.sigma = s.std;
  r.skew = s.skew;
  r.kurt = s.kurt;
  r.degenerate = s.degenerate();
  r.thresholds_used.skew_max = skew_max;
  r.thresholds_used.kurt_max = kurt_max;
  r.distorted = detect_shape_distortion(s, skew_max, kurt_max);
  return r;
}

// ---------------------------------------------------------------------------
// Association tests

struct TestResult {
  double statistic = 0.0;
  double p_value = 1.0;
  /// +infinity when the odds are unbounded (a zero discordant cell).
  double odds_ratio = 1.0;
  bool correction_applied = false;
};

/// Survival function of the chi-square distribution with one degree of
/// freedom: P(X > x) = erfc(sqrt(x / 2)).
inline double chi_square_df1_sf(double x) {
  if (!(x >= 0.0)) throw InvalidArgument("chi-square statistic must be non-negative");
  return std::erfc(std::sqrt(0.5 * x));
}

/// McNemar's test on the discordant pair counts b and c.
inline TestResult mcnemar_test(std::uint64_t b, std::uint64_t c, bool continuity) {
  if (b + c == 0) throw InvalidArgument("McNemar's test needs at least one discordant pair");
  const double bd = static_cast<double>(b);
  const double cd = static_cast<double>(c);
  double diff = std::abs(bd - cd);
  // Never let the continuity correction flip the sign of |b - c|.
  if (continuity) diff = std::max(0.0, diff - 1.0);
  TestResult r;
  r.statistic = diff * diff / (bd + cd);
  r.p_value = chi_square_df1_sf(r.statistic);
  r.correction_applied = continuity;
  r.odds_ratio = c == 0 ? std::numeric_limits<double>::infinity() : bd / cd;
  return r;
}

/// Odds ratio of the 2x2 table [[a, b], [c, d]] = (a*d)/(b*c). A zero cell
/// triggers the Haldane-Anscombe correction (+0.5 on every cell). The
/// statistic is the Wald chi-square of log(OR).
inline TestResult odds_ratio(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
  double fa = static_cast<double>(a), fb = static_cast<double>(b);
  double fc = static_cast<double>(c), fd = static_cast<double>(d);
  TestResult r;
  if (a == 0 || b == 0 || c == 0 || d == 0) {
    fa += 0.5;
    fb += 0.5;
    fc += 0.5;
    fd += 0.5;
    r.correction_applied = true;
  }
  r.odds_ratio = (fa * fd) / (fb * fc);
  const double log_or = std::log(r.odds_ratio);
  const double se2 = 1.0 / fa + 1.0 / fb + 1.0 / fc + 1.0 / fd;
  r.statistic = log_or * log_or / se2;
  r.p_value = chi_square_df1_sf(r.statistic);
  return r;
}

}  // namespace trainwatch
