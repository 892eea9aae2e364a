#ifndef SINODN_METRICS_HPP
#define SINODN_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "sinodn/error.hpp"
#include "sinodn/fft.hpp"
#include "sinodn/grid.hpp"

namespace sinodn {

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

struct PsnrResult {
  double psnr_db = 0.0; // +infinity when mse == 0
  double mse = 0.0;
  double data_range = 0.0;
};

/// PSNR of `test` against `reference`. The peak defaults to the reference's
/// max - min; an explicit range is required when the reference is constant.
inline PsnrResult psnr(const Grid2d& reference, const Grid2d& test, std::optional<double> data_range = {}) {
  require_same_shape(reference, test, "psnr");
  detail::require(!reference.empty(), "psnr: empty grids");
  PsnrResult r;
  if (data_range) {
    r.data_range = *data_range;
  } else {
    const auto [lo, hi] = min_max(reference);
    r.data_range = hi - lo;
  }
  if (!(r.data_range > 0.0))
    throw ConfigError("psnr: data range must be positive (degenerate reference?)");
  double acc = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double d = test[i] - reference[i];
    acc += d * d;
  }
  r.mse = acc / double(reference.size());
  r.psnr_db = r.mse == 0.0 ? kInfinity : 10.0 * std::log10(r.data_range * r.data_range / r.mse);
  return r;
}

/// Difference of two PSNR values; both infinite counts as no change.
inline double psnr_gain(double psnr_denoised, double psnr_noisy) {
  if (std::isinf(psnr_denoised) && std::isinf(psnr_noisy))
    return 0.0;
  return psnr_denoised - psnr_noisy;
}

/// PSNR(reference, denoised) - PSNR(reference, noisy) with one shared peak.
inline double delta_psnr(const Grid2d& noisy, const Grid2d& denoised, const Grid2d& reference,
                         std::optional<double> data_range = {}) {
  if (!data_range) {
    const auto [lo, hi] = min_max(reference);
    data_range = hi - lo;
  }
  return psnr_gain(psnr(reference, denoised, data_range).psnr_db, psnr(reference, noisy, data_range).psnr_db);
}

/// Statistics of the residual map noisy - denoised. `std` is the population
/// standard deviation.
struct NoiseStats {
  double mean_abs = 0.0;
  double std = 0.0;
  double max = 0.0;
  double min = 0.0;

  friend bool operator==(const NoiseStats&, const NoiseStats&) = default;
};

inline NoiseStats noise_statistics(const Grid2d& noisy, const Grid2d& denoised) {
  require_same_shape(noisy, denoised, "noise_statistics");
  detail::require(!noisy.empty(), "noise_statistics: empty grids");
  NoiseStats s;
  s.max = -kInfinity;
  s.min = kInfinity;
  double sum = 0.0, abs_sum = 0.0;
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    const double d = noisy[i] - denoised[i];
    sum += d;
    abs_sum += std::abs(d);
    s.max = std::max(s.max, d);
    s.min = std::min(s.min, d);
  }
  const double n = double(noisy.size());
  const double m = sum / n;
  double var = 0.0;
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    const double d = noisy[i] - denoised[i] - m;
    var += d * d;
  }
  s.mean_abs = abs_sum / n;
  s.std = std::sqrt(var / n);
  return s;
}

/// Normalised autocorrelation over lags (delta angle, delta detector) in
/// [-max_lag, max_lag]^2. values(max_lag + da, max_lag + dd) = A(da, dd).
struct AutocorrMap {
  Grid2d values;
  std::size_t max_lag = 0;

  double at(long da, long dd) const {
    const long l = static_cast<long>(max_lag);
    return values(std::size_t(da + l), std::size_t(dd + l));
  }
};

/// Mean-subtracted, biased (divide by N) autocorrelation computed through
/// the power spectrum on a zero-padded grid, cropped and scaled so that
/// A(0, 0) = 1. The result is symmetrised so A(d) = A(-d) holds exactly.
inline AutocorrMap autocorrelation_map(const Grid2d& data, std::size_t max_lag) {
  detail::require(!data.empty(), "autocorrelation_map: empty input");
  detail::require(2 * max_lag < std::min(data.rows(), data.cols()),
                  "autocorrelation_map: max_lag must be below half of the smaller dimension");
  const double mu = mean(data);
  const std::size_t pr = fft::next_pow2(data.rows() + max_lag);
  const std::size_t pc = fft::next_pow2(data.cols() + max_lag);
  fft::RealPlan plan(pr, pc);
  std::fill(plan.real(), plan.real() + pr * pc, 0.0);
  double var = 0.0;
  for (std::size_t r = 0; r < data.rows(); ++r)
    for (std::size_t c = 0; c < data.cols(); ++c) {
      const double v = data(r, c) - mu;
      plan.real()[r * pc + c] = v;
      var += v * v;
    }
  if (!(var > 0.0))
    throw NumericalError("autocorrelation_map: input has zero variance");
  plan.forward();
  auto* spec = plan.spectrum();
  for (std::size_t i = 0; i < pr * plan.spectrum_cols(); ++i)
    spec[i] = std::norm(spec[i]);
  plan.backward();

  const long l = static_cast<long>(max_lag);
  const double zero_lag = plan.real()[0];
  AutocorrMap map{Grid2d(2 * max_lag + 1, 2 * max_lag + 1), max_lag};
  auto raw = [&](long da, long dd) {
    const std::size_t r = std::size_t((da + long(pr)) % long(pr));
    const std::size_t c = std::size_t((dd + long(pc)) % long(pc));
    return plan.real()[r * pc + c] / zero_lag;
  };
  for (long da = -l; da <= l; ++da)
    for (long dd = -l; dd <= l; ++dd)
      map.values(std::size_t(da + l), std::size_t(dd + l)) = 0.5 * (raw(da, dd) + raw(-da, -dd));
  map.values(max_lag, max_lag) = 1.0;
  return map;
}

/// Mean |A| along the main diagonal (t, t) divided by mean |A| along the
/// anti-diagonal (t, -t), for t in [1, max_t].
inline double diagonal_anisotropy(const AutocorrMap& map, std::size_t max_t = 10) {
  max_t = std::min(max_t, map.max_lag);
  detail::require(max_t >= 1, "diagonal_anisotropy: map has no nonzero lags");
  double diag = 0.0, anti = 0.0;
  for (long t = 1; t <= long(max_t); ++t) {
    diag += std::abs(map.at(t, t));
    anti += std::abs(map.at(t, -t));
  }
  return anti > 0.0 ? diag / anti : kInfinity;
}

struct BoxplotSummary {
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double whisker_low = 0.0;
  double whisker_high = 0.0;
  std::vector<double> outliers;

  friend bool operator==(const BoxplotSummary&, const BoxplotSummary&) = default;
};

namespace detail {

/// Linear-interpolation quantile of sorted data (h = (n - 1) p).
inline double quantile_sorted(const std::vector<double>& v, double p) {
  const double h = double(v.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = h - double(lo);
  if (frac == 0.0 || v[lo] == v[hi])
    return v[lo];
  if (std::isinf(v[hi]) || std::isinf(v[lo]))
    return std::isinf(v[hi]) ? v[hi] : v[lo];
  return v[lo] + frac * (v[hi] - v[lo]);
}

} // namespace detail

/// Tukey boxplot: quartiles by linear interpolation, whiskers at the most
/// extreme values within 1.5 IQR of the quartiles, the rest are outliers.
inline BoxplotSummary boxplot_summary(std::vector<double> values) {
  detail::require(!values.empty(), "boxplot_summary: no values");
  std::sort(values.begin(), values.end());
  BoxplotSummary b;
  b.median = detail::quantile_sorted(values, 0.5);
  b.q1 = detail::quantile_sorted(values, 0.25);
  b.q3 = detail::quantile_sorted(values, 0.75);
  const double iqr = b.q3 - b.q1;
  const double lo_fence = b.q1 - 1.5 * iqr, hi_fence = b.q3 + 1.5 * iqr;
  b.whisker_low = b.q1;
  b.whisker_high = b.q3;
  bool have_low = false;
  for (double v : values) {
    if (v < lo_fence || v > hi_fence) {
      b.outliers.push_back(v);
      continue;
    }
    if (!have_low) {
      b.whisker_low = v;
      have_low = true;
    }
    b.whisker_high = v;
  }
  return b;
}

/// Robust noise level: median absolute value of the finest diagonal Haar
/// detail coefficients divided by 0.6745.
inline double estimate_noise_sigma(const Grid2d& g) {
  detail::require(g.rows() >= 2 && g.cols() >= 2, "estimate_noise_sigma: grid too small");
  std::vector<double> hh;
  hh.reserve((g.rows() / 2) * (g.cols() / 2));
  for (std::size_t r = 0; r + 1 < g.rows(); r += 2)
    for (std::size_t c = 0; c + 1 < g.cols(); c += 2)
      hh.push_back(std::abs(0.5 * (g(r, c) - g(r, c + 1) - g(r + 1, c) + g(r + 1, c + 1))));
  auto mid = hh.begin() + std::ptrdiff_t(hh.size() / 2);
  std::nth_element(hh.begin(), mid, hh.end());
  return *mid / 0.6745;
}

} // namespace sinodn

#endif
