#ifndef SINODN_GAUSSIAN_HPP
#define SINODN_GAUSSIAN_HPP

#include <cmath>
#include <vector>

#include "sinodn/error.hpp"
#include "sinodn/grid.hpp"
#include "sinodn/phantom.hpp"

namespace sinodn {

/// Normalised taps of a sampled Gaussian, radius ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  detail::require(sigma >= 0.0, "gaussian: sigma must be non-negative");
  if (sigma == 0.0)
    return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int t = -radius; t <= radius; ++t)
    sum += k[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma));
  for (auto& w : k)
    w /= sum;
  return k;
}

namespace detail {

/// Half-sample symmetric reflection (... b a | a b c ... c | c b ...).
inline std::size_t reflect_index(long i, long n) {
  const long period = 2 * n;
  i %= period;
  if (i < 0)
    i += period;
  return static_cast<std::size_t>(i < n ? i : period - 1 - i);
}

} // namespace detail

/// Separable Gaussian smoothing with reflected borders.
inline Grid2d gaussian_filter(const Grid2d& in, double sigma) {
  const auto k = gaussian_kernel(sigma);
  if (k.size() == 1)
    return in;
  const long radius = long(k.size() / 2);
  const long rows = long(in.rows()), cols = long(in.cols());
  Grid2d tmp(in.rows(), in.cols()), out(in.rows(), in.cols());
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (long t = -radius; t <= radius; ++t)
        acc += k[t + radius] * in(r, detail::reflect_index(c + t, cols));
      tmp(r, c) = acc;
    }
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (long t = -radius; t <= radius; ++t)
        acc += k[t + radius] * tmp(detail::reflect_index(r + t, rows), c);
      out(r, c) = acc;
    }
  return out;
}

inline Sinogram gaussian_denoise(const Sinogram& sino, double sigma) {
  Sinogram out = sino;
  out.data = gaussian_filter(sino.data, sigma);
  return out;
}

} // namespace sinodn

#endif
