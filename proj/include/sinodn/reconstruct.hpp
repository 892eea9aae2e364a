#ifndef SINODN_RECONSTRUCT_HPP
#define SINODN_RECONSTRUCT_HPP

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sinodn/error.hpp"
#include "sinodn/fft.hpp"
#include "sinodn/grid.hpp"
#include "sinodn/parallel.hpp"
#include "sinodn/phantom.hpp"

namespace sinodn {

enum class RampWindow { ram_lak, shepp_logan };
enum class Interpolation { nearest, linear };

NLOHMANN_JSON_SERIALIZE_ENUM(RampWindow, {{RampWindow::ram_lak, "ram-lak"}, {RampWindow::shepp_logan, "shepp-logan"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Interpolation, {{Interpolation::nearest, "nearest"}, {Interpolation::linear, "linear"}})

struct ReconConfig {
  std::size_t image_size = 128;
  RampWindow filter = RampWindow::ram_lak;
  Interpolation rebin_interpolation = Interpolation::linear;
  std::size_t parallel_n_angles = 0;  // 0: same as the fan sinogram
  std::size_t parallel_n_offsets = 0; // 0: same as the fan sinogram
  double offset_extent = 1.0;         // parallel offsets span [-extent, extent]

  void validate() const {
    detail::require(image_size >= 16 && image_size % 2 == 0, "recon: image_size must be even and >= 16");
    detail::require(parallel_n_angles == 0 || parallel_n_angles >= 2, "recon: parallel_n_angles must be >= 2");
    detail::require(parallel_n_offsets == 0 || parallel_n_offsets >= 2, "recon: parallel_n_offsets must be >= 2");
    detail::require(offset_extent > 0.0, "recon: offset_extent must be positive");
  }

  friend bool operator==(const ReconConfig&, const ReconConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ReconConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"filter", c.filter},
                     {"rebin_interpolation", c.rebin_interpolation},
                     {"parallel_n_angles", c.parallel_n_angles},
                     {"parallel_n_offsets", c.parallel_n_offsets},
                     {"offset_extent", c.offset_extent}};
}

/// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, ReconConfig& c) {
  const ReconConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.filter = j.value("filter", d.filter);
  c.rebin_interpolation = j.value("rebin_interpolation", d.rebin_interpolation);
  c.parallel_n_angles = j.value("parallel_n_angles", d.parallel_n_angles);
  c.parallel_n_offsets = j.value("parallel_n_offsets", d.parallel_n_offsets);
  c.offset_extent = j.value("offset_extent", d.offset_extent);
}

/// Parallel-beam sinogram: row k is theta_k = 2 pi k / rows, column m is the
/// signed offset s_m = -extent + (m + 0.5) * offset_step().
struct ParallelSinogram {
  Grid2d data;
  double offset_extent = 1.0;

  double offset_step() const { return 2.0 * offset_extent / double(data.cols()); }
  double offset(std::size_t m) const { return -offset_extent + (double(m) + 0.5) * offset_step(); }
  double angle(std::size_t k) const { return 2.0 * std::numbers::pi * double(k) / double(data.rows()); }
};

/// Square image over [-1, 1]^2. Pixel (r, c) has its center at
/// x = (c + 0.5) / size * 2 - 1, y = 1 - (r + 0.5) / size * 2.
struct ReconImage {
  Grid2d data;
  double pixel_spacing = 0.0;

  std::size_t size() const { return data.rows(); }
  double x(std::size_t c) const { return (double(c) + 0.5) * pixel_spacing - 1.0; }
  double y(std::size_t r) const { return 1.0 - (double(r) + 0.5) * pixel_spacing; }
};

/// Resamples fan-beam data onto the parallel grid using theta = beta + gamma,
/// s = R sin(gamma). Offsets beyond the fan's coverage read as 0.
inline ParallelSinogram rebin_fan_to_parallel(const Sinogram& sino, const ReconConfig& config) {
  config.validate();
  const ScanGeometry& g = sino.geometry;
  g.validate();
  detail::require(sino.data.rows() == g.n_angles && sino.data.cols() == g.n_detectors,
                  "rebin: sinogram shape does not match geometry");
  const std::size_t n_theta = config.parallel_n_angles ? config.parallel_n_angles : g.n_angles;
  const std::size_t n_off = config.parallel_n_offsets ? config.parallel_n_offsets : g.n_detectors;
  ParallelSinogram out{Grid2d(n_theta, n_off), config.offset_extent};

  const double d_beta = g.angle_step(), d_gamma = g.detector_step();
  const auto n_beta = static_cast<long>(g.n_angles);
  const auto n_det = static_cast<long>(g.n_detectors);
  const bool wrap = g.full_turn();
  const bool linear = config.rebin_interpolation == Interpolation::linear;

  for (std::size_t m = 0; m < n_off; ++m) {
    const double s = out.offset(m);
    if (std::abs(s) >= g.source_radius)
      continue;
    const double gamma = std::asin(s / g.source_radius);
    if (std::abs(gamma) > g.fan_half_angle)
      continue;
    // Continuous detector index, clamped to the outermost channel centers.
    const double u = std::clamp((gamma + g.fan_half_angle) / d_gamma - 0.5, 0.0, double(n_det - 1));
    long j0 = linear ? long(std::floor(u)) : std::lround(u);
    j0 = std::min(j0, n_det - 1);
    const long j1 = std::min(j0 + 1, n_det - 1);
    const double fu = linear ? u - double(j0) : 0.0;

    for (std::size_t k = 0; k < n_theta; ++k) {
      double v = (out.angle(k) - gamma) / d_beta;
      if (wrap) {
        v = std::fmod(v, double(n_beta));
        if (v < 0.0)
          v += double(n_beta);
      } else if (v < 0.0 || v > double(n_beta - 1)) {
        continue;
      }
      long i0 = linear ? long(std::floor(v)) : std::lround(v);
      double fv = linear ? v - double(i0) : 0.0;
      if (i0 >= n_beta) {
        i0 -= n_beta;
        fv = 0.0;
      }
      const long i1 = wrap ? (i0 + 1) % n_beta : std::min(i0 + 1, n_beta - 1);
      const double a = (1.0 - fu) * sino.data(i0, j0) + fu * sino.data(i0, j1);
      const double b = (1.0 - fu) * sino.data(i1, j0) + fu * sino.data(i1, j1);
      out.data(k, m) = (1.0 - fv) * a + fv * b;
    }
  }
  return out;
}

/// Frequency response of the ramp filter sampled on a padded grid of
/// `padded` points with sample spacing `ds`; index k covers 0..padded/2.
inline std::vector<double> ramp_response(std::size_t padded, double ds, RampWindow window) {
  std::vector<double> h(padded / 2 + 1);
  for (std::size_t k = 0; k < h.size(); ++k) {
    const double f = double(k) / (double(padded) * ds);
    double w = 1.0;
    if (window == RampWindow::shepp_logan && k > 0) {
      const double x = std::numbers::pi * f * ds;
      w = std::sin(x) / x;
    }
    h[k] = f * w;
  }
  return h;
}

/// Filters every projection row by |f| (optionally Shepp-Logan windowed).
/// Rows are extended to next_pow2(2 n) by repeating their edge samples, so
/// a constant row maps to zero and a row vanishing at its ends is
/// effectively zero-padded.
inline ParallelSinogram ramp_filter(const ParallelSinogram& parallel, RampWindow window) {
  const std::size_t n = parallel.data.cols();
  detail::require(n >= 2, "ramp_filter: at least two offsets are required");
  const std::size_t padded = fft::next_pow2(2 * n);
  const auto response = ramp_response(padded, parallel.offset_step(), window);
  fft::RealPlan plan(padded);
  ParallelSinogram out{Grid2d(parallel.data.rows(), n), parallel.offset_extent};
  const std::size_t tail = n + (padded - n) / 2;
  for (std::size_t k = 0; k < parallel.data.rows(); ++k) {
    const auto row = parallel.data.row(k);
    double* buf = plan.real();
    std::copy(row.begin(), row.end(), buf);
    std::fill(buf + n, buf + tail, row.back());
    std::fill(buf + tail, buf + padded, row.front());
    plan.forward();
    auto* spec = plan.spectrum();
    for (std::size_t f = 0; f < plan.spectrum_cols(); ++f)
      spec[f] *= response[f];
    plan.backward();
    auto dst = out.data.row(k);
    for (std::size_t m = 0; m < n; ++m)
      dst[m] = plan.real()[m] / double(padded);
  }
  return out;
}

/// value(x, y) = (pi / n_theta) * sum_theta q_theta(x cos theta + y sin theta),
/// linear interpolation in s; pixels outside the unit circle are 0. Each
/// pixel sums its angles in a fixed order, so rows may run in parallel.
inline ReconImage backproject(const ParallelSinogram& filtered, const ReconConfig& config,
                              std::size_t threads = 1) {
  config.validate();
  if (!all_finite(filtered.data))
    throw NumericalError("backproject: filtered sinogram is not finite");
  const std::size_t size = config.image_size;
  ReconImage img{Grid2d(size, size), 2.0 / double(size)};
  const std::size_t n_theta = filtered.data.rows();
  const auto n_off = static_cast<long>(filtered.data.cols());
  const double ds = filtered.offset_step();
  std::vector<double> cos_t(n_theta), sin_t(n_theta);
  for (std::size_t k = 0; k < n_theta; ++k) {
    cos_t[k] = std::cos(filtered.angle(k));
    sin_t[k] = std::sin(filtered.angle(k));
  }
  const double scale = std::numbers::pi / double(n_theta);

  parallel_for(size, threads, [&](std::size_t r) {
    const double y = img.y(r);
    std::vector<double> acc(size, 0.0);
    for (std::size_t k = 0; k < n_theta; ++k) {
      const auto q = filtered.data.row(k);
      // u(c) = (x(c) cos + y sin + extent) / ds - 0.5, affine in c.
      const double u0 = (img.x(0) * cos_t[k] + y * sin_t[k] + filtered.offset_extent) / ds - 0.5;
      const double du = img.pixel_spacing * cos_t[k] / ds;
      for (std::size_t c = 0; c < size; ++c) {
        const double u = u0 + du * double(c);
        if (u < 0.0 || u > double(n_off - 1))
          continue;
        const long m = std::min(long(u), n_off - 2);
        const double f = u - double(m);
        acc[c] += (1.0 - f) * q[m] + f * q[m + 1];
      }
    }
    for (std::size_t c = 0; c < size; ++c) {
      const double x = img.x(c);
      img.data(r, c) = x * x + y * y <= 1.0 ? scale * acc[c] : 0.0;
    }
  });
  return img;
}

/// Fan-to-parallel rebinning, ramp filtering and backprojection.
inline ReconImage reconstruct(const Sinogram& sino, const ReconConfig& config, std::size_t threads = 1) {
  return backproject(ramp_filter(rebin_fan_to_parallel(sino, config), config.filter), config, threads);
}

/// Ring statistics around radius `radius` (field-of-view units): mean over
/// the annulus |r - radius| < 0.75 px against the neighbouring annuli
/// 2.5 px < |r - radius| < 6 px.
struct RingMeasurement {
  double ring_mean = 0.0;
  double neighbor_mean = 0.0;
  double neighbor_std = 0.0;

  double excess() const { return ring_mean - neighbor_mean; }
  bool detected() const { return excess() > 3.0 * neighbor_std; }
};

inline RingMeasurement measure_ring(const ReconImage& img, double radius) {
  const double px = img.pixel_spacing;
  double ring_sum = 0.0, nb_sum = 0.0, nb_sq = 0.0;
  std::size_t ring_n = 0, nb_n = 0;
  for (std::size_t r = 0; r < img.size(); ++r)
    for (std::size_t c = 0; c < img.size(); ++c) {
      const double d = std::abs(std::hypot(img.x(c), img.y(r)) - radius) / px;
      const double v = img.data(r, c);
      if (d < 0.75) {
        ring_sum += v;
        ++ring_n;
      } else if (d > 2.5 && d < 6.0) {
        nb_sum += v;
        nb_sq += v * v;
        ++nb_n;
      }
    }
  detail::require(ring_n > 0 && nb_n > 1, "measure_ring: radius does not intersect the image");
  RingMeasurement m;
  m.ring_mean = ring_sum / double(ring_n);
  m.neighbor_mean = nb_sum / double(nb_n);
  m.neighbor_std = std::sqrt(std::max(0.0, nb_sq / double(nb_n) - m.neighbor_mean * m.neighbor_mean));
  return m;
}

} // namespace sinodn

#endif
