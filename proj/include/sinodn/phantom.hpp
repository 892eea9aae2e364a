#ifndef SINODN_PHANTOM_HPP
#define SINODN_PHANTOM_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sinodn/error.hpp"
#include "sinodn/grid.hpp"

namespace sinodn {

/// Disk of constant attenuation in unit field-of-view coordinates. Negative
/// `mu` is allowed so that rings can be composed as disk minus inner disk.
struct Disk {
  double center_x = 0.0;
  double center_y = 0.0;
  double radius = 0.0;
  double mu = 0.0;
};

struct Phantom {
  std::vector<Disk> disks;

  /// Sum of the attenuations of all disks covering (x, y).
  double attenuation_at(double x, double y) const {
    double mu = 0.0;
    for (const auto& d : disks) {
      const double dx = x - d.center_x, dy = y - d.center_y;
      if (dx * dx + dy * dy <= d.radius * d.radius)
        mu += d.mu;
    }
    return mu;
  }

  Phantom scaled(double factor) const {
    Phantom p = *this;
    for (auto& d : p.disks)
      d.mu *= factor;
    return p;
  }

  /// Same phantom rotated counter-clockwise by `angle` about the origin.
  Phantom rotated(double angle) const {
    Phantom p = *this;
    const double c = std::cos(angle), s = std::sin(angle);
    for (auto& d : p.disks) {
      const double x = d.center_x, y = d.center_y;
      d.center_x = c * x - s * y;
      d.center_y = s * x + c * y;
    }
    return p;
  }

  /// Checks that every disk sits inside the unit circle and that the
  /// composite attenuation is non-negative. Non-negativity is probed on a
  /// dense grid plus every disk center.
  void validate() const {
    for (const auto& d : disks) {
      detail::require(d.radius > 0.0, "phantom disk radius must be positive");
      detail::require(std::hypot(d.center_x, d.center_y) + d.radius <= 1.0 + 1e-12,
                      "phantom disk extends beyond the unit field of view");
    }
    constexpr int n = 201;
    auto check = [&](double x, double y) {
      if (attenuation_at(x, y) < -1e-12)
        throw ConfigError("phantom composite attenuation is negative");
    };
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        check(-1.0 + 2.0 * i / (n - 1), -1.0 + 2.0 * j / (n - 1));
    for (const auto& d : disks)
      check(d.center_x, d.center_y);
  }
};

/// Fan-beam acquisition on an equiangular detector arc. Lengths are in units
/// of the field-of-view radius.
///
/// Source i sits at beta_i = i * angular_range / n_angles, position
/// R * (-sin beta, cos beta). Detector j sees the ray at fan angle
/// gamma_j = -fan_half_angle + (j + 0.5) * delta_gamma. That ray is the line
/// x cos(theta) + y sin(theta) = s with theta = beta + gamma, s = R sin(gamma).
struct ScanGeometry {
  std::size_t n_angles = 1000;
  std::size_t n_detectors = 144;
  double source_radius = 2.0;
  double fan_half_angle = 0.55;
  double angular_range = 2.0 * std::numbers::pi;

  void validate() const {
    detail::require(n_angles >= 1, "geometry: n_angles must be >= 1");
    detail::require(n_detectors >= 2, "geometry: n_detectors must be >= 2");
    detail::require(source_radius > 1.0, "geometry: source must lie outside the field of view");
    detail::require(fan_half_angle > 0.0 && fan_half_angle < std::numbers::pi / 2,
                    "geometry: fan half-angle must be in (0, pi/2)");
    detail::require(source_radius * std::sin(fan_half_angle) >= 1.0,
                    "geometry: fan does not cover the unit field of view");
    detail::require(angular_range > 0.0, "geometry: angular range must be positive");
  }

  double angle_step() const { return angular_range / double(n_angles); }
  double detector_step() const { return 2.0 * fan_half_angle / double(n_detectors); }
  double source_angle(std::size_t i) const { return double(i) * angle_step(); }
  double fan_angle(std::size_t j) const { return -fan_half_angle + (double(j) + 0.5) * detector_step(); }
  bool full_turn() const { return std::abs(angular_range - 2.0 * std::numbers::pi) < 1e-9; }

  friend bool operator==(const ScanGeometry&, const ScanGeometry&) = default;
};

struct SinogramMeta {
  std::string label;     // configuration label, e.g. "Plane0_Top"
  std::string plane;
  std::string position;
  long sample_index = -1; // -1 for clean/reference sinograms
};

struct Sinogram {
  Grid2d data; // [n_angles x n_detectors] line integrals
  ScanGeometry geometry;
  SinogramMeta meta;

  void validate() const {
    detail::require(data.rows() == geometry.n_angles && data.cols() == geometry.n_detectors,
                    "sinogram shape does not match its geometry");
    if (!all_finite(data))
      throw NumericalError("sinogram contains non-finite values");
  }
};

/// Gaussian field correlated along the (angle + 1, detector + 1) diagonal.
struct StructuredNoise {
  double diagonal_sigma = 0.0;
  double diagonal_correlation_length = 0.0;
};

struct NoiseModel {
  double photon_flux = 1000.0; // I0, photons per ray at zero attenuation
  std::uint64_t seed = 0;
  std::optional<StructuredNoise> structured;

  void validate() const { detail::require(photon_flux > 0.0, "noise: photon_flux must be positive"); }
};

/// splitmix64 finaliser, used to derive independent per-sample seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return mix_seed(mix_seed(mix_seed(seed) ^ a) ^ (b * 0x2545f4914f6cdd1dULL));
}

/// Exact line integral of the phantom along x cos(theta) + y sin(theta) = s.
inline double line_integral(const Phantom& phantom, double theta, double s) {
  const double c = std::cos(theta), sn = std::sin(theta);
  double sum = 0.0;
  for (const auto& d : phantom.disks) {
    const double dist = d.center_x * c + d.center_y * sn - s;
    const double h2 = d.radius * d.radius - dist * dist;
    if (h2 > 0.0)
      sum += d.mu * 2.0 * std::sqrt(h2);
  }
  return sum;
}

/// Analytic fan-beam projection: every entry is the sum over disks of
/// mu times the chord length of the corresponding ray.
inline Sinogram forward_project(const Phantom& phantom, const ScanGeometry& geometry) {
  geometry.validate();
  Sinogram sino{Grid2d(geometry.n_angles, geometry.n_detectors), geometry, {}};
  for (std::size_t j = 0; j < geometry.n_detectors; ++j) {
    const double gamma = geometry.fan_angle(j);
    const double s = geometry.source_radius * std::sin(gamma);
    for (std::size_t i = 0; i < geometry.n_angles; ++i)
      sino.data(i, j) = line_integral(phantom, geometry.source_angle(i) + gamma, s);
  }
  return sino;
}

/// Zero-mean Gaussian field: white noise convolved with a 1D Gaussian kernel
/// running along (delta angle, delta detector) = (1, 1), scaled so the
/// field's marginal standard deviation equals `spec.diagonal_sigma`.
inline Grid2d diagonal_noise_field(std::size_t rows, std::size_t cols, const StructuredNoise& spec,
                                   std::mt19937_64& rng) {
  detail::require(spec.diagonal_sigma >= 0.0, "structured noise sigma must be non-negative");
  Grid2d field(rows, cols);
  if (spec.diagonal_sigma == 0.0)
    return field;
  const double length = spec.diagonal_correlation_length;
  const int radius = length > 0.0 ? int(std::ceil(3.0 * length)) : 0;
  std::vector<double> kernel(2 * radius + 1);
  double norm = 0.0;
  for (int t = -radius; t <= radius; ++t) {
    const double w = length > 0.0 ? std::exp(-0.5 * t * t / (length * length)) : 1.0;
    kernel[t + radius] = w;
    norm += w * w;
  }
  for (auto& w : kernel)
    w *= spec.diagonal_sigma / std::sqrt(norm);

  const std::size_t pr = rows + 2 * radius, pc = cols + 2 * radius;
  Grid2d white(pr, pc);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : white)
    v = normal(rng);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t)
        acc += kernel[t + radius] * white(r + radius + t, c + radius + t);
      field(r, c) = acc;
    }
  return field;
}

/// Photon-counting noise: k ~ Poisson(I0 exp(-p)), p' = -ln(max(k, 1) / I0).
/// The zero-count clamp biases very low-flux rays; that bias is accepted.
inline Sinogram apply_noise(const Sinogram& clean, const NoiseModel& noise) {
  noise.validate();
  Sinogram out = clean;
  std::mt19937_64 rng(noise.seed);
  const double i0 = noise.photon_flux;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double p = clean.data[i];
    detail::require(p >= 0.0 && std::isfinite(p), "apply_noise: clean values must be finite and >= 0");
    std::poisson_distribution<long long> counts(i0 * std::exp(-p));
    const long long k = std::max<long long>(counts(rng), 1);
    out.data[i] = -std::log(double(k) / i0);
  }
  if (noise.structured) {
    const Grid2d field = diagonal_noise_field(out.data.rows(), out.data.cols(), *noise.structured, rng);
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] += field[i];
  }
  return out;
}

inline const std::vector<std::string>& plane_names() {
  static const std::vector<std::string> v{"Plane0", "Plane1"};
  return v;
}
inline const std::vector<std::string>& position_names() {
  static const std::vector<std::string> v{"Top", "Middle", "Bottom"};
  return v;
}

/// Ring-and-spokes calibration layout. Each configuration index gets a
/// different spoke count and orientation; the body and ring are shared.
inline Phantom default_phantom(std::size_t configuration) {
  Phantom p;
  p.disks.push_back({0.0, 0.0, 0.9, 0.25});   // body
  p.disks.push_back({0.0, 0.0, 0.8, 0.6});    // ring, outer
  p.disks.push_back({0.0, 0.0, 0.72, -0.6});  // ring, inner cut-out
  p.disks.push_back({0.0, 0.0, 0.12, 0.6});   // hub
  const std::size_t spokes = 3 + configuration % 3;
  const double offset = 0.45 * double(configuration) + (configuration >= 3 ? 0.2 : 0.0);
  for (std::size_t k = 0; k < spokes; ++k) {
    const double phi = offset + 2.0 * std::numbers::pi * double(k) / double(spokes);
    for (int b = 0; b < 6; ++b) {
      const double r = 0.22 + 0.085 * b;
      p.disks.push_back({r * std::cos(phi), r * std::sin(phi), 0.035, 0.8});
    }
  }
  return p;
}

} // namespace sinodn

#endif
