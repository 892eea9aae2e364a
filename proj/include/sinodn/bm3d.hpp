#ifndef SINODN_BM3D_HPP
#define SINODN_BM3D_HPP

// Block-matching and 3D collaborative filtering. Two passes:
//   1. hard thresholding of grouped blocks in a 2D DCT x 1D Haar domain,
//   2. empirical Wiener shrinkage driven by the stage-1 estimate.
// Matching thresholds follow the 8-bit reference conventions and are
// rescaled to the data by (data range / 255)^2.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "sinodn/error.hpp"
#include "sinodn/grid.hpp"
#include "sinodn/metrics.hpp"

namespace sinodn {

struct Bm3dConfig {
  double sigma = 0.0;
  std::size_t block_size = 8;
  std::size_t search_window = 39;
  std::size_t max_group_size = 16;
  double hard_threshold_lambda = 2.7;
  std::size_t step = 3;
  double match_threshold_hard = 2500.0;   // normalised squared distance, 8-bit scale
  double match_threshold_wiener = 400.0;  // idem, stage 2

  void validate() const {
    if (!(sigma > 0.0))
      throw ConfigError("bm3d: sigma must be positive");
    detail::require(block_size >= 1 && block_size <= search_window, "bm3d: block_size must not exceed search_window");
    detail::require(max_group_size >= 1 && (max_group_size & (max_group_size - 1)) == 0,
                    "bm3d: max_group_size must be a power of two");
    detail::require(step >= 1, "bm3d: step must be >= 1");
    detail::require(hard_threshold_lambda >= 0.0, "bm3d: lambda must be non-negative");
  }
};

/// Aggregated estimate plus the per-pixel sum of aggregation weights.
struct Bm3dStage {
  Grid2d estimate;
  Grid2d weight_sum;
};

namespace detail {

class Bm3dEngine {
public:
  Bm3dEngine(const Grid2d& image, const Bm3dConfig& cfg) : img_(image), cfg_(cfg), k_(cfg.block_size) {
    cfg.validate();
    require(image.rows() >= k_ && image.cols() >= k_, "bm3d: image smaller than one block");
    if (!all_finite(image))
      throw NumericalError("bm3d: input is not finite");
    dct_.resize(long(k_), long(k_));
    for (std::size_t u = 0; u < k_; ++u)
      for (std::size_t x = 0; x < k_; ++x) {
        const double a = u == 0 ? std::sqrt(1.0 / double(k_)) : std::sqrt(2.0 / double(k_));
        dct_(long(u), long(x)) =
            a * std::cos(std::numbers::pi * (2.0 * double(x) + 1.0) * double(u) / (2.0 * double(k_)));
      }
    const auto [lo, hi] = min_max(image);
    const double scale = (hi - lo) / 255.0;
    tau_hard_ = cfg.match_threshold_hard * scale * scale;
    tau_wiener_ = cfg.match_threshold_wiener * scale * scale;
    row_refs_ = reference_positions(image.rows());
    col_refs_ = reference_positions(image.cols());
  }

  Bm3dStage hard_threshold_pass() const {
    Bm3dStage out{Grid2d(img_.rows(), img_.cols()), Grid2d(img_.rows(), img_.cols())};
    std::vector<Pos> group;
    std::vector<double> coef;
    const double threshold = cfg_.hard_threshold_lambda * cfg_.sigma;
    const std::vector<double> spectra = block_spectra(img_);
    for (auto r : row_refs_)
      for (auto c : col_refs_) {
        match(img_, r, c, tau_hard_, group);
        gather(spectra, group, coef);
        forward_3d(coef, group.size());
        std::size_t retained = 0;
        for (std::size_t i = 0; i < coef.size(); ++i) {
          if (i != 0 && std::abs(coef[i]) < threshold)
            coef[i] = 0.0;
          retained += coef[i] != 0.0;
        }
        inverse_3d(coef, group.size());
        aggregate(out, group, coef, 1.0 / double(std::max<std::size_t>(retained, 1)));
      }
    finish(out);
    return out;
  }

  Bm3dStage wiener_pass(const Grid2d& basic) const {
    Bm3dStage out{Grid2d(img_.rows(), img_.cols()), Grid2d(img_.rows(), img_.cols())};
    std::vector<Pos> group;
    std::vector<double> coef, pilot;
    const double s2 = cfg_.sigma * cfg_.sigma;
    const std::vector<double> noisy_spectra = block_spectra(img_), pilot_spectra = block_spectra(basic);
    for (auto r : row_refs_)
      for (auto c : col_refs_) {
        match(basic, r, c, tau_wiener_, group);
        gather(pilot_spectra, group, pilot);
        gather(noisy_spectra, group, coef);
        forward_3d(pilot, group.size());
        forward_3d(coef, group.size());
        double energy = 0.0;
        for (std::size_t i = 0; i < coef.size(); ++i) {
          const double p2 = pilot[i] * pilot[i];
          const double w = i == 0 ? 1.0 : p2 / (p2 + s2);
          coef[i] *= w;
          energy += w * w;
        }
        inverse_3d(coef, group.size());
        aggregate(out, group, coef, 1.0 / energy);
      }
    finish(out);
    return out;
  }

private:
  struct Pos {
    double distance;
    std::size_t r, c;
  };

  std::vector<std::size_t> reference_positions(std::size_t n) const {
    std::vector<std::size_t> v;
    for (std::size_t p = 0; p + k_ <= n; p += cfg_.step)
      v.push_back(p);
    if (v.back() != n - k_)
      v.push_back(n - k_);
    return v;
  }

  double block_distance(const Grid2d& g, std::size_t r0, std::size_t c0, std::size_t r1, std::size_t c1) const {
    double d = 0.0;
    for (std::size_t y = 0; y < k_; ++y) {
      const double* a = g.data() + (r0 + y) * g.cols() + c0;
      const double* b = g.data() + (r1 + y) * g.cols() + c1;
      for (std::size_t x = 0; x < k_; ++x) {
        const double t = a[x] - b[x];
        d += t * t;
      }
    }
    return d / double(k_ * k_);
  }

  // Reference block first, then nearest blocks under `tau`, truncated to a
  // power of two. Ties break by position so grouping is deterministic.
  void match(const Grid2d& g, std::size_t r, std::size_t c, double tau, std::vector<Pos>& group) const {
    group.clear();
    const std::size_t half = (cfg_.search_window - k_) / 2;
    const std::size_t r_lo = r > half ? r - half : 0, c_lo = c > half ? c - half : 0;
    const std::size_t r_hi = std::min(r + half, g.rows() - k_), c_hi = std::min(c + half, g.cols() - k_);
    group.push_back({-1.0, r, c});
    for (std::size_t y = r_lo; y <= r_hi; ++y)
      for (std::size_t x = c_lo; x <= c_hi; ++x) {
        if (y == r && x == c)
          continue;
        const double d = block_distance(g, r, c, y, x);
        if (d < tau)
          group.push_back({d, y, x});
      }
    const std::size_t keep = std::min(group.size(), cfg_.max_group_size);
    auto less = [](const Pos& a, const Pos& b) {
      return a.distance != b.distance ? a.distance < b.distance : (a.r != b.r ? a.r < b.r : a.c < b.c);
    };
    std::partial_sort(group.begin(), group.begin() + std::ptrdiff_t(keep), group.end(), less);
    std::size_t pow2 = 1;
    while (pow2 * 2 <= keep)
      pow2 *= 2;
    group.resize(pow2);
  }

  // 2D DCT of the block at every valid top-left position, k*k values each.
  std::vector<double> block_spectra(const Grid2d& g) const {
    const std::size_t pr = g.rows() - k_ + 1, pc = g.cols() - k_ + 1, kk = k_ * k_;
    std::vector<double> out(pr * pc * kk);
    for (std::size_t r = 0; r < pr; ++r)
      for (std::size_t c = 0; c < pc; ++c) {
        double* dst = out.data() + (r * pc + c) * kk;
        for (std::size_t y = 0; y < k_; ++y)
          for (std::size_t x = 0; x < k_; ++x)
            dst[y * k_ + x] = g(r + y, c + x);
        dct_2d(dst, false);
      }
    return out;
  }

  void gather(const std::vector<double>& spectra, const std::vector<Pos>& group, std::vector<double>& out) const {
    const std::size_t kk = k_ * k_, pc = img_.cols() - k_ + 1;
    out.resize(group.size() * kk);
    for (std::size_t b = 0; b < group.size(); ++b) {
      const double* src = spectra.data() + (group[b].r * pc + group[b].c) * kk;
      std::copy(src, src + kk, out.data() + b * kk);
    }
  }

  // Input holds per-block 2D DCT spectra; applies the orthonormal Haar
  // transform across the group. Coefficient 0 is the DC of the whole stack.
  void forward_3d(std::vector<double>& v, std::size_t n) const { haar(v, n, false); }

  void inverse_3d(std::vector<double>& v, std::size_t n) const {
    haar(v, n, true);
    for (std::size_t b = 0; b < n; ++b)
      dct_2d(v.data() + b * k_ * k_, true);
  }

  void dct_2d(double* block, bool inverse) const {
    if (k_ == 8) {
      using Fixed = Eigen::Matrix<double, 8, 8, Eigen::RowMajor>;
      Eigen::Map<Fixed> b(block);
      const Fixed d = dct_;
      const Fixed t = inverse ? Fixed(d.transpose().lazyProduct(b)) : Fixed(d.lazyProduct(b));
      b = inverse ? Fixed(t.lazyProduct(d)) : Fixed(t.lazyProduct(d.transpose()));
      return;
    }
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<RowMat> b(block, long(k_), long(k_));
    scratch_.noalias() = inverse ? RowMat(dct_.transpose() * b) : RowMat(dct_ * b);
    b.noalias() = inverse ? RowMat(scratch_ * dct_) : RowMat(scratch_ * dct_.transpose());
  }

  void haar(std::vector<double>& v, std::size_t n, bool inverse) const {
    const std::size_t kk = k_ * k_;
    std::vector<double>& tmp = haar_scratch_;
    tmp.resize(v.size());
    const double s = std::numbers::sqrt2 / 2.0;
    if (!inverse) {
      for (std::size_t len = n; len > 1; len /= 2) {
        const std::size_t h = len / 2;
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t p = 0; p < kk; ++p) {
            const double a = v[2 * i * kk + p], b = v[(2 * i + 1) * kk + p];
            tmp[i * kk + p] = s * (a + b);
            tmp[(h + i) * kk + p] = s * (a - b);
          }
        std::copy(tmp.begin(), tmp.begin() + std::ptrdiff_t(len * kk), v.begin());
      }
    } else {
      for (std::size_t len = 2; len <= n; len *= 2) {
        const std::size_t h = len / 2;
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t p = 0; p < kk; ++p) {
            const double a = v[i * kk + p], d = v[(h + i) * kk + p];
            tmp[2 * i * kk + p] = s * (a + d);
            tmp[(2 * i + 1) * kk + p] = s * (a - d);
          }
        std::copy(tmp.begin(), tmp.begin() + std::ptrdiff_t(len * kk), v.begin());
      }
    }
  }

  void aggregate(Bm3dStage& out, const std::vector<Pos>& group, const std::vector<double>& v, double w) const {
    const std::size_t kk = k_ * k_;
    for (std::size_t b = 0; b < group.size(); ++b)
      for (std::size_t y = 0; y < k_; ++y)
        for (std::size_t x = 0; x < k_; ++x) {
          out.estimate(group[b].r + y, group[b].c + x) += w * v[b * kk + y * k_ + x];
          out.weight_sum(group[b].r + y, group[b].c + x) += w;
        }
  }

  static void finish(Bm3dStage& out) {
    for (std::size_t i = 0; i < out.estimate.size(); ++i)
      out.estimate[i] /= out.weight_sum[i];
  }

  const Grid2d& img_;
  Bm3dConfig cfg_;
  std::size_t k_;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dct_;
  double tau_hard_ = 0.0, tau_wiener_ = 0.0;
  std::vector<std::size_t> row_refs_, col_refs_;
  mutable Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> scratch_;
  mutable std::vector<double> haar_scratch_;
};

} // namespace detail

/// Stage 1 only (hard thresholding), with its aggregation weights.
inline Bm3dStage bm3d_basic_estimate(const Grid2d& image, const Bm3dConfig& config) {
  return detail::Bm3dEngine(image, config).hard_threshold_pass();
}

inline Grid2d bm3d_denoise(const Grid2d& image, const Bm3dConfig& config) {
  const detail::Bm3dEngine engine(image, config);
  const Bm3dStage basic = engine.hard_threshold_pass();
  return engine.wiener_pass(basic.estimate).estimate;
}

} // namespace sinodn

#endif
