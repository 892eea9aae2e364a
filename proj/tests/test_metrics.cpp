#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "sinodn/metrics.hpp"
#include "sinodn/phantom.hpp"
#include "test_util.hpp"

using namespace sinodn;

namespace {

// Direct-sum autocorrelation with the same (biased) normalisation.
double direct_autocorr(const Grid2d& g, long da, long dd) {
  const double m = mean(g);
  double num = 0.0, den = 0.0;
  for (long r = 0; r < long(g.rows()); ++r)
    for (long c = 0; c < long(g.cols()); ++c) {
      const double a = g(std::size_t(r), std::size_t(c)) - m;
      den += a * a;
      const long r2 = r + da, c2 = c + dd;
      if (r2 >= 0 && r2 < long(g.rows()) && c2 >= 0 && c2 < long(g.cols()))
        num += a * (g(std::size_t(r2), std::size_t(c2)) - m);
    }
  return num / den;
}

} // namespace

TEST(Psnr, IdenticalGridsGiveInfinity) {
  const Grid2d a = test::random_grid(4, 4, 1);
  EXPECT_TRUE(std::isinf(psnr(a, a).psnr_db));
  EXPECT_EQ(psnr(a, a).mse, 0.0);
}

TEST(Psnr, HandEvaluatedExample) {
  const Grid2d ref(1, 2, std::vector<double>{0.0, 1.0}), test(1, 2, std::vector<double>{0.0, 0.5});
  const PsnrResult r = psnr(ref, test, 1.0);
  EXPECT_DOUBLE_EQ(r.mse, 0.125);
  EXPECT_NEAR(r.psnr_db, 9.031, 5e-4);
  EXPECT_NEAR(r.psnr_db, 10.0 * std::log10(8.0), 1e-12);
  EXPECT_DOUBLE_EQ(psnr(ref, test).data_range, 1.0); // default range = max - min
}

TEST(Psnr, ScaleInvariant) {
  const Grid2d ref = test::random_grid(6, 5, 2), t = test::random_grid(6, 5, 3);
  const double c = 13.0;
  Grid2d rs = ref, ts = t;
  for (auto& v : rs)
    v *= c;
  for (auto& v : ts)
    v *= c;
  EXPECT_NEAR(psnr(ref, t, 2.0).psnr_db, psnr(rs, ts, 2.0 * c).psnr_db, 1e-10);
}

TEST(Psnr, DegenerateReferenceNeedsExplicitRange) {
  const Grid2d flat(3, 3, 1.0), t = test::random_grid(3, 3, 4);
  EXPECT_THROW(psnr(flat, t), ConfigError);
  EXPECT_NO_THROW(psnr(flat, t, 1.0));
  EXPECT_THROW(psnr(flat, t, 0.0), ConfigError);
  EXPECT_THROW(psnr(flat, Grid2d(2, 3)), ConfigError);
}

TEST(Psnr, DecreasesWithNoiseAmplitude) {
  const Grid2d ref = test::random_grid(32, 32, 5, 0.0, 1.0), noise = test::gaussian_grid(32, 32, 6);
  double previous = kInfinity;
  for (double amp : {0.01, 0.05, 0.2}) {
    const double p = psnr(ref, axpby(1.0, ref, amp, noise)).psnr_db;
    EXPECT_LT(p, previous);
    previous = p;
  }
}

TEST(DeltaPsnr, Examples) {
  const Grid2d ref = test::random_grid(8, 8, 7), e = test::gaussian_grid(8, 8, 8, 0.1);
  const Grid2d noisy = ref + e, half = axpby(1.0, ref, 0.5, e);
  EXPECT_EQ(delta_psnr(noisy, noisy, ref), 0.0);
  EXPECT_TRUE(std::isinf(delta_psnr(noisy, ref, ref)));
  EXPECT_GT(delta_psnr(noisy, ref, ref), 0.0);
  EXPECT_NEAR(delta_psnr(noisy, half, ref), 10.0 * std::log10(4.0), 1e-9);
  EXPECT_NEAR(10.0 * std::log10(4.0), 6.021, 5e-4);
  EXPECT_EQ(delta_psnr(ref, ref, ref), 0.0); // both infinite
}

TEST(DeltaPsnr, AntisymmetricUnderSwap) {
  const Grid2d ref = test::random_grid(8, 8, 9), a = test::random_grid(8, 8, 10), b = test::random_grid(8, 8, 11);
  EXPECT_NEAR(delta_psnr(a, b, ref), -delta_psnr(b, a, ref), 1e-12);
}

TEST(NoiseStatistics, Examples) {
  const Grid2d a = test::random_grid(3, 3, 12);
  const NoiseStats z = noise_statistics(a, a);
  EXPECT_EQ(z, NoiseStats{});
  const Grid2d d(1, 2, std::vector<double>{-1.0, 1.0});
  const NoiseStats s = noise_statistics(d, Grid2d(1, 2));
  EXPECT_DOUBLE_EQ(s.mean_abs, 1.0);
  EXPECT_DOUBLE_EQ(s.std, 1.0);
  EXPECT_DOUBLE_EQ(s.max, 1.0);
  EXPECT_DOUBLE_EQ(s.min, -1.0);
}

TEST(NoiseStatistics, MeanAbsZeroIffEqual) {
  Grid2d a = test::random_grid(5, 5, 13), b = a;
  EXPECT_EQ(noise_statistics(a, b).mean_abs, 0.0);
  b(2, 2) += 1e-9;
  EXPECT_GT(noise_statistics(a, b).mean_abs, 0.0);
}

TEST(Autocorrelation, MatchesDirectSum) {
  const Grid2d g = test::random_grid(23, 17, 14);
  const AutocorrMap map = autocorrelation_map(g, 5);
  for (long da = -5; da <= 5; ++da)
    for (long dd = -5; dd <= 5; ++dd)
      EXPECT_NEAR(map.at(da, dd), direct_autocorr(g, da, dd), 1e-10) << da << "," << dd;
}

TEST(Autocorrelation, UnitCenterAndPointSymmetry) {
  const AutocorrMap map = autocorrelation_map(test::random_grid(40, 30, 15), 7);
  EXPECT_EQ(map.at(0, 0), 1.0);
  for (long da = -7; da <= 7; ++da)
    for (long dd = -7; dd <= 7; ++dd) {
      EXPECT_EQ(map.at(da, dd), map.at(-da, -dd));
      EXPECT_LE(std::abs(map.at(da, dd)), 1.0);
    }
}

TEST(Autocorrelation, WhiteNoiseStaysWithinTheConfidenceBound) {
  const Grid2d g = test::gaussian_grid(1000, 144, 16);
  const AutocorrMap map = autocorrelation_map(g, 20);
  const double bound = 5.0 / std::sqrt(1000.0 * 144.0);
  EXPECT_NEAR(bound, 0.0132, 1e-4);
  std::size_t inside = 0, total = 0;
  for (long da = -20; da <= 20; ++da)
    for (long dd = -20; dd <= 20; ++dd)
      if (da != 0 || dd != 0) {
        ++total;
        inside += std::abs(map.at(da, dd)) < bound;
      }
  EXPECT_GE(double(inside), 0.99 * double(total));
}

TEST(Autocorrelation, DiagonalInjectorShowsDiagonalStructure) {
  std::mt19937_64 rng(17);
  const Grid2d g = diagonal_noise_field(1000, 144, StructuredNoise{0.05, 3.0}, rng);
  const AutocorrMap map = autocorrelation_map(g, 20);
  EXPECT_GE(diagonal_anisotropy(map, 10), 3.0);
  EXPECT_GT(map.at(1, 1), 0.5);
}

TEST(Autocorrelation, ErrorsOnConstantInputAndLargeLags) {
  EXPECT_THROW(autocorrelation_map(Grid2d(50, 50, 2.0), 5), NumericalError);
  EXPECT_THROW(autocorrelation_map(test::random_grid(20, 10, 1), 5), ConfigError);
}

TEST(Boxplot, SingleValue) {
  const BoxplotSummary b = boxplot_summary({3.5});
  EXPECT_EQ(b.median, 3.5);
  EXPECT_EQ(b.q1, 3.5);
  EXPECT_EQ(b.q3, 3.5);
  EXPECT_EQ(b.whisker_low, 3.5);
  EXPECT_EQ(b.whisker_high, 3.5);
  EXPECT_TRUE(b.outliers.empty());
}

TEST(Boxplot, OneToNine) {
  const BoxplotSummary b = boxplot_summary({9, 1, 8, 2, 7, 3, 6, 4, 5});
  EXPECT_EQ(b.median, 5.0);
  EXPECT_EQ(b.q1, 3.0);
  EXPECT_EQ(b.q3, 7.0);
  EXPECT_EQ(b.whisker_low, 1.0);
  EXPECT_EQ(b.whisker_high, 9.0);
}

TEST(Boxplot, TukeyOutlier) {
  const BoxplotSummary b = boxplot_summary({1, 2, 3, 100});
  ASSERT_EQ(b.outliers.size(), 1u);
  EXPECT_EQ(b.outliers[0], 100.0);
  EXPECT_EQ(b.whisker_high, 3.0);
  EXPECT_THROW(boxplot_summary({}), ConfigError);
}

TEST(Boxplot, InfiniteValuesSurvive) {
  const BoxplotSummary b = boxplot_summary({kInfinity, kInfinity, kInfinity});
  EXPECT_TRUE(std::isinf(b.median));
}

TEST(NoiseSigmaEstimate, RecoversGaussianSigma) {
  Grid2d g = test::gaussian_grid(400, 144, 18, 0.07);
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t c = 0; c < g.cols(); ++c)
      g(r, c) += 0.01 * double(r) + std::sin(0.05 * double(c)); // smooth signal
  EXPECT_NEAR(estimate_noise_sigma(g), 0.07, 0.005);
}
