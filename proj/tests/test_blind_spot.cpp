#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "sinodn/blind_spot.hpp"
#include "test_util.hpp"

using namespace sinodn;

namespace {

// Upper 1% points of the chi-square distribution.
constexpr double kChi2Crit63 = 92.010;
constexpr double kChi2Crit64 = 93.217;

Sinogram make_sinogram(Grid2d data) {
  Sinogram s;
  s.geometry.n_angles = data.rows();
  s.geometry.n_detectors = data.cols();
  s.data = std::move(data);
  return s;
}

std::vector<Sinogram> constant_plus_noise(std::size_t count, std::size_t n, double level, double sigma,
                                          std::uint64_t seed) {
  std::vector<Sinogram> v;
  for (std::size_t i = 0; i < count; ++i) {
    Grid2d g = test::gaussian_grid(n, n, seed + i, sigma);
    for (auto& x : g)
      x += level;
    v.push_back(make_sinogram(std::move(g)));
  }
  return v;
}

BlindSpotConfig small_config() {
  BlindSpotConfig c;
  c.patch_size = 16;
  c.batch_size = 8;
  c.epochs = 30;
  c.depth = 2;
  c.base_channels = 4;
  c.masked_pixel_percentage = 0.05;
  c.patches_per_sinogram = 8;
  c.learning_rate = 3e-3;
  c.seed = 99;
  return c;
}

double chi_square(const std::vector<double>& counts) {
  double total = 0.0;
  for (double c : counts)
    total += c;
  const double expected = total / double(counts.size());
  double chi = 0.0;
  for (double c : counts)
    chi += (c - expected) * (c - expected) / expected;
  return chi;
}

} // namespace

TEST(Masking, PixelCountRoundsAndHasAFloor) {
  EXPECT_EQ(masked_pixel_count(64, 0.005), 20u); // 20.48
  EXPECT_EQ(masked_pixel_count(8, 0.005), 1u);   // 0.32 -> at least one
  EXPECT_EQ(masked_pixel_count(10, 0.025), 2u);  // 2.5 rounds half to even
  EXPECT_EQ(masked_pixel_count(10, 0.035), 4u);  // 3.5 -> 4
}

TEST(Masking, ReplacementsComeFromTheRoiAndNeverFromThePixelItself) {
  Grid<float> patch(16, 16);
  for (std::size_t i = 0; i < patch.size(); ++i)
    patch[i] = float(i); // every value identifies its position
  BlindSpotConfig cfg = small_config();
  cfg.masked_pixel_percentage = 0.1;
  std::mt19937_64 rng(1);
  const std::vector<Grid<float>> patches(200, patch);
  const MaskedBatch b = build_masked_batch(patches, cfg, rng);
  ASSERT_EQ(b.inputs.size(), 200u);
  for (std::size_t p = 0; p < b.inputs.size(); ++p) {
    ASSERT_EQ(b.mask_coords[p].size(), masked_pixel_count(16, 0.1));
    std::set<std::pair<std::size_t, std::size_t>> unique(b.mask_coords[p].begin(), b.mask_coords[p].end());
    EXPECT_EQ(unique.size(), b.mask_coords[p].size());
    for (std::size_t m = 0; m < b.mask_coords[p].size(); ++m) {
      const auto [r, c] = b.mask_coords[p][m];
      EXPECT_EQ(b.original_values[p][m], patch(r, c));
      const auto src = std::size_t(b.inputs[p](r, c));
      const long sr = long(src / 16), sc = long(src % 16);
      EXPECT_LE(std::abs(sr - long(r)), 3);
      EXPECT_LE(std::abs(sc - long(c)), 3);
      EXPECT_FALSE(sr == long(r) && sc == long(c));
    }
    // Unmasked pixels are untouched.
    std::size_t changed = 0;
    for (std::size_t i = 0; i < patch.size(); ++i)
      changed += b.inputs[p][i] != patch[i];
    EXPECT_EQ(changed, b.mask_coords[p].size());
  }
}

TEST(Masking, PositionsAreUniform) {
  const Grid<float> patch(8, 8, 0.0f);
  BlindSpotConfig cfg = small_config();
  cfg.masked_pixel_percentage = 0.05; // 3 pixels of 64
  std::mt19937_64 rng(2);
  std::vector<double> counts(64, 0.0);
  const std::vector<Grid<float>> patches(20000, patch);
  const MaskedBatch b = build_masked_batch(patches, cfg, rng);
  for (const auto& coords : b.mask_coords)
    for (auto [r, c] : coords)
      counts[r * 8 + c] += 1.0;
  EXPECT_LT(chi_square(counts), kChi2Crit63);
}

TEST(Masking, InteriorReplacementOffsetsAreUniform) {
  Grid<float> patch(7, 7);
  for (std::size_t i = 0; i < patch.size(); ++i)
    patch[i] = float(i);
  BlindSpotConfig cfg = small_config();
  cfg.masked_pixel_percentage = 1.0 / 49.0; // a single pixel
  std::mt19937_64 rng(3);
  std::vector<double> counts(49, 0.0);
  std::size_t centre_hits = 0;
  for (int rep = 0; rep < 300; ++rep) {
    const std::vector<Grid<float>> patches(400, patch);
    const MaskedBatch b = build_masked_batch(patches, cfg, rng);
    for (std::size_t p = 0; p < b.inputs.size(); ++p) {
      const auto [r, c] = b.mask_coords[p][0];
      if (r != 3 || c != 3)
        continue;
      ++centre_hits;
      counts[std::size_t(b.inputs[p](3, 3))] += 1.0;
    }
  }
  ASSERT_GT(centre_hits, 1000u);
  EXPECT_EQ(counts[24], 0.0);
  counts.erase(counts.begin() + 24);
  EXPECT_LT(chi_square(counts), 70.0); // 47 dof, upper 1% point 71.2
}

TEST(Patches, CornersAreUniformOverValidPositions) {
  const Grid2d sino = test::random_grid(20, 12, 4);
  PatchSet set;
  extract_patches_into(set, sino, 0, 8, 100000, 5);
  std::vector<double> counts(13 * 5, 0.0);
  for (const auto& o : set.origins) {
    ASSERT_LE(o.row, 12u);
    ASSERT_LE(o.col, 4u);
    counts[o.row * 5 + o.col] += 1.0;
  }
  EXPECT_LT(chi_square(counts), kChi2Crit64);
  // Patch content matches its origin.
  const auto& o = set.origins[17];
  EXPECT_EQ(set.patches[17](2, 3), float(sino(o.row + 2, o.col + 3)));
  EXPECT_THROW(extract_patches_into(set, sino, 0, 16, 1, 5), ConfigError);
}

TEST(MaskedLoss, IsTheMeanSquaredErrorOverMaskedPixelsOnly) {
  const BlindSpotConfig cfg = small_config();
  const nn::UNet<double> net(cfg.architecture(), 7);
  std::vector<Grid<float>> patches;
  for (int i = 0; i < 3; ++i)
    patches.push_back(grid_cast<float>(test::random_grid(16, 16, 10 + i)));
  std::mt19937_64 rng(8);
  MaskedBatch batch = build_masked_batch(patches, cfg, rng);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t b = 0; b < 3; ++b) {
    const auto out = net.forward(detail::to_feature_map<double>(batch.inputs[b]));
    for (std::size_t m = 0; m < batch.mask_coords[b].size(); ++m) {
      const auto [r, c] = batch.mask_coords[b][m];
      const double d = out.data(0, long(r * 16 + c)) - batch.original_values[b][m];
      sum += d * d;
      ++n;
    }
  }
  const double expected = sum / double(n);
  EXPECT_NEAR(masked_loss(net, batch), expected, 1e-9);
  // Gradients come only through masked outputs: both evaluations agree.
  auto grads = net.zero_like();
  EXPECT_NEAR(masked_loss(net, batch, &grads), expected, 1e-9);
}

TEST(Training, ZeroEpochsKeepsTheInitialParameters) {
  BlindSpotConfig cfg = small_config();
  cfg.epochs = 0;
  const auto data = constant_plus_noise(4, 32, 1.0, 0.1, 20);
  const TrainingResult r = train_blind_spot(data, cfg);
  EXPECT_TRUE(r.log.epochs.empty());
  EXPECT_EQ(r.log.best_epoch, 0u);
  const nn::UNet<float> fresh(cfg.architecture(), derive_seed(cfg.seed, 1));
  for (std::size_t i = 0; i < fresh.params().size(); ++i)
    EXPECT_EQ(r.model.net.params()[i], fresh.params()[i]);
}

TEST(Training, LearnsAConstantUnderWhiteNoise) {
  const BlindSpotConfig cfg = small_config();
  const auto data = constant_plus_noise(20, 32, 1.0, 0.1, 30);
  std::size_t callbacks = 0;
  const TrainingResult r = train_blind_spot(data, cfg, [&](const EpochRecord&) { ++callbacks; });
  EXPECT_EQ(callbacks, cfg.epochs);
  EXPECT_LT(r.log.best_validation_loss, r.log.initial_validation_loss);
  const Sinogram test = constant_plus_noise(1, 32, 1.0, 0.1, 500)[0];
  const Sinogram out = denoise_with_model(r.model, test);
  Grid2d residual = out.data;
  for (auto& v : residual)
    v -= 1.0;
  EXPECT_LE(test::rms(residual), 0.05);
}

TEST(Training, IsDeterministicForAFixedSeed) {
  BlindSpotConfig cfg = small_config();
  cfg.epochs = 3;
  const auto data = constant_plus_noise(6, 32, 0.5, 0.1, 40);
  const TrainingResult a = train_blind_spot(data, cfg), b = train_blind_spot(data, cfg);
  for (std::size_t i = 0; i < a.model.net.params().size(); ++i)
    EXPECT_EQ(a.model.net.params()[i], b.model.net.params()[i]);
  cfg.seed = 100;
  const TrainingResult c = train_blind_spot(data, cfg);
  EXPECT_NE(a.model.net.params()[0], c.model.net.params()[0]);
}

TEST(Training, RejectsInvalidConfigurations) {
  const auto data = constant_plus_noise(4, 32, 1.0, 0.1, 20);
  BlindSpotConfig cfg = small_config();
  cfg.roi_size = 4;
  EXPECT_THROW(train_blind_spot(data, cfg), ConfigError);
  cfg = small_config();
  cfg.patch_size = 18;
  EXPECT_THROW(train_blind_spot(data, cfg), ConfigError);
  cfg = small_config();
  cfg.masked_pixel_percentage = 0.0;
  EXPECT_THROW(train_blind_spot(data, cfg), ConfigError);
  EXPECT_THROW(train_blind_spot(std::span<const Sinogram>(data).first(1), small_config()), ConfigError);
}

TEST(Tiling, IdentityBlendReproducesTheInput) {
  const auto id = [](const Grid2d& t) { return t; };
  for (auto [rows, cols] : {std::pair{100, 37}, std::pair{64, 64}, std::pair{10, 7}, std::pair{1000, 144}}) {
    const Grid2d g = test::random_grid(std::size_t(rows), std::size_t(cols), 50);
    for (std::size_t overlap : {0u, 8u, 16u})
      EXPECT_LE(test::max_abs_diff(blend_tiles(g, 32, overlap, id), g), 1e-6) << rows << "x" << cols;
  }
  EXPECT_THROW(blend_tiles(Grid2d(4, 4), 8, 8, id), ConfigError);
}

TEST(Tiling, OverlapChoiceBarelyChangesTrainedOutput) {
  BlindSpotConfig cfg = small_config();
  cfg.patch_size = 64;
  cfg.patches_per_sinogram = 2;
  cfg.epochs = 10;
  cfg.batch_size = 4;
  std::vector<Sinogram> data;
  for (int i = 0; i < 8; ++i) {
    Grid2d g = test::gaussian_grid(160, 96, 60 + i, 0.05);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c)
        g(r, c) += 1.0 + 0.5 * std::sin(0.05 * double(r) + 0.08 * double(c));
    data.push_back(make_sinogram(std::move(g)));
  }
  const TrainingResult r = train_blind_spot(data, cfg);
  const Sinogram a = denoise_with_model(r.model, data[0], 16), b = denoise_with_model(r.model, data[0], 32);
  EXPECT_LT(test::rms(a.data - b.data), 0.01 * test::rms(a.data));
}

TEST(ModelFile, RoundTripsParametersConfigAndVariant) {
  BlindSpotConfig cfg = small_config();
  cfg.variant = Variant::n2v2;
  cfg.epochs = 1;
  const auto data = constant_plus_noise(4, 32, 1.0, 0.1, 70);
  const TrainingResult r = train_blind_spot(data, cfg);
  test::TempDir dir;
  save_model(r.model, dir / "m.sdnm");
  const BlindSpotModel loaded = load_model(dir / "m.sdnm");
  EXPECT_EQ(loaded.config, r.model.config);
  EXPECT_EQ(loaded.net.architecture().variant, Variant::n2v2);
  EXPECT_EQ(loaded.norm_mean, r.model.norm_mean);
  EXPECT_EQ(loaded.norm_std, r.model.norm_std);
  for (std::size_t i = 0; i < loaded.net.params().size(); ++i)
    EXPECT_EQ(loaded.net.params()[i], r.model.net.params()[i]);
  EXPECT_EQ(denoise_with_model(loaded, data[0]).data, denoise_with_model(r.model, data[0]).data);

  std::ifstream in(dir / "m.sdnm", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(bytes.substr(0, 4), "SDNM");
  EXPECT_NE(bytes.find("\"variant\":\"n2v2\""), std::string::npos);
  EXPECT_NE(bytes.find("blur_pool"), std::string::npos);
}

TEST(ModelFile, RejectsCorruptFiles) {
  test::TempDir dir;
  {
    std::ofstream out(dir / "bad.sdnm", std::ios::binary);
    out << "NOPE0000000000000000";
  }
  EXPECT_THROW(load_model(dir / "bad.sdnm"), IoError);
  EXPECT_THROW(load_model(dir / "missing.sdnm"), IoError);
}
