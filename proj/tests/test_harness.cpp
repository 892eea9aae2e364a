#include <cmath>
#include <fstream>
#include <memory>

#include <gtest/gtest.h>

#include "sinodn/harness.hpp"
#include "test_util.hpp"

using namespace sinodn;

namespace {

ScanGeometry tiny_geometry() {
  ScanGeometry g;
  g.n_angles = 64;
  g.n_detectors = 32;
  return g;
}

ReconConfig tiny_recon() {
  ReconConfig r;
  r.image_size = 32;
  return r;
}

Sinogram labelled(Grid2d data, const std::string& label) {
  Sinogram s;
  s.geometry.n_angles = data.rows();
  s.geometry.n_detectors = data.cols();
  s.data = std::move(data);
  s.meta.label = label;
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

} // namespace

// A small six-configuration dataset shared by the experiment tests.
class HarnessData : public ::testing::Test {
protected:
  static void SetUpTestSuite() {
    dir_ = std::make_unique<test::TempDir>();
    std::vector<Phantom> phantoms;
    for (std::size_t c = 0; c < 6; ++c)
      phantoms.push_back(default_phantom(c));
    manifest_ = std::make_unique<DatasetManifest>(
        generate_dataset(phantoms, tiny_geometry(), NoiseModel{1000.0, 3, {}}, 6, dir_->path()));
  }
  static void TearDownTestSuite() {
    manifest_.reset();
    dir_.reset();
  }

  static ExperimentConfig config(std::initializer_list<const char*> methods) {
    ExperimentConfig cfg;
    cfg.recon = tiny_recon();
    for (const char* m : methods)
      cfg.methods.push_back(parse_method(m));
    return cfg;
  }

  static inline std::unique_ptr<test::TempDir> dir_;
  static inline std::unique_ptr<DatasetManifest> manifest_;
};

TEST(References, MeanOfTwoSamples) {
  const Sinogram a = labelled(Grid2d(2, 2, 0.0), "A"), b = labelled(Grid2d(2, 2, 2.0), "A");
  const std::vector<Sinogram> v{a, b};
  const Sinogram r = make_reference(v);
  for (double x : r.data)
    EXPECT_EQ(x, 1.0);
  EXPECT_EQ(r.meta.label, "A");
}

TEST(References, RejectsMixedLabelsAndSingleSamples) {
  const std::vector<Sinogram> mixed{labelled(Grid2d(2, 2), "A"), labelled(Grid2d(2, 2), "B")};
  EXPECT_THROW(make_reference(mixed), ConfigError);
  const std::vector<Sinogram> one{labelled(Grid2d(2, 2), "A")};
  EXPECT_THROW(make_reference(one), ConfigError);
}

TEST(References, AveragingShrinksNoiseAsOneOverRootN) {
  std::vector<Sinogram> v;
  for (std::size_t i = 0; i < 1000; ++i)
    v.push_back(labelled(test::gaussian_grid(8, 8, 100 + i), "A"));
  const Sinogram r = make_reference(v);
  EXPECT_LE(test::rms(r.data), 1.2 / std::sqrt(1000.0));
  EXPECT_GE(test::rms(r.data), 0.8 / std::sqrt(1000.0));
}

TEST(References, PsnrAgainstCleanImprovesWithSampleCount) {
  ScanGeometry g = tiny_geometry();
  const Sinogram clean = forward_project(default_phantom(0), g);
  std::vector<Sinogram> samples;
  for (std::size_t i = 0; i < 100; ++i)
    samples.push_back(apply_noise(clean, NoiseModel{1e5, derive_seed(5, i), {}}));
  const double p10 = psnr(clean.data, make_reference(std::span(samples).first(10)).data).psnr_db;
  const double p100 = psnr(clean.data, make_reference(samples).data).psnr_db;
  EXPECT_GT(p100, p10 + 8.0);
}

TEST(References, ImageReferenceIsTheReconstructionOfTheMeanSinogram) {
  std::vector<Sinogram> v;
  for (std::size_t i = 0; i < 4; ++i)
    v.push_back(labelled(test::random_grid(64, 32, 10 + i, 0.0, 1.0), "A"));
  for (auto& s : v)
    s.geometry = tiny_geometry();
  const ReconImage a = make_image_reference(v, tiny_recon());
  const ReconImage b = reconstruct(make_reference(v), tiny_recon());
  EXPECT_LT(relative_max_error(a.data, b.data), 1e-5);
  EXPECT_EQ(relative_max_error(Grid2d(2, 2), Grid2d(2, 2)), 0.0);
}

TEST_F(HarnessData, PerConfigurationFoldsKeepConfigurationsWhole) {
  const FoldPlan p = plan_folds(*manifest_, 5, FoldStrategy::per_configuration, "Plane1_Bottom");
  ASSERT_EQ(p.folds.size(), 5u);
  for (std::size_t f = 0; f < 5; ++f) {
    ASSERT_EQ(p.folds[f].size(), 6u);
    for (const auto& s : p.folds[f])
      EXPECT_EQ(s.configuration, f);
  }
  EXPECT_FALSE(p.fold_of({5, 0}).has_value());
  EXPECT_EQ(p.fold_of({3, 2}), 3u);
  EXPECT_NO_THROW(p.validate(*manifest_));
  EXPECT_THROW(plan_folds(*manifest_, 6, FoldStrategy::per_configuration, "Plane1_Bottom"), ConfigError);
  EXPECT_THROW(plan_folds(*manifest_, 5, FoldStrategy::per_configuration, "Plane9_Nowhere"), ConfigError);
  EXPECT_THROW(plan_folds(*manifest_, 0, FoldStrategy::per_configuration), ConfigError);
}

TEST_F(HarnessData, FewerFoldsThanConfigurationsGroupNeighbours) {
  const FoldPlan p = plan_folds(*manifest_, 3, FoldStrategy::per_configuration);
  EXPECT_NO_THROW(p.validate(*manifest_));
  for (std::size_t f = 0; f < 3; ++f) {
    ASSERT_EQ(p.folds[f].size(), 12u);
    EXPECT_EQ(p.folds[f].front().configuration, 2 * f);
    EXPECT_EQ(p.folds[f].back().configuration, 2 * f + 1);
  }
  const FoldPlan one = plan_folds(*manifest_, 1, FoldStrategy::per_configuration);
  EXPECT_EQ(one.folds[0].size(), 36u);
}

TEST_F(HarnessData, ProportionalFoldsSplitEachConfigurationEvenly) {
  const FoldPlan p = plan_folds(*manifest_, 3, FoldStrategy::proportional_stratified, {}, 11);
  EXPECT_NO_THROW(p.validate(*manifest_));
  for (const auto& fold : p.folds) {
    std::vector<std::size_t> per(6, 0);
    for (const auto& s : fold)
      ++per[s.configuration];
    for (std::size_t c : per)
      EXPECT_EQ(c, 2u);
  }
  const FoldPlan again = plan_folds(*manifest_, 3, FoldStrategy::proportional_stratified, {}, 11);
  EXPECT_EQ(again.folds, p.folds);
  const FoldPlan other = plan_folds(*manifest_, 3, FoldStrategy::proportional_stratified, {}, 12);
  EXPECT_NE(other.folds, p.folds);
  EXPECT_EQ(parse_fold_strategy("proportional_stratified"), FoldStrategy::proportional_stratified);
  EXPECT_THROW(parse_fold_strategy("random"), ConfigError);
}

TEST_F(HarnessData, ProportionalFoldsBalanceUnevenCounts) {
  // 5 samples per configuration over 2 folds: every fold gets 2 or 3 of each.
  DatasetManifest m = *manifest_;
  for (auto& c : m.configurations)
    c.sample_paths.resize(5);
  const FoldPlan p = plan_folds(m, 2, FoldStrategy::proportional_stratified, {}, 1);
  EXPECT_NO_THROW(p.validate(m));
  EXPECT_EQ(p.folds[0].size(), 15u);
  EXPECT_EQ(p.folds[1].size(), 15u);
}

TEST(Methods, ParseTokens) {
  EXPECT_EQ(parse_method("identity").kind, MethodKind::identity);
  EXPECT_EQ(parse_method("gaussian:2.5").gaussian_sigma, 2.5);
  EXPECT_EQ(parse_method("bm3d:0.1").bm3d.sigma, 0.1);
  EXPECT_EQ(parse_method("n2v2").blind_spot.variant, Variant::n2v2);
  EXPECT_EQ(parse_method("gaussian:4").name, "gaussian:4");
  EXPECT_THROW(parse_method("median"), ConfigError);
  EXPECT_THROW(parse_method("gaussian:abc"), ConfigError);
  EXPECT_THROW(parse_method("gaussian:-1"), ConfigError);
  EXPECT_THROW(parse_method("n2v:3"), ConfigError);
}

TEST(Methods, ThinningKeepsEvenlySpacedSamples) {
  std::vector<SampleRef> pool;
  for (std::size_t i = 0; i < 10; ++i)
    pool.push_back({0, i});
  EXPECT_EQ(thin_samples(pool, 0).size(), 10u);
  const auto t = thin_samples(pool, 4);
  ASSERT_EQ(t.size(), 4u);
  EXPECT_EQ(t[0].sample, 0u);
  EXPECT_EQ(t[1].sample, 2u);
  EXPECT_EQ(t[2].sample, 5u);
  EXPECT_EQ(t[3].sample, 7u);
}

TEST_F(HarnessData, IdentityScoresZeroAndOracleScoresInfinity) {
  const FoldPlan plan = plan_folds(*manifest_, 5, FoldStrategy::per_configuration, "Plane1_Bottom");
  const EvalReport r = run_experiment(*manifest_, plan, config({"identity", "oracle"}));
  ASSERT_EQ(r.cells.size(), 2u * 2u * 5u);
  for (const auto& c : r.cells) {
    ASSERT_FALSE(c.skipped) << c.error;
    ASSERT_EQ(c.scores.size(), 6u);
    for (const auto& s : c.scores) {
      if (c.method == "identity") {
        EXPECT_EQ(s.delta_psnr, 0.0);
      } else {
        EXPECT_TRUE(std::isinf(s.delta_psnr) && s.delta_psnr > 0.0);
      }
      EXPECT_TRUE(std::isfinite(s.psnr_noisy));
    }
  }
  for (const auto& f : r.folds) {
    EXPECT_TRUE(f.error.empty());
    EXPECT_LT(f.reference_linearity_error, 1e-5);
  }
  // Capped at 99 with the inf flag in the CSV.
  const std::string csv = report_to_csv(r);
  EXPECT_NE(csv.find(",99,1\n"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 2 * 5 * 6);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kReportCsvHeader);
  // Self-tests never set the over-smoothing flag.
  EXPECT_EQ(r.over_smoothing_baseline, 0.0);
  for (const auto& d : r.diagnostics)
    EXPECT_FALSE(d.over_smoothing);
}

TEST_F(HarnessData, JsonRoundTripIsExact) {
  const FoldPlan plan = plan_folds(*manifest_, 2, FoldStrategy::proportional_stratified, {}, 4);
  const EvalReport r = run_experiment(*manifest_, plan, config({"oracle", "gaussian:1"}));
  test::TempDir out;
  const auto paths = export_report(r, ReportFormat::json, out / "report");
  ASSERT_EQ(paths.size(), 1u);
  const EvalReport back = load_report(paths[0]);
  EXPECT_EQ(back, r);
  EXPECT_EQ(report_to_csv(back), report_to_csv(r));
  const auto csv_paths = export_report(r, ReportFormat::csv, out / "report");
  ASSERT_EQ(csv_paths.size(), 2u);
  EXPECT_EQ(slurp(csv_paths[0]), report_to_csv(r));
  EXPECT_EQ(slurp(csv_paths[1]), summary_to_csv(r));
  EXPECT_THROW(load_report(out / "missing.json"), IoError);
}

TEST(Report, EmptyReportHasHeaderOnly) {
  const EvalReport r;
  EXPECT_EQ(report_to_csv(r), std::string(kReportCsvHeader) + "\n");
  const std::string summary = summary_to_csv(r);
  EXPECT_EQ(std::count(summary.begin(), summary.end(), '\n'), 1);
  EXPECT_EQ(report_from_json(report_to_json(r)), r);
  EXPECT_THROW(report_from_json(nlohmann::json{{"schema_version", 99}}), ConfigError);
}

TEST(Report, CsvQuotesAwkwardNames) {
  EvalReport r;
  r.cells.push_back({"a,\"b\"", 0, Space::sinogram, {{"id", 1.0, 2.0, 1.0}}, boxplot_summary({1.0}), false, {}});
  const std::string csv = report_to_csv(r);
  EXPECT_NE(csv.find("\"a,\"\"b\"\"\",0,sinogram,id,1,2,1,0"), std::string::npos);
}

TEST_F(HarnessData, RerunsAreByteIdentical) {
  const FoldPlan plan = plan_folds(*manifest_, 5, FoldStrategy::per_configuration, "Plane1_Bottom");
  ExperimentConfig cfg = config({"gaussian:1", "bm3d"});
  cfg.methods[1].bm3d.search_window = 11;
  const std::string a = report_to_csv(run_experiment(*manifest_, plan, cfg));
  cfg.threads = 3;
  const std::string b = report_to_csv(run_experiment(*manifest_, plan, cfg));
  EXPECT_EQ(a, b);
}

TEST_F(HarnessData, FailingCellsAreRecordedAndOthersStillRun) {
  const FoldPlan plan = plan_folds(*manifest_, 2, FoldStrategy::per_configuration);
  ExperimentConfig cfg = config({"bm3d:0.1", "identity"});
  cfg.methods[0].bm3d.block_size = 64; // larger than the search window
  const EvalReport r = run_experiment(*manifest_, plan, cfg);
  for (std::size_t f = 0; f < 2; ++f) {
    const EvalCell* bad = r.find("bm3d:0.1", f, Space::sinogram);
    ASSERT_NE(bad, nullptr);
    EXPECT_TRUE(bad->skipped);
    EXPECT_NE(bad->error.find("block_size"), std::string::npos);
    EXPECT_TRUE(r.find_diagnostics("bm3d:0.1", f)->skipped);
    const EvalCell* good = r.find("identity", f, Space::reconstruction);
    ASSERT_NE(good, nullptr);
    EXPECT_FALSE(good->skipped);
  }
  EXPECT_NE(summary_to_csv(r).find("bm3d:0.1,0,sinogram,0,,,,,,0,0,1"), std::string::npos);
  EXPECT_THROW(run_experiment(*manifest_, plan, config({"identity", "identity"})), ConfigError);
}

TEST_F(HarnessData, OverBlurringIsFlagged) {
  const FoldPlan plan = plan_folds(*manifest_, 5, FoldStrategy::per_configuration, "Plane1_Bottom");
  ExperimentConfig cfg = config({"gaussian:0.5", "gaussian:1", "gaussian:4", "identity"});
  const EvalReport r = run_experiment(*manifest_, plan, cfg);
  // Oracle for the baseline: median of worst-sample mean_abs over the filters.
  std::vector<double> worst;
  for (const auto& d : r.diagnostics)
    if (d.method != "identity")
      worst.push_back(d.worst.mean_abs);
  std::sort(worst.begin(), worst.end());
  ASSERT_EQ(worst.size(), 15u);
  EXPECT_DOUBLE_EQ(r.over_smoothing_baseline, worst[7]);
  std::size_t flagged_strong = 0;
  for (const auto& d : r.diagnostics) {
    EXPECT_EQ(d.over_smoothing, d.method != "identity" && d.worst.mean_abs > 2.0 * worst[7]) << d.method;
    if (d.method == "gaussian:0.5") {
      EXPECT_FALSE(d.over_smoothing);
    }
    flagged_strong += d.method == "gaussian:4" && d.over_smoothing;
  }
  EXPECT_GE(flagged_strong, 1u);
}

TEST_F(HarnessData, BlindSpotTrainingNeverSeesTheEvaluationFold) {
  const FoldPlan plan = plan_folds(*manifest_, 3, FoldStrategy::per_configuration);
  ExperimentConfig cfg = config({"n2v"});
  auto& bs = cfg.methods[0].blind_spot;
  bs.patch_size = 16;
  bs.epochs = 1;
  bs.base_channels = 4;
  bs.batch_size = 8;
  bs.patches_per_sinogram = 2;
  bs.masked_pixel_percentage = 0.05;
  cfg.methods[0].max_training_sinograms = 10;
  const EvalReport r = run_experiment(*manifest_, plan, cfg);
  ASSERT_EQ(r.training.size(), 3u);
  for (const auto& t : r.training) {
    EXPECT_EQ(t.evaluation_overlap, 0u);
    EXPECT_EQ(t.training_sinograms, 10u);
    EXPECT_EQ(t.training_folds.size(), 2u);
    EXPECT_EQ(std::count(t.training_folds.begin(), t.training_folds.end(), t.fold), 0);
    EXPECT_EQ(t.epochs, 1u);
  }
  for (const auto& c : r.cells)
    EXPECT_FALSE(c.skipped) << c.error;
}
