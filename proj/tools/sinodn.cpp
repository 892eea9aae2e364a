// sinodn: command-line front end.
//
//   sinodn generate | train | denoise | recon | eval | autocorr [flags]
//
// Exit codes: 0 success, 1 usage/configuration, 2 I/O, 3 numerical failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "sinodn/sinodn.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sinodn;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Globals {
  std::uint64_t seed = 0;
  std::size_t threads = default_threads();
  std::string out_dir = "sinodn_out";
  std::string log_level = "info";
};

struct GenerateOpts {
  std::size_t angles = 1000, detectors = 144, configs = 6, samples = 2000;
  double flux = 1000.0, source_radius = 2.0, fan_half_angle = 0.55;
  std::string phantom = "default";
  double diagonal_sigma = 0.0, diagonal_length = 3.0;
};

struct BlindSpotOpts {
  std::string variant = "n2v";
  std::size_t epochs = 200, patch = 64, roi = 7, depth = 2, base = 16, batch = 64, per_sinogram = 100;
  double mask_pct = 0.5, lr = 1e-3, validation = 0.1;
  std::size_t max_sinograms = 0;

  BlindSpotConfig config(std::uint64_t seed) const {
    BlindSpotConfig c;
    c.variant = nn::parse_variant(variant);
    c.epochs = epochs;
    c.patch_size = patch;
    c.roi_size = roi;
    c.depth = depth;
    c.base_channels = base;
    c.batch_size = batch;
    c.patches_per_sinogram = per_sinogram;
    c.masked_pixel_percentage = mask_pct / 100.0;
    c.learning_rate = lr;
    c.validation_fraction = validation;
    c.seed = seed;
    c.validate();
    return c;
  }

  void add_to(CLI::App* app, bool with_variant) {
    if (with_variant)
      app->add_option("--variant", variant, "Blind-spot variant")->check(CLI::IsMember({"n2v", "n2v2"}))->capture_default_str();
    app->add_option("--epochs", epochs, "Training epochs")->capture_default_str();
    app->add_option("--patch", patch, "Patch size (divisible by 2^depth)")->capture_default_str();
    app->add_option("--roi", roi, "ROI size for masked-pixel replacement (odd)")->capture_default_str();
    app->add_option("--mask-pct", mask_pct, "Masked pixel percentage of each patch")->capture_default_str();
    app->add_option("--depth", depth, "Number of downsampling stages")->capture_default_str();
    app->add_option("--base-channels", base, "Channels at the first level")->capture_default_str();
    app->add_option("--batch", batch, "Batch size")->capture_default_str();
    app->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
    app->add_option("--patches-per-sinogram", per_sinogram, "Random patches drawn per training sinogram")
        ->capture_default_str();
    app->add_option("--validation-fraction", validation, "Fraction of patches held out for validation")
        ->capture_default_str();
    app->add_option("--max-sinograms", max_sinograms, "Cap on training sinograms, evenly spaced (0: all)")
        ->capture_default_str();
  }
};

struct ReconOpts {
  std::size_t image_size = 128, parallel_angles = 0, parallel_offsets = 0;
  std::string filter = "ram-lak", interp = "linear";

  ReconConfig config() const {
    ReconConfig c;
    c.image_size = image_size;
    c.filter = json(filter).get<RampWindow>();
    c.rebin_interpolation = json(interp).get<Interpolation>();
    c.parallel_n_angles = parallel_angles;
    c.parallel_n_offsets = parallel_offsets;
    c.validate();
    return c;
  }

  void add_to(CLI::App* app) {
    app->add_option("--image-size", image_size, "Reconstructed image size (even, >= 16)")->capture_default_str();
    app->add_option("--filter", filter, "Ramp filter window")
        ->check(CLI::IsMember({"ram-lak", "shepp-logan"}))
        ->capture_default_str();
    app->add_option("--interp", interp, "Rebinning interpolation")
        ->check(CLI::IsMember({"nearest", "linear"}))
        ->capture_default_str();
    app->add_option("--parallel-angles", parallel_angles, "Parallel-beam angle count (0: fan angle count)")
        ->capture_default_str();
    app->add_option("--parallel-offsets", parallel_offsets, "Parallel-beam offset count (0: detector count)")
        ->capture_default_str();
  }
};

fs::path output_dir(const Globals& g) {
  if (const char* env = std::getenv("SINODN_OUT"); env && *env)
    return env;
  return g.out_dir;
}

fs::path ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p))
    throw IoError("cannot create output directory '" + p.string() + "'");
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw IoError("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os)
    throw IoError("failed writing '" + path.string() + "'");
}

/// run.json: everything needed to rerun the command.
void write_run_snapshot(const fs::path& dir, const std::string& command, const Globals& g, const json& options,
                        const std::vector<std::string>& argv) {
  json j{{"tool", "sinodn"},
         {"version", kVersion},
         {"command", command},
         {"argv", argv},
         {"seed", g.seed},
         {"threads", g.threads},
         {"out_dir", dir.string()},
         {"log_level", g.log_level},
         {"options", options}};
  write_text(dir / "run.json", j.dump(2) + "\n");
}

ScanGeometry geometry_for(const Grid2d& data, double source_radius, double fan_half_angle) {
  ScanGeometry g;
  g.n_angles = data.rows();
  g.n_detectors = data.cols();
  g.source_radius = source_radius;
  g.fan_half_angle = fan_half_angle;
  g.validate();
  return g;
}

Sinogram read_sinogram(const fs::path& path, const ScanGeometry& geometry) {
  Sinogram s;
  s.data = read_grid(path);
  s.geometry = geometry;
  s.geometry.n_angles = s.data.rows();
  s.geometry.n_detectors = s.data.cols();
  s.validate();
  return s;
}

std::vector<SampleRef> all_samples(const DatasetManifest& m, const std::string& exclude) {
  std::optional<std::size_t> skip;
  if (!exclude.empty()) {
    skip = m.find(exclude);
    if (!skip)
      throw ConfigError("unknown configuration '" + exclude + "'");
  }
  std::vector<SampleRef> v;
  for (std::size_t c = 0; c < m.configurations.size(); ++c)
    if (c != skip)
      for (std::size_t s = 0; s < m.configurations[c].sample_paths.size(); ++s)
        v.push_back({c, s});
  return v;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty())
        out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  if (!cur.empty())
    out.push_back(cur);
  return out;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sinogram denoising toolkit: synthetic fan-beam data, FBP reconstruction, Gaussian/BM3D/blind-spot "
               "denoisers and a cross-validated PSNR harness."};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Master random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (outputs do not depend on this)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--out-dir", g.out_dir, "Output directory (SINODN_OUT overrides)")->capture_default_str();
  app.add_option("--log-level", g.log_level, "Log verbosity")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}))
      ->capture_default_str();

  // generate
  GenerateOpts gen;
  auto* generate = app.add_subcommand("generate", "Write a synthetic noisy dataset and its manifest");
  generate->add_option("--angles", gen.angles, "Projection angles per sinogram")->capture_default_str();
  generate->add_option("--detectors", gen.detectors, "Detector channels")->capture_default_str();
  generate->add_option("--configs", gen.configs, "Configurations (1-6)")->check(CLI::Range(1, 6))->capture_default_str();
  generate->add_option("--samples", gen.samples, "Noisy samples per configuration")->capture_default_str();
  generate->add_option("--flux", gen.flux, "Photons per ray at zero attenuation")->capture_default_str();
  generate->add_option("--source-radius", gen.source_radius, "Source radius (field of view = unit circle)")
      ->capture_default_str();
  generate->add_option("--fan-half-angle", gen.fan_half_angle, "Fan half-angle in radians")->capture_default_str();
  generate->add_option("--phantom", gen.phantom, "Phantom layout")
      ->check(CLI::IsMember({"default", "empty", "disk"}))
      ->capture_default_str();
  generate->add_option("--diagonal-sigma", gen.diagonal_sigma, "Std of the diagonal structured noise (0: off)")
      ->capture_default_str();
  generate->add_option("--diagonal-length", gen.diagonal_length, "Correlation length of the diagonal noise")
      ->capture_default_str();

  // train
  BlindSpotOpts bs;
  std::string manifest_path, exclude;
  auto* train = app.add_subcommand("train", "Train a blind-spot denoiser on noisy sinograms");
  train->add_option("--manifest", manifest_path, "Dataset manifest")->required();
  train->add_option("--exclude", exclude, "Configuration label left out of training");
  bs.add_to(train, true);

  // denoise
  std::string input, output, method = "gaussian", model_path;
  double sigma = 1.0;
  std::size_t overlap = 0, bm3d_window = Bm3dConfig{}.search_window, bm3d_step = Bm3dConfig{}.step;
  auto* denoise = app.add_subcommand("denoise", "Denoise one STF1 sinogram");
  denoise->add_option("--input", input, "Input STF1 sinogram")->required();
  denoise->add_option("--output", output, "Output file (default: <out-dir>/denoised.stf)");
  denoise->add_option("--method", method, "Denoiser")
      ->check(CLI::IsMember({"gaussian", "bm3d", "model"}))
      ->capture_default_str();
  denoise->add_option("--sigma", sigma, "Gaussian sigma in pixels, or BM3D noise std (<= 0: estimated)")
      ->capture_default_str();
  denoise->add_option("--model", model_path, "Model file for --method model");
  denoise->add_option("--overlap", overlap, "Tile overlap for --method model (0: patch/4)")->capture_default_str();
  denoise->add_option("--search-window", bm3d_window, "BM3D search window")->capture_default_str();
  denoise->add_option("--step", bm3d_step, "BM3D reference block stride")->capture_default_str();

  // recon
  ReconOpts ro;
  double source_radius = ScanGeometry{}.source_radius, fan_half_angle = ScanGeometry{}.fan_half_angle;
  auto* recon = app.add_subcommand("recon", "Reconstruct one STF1 sinogram by filtered backprojection");
  recon->add_option("--input", input, "Input STF1 fan-beam sinogram")->required();
  recon->add_option("--output", output, "Output file (default: <out-dir>/recon.stf)");
  recon->add_option("--manifest", manifest_path, "Take the scan geometry from this manifest");
  recon->add_option("--source-radius", source_radius, "Source radius")->capture_default_str();
  recon->add_option("--fan-half-angle", fan_half_angle, "Fan half-angle in radians")->capture_default_str();
  ro.add_to(recon);

  // eval
  std::string methods = "identity,gaussian,bm3d,n2v", strategy = "per_configuration", holdout;
  std::size_t folds = 5;
  double gaussian_sigma = 1.0, bm3d_sigma = 0.0, over_smoothing = 2.0;
  BlindSpotOpts ebs;
  ReconOpts ero;
  auto* eval = app.add_subcommand("eval", "Cross-validated DeltaPSNR evaluation in sinogram and image space");
  eval->add_option("--manifest", manifest_path, "Dataset manifest")->required();
  eval->add_option("--methods", methods,
                   "Comma-separated: identity, oracle, gaussian[:sigma], bm3d[:sigma], n2v, n2v2")
      ->capture_default_str();
  eval->add_option("--folds", folds, "Number of folds")->capture_default_str();
  eval->add_option("--strategy", strategy, "Fold strategy")
      ->check(CLI::IsMember({"per_configuration", "proportional_stratified"}))
      ->capture_default_str();
  eval->add_option("--holdout", holdout, "Configuration label excluded from all folds");
  eval->add_option("--gaussian-sigma", gaussian_sigma, "Default Gaussian sigma")->capture_default_str();
  eval->add_option("--bm3d-sigma", bm3d_sigma, "Default BM3D sigma (<= 0: estimated per sample)")
      ->capture_default_str();
  eval->add_option("--bm3d-search-window", bm3d_window, "BM3D search window")->capture_default_str();
  eval->add_option("--bm3d-step", bm3d_step, "BM3D reference block stride")->capture_default_str();
  eval->add_option("--over-smoothing-factor", over_smoothing, "Flag threshold relative to the median fold")
      ->capture_default_str();
  ebs.add_to(eval, false);
  ero.add_to(eval);

  // autocorr
  std::string subtract;
  std::size_t max_lag = 20;
  auto* autocorr = app.add_subcommand("autocorr", "Normalised 2D autocorrelation map of a sinogram");
  autocorr->add_option("--input", input, "Input STF1 sinogram")->required();
  autocorr->add_option("--subtract", subtract, "STF1 grid subtracted first (e.g. the clean sinogram)");
  autocorr->add_option("--max-lag", max_lag, "Largest lag in both directions")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  spdlog::set_default_logger(spdlog::stderr_color_mt("sinodn"));
  spdlog::set_level(spdlog::level::from_str(g.log_level));
  std::vector<std::string> args(argv + 1, argv + argc);

  try {
    const fs::path out = ensure_dir(output_dir(g));
    json options;

    if (*generate) {
      ScanGeometry geometry;
      geometry.n_angles = gen.angles;
      geometry.n_detectors = gen.detectors;
      geometry.source_radius = gen.source_radius;
      geometry.fan_half_angle = gen.fan_half_angle;
      NoiseModel noise;
      noise.photon_flux = gen.flux;
      noise.seed = g.seed;
      if (gen.diagonal_sigma > 0.0)
        noise.structured = StructuredNoise{gen.diagonal_sigma, gen.diagonal_length};
      std::vector<Phantom> phantoms;
      for (std::size_t c = 0; c < gen.configs; ++c) {
        if (gen.phantom == "default")
          phantoms.push_back(default_phantom(c));
        else if (gen.phantom == "disk")
          phantoms.push_back(Phantom{{Disk{0.0, 0.0, 0.5, 1.0}}});
        else
          phantoms.push_back(Phantom{});
      }
      options = {{"geometry", geometry}, {"noise", noise}, {"configs", gen.configs},
                 {"samples", gen.samples}, {"phantom", gen.phantom}};
      write_run_snapshot(out, "generate", g, options, args);
      spdlog::info("generating {} configurations x {} samples into {}", gen.configs, gen.samples, out.string());
      const auto m = generate_dataset(phantoms, geometry, noise, gen.samples, out, g.threads);
      spdlog::info("wrote {} noisy sinograms", m.sample_count());
    } else if (*train) {
      const DatasetManifest m = load_manifest(manifest_path);
      const BlindSpotConfig config = bs.config(g.seed);
      const auto samples = thin_samples(all_samples(m, exclude), bs.max_sinograms);
      options = {{"manifest", manifest_path}, {"exclude", exclude}, {"config", config},
                 {"max_sinograms", bs.max_sinograms}, {"training_sinograms", samples.size()}};
      write_run_snapshot(out, "train", g, options, args);
      spdlog::info("training {} on {} sinograms", nn::to_string(config.variant), samples.size());
      const TrainingResult r = train_on_samples(m, samples, config, [](const EpochRecord& e) {
        spdlog::info("epoch {:4d}  train {:.6f}  validation {:.6f}", e.epoch, e.train_loss, e.validation_loss);
      });
      save_model(r.model, out / "model.sdnm");
      std::string log = "epoch,train_loss,validation_loss\n";
      for (const auto& e : r.log.epochs)
        log += std::to_string(e.epoch) + ',' + detail::format_number(e.train_loss) + ',' +
               detail::format_number(e.validation_loss) + '\n';
      write_text(out / "training_log.csv", log);
      spdlog::info("best epoch {} (validation loss {:.6f}, initial {:.6f})", r.log.best_epoch,
                   r.log.best_validation_loss, r.log.initial_validation_loss);
    } else if (*denoise) {
      const fs::path dst = output.empty() ? out / "denoised.stf" : fs::path(output);
      options = {{"input", input}, {"output", dst.string()}, {"method", method}, {"sigma", sigma},
                 {"model", model_path}, {"overlap", overlap}, {"search_window", bm3d_window}, {"step", bm3d_step}};
      write_run_snapshot(out, "denoise", g, options, args);
      Sinogram s;
      s.data = read_grid(input);
      if (!all_finite(s.data))
        throw NumericalError("input contains non-finite values");
      Sinogram result;
      if (method == "gaussian") {
        if (sigma < 0.0)
          throw ConfigError("--sigma must be >= 0 for the Gaussian filter");
        result = gaussian_denoise(s, sigma);
      } else if (method == "bm3d") {
        Bm3dConfig c;
        c.sigma = sigma;
        c.search_window = bm3d_window;
        c.step = bm3d_step;
        result = bm3d_sinogram(s, c);
      } else {
        if (model_path.empty())
          throw ConfigError("--method model requires --model");
        result = denoise_with_model(load_model(model_path), s, overlap);
      }
      write_grid(dst, result.data);
      spdlog::info("wrote {}", dst.string());
    } else if (*recon) {
      const fs::path dst = output.empty() ? out / "recon.stf" : fs::path(output);
      const ReconConfig rc = ro.config();
      Grid2d data = read_grid(input);
      ScanGeometry geometry = geometry_for(data, source_radius, fan_half_angle);
      if (!manifest_path.empty())
        geometry = load_manifest(manifest_path).geometry;
      options = {{"input", input}, {"output", dst.string()}, {"recon", rc}, {"geometry", geometry}};
      write_run_snapshot(out, "recon", g, options, args);
      const Sinogram s = read_sinogram(input, geometry);
      const ReconImage img = reconstruct(s, rc, g.threads);
      write_grid(dst, img.data);
      spdlog::info("wrote {} ({}x{})", dst.string(), img.size(), img.size());
    } else if (*eval) {
      const DatasetManifest m = load_manifest(manifest_path);
      MethodSpec base;
      base.gaussian_sigma = gaussian_sigma;
      base.bm3d.sigma = bm3d_sigma;
      base.bm3d.search_window = bm3d_window;
      base.bm3d.step = bm3d_step;
      base.blind_spot = ebs.config(g.seed);
      base.max_training_sinograms = ebs.max_sinograms;
      ExperimentConfig cfg;
      cfg.recon = ero.config();
      cfg.threads = g.threads;
      cfg.over_smoothing_factor = over_smoothing;
      cfg.log = [](const std::string& s) { spdlog::info("{}", s); };
      for (const auto& token : split_list(methods))
        cfg.methods.push_back(parse_method(token, base));
      if (cfg.methods.empty())
        throw ConfigError("--methods is empty");
      const FoldPlan plan = plan_folds(m, folds, parse_fold_strategy(strategy),
                                       holdout.empty() ? std::nullopt : std::optional<std::string>(holdout), g.seed);
      options = {{"manifest", manifest_path}, {"methods", cfg.methods}, {"fold_plan", plan}, {"recon", cfg.recon}};
      write_run_snapshot(out, "eval", g, options, args);
      EvalReport report = run_experiment(m, plan, cfg);
      report.run_config["seed"] = g.seed;
      for (const auto& p : export_report(report, ReportFormat::csv, out / "report"))
        spdlog::info("wrote {}", p.string());
      for (const auto& p : export_report(report, ReportFormat::json, out / "report"))
        spdlog::info("wrote {}", p.string());
      for (const auto& d : report.diagnostics)
        if (d.over_smoothing)
          spdlog::warn("{} fold {}: over-smoothing (worst-sample residual mean_abs {:.4g}, median {:.4g})",
                       d.method, d.fold, d.worst.mean_abs, report.over_smoothing_baseline);
      for (const auto& c : report.cells)
        if (c.skipped)
          spdlog::error("{} fold {} {}: skipped: {}", c.method, c.fold, to_string(c.space), c.error);
    } else if (*autocorr) {
      options = {{"input", input}, {"subtract", subtract}, {"max_lag", max_lag}};
      write_run_snapshot(out, "autocorr", g, options, args);
      Grid2d data = read_grid(input);
      if (!subtract.empty())
        data = data - read_grid(subtract);
      const AutocorrMap map = autocorrelation_map(data, max_lag);
      write_grid(out / "autocorr.stf", map.values);
      std::string csv = "lag_angle,lag_detector,value\n";
      const long L = long(max_lag);
      for (long da = -L; da <= L; ++da)
        for (long dd = -L; dd <= L; ++dd)
          csv += std::to_string(da) + ',' + std::to_string(dd) + ',' + detail::format_number(map.at(da, dd)) + '\n';
      write_text(out / "autocorr.csv", csv);
      const std::size_t t_max = std::min<std::size_t>(10, max_lag);
      double diag = 0.0, anti = 0.0;
      for (long t = 1; t <= long(t_max); ++t) {
        diag += std::abs(map.at(t, t));
        anti += std::abs(map.at(t, -t));
      }
      diag /= double(t_max);
      anti /= double(t_max);
      const double ratio = diagonal_anisotropy(map, t_max);
      write_text(out / "autocorr_summary.csv",
                 "max_lag,diagonal_mean_abs,antidiagonal_mean_abs,ratio\n" + std::to_string(t_max) + ',' +
                     detail::format_number(diag) + ',' + detail::format_number(anti) + ',' +
                     detail::format_number(ratio) + '\n');
      spdlog::info("diagonal/anti-diagonal mean |A| ratio over lags 1..{}: {:.3f}", t_max, ratio);
    }
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const IoError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const NumericalError& e) {
    spdlog::error("{}", e.what());
    return 3;
  } catch (const nlohmann::json::exception& e) {
    spdlog::error("malformed JSON input: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 3;
  }
  return 0;
}
