#ifndef SINODN_HARNESS_HPP
#define SINODN_HARNESS_HPP

// Cross-validated evaluation: averaged references, fold planning, method
// cells, DeltaPSNR in sinogram and reconstruction space, report export.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sinodn/blind_spot.hpp"
#include "sinodn/bm3d.hpp"
#include "sinodn/dataset.hpp"
#include "sinodn/error.hpp"
#include "sinodn/gaussian.hpp"
#include "sinodn/metrics.hpp"
#include "sinodn/parallel.hpp"
#include "sinodn/reconstruct.hpp"

namespace sinodn {

// ---------------------------------------------------------------------------
// References

/// Running elementwise sum of sinograms from one configuration.
class ReferenceAccumulator {
public:
  void add(const Sinogram& s) {
    if (count_ == 0) {
      sum_ = Grid2d(s.data.rows(), s.data.cols());
      first_ = s;
    } else {
      require_same_shape(sum_, s.data, "make_reference");
      if (s.meta.label != first_.meta.label)
        throw ConfigError("make_reference: samples from different configurations ('" + first_.meta.label + "' and '" +
                          s.meta.label + "') cannot be averaged");
    }
    for (std::size_t i = 0; i < sum_.size(); ++i)
      sum_[i] += s.data[i];
    ++count_;
  }

  std::size_t count() const { return count_; }

  Sinogram mean() const {
    detail::require(count_ >= 2, "make_reference: at least two samples are required");
    Sinogram out = first_;
    out.meta.sample_index = 0;
    for (std::size_t i = 0; i < sum_.size(); ++i)
      out.data[i] = sum_[i] / double(count_);
    return out;
  }

private:
  Grid2d sum_;
  Sinogram first_;
  std::size_t count_ = 0;
};

inline Sinogram make_reference(std::span<const Sinogram> samples) {
  ReferenceAccumulator acc;
  for (const auto& s : samples)
    acc.add(s);
  return acc.mean();
}

/// Mean of the per-sample reconstructions.
inline ReconImage make_image_reference(std::span<const Sinogram> samples, const ReconConfig& config,
                                       std::size_t threads = 1) {
  detail::require(!samples.empty(), "make_image_reference: no samples");
  ReconImage out = reconstruct(samples.front(), config, threads);
  for (std::size_t k = 1; k < samples.size(); ++k) {
    const ReconImage r = reconstruct(samples[k], config, threads);
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] += r.data[i];
  }
  for (auto& v : out.data)
    v /= double(samples.size());
  return out;
}

/// max |a - b| / max |b|, 0 when both vanish.
inline double relative_max_error(const Grid2d& a, const Grid2d& b) {
  require_same_shape(a, b, "relative_max_error");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return den > 0.0 ? num / den : num;
}

// ---------------------------------------------------------------------------
// Folds

enum class FoldStrategy { per_configuration, proportional_stratified };

NLOHMANN_JSON_SERIALIZE_ENUM(FoldStrategy, {{FoldStrategy::per_configuration, "per_configuration"},
                                            {FoldStrategy::proportional_stratified, "proportional_stratified"}})

inline FoldStrategy parse_fold_strategy(const std::string& s) {
  if (s == "per_configuration")
    return FoldStrategy::per_configuration;
  if (s == "proportional_stratified")
    return FoldStrategy::proportional_stratified;
  throw ConfigError("unknown fold strategy '" + s + "'");
}

struct SampleRef {
  std::size_t configuration = 0;
  std::size_t sample = 0;
  auto operator<=>(const SampleRef&) const = default;
};

struct FoldPlan {
  std::size_t k = 5;
  FoldStrategy strategy = FoldStrategy::per_configuration;
  std::optional<std::string> holdout_label;
  std::uint64_t seed = 0;
  std::vector<std::vector<SampleRef>> folds; // each sorted by (configuration, sample)

  /// Fold index of a sample; empty for holdout samples.
  std::optional<std::size_t> fold_of(SampleRef s) const {
    for (std::size_t f = 0; f < folds.size(); ++f)
      if (std::binary_search(folds[f].begin(), folds[f].end(), s))
        return f;
    return std::nullopt;
  }

  /// Every non-holdout sample in exactly one fold, holdout samples in none.
  void validate(const DatasetManifest& m) const {
    detail::require(folds.size() == k, "fold plan: fold count does not match k");
    const auto holdout = holdout_label ? m.find(*holdout_label) : std::nullopt;
    std::set<SampleRef> seen;
    for (const auto& fold : folds)
      for (const auto& s : fold) {
        detail::require(s.configuration < m.configurations.size() &&
                            s.sample < m.configurations[s.configuration].sample_paths.size(),
                        "fold plan: sample out of range");
        detail::require(s.configuration != holdout, "fold plan: holdout sample assigned to a fold");
        detail::require(seen.insert(s).second, "fold plan: sample assigned twice");
      }
    std::size_t expected = 0;
    for (std::size_t c = 0; c < m.configurations.size(); ++c)
      if (c != holdout)
        expected += m.configurations[c].sample_paths.size();
    detail::require(seen.size() == expected, "fold plan: folds do not cover every non-holdout sample");
  }
};

/// per_configuration keeps each configuration whole: with k equal to the
/// number of non-holdout configurations, fold i is configuration i in
/// manifest order; with fewer folds, consecutive configurations share a fold.
/// proportional_stratified deals each configuration's shuffled samples
/// round-robin so every fold gets an equal share (+-1) of each.
inline FoldPlan plan_folds(const DatasetManifest& m, std::size_t k, FoldStrategy strategy,
                           std::optional<std::string> holdout_label = {}, std::uint64_t seed = 0) {
  detail::require(k >= 1, "plan_folds: k must be >= 1");
  std::optional<std::size_t> holdout;
  if (holdout_label) {
    holdout = m.find(*holdout_label);
    if (!holdout)
      throw ConfigError("plan_folds: unknown holdout configuration '" + *holdout_label + "'");
  }
  std::vector<std::size_t> configs;
  for (std::size_t c = 0; c < m.configurations.size(); ++c)
    if (c != holdout)
      configs.push_back(c);

  FoldPlan plan{k, strategy, std::move(holdout_label), seed, std::vector<std::vector<SampleRef>>(k)};
  if (strategy == FoldStrategy::per_configuration) {
    if (k > configs.size())
      throw ConfigError("plan_folds: per_configuration needs k <= number of configurations (" +
                        std::to_string(configs.size()) + ")");
    for (std::size_t j = 0; j < configs.size(); ++j) {
      auto& fold = plan.folds[j * k / configs.size()];
      for (std::size_t s = 0; s < m.configurations[configs[j]].sample_paths.size(); ++s)
        fold.push_back({configs[j], s});
    }
  } else {
    std::size_t offset = 0;
    for (std::size_t c : configs) {
      std::vector<std::size_t> order(m.configurations[c].sample_paths.size());
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(derive_seed(seed, 0x666f6c64u, c));
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t t = 0; t < order.size(); ++t)
        plan.folds[(t + offset) % k].push_back({c, order[t]});
      offset = (offset + order.size()) % k;
    }
  }
  for (auto& fold : plan.folds)
    std::sort(fold.begin(), fold.end());
  return plan;
}

inline void to_json(nlohmann::json& j, const FoldPlan& p) {
  j = nlohmann::json{{"k", p.k}, {"strategy", p.strategy}, {"seed", p.seed}};
  j["holdout_label"] = p.holdout_label ? nlohmann::json(*p.holdout_label) : nlohmann::json(nullptr);
  std::vector<std::size_t> sizes;
  for (const auto& f : p.folds)
    sizes.push_back(f.size());
  j["fold_sizes"] = sizes;
}

// ---------------------------------------------------------------------------
// Methods

enum class MethodKind { identity, oracle, gaussian, bm3d, blind_spot };

struct MethodSpec {
  std::string name;
  MethodKind kind = MethodKind::identity;
  double gaussian_sigma = 1.0;
  Bm3dConfig bm3d;                         // sigma <= 0: estimated per sample
  BlindSpotConfig blind_spot;
  std::size_t max_training_sinograms = 0;  // 0: every sinogram of the training folds
};

inline std::string to_string(MethodKind k) {
  switch (k) {
  case MethodKind::identity: return "identity";
  case MethodKind::oracle: return "oracle";
  case MethodKind::gaussian: return "gaussian";
  case MethodKind::bm3d: return "bm3d";
  case MethodKind::blind_spot: return "blind_spot";
  }
  return "?";
}

/// Parses "identity", "oracle", "gaussian[:sigma]", "bm3d[:sigma]", "n2v",
/// "n2v2". Unset parameters come from `base`; the token becomes the name.
inline MethodSpec parse_method(const std::string& token, const MethodSpec& base = {}) {
  MethodSpec m = base;
  m.name = token;
  const auto colon = token.find(':');
  const std::string head = token.substr(0, colon);
  std::optional<double> arg;
  if (colon != std::string::npos) {
    try {
      std::size_t used = 0;
      arg = std::stod(token.substr(colon + 1), &used);
      if (used != token.size() - colon - 1)
        throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError("method '" + token + "': expected a number after ':'");
    }
  }
  if (head == "identity" || head == "oracle") {
    m.kind = head == "identity" ? MethodKind::identity : MethodKind::oracle;
  } else if (head == "gaussian") {
    m.kind = MethodKind::gaussian;
    if (arg)
      m.gaussian_sigma = *arg;
    detail::require(m.gaussian_sigma >= 0.0, "method '" + token + "': sigma must be >= 0");
  } else if (head == "bm3d") {
    m.kind = MethodKind::bm3d;
    if (arg)
      m.bm3d.sigma = *arg;
  } else if (head == "n2v" || head == "n2v2") {
    m.kind = MethodKind::blind_spot;
    m.blind_spot.variant = nn::parse_variant(head);
  } else {
    throw ConfigError("unknown method '" + token + "'");
  }
  if (arg && m.kind != MethodKind::gaussian && m.kind != MethodKind::bm3d)
    throw ConfigError("method '" + token + "' takes no parameter");
  return m;
}

inline void to_json(nlohmann::json& j, const MethodSpec& m) {
  j = nlohmann::json{{"name", m.name}, {"kind", to_string(m.kind)}};
  if (m.kind == MethodKind::gaussian)
    j["sigma"] = m.gaussian_sigma;
  if (m.kind == MethodKind::bm3d)
    j["bm3d"] = {{"sigma", m.bm3d.sigma},
                 {"block_size", m.bm3d.block_size},
                 {"search_window", m.bm3d.search_window},
                 {"max_group_size", m.bm3d.max_group_size},
                 {"hard_threshold_lambda", m.bm3d.hard_threshold_lambda},
                 {"step", m.bm3d.step}};
  if (m.kind == MethodKind::blind_spot) {
    j["blind_spot"] = m.blind_spot;
    j["max_training_sinograms"] = m.max_training_sinograms;
  }
}

/// BM3D on a sinogram; a non-positive sigma is replaced by the wavelet MAD
/// estimate of the input.
inline Sinogram bm3d_sinogram(const Sinogram& sino, Bm3dConfig config) {
  if (!(config.sigma > 0.0))
    config.sigma = estimate_noise_sigma(sino.data);
  if (!(config.sigma > 0.0))
    return sino; // noise-free input
  Sinogram out = sino;
  out.data = bm3d_denoise(sino.data, config);
  return out;
}

// ---------------------------------------------------------------------------
// Report

enum class Space { sinogram, reconstruction };

NLOHMANN_JSON_SERIALIZE_ENUM(Space, {{Space::sinogram, "sinogram"}, {Space::reconstruction, "reconstruction"}})

inline std::string to_string(Space s) { return s == Space::sinogram ? "sinogram" : "reconstruction"; }

struct SampleScore {
  std::string sample_id;
  double psnr_noisy = 0.0;
  double psnr_denoised = 0.0;
  double delta_psnr = 0.0;
  friend bool operator==(const SampleScore&, const SampleScore&) = default;
};

struct EvalCell {
  std::string method;
  std::size_t fold = 0;
  Space space = Space::sinogram;
  std::vector<SampleScore> scores;
  BoxplotSummary summary;
  bool skipped = false;
  std::string error;
  friend bool operator==(const EvalCell&, const EvalCell&) = default;
};

/// Residual-map statistics (reconstruction space) of the best and worst
/// sample of a (method, fold) pair, ranked by reconstruction DeltaPSNR.
struct FoldDiagnostics {
  std::string method;
  std::size_t fold = 0;
  std::string best_sample;
  std::string worst_sample;
  NoiseStats best;
  NoiseStats worst;
  bool over_smoothing = false;
  bool skipped = false;
  friend bool operator==(const FoldDiagnostics&, const FoldDiagnostics&) = default;
};

struct FoldInfo {
  std::size_t fold = 0;
  std::vector<std::string> labels;
  std::size_t samples = 0;
  double reference_linearity_error = 0.0; // recon(mean) vs mean(recon)
  std::string error;
  friend bool operator==(const FoldInfo&, const FoldInfo&) = default;
};

/// One entry per trained model: which folds fed it and how many of the
/// evaluation fold's samples it saw (always 0).
struct TrainingRecord {
  std::string method;
  std::size_t fold = 0;
  std::vector<std::size_t> training_folds;
  std::size_t training_sinograms = 0;
  std::size_t evaluation_overlap = 0;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  double initial_validation_loss = 0.0;
  double best_validation_loss = 0.0;
  friend bool operator==(const TrainingRecord&, const TrainingRecord&) = default;
};

inline constexpr int kReportSchemaVersion = 1;
inline constexpr double kDeltaCap = 99.0;

struct EvalReport {
  nlohmann::json run_config = nlohmann::json::object();
  std::vector<FoldInfo> folds;
  std::vector<EvalCell> cells;
  std::vector<FoldDiagnostics> diagnostics;
  std::vector<TrainingRecord> training;
  double over_smoothing_baseline = 0.0;

  const EvalCell* find(const std::string& method, std::size_t fold, Space space) const {
    for (const auto& c : cells)
      if (c.method == method && c.fold == fold && c.space == space)
        return &c;
    return nullptr;
  }
  const FoldDiagnostics* find_diagnostics(const std::string& method, std::size_t fold) const {
    for (const auto& d : diagnostics)
      if (d.method == method && d.fold == fold)
        return &d;
    return nullptr;
  }
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct ExperimentConfig {
  ReconConfig recon;
  std::vector<MethodSpec> methods;
  std::size_t threads = 1;
  double over_smoothing_factor = 2.0;
  std::size_t chunk = 16; // samples loaded at once
  std::function<void(const std::string&)> log;
};

namespace detail {

struct FoldContext {
  std::vector<SampleRef> samples;
  std::map<std::size_t, Sinogram> sino_refs;   // by configuration
  std::map<std::size_t, ReconImage> image_refs;
  std::vector<ReconImage> noisy_recons;
};

struct SampleOutcome {
  SampleScore sino, recon;
  NoiseStats noise;
};

template <class Fn>
void for_chunks(std::size_t n, std::size_t chunk, std::size_t threads, Fn&& fn) {
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t len = std::min(chunk, n - start);
    parallel_for(len, threads, [&](std::size_t i) { fn(start + i); });
  }
}

inline FoldContext prepare_fold(const DatasetManifest& m, const std::vector<SampleRef>& samples,
                                const ExperimentConfig& cfg, FoldInfo& info) {
  FoldContext ctx;
  ctx.samples = samples;
  ctx.noisy_recons.resize(samples.size());
  std::map<std::size_t, ReferenceAccumulator> acc;
  std::map<std::size_t, Grid2d> image_sum;
  std::map<std::size_t, std::size_t> counts;
  const std::size_t chunk = std::max<std::size_t>(cfg.chunk, 1);
  std::vector<Sinogram> loaded(chunk);
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t len = std::min(chunk, samples.size() - start);
    parallel_for(len, cfg.threads, [&](std::size_t i) {
      const SampleRef s = samples[start + i];
      loaded[i] = load_sinogram(m, s.configuration, s.sample);
      ctx.noisy_recons[start + i] = reconstruct(loaded[i], cfg.recon, 1);
    });
    for (std::size_t i = 0; i < len; ++i) { // fixed summation order
      const std::size_t c = samples[start + i].configuration;
      acc[c].add(loaded[i]);
      const auto& img = ctx.noisy_recons[start + i].data;
      auto [it, fresh] = image_sum.try_emplace(c, img.rows(), img.cols());
      for (std::size_t p = 0; p < img.size(); ++p)
        it->second[p] += img[p];
      ++counts[c];
    }
  }
  for (auto& [c, a] : acc) {
    ctx.sino_refs.emplace(c, a.mean());
    ReconImage img = ctx.noisy_recons.front();
    img.data = image_sum.at(c);
    for (auto& v : img.data)
      v /= double(counts.at(c));
    const ReconImage via_mean = reconstruct(ctx.sino_refs.at(c), cfg.recon, cfg.threads);
    const double err = relative_max_error(via_mean.data, img.data);
    info.reference_linearity_error = std::max(info.reference_linearity_error, err);
    if (!(err <= 1e-5))
      throw NumericalError("image reference linearity check failed for '" + m.configurations[c].label +
                           "' (relative error " + std::to_string(err) + ")");
    ctx.image_refs.emplace(c, std::move(img));
    info.labels.push_back(m.configurations[c].label);
  }
  return ctx;
}

inline SampleOutcome score_sample(const Sinogram& noisy, const Sinogram& denoised, const ReconImage& noisy_recon,
                                  const ReconImage& denoised_recon, const Sinogram& sino_ref,
                                  const ReconImage& image_ref, const std::string& id) {
  SampleOutcome o;
  auto score = [&](const Grid2d& n, const Grid2d& d, const Grid2d& ref) {
    const auto [lo, hi] = min_max(ref);
    const PsnrResult pn = psnr(ref, n, hi - lo), pd = psnr(ref, d, hi - lo);
    return SampleScore{id, pn.psnr_db, pd.psnr_db, psnr_gain(pd.psnr_db, pn.psnr_db)};
  };
  o.sino = score(noisy.data, denoised.data, sino_ref.data);
  o.recon = score(noisy_recon.data, denoised_recon.data, image_ref.data);
  o.noise = noise_statistics(noisy_recon.data, denoised_recon.data);
  return o;
}

/// Trains a blind-spot model on the samples of every other fold.
inline BlindSpotModel train_for_fold(const DatasetManifest& m, const FoldPlan& plan, std::size_t fold,
                                     const MethodSpec& spec, TrainingRecord& record,
                                     const std::function<void(const std::string&)>& log);

} // namespace detail

/// Evenly spaced subset of `pool` (which is kept when it is small enough).
inline std::vector<SampleRef> thin_samples(std::vector<SampleRef> pool, std::size_t max_count) {
  if (max_count == 0 || pool.size() <= max_count)
    return pool;
  std::vector<SampleRef> out;
  for (std::size_t i = 0; i < max_count; ++i)
    out.push_back(pool[i * pool.size() / max_count]);
  return out;
}

/// Self-supervised training streamed from disk: sinograms are loaded one at
/// a time for the normalisation statistics and patch extraction.
inline TrainingResult train_on_samples(const DatasetManifest& m, std::span<const SampleRef> samples,
                                       const BlindSpotConfig& config,
                                       const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  config.validate();
  if (samples.size() < 2)
    throw ConfigError("blind-spot training needs at least two sinograms");
  NormalizationAccumulator acc;
  PatchSet patches;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sinogram s = load_sinogram(m, samples[i].configuration, samples[i].sample);
    acc.add(s.data);
    extract_patches_into(patches, s.data, i, config.patch_size, config.patches_per_sinogram, config.seed);
  }
  return train_on_patches(std::move(patches), acc.stats(), config, on_epoch);
}

namespace detail {

inline BlindSpotModel train_for_fold(const DatasetManifest& m, const FoldPlan& plan, std::size_t fold,
                                     const MethodSpec& spec, TrainingRecord& record,
                                     const std::function<void(const std::string&)>& log) {
  std::vector<SampleRef> pool;
  for (std::size_t f = 0; f < plan.folds.size(); ++f)
    if (f != fold) {
      pool.insert(pool.end(), plan.folds[f].begin(), plan.folds[f].end());
      record.training_folds.push_back(f);
    }
  std::sort(pool.begin(), pool.end());
  pool = thin_samples(std::move(pool), spec.max_training_sinograms);
  const auto& held = plan.folds[fold];
  record.training_sinograms = pool.size();
  record.evaluation_overlap = std::size_t(std::count_if(
      pool.begin(), pool.end(), [&](const SampleRef& s) { return std::binary_search(held.begin(), held.end(), s); }));
  if (record.evaluation_overlap != 0)
    throw std::logic_error("training set overlaps the evaluation fold");

  BlindSpotConfig config = spec.blind_spot;
  config.seed = derive_seed(spec.blind_spot.seed, 0x74726e, fold);
  if (log)
    log(spec.name + " fold " + std::to_string(fold) + ": training on " + std::to_string(pool.size()) +
        " sinograms x " + std::to_string(config.patches_per_sinogram) + " patches");
  TrainingResult result = train_on_samples(m, pool, config);
  record.epochs = result.log.epochs.size();
  record.best_epoch = result.log.best_epoch;
  record.initial_validation_loss = result.log.initial_validation_loss;
  record.best_validation_loss = result.log.best_validation_loss;
  return std::move(result.model);
}

inline std::vector<double> deltas(const EvalCell& c) {
  std::vector<double> v;
  for (const auto& s : c.scores)
    v.push_back(s.delta_psnr);
  return v;
}

inline bool is_self_test(const MethodSpec& m) {
  return m.kind == MethodKind::identity || m.kind == MethodKind::oracle;
}

} // namespace detail

/// Runs every (fold, method) cell. A failing cell is recorded as skipped
/// with its error message and the remaining cells still run.
inline EvalReport run_experiment(const DatasetManifest& manifest, const FoldPlan& plan, const ExperimentConfig& cfg) {
  cfg.recon.validate();
  plan.validate(manifest);
  std::set<std::string> names;
  for (const auto& m : cfg.methods)
    if (!names.insert(m.name).second)
      throw ConfigError("duplicate method name '" + m.name + "'");

  EvalReport report;
  report.run_config["recon"] = cfg.recon;
  report.run_config["fold_plan"] = plan;
  report.run_config["methods"] = cfg.methods;
  report.run_config["over_smoothing_factor"] = cfg.over_smoothing_factor;
  auto log = [&](const std::string& s) {
    if (cfg.log)
      cfg.log(s);
  };

  auto skip_all = [&](std::size_t fold, const MethodSpec& m, const std::string& why) {
    for (Space sp : {Space::sinogram, Space::reconstruction})
      report.cells.push_back({m.name, fold, sp, {}, {}, true, why});
    report.diagnostics.push_back({m.name, fold, {}, {}, {}, {}, false, true});
  };

  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    FoldInfo info;
    info.fold = f;
    info.samples = plan.folds[f].size();
    detail::FoldContext ctx;
    try {
      detail::require(!plan.folds[f].empty(), "fold is empty");
      ctx = detail::prepare_fold(manifest, plan.folds[f], cfg, info);
    } catch (const std::exception& e) {
      info.error = e.what();
      log("fold " + std::to_string(f) + " skipped: " + info.error);
      report.folds.push_back(info);
      for (const auto& m : cfg.methods)
        skip_all(f, m, info.error);
      continue;
    }
    report.folds.push_back(info);
    log("fold " + std::to_string(f) + ": " + std::to_string(ctx.samples.size()) + " samples, references built");

    for (const auto& method : cfg.methods) {
      try {
        std::optional<BlindSpotModel> model;
        if (method.kind == MethodKind::blind_spot) {
          TrainingRecord rec;
          rec.method = method.name;
          rec.fold = f;
          model = detail::train_for_fold(manifest, plan, f, method, rec, cfg.log);
          report.training.push_back(rec);
        }
        if (method.kind == MethodKind::gaussian)
          detail::require(method.gaussian_sigma >= 0.0, "gaussian sigma must be >= 0");
        if (method.kind == MethodKind::bm3d && method.bm3d.sigma > 0.0)
          method.bm3d.validate();

        std::vector<detail::SampleOutcome> outcomes(ctx.samples.size());
        std::vector<std::string> errors(ctx.samples.size());
        detail::for_chunks(ctx.samples.size(), std::max<std::size_t>(cfg.chunk, 1), cfg.threads, [&](std::size_t i) {
          try {
            const SampleRef s = ctx.samples[i];
            const Sinogram noisy = load_sinogram(manifest, s.configuration, s.sample);
            const Sinogram& sref = ctx.sino_refs.at(s.configuration);
            const ReconImage& iref = ctx.image_refs.at(s.configuration);
            Sinogram denoised;
            std::optional<ReconImage> denoised_recon;
            switch (method.kind) {
            case MethodKind::identity: denoised = noisy; break;
            case MethodKind::oracle:
              denoised = sref;
              denoised_recon = iref;
              break;
            case MethodKind::gaussian: denoised = gaussian_denoise(noisy, method.gaussian_sigma); break;
            case MethodKind::bm3d: denoised = bm3d_sinogram(noisy, method.bm3d); break;
            case MethodKind::blind_spot: denoised = denoise_with_model(*model, noisy); break;
            }
            if (!denoised_recon)
              denoised_recon = method.kind == MethodKind::identity ? ctx.noisy_recons[i]
                                                                   : reconstruct(denoised, cfg.recon, 1);
            outcomes[i] = detail::score_sample(noisy, denoised, ctx.noisy_recons[i], *denoised_recon, sref, iref,
                                               sample_id(manifest.configurations[s.configuration].label, s.sample));
          } catch (const std::exception& e) {
            errors[i] = e.what();
          }
        });
        for (const auto& e : errors)
          if (!e.empty())
            throw NumericalError(e);

        EvalCell sino{method.name, f, Space::sinogram, {}, {}, false, {}};
        EvalCell recon{method.name, f, Space::reconstruction, {}, {}, false, {}};
        FoldDiagnostics diag{method.name, f, {}, {}, {}, {}, false, false};
        std::size_t best = 0, worst = 0;
        for (std::size_t i = 0; i < outcomes.size(); ++i) {
          sino.scores.push_back(outcomes[i].sino);
          recon.scores.push_back(outcomes[i].recon);
          if (outcomes[i].recon.delta_psnr > outcomes[best].recon.delta_psnr)
            best = i;
          if (outcomes[i].recon.delta_psnr < outcomes[worst].recon.delta_psnr)
            worst = i;
        }
        sino.summary = boxplot_summary(detail::deltas(sino));
        recon.summary = boxplot_summary(detail::deltas(recon));
        diag.best_sample = outcomes[best].recon.sample_id;
        diag.worst_sample = outcomes[worst].recon.sample_id;
        diag.best = outcomes[best].noise;
        diag.worst = outcomes[worst].noise;
        log(method.name + " fold " + std::to_string(f) + ": median dPSNR sinogram " +
            std::to_string(sino.summary.median) + " dB, reconstruction " + std::to_string(recon.summary.median) +
            " dB");
        report.cells.push_back(std::move(sino));
        report.cells.push_back(std::move(recon));
        report.diagnostics.push_back(std::move(diag));
      } catch (const std::exception& e) {
        log(method.name + " fold " + std::to_string(f) + " failed: " + e.what());
        skip_all(f, method, e.what());
      }
    }
  }

  // Over-smoothing: worst-sample residual mean_abs against the median over
  // all evaluated (method, fold) pairs, self-test methods excluded.
  std::set<std::string> self_tests;
  for (const auto& m : cfg.methods)
    if (detail::is_self_test(m))
      self_tests.insert(m.name);
  std::vector<double> worst_values;
  for (const auto& d : report.diagnostics)
    if (!d.skipped && !self_tests.contains(d.method))
      worst_values.push_back(d.worst.mean_abs);
  if (!worst_values.empty()) {
    std::sort(worst_values.begin(), worst_values.end());
    report.over_smoothing_baseline = detail::quantile_sorted(worst_values, 0.5);
    for (auto& d : report.diagnostics)
      d.over_smoothing = !d.skipped && !self_tests.contains(d.method) &&
                         d.worst.mean_abs > cfg.over_smoothing_factor * report.over_smoothing_baseline;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Export

namespace detail {

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline double capped(double v) { return std::isinf(v) ? std::copysign(kDeltaCap, v) : v; }

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos)
    return s;
  std::string out = "\"";
  for (char ch : s)
    out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

// JSON has no infinity: infinite values are written capped, with a flag.
inline nlohmann::json db_json(double v) { return capped(v); }

inline double db_from_json(const nlohmann::json& j, bool inf) {
  const double v = j.get<double>();
  return inf ? std::copysign(kInfinity, v) : v;
}

} // namespace detail

inline const char* kReportCsvHeader = "method,fold,space,sample_id,psnr_noisy,psnr_denoised,delta_psnr,inf";

/// One row per (cell, sample). Infinite values are written as +-99 with
/// inf = 1.
inline std::string report_to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << kReportCsvHeader << '\n';
  for (const auto& c : r.cells)
    for (const auto& s : c.scores) {
      const bool inf = std::isinf(s.delta_psnr) || std::isinf(s.psnr_noisy) || std::isinf(s.psnr_denoised);
      os << detail::csv_field(c.method) << ',' << c.fold << ',' << to_string(c.space) << ','
         << detail::csv_field(s.sample_id) << ',' << detail::format_number(detail::capped(s.psnr_noisy)) << ','
         << detail::format_number(detail::capped(s.psnr_denoised)) << ','
         << detail::format_number(detail::capped(s.delta_psnr)) << ',' << (inf ? 1 : 0) << '\n';
    }
  return os.str();
}

/// Boxplot-ready summary, one row per cell.
inline std::string summary_to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "method,fold,space,n,median,q1,q3,whisker_low,whisker_high,outliers,over_smoothing,skipped\n";
  for (const auto& c : r.cells) {
    const auto* d = r.find_diagnostics(c.method, c.fold);
    const auto& b = c.summary;
    os << detail::csv_field(c.method) << ',' << c.fold << ',' << to_string(c.space) << ',' << c.scores.size();
    for (double v : {b.median, b.q1, b.q3, b.whisker_low, b.whisker_high})
      os << ',' << (c.skipped ? std::string() : detail::format_number(detail::capped(v)));
    os << ',' << b.outliers.size() << ',' << (d && d->over_smoothing ? 1 : 0) << ',' << (c.skipped ? 1 : 0) << '\n';
  }
  return os.str();
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  using nlohmann::json;
  json j;
  j["schema_version"] = kReportSchemaVersion;
  j["run_config"] = r.run_config;
  j["over_smoothing_baseline"] = r.over_smoothing_baseline;
  j["folds"] = json::array();
  for (const auto& f : r.folds)
    j["folds"].push_back({{"fold", f.fold},
                          {"labels", f.labels},
                          {"samples", f.samples},
                          {"reference_linearity_error", f.reference_linearity_error},
                          {"error", f.error}});
  j["cells"] = json::array();
  for (const auto& c : r.cells) {
    json scores = json::array();
    for (const auto& s : c.scores)
      scores.push_back({{"sample_id", s.sample_id},
                        {"psnr_noisy", detail::db_json(s.psnr_noisy)},
                        {"psnr_noisy_inf", std::isinf(s.psnr_noisy)},
                        {"psnr_denoised", detail::db_json(s.psnr_denoised)},
                        {"psnr_denoised_inf", std::isinf(s.psnr_denoised)},
                        {"delta_psnr", detail::db_json(s.delta_psnr)},
                        {"inf", std::isinf(s.delta_psnr)}});
    json summary = nullptr;
    if (!c.skipped) {
      std::vector<double> outliers;
      for (double v : c.summary.outliers)
        outliers.push_back(detail::capped(v));
      summary = {{"median", detail::capped(c.summary.median)},
                 {"q1", detail::capped(c.summary.q1)},
                 {"q3", detail::capped(c.summary.q3)},
                 {"whisker_low", detail::capped(c.summary.whisker_low)},
                 {"whisker_high", detail::capped(c.summary.whisker_high)},
                 {"outliers", outliers}};
    }
    j["cells"].push_back({{"method", c.method},
                          {"fold", c.fold},
                          {"space", c.space},
                          {"skipped", c.skipped},
                          {"error", c.error},
                          {"summary", summary},
                          {"scores", scores}});
  }
  auto stats = [](const NoiseStats& s) {
    return json{{"mean_abs", s.mean_abs}, {"std", s.std}, {"max", s.max}, {"min", s.min}};
  };
  j["diagnostics"] = json::array();
  for (const auto& d : r.diagnostics)
    j["diagnostics"].push_back({{"method", d.method},
                                {"fold", d.fold},
                                {"best_sample", d.best_sample},
                                {"worst_sample", d.worst_sample},
                                {"best", stats(d.best)},
                                {"worst", stats(d.worst)},
                                {"over_smoothing", d.over_smoothing},
                                {"skipped", d.skipped}});
  j["training"] = json::array();
  for (const auto& t : r.training)
    j["training"].push_back({{"method", t.method},
                             {"fold", t.fold},
                             {"training_folds", t.training_folds},
                             {"training_sinograms", t.training_sinograms},
                             {"evaluation_overlap", t.evaluation_overlap},
                             {"epochs", t.epochs},
                             {"best_epoch", t.best_epoch},
                             {"initial_validation_loss", t.initial_validation_loss},
                             {"best_validation_loss", t.best_validation_loss}});
  return j;
}

/// Inverse of report_to_json. Boxplot summaries are recomputed from the
/// restored scores, so infinite entries survive the round trip exactly.
inline EvalReport report_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", 0) != kReportSchemaVersion)
    throw ConfigError("report: unsupported schema_version");
  EvalReport r;
  r.run_config = j.at("run_config");
  r.over_smoothing_baseline = j.at("over_smoothing_baseline").get<double>();
  for (const auto& f : j.at("folds"))
    r.folds.push_back({f.at("fold").get<std::size_t>(), f.at("labels").get<std::vector<std::string>>(),
                       f.at("samples").get<std::size_t>(), f.at("reference_linearity_error").get<double>(),
                       f.at("error").get<std::string>()});
  for (const auto& c : j.at("cells")) {
    EvalCell cell;
    cell.method = c.at("method").get<std::string>();
    cell.fold = c.at("fold").get<std::size_t>();
    cell.space = c.at("space").get<Space>();
    cell.skipped = c.at("skipped").get<bool>();
    cell.error = c.at("error").get<std::string>();
    for (const auto& s : c.at("scores"))
      cell.scores.push_back({s.at("sample_id").get<std::string>(),
                             detail::db_from_json(s.at("psnr_noisy"), s.at("psnr_noisy_inf").get<bool>()),
                             detail::db_from_json(s.at("psnr_denoised"), s.at("psnr_denoised_inf").get<bool>()),
                             detail::db_from_json(s.at("delta_psnr"), s.at("inf").get<bool>())});
    if (!cell.skipped)
      cell.summary = boxplot_summary(detail::deltas(cell));
    r.cells.push_back(std::move(cell));
  }
  auto stats = [](const nlohmann::json& s) {
    return NoiseStats{s.at("mean_abs").get<double>(), s.at("std").get<double>(), s.at("max").get<double>(),
                      s.at("min").get<double>()};
  };
  for (const auto& d : j.at("diagnostics"))
    r.diagnostics.push_back({d.at("method").get<std::string>(), d.at("fold").get<std::size_t>(),
                             d.at("best_sample").get<std::string>(), d.at("worst_sample").get<std::string>(),
                             stats(d.at("best")), stats(d.at("worst")), d.at("over_smoothing").get<bool>(),
                             d.at("skipped").get<bool>()});
  for (const auto& t : j.at("training"))
    r.training.push_back({t.at("method").get<std::string>(), t.at("fold").get<std::size_t>(),
                          t.at("training_folds").get<std::vector<std::size_t>>(),
                          t.at("training_sinograms").get<std::size_t>(), t.at("evaluation_overlap").get<std::size_t>(),
                          t.at("epochs").get<std::size_t>(), t.at("best_epoch").get<std::size_t>(),
                          t.at("initial_validation_loss").get<double>(), t.at("best_validation_loss").get<double>()});
  return r;
}

namespace detail {
inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw IoError("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os)
    throw IoError("failed writing '" + path.string() + "'");
}
} // namespace detail

enum class ReportFormat { csv, json };

/// Writes `<stem>.csv` (per-sample rows) plus `<stem>_summary.csv`, or
/// `<stem>.json`. Returns the written paths.
inline std::vector<std::filesystem::path> export_report(const EvalReport& r, ReportFormat format,
                                                        const std::filesystem::path& stem) {
  if (format == ReportFormat::csv) {
    std::filesystem::path rows = stem, summary = stem;
    rows += ".csv";
    summary += "_summary.csv";
    detail::write_text(rows, report_to_csv(r));
    detail::write_text(summary, summary_to_csv(r));
    return {rows, summary};
  }
  std::filesystem::path path = stem;
  path += ".json";
  detail::write_text(path, report_to_json(r).dump(2) + "\n");
  return {path};
}

inline EvalReport load_report(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is)
    throw IoError("cannot open report '" + path.string() + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("report '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return report_from_json(j);
}

} // namespace sinodn

#endif
