#ifndef SINODN_BLIND_SPOT_HPP
#define SINODN_BLIND_SPOT_HPP

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sinodn/error.hpp"
#include "sinodn/grid.hpp"
#include "sinodn/nn/unet.hpp"
#include "sinodn/phantom.hpp"
#include "sinodn/stf.hpp"

namespace sinodn {

using nn::Variant;

struct BlindSpotConfig {
  std::size_t patch_size = 64;
  std::size_t batch_size = 64;
  std::size_t epochs = 200;
  std::size_t roi_size = 7;
  double masked_pixel_percentage = 0.005; // fraction of patch pixels
  Variant variant = Variant::n2v;
  std::size_t depth = 2;
  std::size_t base_channels = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double validation_fraction = 0.1;
  std::size_t patches_per_sinogram = 100;

  nn::Architecture architecture() const { return {variant, depth, base_channels}; }

  void validate() const {
    detail::require(roi_size >= 3 && roi_size % 2 == 1, "blind-spot: roi_size must be odd and >= 3");
    detail::require(masked_pixel_percentage > 0.0 && masked_pixel_percentage <= 0.10,
                    "blind-spot: masked_pixel_percentage must be in (0, 0.1]");
    detail::require(depth >= 1, "blind-spot: depth must be >= 1");
    detail::require(patch_size >= 2 && patch_size % (std::size_t{1} << depth) == 0,
                    "blind-spot: patch_size must be divisible by 2^depth");
    detail::require(batch_size >= 1, "blind-spot: batch_size must be >= 1");
    detail::require(learning_rate > 0.0, "blind-spot: learning_rate must be positive");
    detail::require(validation_fraction > 0.0 && validation_fraction < 1.0,
                    "blind-spot: validation_fraction must be in (0, 1)");
    detail::require(patches_per_sinogram >= 1, "blind-spot: patches_per_sinogram must be >= 1");
    architecture().validate();
  }

  friend bool operator==(const BlindSpotConfig&, const BlindSpotConfig&) = default;
};

inline void to_json(nlohmann::json& j, const BlindSpotConfig& c) {
  j = nlohmann::json{{"patch_size", c.patch_size},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"roi_size", c.roi_size},
                     {"masked_pixel_percentage", c.masked_pixel_percentage},
                     {"variant", nn::to_string(c.variant)},
                     {"depth", c.depth},
                     {"base_channels", c.base_channels},
                     {"learning_rate", c.learning_rate},
                     {"seed", c.seed},
                     {"validation_fraction", c.validation_fraction},
                     {"patches_per_sinogram", c.patches_per_sinogram}};
}

inline void from_json(const nlohmann::json& j, BlindSpotConfig& c) {
  const BlindSpotConfig d;
  c.patch_size = j.value("patch_size", d.patch_size);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.roi_size = j.value("roi_size", d.roi_size);
  c.masked_pixel_percentage = j.value("masked_pixel_percentage", d.masked_pixel_percentage);
  c.variant = nn::parse_variant(j.value("variant", std::string("n2v")));
  c.depth = j.value("depth", d.depth);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.seed = j.value("seed", d.seed);
  c.validation_fraction = j.value("validation_fraction", d.validation_fraction);
  c.patches_per_sinogram = j.value("patches_per_sinogram", d.patches_per_sinogram);
}

// ---------------------------------------------------------------------------
// Patches and masking

struct PatchOrigin {
  std::size_t sinogram = 0;
  std::size_t row = 0;
  std::size_t col = 0;
};

struct PatchSet {
  std::size_t patch_size = 0;
  std::vector<Grid<float>> patches;
  std::vector<PatchOrigin> origins;
};

/// Appends `count` patches of one sinogram. Top-left corners are uniform
/// over all valid positions; the stream is seeded by (seed, sinogram_index)
/// so extraction can run one sinogram at a time.
inline void extract_patches_into(PatchSet& set, const Grid2d& sino, std::size_t sinogram_index,
                                 std::size_t patch_size, std::size_t count, std::uint64_t seed) {
  if (sino.rows() < patch_size || sino.cols() < patch_size)
    throw ConfigError("extract_patches: sinogram is smaller than the patch size");
  set.patch_size = patch_size;
  std::mt19937_64 rng(derive_seed(seed, 0x7061u, sinogram_index));
  std::uniform_int_distribution<std::size_t> rows(0, sino.rows() - patch_size), cols(0, sino.cols() - patch_size);
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t r0 = rows(rng);
    const std::size_t c0 = cols(rng);
    Grid<float> p(patch_size, patch_size);
    for (std::size_t r = 0; r < patch_size; ++r)
      for (std::size_t c = 0; c < patch_size; ++c)
        p(r, c) = float(sino(r0 + r, c0 + c));
    set.patches.push_back(std::move(p));
    set.origins.push_back({sinogram_index, r0, c0});
  }
}

inline PatchSet extract_patches(std::span<const Sinogram> sinos, std::size_t patch_size, std::uint64_t seed,
                                std::size_t count_per_sinogram = 100) {
  PatchSet set;
  set.patch_size = patch_size;
  for (std::size_t i = 0; i < sinos.size(); ++i)
    extract_patches_into(set, sinos[i].data, i, patch_size, count_per_sinogram, seed);
  return set;
}

/// Number of masked pixels per patch: fraction * patch_size^2 rounded half
/// to even, at least one.
inline std::size_t masked_pixel_count(std::size_t patch_size, double fraction) {
  const int saved = std::fegetround();
  std::fesetround(FE_TONEAREST);
  const double n = std::nearbyint(fraction * double(patch_size * patch_size));
  std::fesetround(saved);
  return std::max<std::size_t>(1, static_cast<std::size_t>(n));
}

struct MaskedBatch {
  std::vector<Grid<float>> inputs; // patches with masked pixels replaced
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> mask_coords;
  std::vector<std::vector<float>> original_values;
};

/// Picks masked positions uniformly without replacement and replaces each
/// by a uniformly chosen pixel of its ROI window (clipped at the border),
/// never the pixel itself. Replacements read the unmasked patch.
inline MaskedBatch build_masked_batch(std::span<const Grid<float>> patches, const BlindSpotConfig& config,
                                      std::mt19937_64& rng) {
  MaskedBatch batch;
  const long half = long(config.roi_size / 2);
  for (const auto& patch : patches) {
    const std::size_t rows = patch.rows(), cols = patch.cols();
    const std::size_t n_pixels = rows * cols;
    const std::size_t n_mask = std::min(masked_pixel_count(rows, config.masked_pixel_percentage), n_pixels);
    // Floyd's sampling: n_mask distinct indices, uniform over subsets.
    std::vector<std::size_t> chosen;
    for (std::size_t j = n_pixels - n_mask; j < n_pixels; ++j) {
      const std::size_t t = std::uniform_int_distribution<std::size_t>(0, j)(rng);
      chosen.push_back(std::find(chosen.begin(), chosen.end(), t) == chosen.end() ? t : j);
    }
    Grid<float> input = patch;
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    std::vector<float> originals;
    for (std::size_t idx : chosen) {
      const long r = long(idx / cols), c = long(idx % cols);
      const long r_lo = std::max(0L, r - half), r_hi = std::min(long(rows) - 1, r + half);
      const long c_lo = std::max(0L, c - half), c_hi = std::min(long(cols) - 1, c + half);
      const long width = c_hi - c_lo + 1;
      const long candidates = (r_hi - r_lo + 1) * width - 1;
      long pick = long(std::uniform_int_distribution<std::size_t>(0, std::size_t(candidates - 1))(rng));
      const long center = (r - r_lo) * width + (c - c_lo);
      if (pick >= center)
        ++pick;
      input(std::size_t(r), std::size_t(c)) = patch(std::size_t(r_lo + pick / width), std::size_t(c_lo + pick % width));
      coords.emplace_back(std::size_t(r), std::size_t(c));
      originals.push_back(patch(std::size_t(r), std::size_t(c)));
    }
    batch.inputs.push_back(std::move(input));
    batch.mask_coords.push_back(std::move(coords));
    batch.original_values.push_back(std::move(originals));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Loss

namespace detail {

template <class S>
nn::FeatureMap<S> to_feature_map(const Grid<float>& g) {
  nn::FeatureMap<S> f{nn::Matrix<S>(1, long(g.size())), g.rows(), g.cols()};
  for (std::size_t i = 0; i < g.size(); ++i)
    f.data(0, long(i)) = S(g[i]);
  return f;
}

} // namespace detail

/// Mean squared error over all masked pixels of the batch. When `grads` is
/// given, the parameter gradient of that loss is accumulated into it.
template <class S>
double masked_loss(const nn::UNet<S>& net, const MaskedBatch& batch, nn::ParamList<S>* grads = nullptr) {
  std::size_t total = 0;
  for (const auto& c : batch.mask_coords)
    total += c.size();
  double loss = 0.0;
  nn::Tape<S> tape;
  for (std::size_t b = 0; b < batch.inputs.size(); ++b) {
    const auto in = detail::to_feature_map<S>(batch.inputs[b]);
    const auto out = net.forward(in, grads ? &tape : nullptr);
    nn::FeatureMap<S> g{nn::Matrix<S>::Zero(1, out.data.cols()), out.height, out.width};
    for (std::size_t m = 0; m < batch.mask_coords[b].size(); ++m) {
      const auto [r, c] = batch.mask_coords[b][m];
      const long i = long(r * out.width + c);
      const double diff = double(out.data(0, i)) - double(batch.original_values[b][m]);
      loss += diff * diff;
      g.data(0, i) += S(2.0 * diff / double(total));
    }
    if (grads)
      net.backward(tape, g, *grads);
  }
  return loss / double(total);
}

// ---------------------------------------------------------------------------
// Model

struct BlindSpotModel {
  BlindSpotConfig config;
  nn::UNet<float> net;
  double norm_mean = 0.0;
  double norm_std = 1.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0; // 0: the initial parameters were kept
  double initial_validation_loss = 0.0;
  double best_validation_loss = 0.0;
};

struct TrainingResult {
  BlindSpotModel model;
  TrainingLog log;
};

struct NormalizationStats {
  double mean = 0.0;
  double std = 1.0;
};

/// Running mean/variance over whole sinograms.
class NormalizationAccumulator {
public:
  void add(const Grid2d& g) {
    for (double v : g) {
      ++n_;
      const double d = v - mean_;
      mean_ += d / double(n_);
      m2_ += d * (v - mean_);
    }
  }
  NormalizationStats stats() const {
    detail::require(n_ > 1, "normalization: no training data");
    const double sd = std::sqrt(m2_ / double(n_));
    return {mean_, sd > 0.0 ? sd : 1.0};
  }

private:
  std::size_t n_ = 0;
  double mean_ = 0.0, m2_ = 0.0;
};

/// Trains on pre-extracted raw patches. Patches are normalised with `stats`,
/// split into training/validation sets, and optimised with Adam on the
/// masked loss. The parameters with the lowest validation loss are kept.
/// Everything is derived from config.seed.
inline TrainingResult train_on_patches(PatchSet raw, NormalizationStats stats, const BlindSpotConfig& config,
                                       const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  config.validate();
  const std::size_t n = raw.patches.size();
  detail::require(n >= 2, "train_blind_spot: at least two patches are required");
  for (auto& p : raw.patches) {
    detail::require(p.rows() == config.patch_size && p.cols() == config.patch_size,
                    "train_blind_spot: patch size does not match the configuration");
    for (auto& v : p)
      v = float((double(v) - stats.mean) / stats.std);
  }

  TrainingResult result;
  result.model.config = config;
  result.model.norm_mean = stats.mean;
  result.model.norm_std = stats.std;
  result.model.net = nn::UNet<float>(config.architecture(), derive_seed(config.seed, 1));
  auto& net = result.model.net;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 split_rng(derive_seed(config.seed, 2));
  std::shuffle(order.begin(), order.end(), split_rng);
  const std::size_t n_val = std::clamp<std::size_t>(std::size_t(std::lround(config.validation_fraction * double(n))), 1, n - 1);
  std::vector<Grid<float>> val_patches, train_patches;
  for (std::size_t i = 0; i < n; ++i)
    (i < n_val ? val_patches : train_patches).push_back(std::move(raw.patches[order[i]]));

  std::mt19937_64 val_rng(derive_seed(config.seed, 3));
  const MaskedBatch val_batch = build_masked_batch(val_patches, config, val_rng);
  auto validation_loss = [&] { return masked_loss(net, val_batch); };

  result.log.initial_validation_loss = validation_loss();
  result.log.best_validation_loss = result.log.initial_validation_loss;
  nn::ParamList<float> best = net.params();

  std::mt19937_64 rng(derive_seed(config.seed, 4));
  nn::Adam<float> adam(net.params(), config.learning_rate);
  std::vector<std::size_t> idx(train_patches.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<Grid<float>> chunk;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(idx.begin(), idx.end(), rng);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < idx.size(); start += config.batch_size) {
      chunk.clear();
      for (std::size_t k = start; k < std::min(start + config.batch_size, idx.size()); ++k)
        chunk.push_back(train_patches[idx[k]]);
      const MaskedBatch batch = build_masked_batch(chunk, config, rng);
      auto grads = net.zero_like();
      const double loss = masked_loss(net, batch, &grads);
      if (!std::isfinite(loss))
        throw NumericalError("train_blind_spot: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(steps));
      adam.step(net.params(), grads);
      loss_sum += loss;
      ++steps;
    }
    const EpochRecord rec{epoch, loss_sum / double(std::max<std::size_t>(steps, 1)), validation_loss()};
    if (!std::isfinite(rec.validation_loss))
      throw NumericalError("train_blind_spot: non-finite validation loss at epoch " + std::to_string(epoch));
    result.log.epochs.push_back(rec);
    if (rec.validation_loss < result.log.best_validation_loss) {
      result.log.best_validation_loss = rec.validation_loss;
      result.log.best_epoch = epoch;
      best = net.params();
    }
    if (on_epoch)
      on_epoch(rec);
  }
  net.params() = std::move(best);
  return result;
}

/// Self-supervised training on noisy sinograms only.
inline TrainingResult train_blind_spot(std::span<const Sinogram> dataset, const BlindSpotConfig& config,
                                       const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  config.validate();
  detail::require(dataset.size() >= 2, "train_blind_spot: at least two sinograms are required");
  NormalizationAccumulator acc;
  for (const auto& s : dataset)
    acc.add(s.data);
  PatchSet patches = extract_patches(dataset, config.patch_size, config.seed, config.patches_per_sinogram);
  return train_on_patches(std::move(patches), acc.stats(), config, on_epoch);
}

// ---------------------------------------------------------------------------
// Inference

/// Applies `tile_fn` to overlapping patch_size tiles (stride patch_size -
/// overlap, last tile flush with the border) and blends the results with
/// linear ramp weights normalised per pixel. Grids smaller than a tile are
/// reflected up to tile size first.
inline Grid2d blend_tiles(const Grid2d& in, std::size_t tile, std::size_t overlap,
                          const std::function<Grid2d(const Grid2d&)>& tile_fn) {
  detail::require(tile >= 1 && overlap < tile, "blend_tiles: overlap must be smaller than the tile");
  const std::size_t rows = std::max(in.rows(), tile), cols = std::max(in.cols(), tile);
  Grid2d src(rows, cols);
  auto mirror = [](std::size_t i, std::size_t n) {
    const std::size_t period = 2 * n;
    i %= period;
    return i < n ? i : period - 1 - i;
  };
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      src(r, c) = in(mirror(r, in.rows()), mirror(c, in.cols()));

  auto starts = [&](std::size_t n) {
    std::vector<std::size_t> v;
    const std::size_t stride = tile - overlap;
    for (std::size_t p = 0;; p += stride) {
      if (p + tile >= n) {
        v.push_back(n - tile);
        break;
      }
      v.push_back(p);
    }
    return v;
  };
  std::vector<double> ramp(tile);
  for (std::size_t t = 0; t < tile; ++t) {
    const double edge = double(std::min(t, tile - 1 - t)) + 0.5;
    ramp[t] = overlap == 0 ? 1.0 : std::min(1.0, edge / double(overlap));
  }

  Grid2d acc(rows, cols), weight(rows, cols);
  Grid2d patch(tile, tile);
  for (std::size_t r0 : starts(rows))
    for (std::size_t c0 : starts(cols)) {
      for (std::size_t r = 0; r < tile; ++r)
        for (std::size_t c = 0; c < tile; ++c)
          patch(r, c) = src(r0 + r, c0 + c);
      const Grid2d out = tile_fn(patch);
      detail::require(out.rows() == tile && out.cols() == tile, "blend_tiles: tile function changed the shape");
      for (std::size_t r = 0; r < tile; ++r)
        for (std::size_t c = 0; c < tile; ++c) {
          const double w = ramp[r] * ramp[c];
          acc(r0 + r, c0 + c) += w * out(r, c);
          weight(r0 + r, c0 + c) += w;
        }
    }
  Grid2d result(in.rows(), in.cols());
  for (std::size_t r = 0; r < in.rows(); ++r)
    for (std::size_t c = 0; c < in.cols(); ++c)
      result(r, c) = acc(r, c) / weight(r, c);
  return result;
}

/// Network output for one tile in data units (normalisation applied and
/// inverted).
inline Grid2d predict_tile(const BlindSpotModel& model, const Grid2d& tile) {
  nn::FeatureMap<float> in{nn::Matrix<float>(1, long(tile.size())), tile.rows(), tile.cols()};
  for (std::size_t i = 0; i < tile.size(); ++i)
    in.data(0, long(i)) = float((tile[i] - model.norm_mean) / model.norm_std);
  const auto out = model.net.forward(in);
  Grid2d result(tile.rows(), tile.cols());
  for (std::size_t i = 0; i < tile.size(); ++i)
    result[i] = double(out.data(0, long(i))) * model.norm_std + model.norm_mean;
  return result;
}

/// Full-sinogram inference by blended tiles; overlap defaults to patch/4.
inline Sinogram denoise_with_model(const BlindSpotModel& model, const Sinogram& sino, std::size_t overlap = 0) {
  const std::size_t tile = model.config.patch_size;
  if (overlap == 0)
    overlap = tile / 4;
  if (!all_finite(sino.data))
    throw NumericalError("denoise_with_model: input is not finite");
  Sinogram out = sino;
  out.data = blend_tiles(sino.data, tile, overlap, [&](const Grid2d& t) { return predict_tile(model, t); });
  if (!all_finite(out.data))
    throw NumericalError("denoise_with_model: network produced non-finite output");
  return out;
}

// ---------------------------------------------------------------------------
// Model file: "SDNM" magic, u32 format version, u64 header length, JSON
// header, then one STF1 tensor per parameter in header order.

inline constexpr std::uint32_t kModelFormatVersion = 1;

inline void save_model(const BlindSpotModel& model, const std::filesystem::path& path) {
  using nlohmann::json;
  const auto names = model.net.param_names();
  json tensors = json::array();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& p = model.net.params()[i];
    tensors.push_back({{"name", names[i]}, {"dims", {p.rows(), p.cols()}}});
  }
  json layers = json::array();
  for (const auto& c : model.net.layout())
    layers.push_back({{"name", c.name}, {"in", c.in}, {"out", c.out}, {"kernel", c.kernel}, {"relu", c.relu}});
  const auto arch = model.net.architecture();
  const json header{{"config", model.config},
                    {"architecture",
                     {{"variant", nn::to_string(arch.variant)},
                      {"depth", arch.depth},
                      {"base_channels", arch.base_channels},
                      {"downsampling", arch.variant == Variant::n2v ? "max_pool" : "blur_pool"},
                      {"skip_levels", arch.skip_count()},
                      {"parameter_count", model.net.parameter_count()},
                      {"layers", layers}}},
                    {"normalization", {{"mean", model.norm_mean}, {"std", model.norm_std}}},
                    {"tensors", tensors}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> bytes{'S', 'D', 'N', 'M'};
  detail::put_u32(bytes, kModelFormatVersion);
  const std::uint64_t len = text.size();
  detail::put_u32(bytes, std::uint32_t(len & 0xffffffffu));
  detail::put_u32(bytes, std::uint32_t(len >> 32));
  bytes.insert(bytes.end(), text.begin(), text.end());
  for (const auto& p : model.net.params()) {
    Tensor t{{std::uint32_t(p.rows()), std::uint32_t(p.cols())},
             std::vector<float>(p.data(), p.data() + p.size())};
    const auto enc = encode_stf(t);
    bytes.insert(bytes.end(), enc.begin(), enc.end());
  }
  write_bytes(path, bytes);
}

inline BlindSpotModel load_model(const std::filesystem::path& path) {
  using nlohmann::json;
  const auto bytes = read_bytes(path);
  if (bytes.size() < 16 || !std::equal(bytes.begin(), bytes.begin() + 4, "SDNM"))
    throw IoError("not a model file: " + path.string());
  if (detail::get_u32(bytes.data() + 4) != kModelFormatVersion)
    throw IoError("unsupported model format version in " + path.string());
  const std::uint64_t len = std::uint64_t(detail::get_u32(bytes.data() + 8)) |
                            (std::uint64_t(detail::get_u32(bytes.data() + 12)) << 32);
  if (16 + len > bytes.size())
    throw IoError("truncated model header in " + path.string());
  BlindSpotModel model;
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + std::ptrdiff_t(len));
    model.config = header.at("config").get<BlindSpotConfig>();
    model.norm_mean = header.at("normalization").at("mean").get<double>();
    model.norm_std = header.at("normalization").at("std").get<double>();
  } catch (const json::exception& e) {
    throw IoError("model header in " + path.string() + ": " + e.what());
  }
  model.net = nn::UNet<float>(model.config.architecture(), 0);
  std::size_t offset = 16 + len;
  const auto names = model.net.param_names();
  for (std::size_t i = 0; i < model.net.params().size(); ++i) {
    if (header["tensors"].at(i).at("name").get<std::string>() != names[i])
      throw IoError("model tensor order mismatch at " + names[i]);
    const Tensor t = decode_stf(bytes, offset);
    auto& p = model.net.params()[i];
    if (t.dims.size() != 2 || long(t.dims[0]) != p.rows() || long(t.dims[1]) != p.cols())
      throw IoError("model tensor shape mismatch for " + names[i]);
    std::copy(t.values.begin(), t.values.end(), p.data());
  }
  if (offset != bytes.size())
    throw IoError("trailing bytes in model file " + path.string());
  return model;
}

} // namespace sinodn

#endif
