#ifndef SINODN_DATASET_HPP
#define SINODN_DATASET_HPP

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sinodn/error.hpp"
#include "sinodn/parallel.hpp"
#include "sinodn/phantom.hpp"
#include "sinodn/stf.hpp"

namespace sinodn {

namespace fs = std::filesystem;
using nlohmann::json;

inline void to_json(json& j, const ScanGeometry& g) {
  j = json{{"n_angles", g.n_angles},           {"n_detectors", g.n_detectors},
           {"source_radius", g.source_radius}, {"fan_half_angle", g.fan_half_angle},
           {"angular_range", g.angular_range}};
}

inline void from_json(const json& j, ScanGeometry& g) {
  j.at("n_angles").get_to(g.n_angles);
  j.at("n_detectors").get_to(g.n_detectors);
  j.at("source_radius").get_to(g.source_radius);
  j.at("fan_half_angle").get_to(g.fan_half_angle);
  j.at("angular_range").get_to(g.angular_range);
}

inline void to_json(json& j, const NoiseModel& n) {
  j = json{{"photon_flux", n.photon_flux}, {"seed", n.seed}, {"structured", nullptr}};
  if (n.structured)
    j["structured"] = {{"diagonal_sigma", n.structured->diagonal_sigma},
                       {"diagonal_correlation_length", n.structured->diagonal_correlation_length}};
}

inline void from_json(const json& j, NoiseModel& n) {
  j.at("photon_flux").get_to(n.photon_flux);
  j.at("seed").get_to(n.seed);
  n.structured.reset();
  if (j.contains("structured") && !j["structured"].is_null())
    n.structured = StructuredNoise{j["structured"].at("diagonal_sigma").get<double>(),
                                   j["structured"].at("diagonal_correlation_length").get<double>()};
}

struct ConfigurationEntry {
  std::string label;
  std::string plane;
  std::string position;
  std::optional<fs::path> clean_path;
  std::vector<fs::path> sample_paths;
};

struct DatasetManifest {
  std::vector<ConfigurationEntry> configurations;
  ScanGeometry geometry;
  json provenance; // synthetic noise parameters, or a free-form description for external data

  std::size_t sample_count() const {
    std::size_t n = 0;
    for (const auto& c : configurations)
      n += c.sample_paths.size();
    return n;
  }

  std::optional<std::size_t> find(const std::string& label) const {
    for (std::size_t i = 0; i < configurations.size(); ++i)
      if (configurations[i].label == label)
        return i;
    return std::nullopt;
  }

  void validate() const {
    std::set<std::string> labels;
    for (const auto& c : configurations)
      if (!labels.insert(c.label).second)
        throw ConfigError("manifest: duplicate configuration label " + c.label);
    geometry.validate();
  }
};

inline std::string configuration_label(const std::string& plane, const std::string& position) {
  return plane + "_" + position;
}

/// Stable sample identifier used in reports, e.g. "Plane0_Top/00012".
inline std::string sample_id(const std::string& label, std::size_t index) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%05zu", index);
  return label + "/" + buf;
}

inline json manifest_to_json(const DatasetManifest& m, const fs::path& base_dir) {
  json configs = json::array();
  for (const auto& c : m.configurations) {
    json samples = json::array();
    for (const auto& p : c.sample_paths)
      samples.push_back(fs::proximate(p, base_dir).generic_string());
    configs.push_back({{"label", c.label},
                       {"plane", c.plane},
                       {"position", c.position},
                       {"clean_path", c.clean_path ? json(fs::proximate(*c.clean_path, base_dir).generic_string())
                                                   : json(nullptr)},
                       {"sample_paths", samples}});
  }
  return json{{"schema_version", 1},
              {"geometry", m.geometry},
              {"provenance", m.provenance},
              {"configurations", configs}};
}

inline void save_manifest(const DatasetManifest& m, const fs::path& path) {
  std::ofstream out(path);
  if (!out)
    throw IoError("cannot write manifest " + path.string());
  out << manifest_to_json(m, path.parent_path()).dump(2) << '\n';
}

/// Loads a manifest; relative paths resolve against the manifest's directory.
inline DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("manifest " + path.string() + ": " + e.what());
  }
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    fs::path q(p);
    q = q.is_absolute() ? q : base / q;
    if (!fs::exists(q))
      throw IoError("manifest references missing file " + q.string());
    return q;
  };
  DatasetManifest m;
  try {
    m.geometry = j.at("geometry").get<ScanGeometry>();
    m.provenance = j.value("provenance", json(nullptr));
    for (const auto& c : j.at("configurations")) {
      ConfigurationEntry e;
      e.label = c.at("label").get<std::string>();
      e.plane = c.value("plane", "");
      e.position = c.value("position", "");
      if (c.contains("clean_path") && !c["clean_path"].is_null())
        e.clean_path = resolve(c["clean_path"].get<std::string>());
      for (const auto& s : c.at("sample_paths"))
        e.sample_paths.push_back(resolve(s.get<std::string>()));
      m.configurations.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw IoError("manifest " + path.string() + ": " + e.what());
  }
  m.validate();
  return m;
}

inline Sinogram load_sinogram(const DatasetManifest& m, std::size_t configuration, std::size_t sample) {
  const auto& c = m.configurations.at(configuration);
  Sinogram s{read_grid(c.sample_paths.at(sample)), m.geometry,
             {c.label, c.plane, c.position, static_cast<long>(sample)}};
  s.validate();
  return s;
}

inline std::optional<Sinogram> load_clean(const DatasetManifest& m, std::size_t configuration) {
  const auto& c = m.configurations.at(configuration);
  if (!c.clean_path)
    return std::nullopt;
  Sinogram s{read_grid(*c.clean_path), m.geometry, {c.label, c.plane, c.position, -1}};
  s.validate();
  return s;
}

/// Noise parameters used for one (configuration, sample) pair. The seed is
/// derived from the pair, so generation order does not affect the output.
inline NoiseModel sample_noise(const NoiseModel& base, std::size_t configuration, std::size_t sample) {
  NoiseModel n = base;
  n.seed = derive_seed(base.seed, configuration + 1, sample + 1);
  return n;
}

/// Writes one clean and `n_samples` noisy STF1 sinograms per configuration
/// under `out_dir` plus `manifest.json`. Configuration i is labelled by plane
/// i / 3 and position i % 3.
inline DatasetManifest generate_dataset(const std::vector<Phantom>& phantoms, const ScanGeometry& geometry,
                                        const NoiseModel& noise, std::size_t n_samples, const fs::path& out_dir,
                                        std::size_t threads = 1) {
  detail::require(!phantoms.empty(), "generate_dataset: at least one configuration is required");
  detail::require(phantoms.size() <= plane_names().size() * position_names().size(),
                  "generate_dataset: at most six (plane, position) configurations exist");
  geometry.validate();
  noise.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir))
    throw IoError("cannot create output directory " + out_dir.string());

  DatasetManifest manifest;
  manifest.geometry = geometry;
  manifest.provenance = {{"kind", "synthetic"}, {"noise", noise}, {"samples_per_configuration", n_samples}};
  for (std::size_t ci = 0; ci < phantoms.size(); ++ci) {
    phantoms[ci].validate();
    ConfigurationEntry e;
    e.plane = plane_names()[ci / 3];
    e.position = position_names()[ci % 3];
    e.label = configuration_label(e.plane, e.position);
    const fs::path dir = out_dir / e.label;
    fs::create_directories(dir, ec);
    if (ec)
      throw IoError("cannot create " + dir.string());
    const Sinogram clean = forward_project(phantoms[ci], geometry);
    e.clean_path = dir / "clean.stf";
    write_grid(*e.clean_path, clean.data);
    e.sample_paths.resize(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s)
      e.sample_paths[s] = dir / ("sample_" + sample_id("", s).substr(1) + ".stf");
    parallel_for(n_samples, threads, [&](std::size_t s) {
      write_grid(e.sample_paths[s], apply_noise(clean, sample_noise(noise, ci, s)).data);
    });
    manifest.configurations.push_back(std::move(e));
  }
  save_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

} // namespace sinodn

#endif
