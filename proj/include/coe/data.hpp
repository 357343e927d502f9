#pragma once

// Datasets: a seeded multi-mode synthetic generator and a plain CSV format
// (numeric feature columns, integer label in the last column, no header).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "coe/error.hpp"
#include "coe/io.hpp"
#include "coe/matrix.hpp"
#include "coe/seed.hpp"

namespace coe::data {

struct Dataset {
  Matrix features;                   ///< N × d
  std::vector<std::size_t> labels;   ///< N, each < classes
  std::size_t classes = 0;
  std::vector<std::size_t> modes;    ///< optional ground-truth mode per sample

  [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
  [[nodiscard]] std::size_t dim() const noexcept { return features.cols(); }

  void validate() const {
    require(features.rows() == labels.size(), "Dataset: feature/label count mismatch");
    require(modes.empty() || modes.size() == labels.size(), "Dataset: mode count mismatch");
    for (std::size_t y : labels) require(y < classes, "Dataset: label out of range");
    for (double v : features.flat()) require(!std::isnan(v), "Dataset: NaN feature");
  }

  /// The listed rows as a new dataset.
  [[nodiscard]] Dataset slice(std::span<const std::size_t> rows) const {
    Dataset out;
    out.features = gather_rows(features, rows);
    out.classes = classes;
    out.labels.reserve(rows.size());
    for (std::size_t r : rows) out.labels.push_back(labels[r]);
    if (!modes.empty())
      for (std::size_t r : rows) out.modes.push_back(modes[r]);
    return out;
  }
};

/// M Gaussian clusters. Inside cluster i only the projection of
/// x − center_i onto a random plane matters: the plane is cut into
/// `directions_per_class * C` equal angular sectors and each sector carries a
/// class (balanced random map). Every cluster has its own plane and map, so a
/// specialist per cluster needs far less capacity than one network covering
/// all of them, while each cluster alone stays cheap to learn.
struct SyntheticSpec {
  std::size_t modes = 4;
  std::size_t classes = 8;
  std::size_t dim = 32;
  std::size_t samples = 20000;
  double mode_separation = 12.0;
  std::size_t directions_per_class = 3;
  double nuisance_std = 0.5;  ///< spread of each cluster off its labeling plane
  double noise_std = 0.0;  ///< Gaussian noise added after labeling
  std::uint64_t seed = 0;  ///< fixes centers and decision rules
  std::string split = "train";  ///< sample stream; "train"/"val" share geometry

  void validate() const {
    require(modes >= 1, "SyntheticSpec: modes must be >= 1");
    require(classes >= 2, "SyntheticSpec: classes must be >= 2");
    require(dim >= 1, "SyntheticSpec: dim must be >= 1");
    require(directions_per_class >= 1, "SyntheticSpec: directions_per_class must be >= 1");
    require(samples >= modes * classes, "SyntheticSpec: samples must be >= modes*classes");
    require(mode_separation >= 0.0 && noise_std >= 0.0 && nuisance_std >= 0.0,
            "SyntheticSpec: negative scale");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticSpec, modes, classes, dim, samples,
                                                mode_separation, directions_per_class, nuisance_std, noise_std, seed, split)

struct SyntheticGeometry {
  Matrix centers;                                   ///< M × d
  std::vector<Matrix> directions;                   ///< per mode, (K·C) × d unit rows
  std::vector<std::vector<std::size_t>> class_map;  ///< per mode, direction -> class
  std::vector<Matrix> planes;                       ///< per mode, 2 × d orthonormal axes
};

inline SyntheticGeometry synthetic_geometry(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(sub_seed(spec.seed, "synthetic/geometry"));
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto unit = [&](std::span<double> v) {
    double norm = 0.0;
    for (double& x : v) {
      x = gauss(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
  };
  SyntheticGeometry g;
  g.centers = Matrix(spec.modes, spec.dim);
  for (std::size_t i = 0; i < spec.modes; ++i) {
    unit(g.centers.row(i));
    for (double& x : g.centers.row(i)) x *= spec.mode_separation;
  }
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  const std::size_t count = spec.directions_per_class * spec.classes;
  std::vector<double> e1(spec.dim), e2(spec.dim);
  for (std::size_t i = 0; i < spec.modes; ++i) {
    unit(e1);
    // Gram-Schmidt for a second orthonormal axis.
    do {
      unit(e2);
      double dot = 0.0;
      for (std::size_t k = 0; k < spec.dim; ++k) dot += e1[k] * e2[k];
      double norm = 0.0;
      for (std::size_t k = 0; k < spec.dim; ++k) {
        e2[k] -= dot * e1[k];
        norm += e2[k] * e2[k];
      }
      norm = std::sqrt(norm);
      if (norm < 1e-6) continue;
      for (double& x : e2) x /= norm;
      break;
    } while (spec.dim > 1);
    Matrix plane(2, spec.dim);
    std::copy(e1.begin(), e1.end(), plane.row(0).begin());
    std::copy(e2.begin(), e2.end(), plane.row(1).begin());
    g.planes.push_back(std::move(plane));
    const double offset = phase(rng);
    Matrix dirs(count, spec.dim);
    for (std::size_t r = 0; r < count; ++r) {
      const double angle = offset + 2.0 * std::numbers::pi * static_cast<double>(r) /
                                        static_cast<double>(count);
      for (std::size_t k = 0; k < spec.dim; ++k)
        dirs(r, k) = std::cos(angle) * e1[k] + (spec.dim > 1 ? std::sin(angle) * e2[k] : 0.0);
    }
    g.directions.push_back(std::move(dirs));
    std::vector<std::size_t> map(count);
    for (std::size_t r = 0; r < count; ++r) map[r] = r % spec.classes;
    std::shuffle(map.begin(), map.end(), rng);
    g.class_map.push_back(std::move(map));
  }
  return g;
}

/// Noise-free label of offset `z` (sample minus its center) in mode `mode`.
inline std::size_t synthetic_rule(const SyntheticGeometry& g, std::size_t mode,
                                  std::span<const double> z) {
  const Matrix& dirs = g.directions[mode];
  std::vector<double> score(dirs.rows(), 0.0);
  for (std::size_t c = 0; c < dirs.rows(); ++c)
    for (std::size_t i = 0; i < z.size(); ++i) score[c] += dirs(c, i) * z[i];
  return g.class_map[mode][argmax(score)];
}

/// Modes and labels are assigned round-robin (exactly balanced). The in-plane
/// offset of each sample is rejection-sampled until the mode's rule yields its
/// label; the off-plane offset is independent Gaussian nuisance. Sample order
/// is shuffled at the end.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  const SyntheticGeometry g = synthetic_geometry(spec);
  std::mt19937_64 rng(sub_seed(spec.seed, "synthetic/samples/" + spec.split));
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<std::size_t> order(spec.samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  Dataset ds;
  ds.features = Matrix(spec.samples, spec.dim);
  ds.labels.resize(spec.samples);
  ds.modes.resize(spec.samples);
  ds.classes = spec.classes;
  std::vector<double> z(spec.dim);
  std::vector<double> off(spec.dim);
  for (std::size_t s = 0; s < spec.samples; ++s) {
    const std::size_t mode = s % spec.modes;
    const std::size_t label = (s / spec.modes) % spec.classes;
    const Matrix& plane = g.planes[mode];
    double a = 0.0;
    double b = 0.0;
    do {
      a = gauss(rng);
      b = gauss(rng);
      for (std::size_t k = 0; k < spec.dim; ++k) z[k] = a * plane(0, k) + b * plane(1, k);
    } while (synthetic_rule(g, mode, z) != label);
    if (spec.nuisance_std > 0.0) {
      double pa = 0.0;
      double pb = 0.0;
      for (std::size_t k = 0; k < spec.dim; ++k) {
        off[k] = gauss(rng);
        pa += off[k] * plane(0, k);
        pb += off[k] * plane(1, k);
      }
      for (std::size_t k = 0; k < spec.dim; ++k)
        z[k] += spec.nuisance_std * (off[k] - pa * plane(0, k) - pb * plane(1, k));
    }
    const std::size_t row = order[s];
    for (std::size_t i = 0; i < spec.dim; ++i) {
      const double noise = spec.noise_std > 0.0 ? spec.noise_std * gauss(rng) : 0.0;
      ds.features(row, i) = g.centers(mode, i) + z[i] + noise;
    }
    ds.labels[row] = label;
    ds.modes[row] = mode;
  }
  return ds;
}

/// Named benchmark presets. "coe4-synth": 4 modes, 8 classes, 32 dims,
/// 20000 train / 4000 val samples, fixed geometry seed 0.
inline SyntheticSpec named_benchmark(const std::string& name, const std::string& split) {
  require(name == "coe4-synth" || name == "coe4-synth-small",
          "unknown synthetic benchmark '" + name + "'");
  SyntheticSpec s;
  s.modes = 4;
  s.classes = 8;
  s.dim = 32;
  s.seed = 0;
  s.split = split;
  const bool small = name == "coe4-synth-small";
  if (split == "train")
    s.samples = small ? 2000 : 20000;
  else if (split == "val")
    s.samples = small ? 800 : 4000;
  else
    throw InvalidInput("unknown split '" + split + "' (train|val)");
  return s;
}

inline std::string to_csv(const Dataset& ds) {
  std::string out;
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (std::size_t c = 0; c < ds.dim(); ++c) {
      out += io::format_double(ds.features(r, c));
      out += ',';
    }
    out += std::to_string(ds.labels[r]);
    out += '\n';
  }
  return out;
}

inline void save_csv(const std::filesystem::path& path, const Dataset& ds) {
  io::write_file_atomic(path, to_csv(ds));
}

inline Dataset parse_csv(const std::string& text, const std::string& source = "<csv>") {
  std::vector<std::vector<double>> rows;
  std::vector<std::size_t> labels;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto fail = [&](const std::string& why) {
      throw InvalidInput(source + ":" + std::to_string(line_no) + ": " + why);
    };
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() < 2) fail("need at least one feature and a label");
    if (width == 0) width = cells.size();
    if (cells.size() != width) fail("expected " + std::to_string(width) + " columns");
    std::vector<double> feats;
    for (std::size_t i = 0; i + 1 < cells.size(); ++i) {
      char* end = nullptr;
      const double v = std::strtod(cells[i].c_str(), &end);
      if (end == cells[i].c_str() || *end != '\0' || std::isnan(v))
        fail("bad numeric value '" + cells[i] + "'");
      feats.push_back(v);
    }
    const std::string& lab = cells.back();
    char* end = nullptr;
    const long long y = std::strtoll(lab.c_str(), &end, 10);
    if (end == lab.c_str() || *end != '\0' || y < 0) fail("bad label '" + lab + "'");
    rows.push_back(std::move(feats));
    labels.push_back(static_cast<std::size_t>(y));
  }
  require(!rows.empty(), source + ": empty dataset");
  Dataset ds;
  ds.features = Matrix(rows.size(), width - 1);
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy(rows[r].begin(), rows[r].end(), ds.features.row(r).begin());
  ds.labels = std::move(labels);
  ds.classes = *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  std::vector<bool> seen(ds.classes, false);
  for (std::size_t y : ds.labels) seen[y] = true;
  for (std::size_t c = 0; c < ds.classes; ++c)
    require(seen[c], source + ": labels are not contiguous (class " + std::to_string(c) +
                         " never appears)");
  return ds;
}

inline Dataset load_csv(const std::filesystem::path& path) {
  return parse_csv(io::read_file(path), path.string());
}

}  // namespace coe::data
