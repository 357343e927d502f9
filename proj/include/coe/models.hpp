#pragma once

// The CoE actors built from dense networks: a delegator (feature extractor,
// task predictor, expert selector) and n experts, plus analytic cost
// accounting and the on-disk bundle format.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "coe/error.hpp"
#include "coe/io.hpp"
#include "coe/matrix.hpp"
#include "coe/nn.hpp"
#include "coe/seed.hpp"

namespace coe::models {

struct Architecture {
  std::size_t input_dim = 32;
  std::size_t feat_dim = 32;
  std::size_t classes = 8;
  std::size_t n_experts = 4;
  std::size_t selector_hidden = 100;
  std::vector<std::size_t> expert_hidden = {32, 32};
  /// Per-expert multiplier on `expert_hidden`; empty means homogeneous.
  std::vector<double> expert_width_scales;

  void validate() const {
    require(input_dim > 0 && feat_dim > 0 && selector_hidden > 0, "Architecture: zero width");
    require(classes >= 2, "Architecture: need at least two classes");
    require(n_experts >= 1, "Architecture: need at least one expert");
    require(expert_width_scales.empty() || expert_width_scales.size() == n_experts,
            "Architecture: expert_width_scales must have one entry per expert");
    for (double s : expert_width_scales) require(s > 0.0, "Architecture: width scale must be > 0");
  }

  [[nodiscard]] std::vector<std::size_t> expert_dims(std::size_t k) const {
    std::vector<std::size_t> dims{input_dim};
    const double scale = expert_width_scales.empty() ? 1.0 : expert_width_scales.at(k);
    for (std::size_t h : expert_hidden)
      dims.push_back(static_cast<std::size_t>(std::lround(static_cast<double>(h) * scale)));
    dims.push_back(classes);
    return dims;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Architecture, input_dim, feat_dim, classes,
                                                n_experts, selector_hidden, expert_hidden,
                                                expert_width_scales)

/// Width ladder used for the heterogeneous-expert experiments.
inline const std::vector<double> kHeterogeneousScales = {1.0, 1.5, 2.0, 4.0};

struct Delegator {
  nn::Mlp extractor;  ///< input → feat, ReLU output
  nn::Mlp predictor;  ///< feat → classes (single dense layer)
  nn::Mlp selector;   ///< feat → hidden (ReLU) → n
};

struct Expert {
  nn::Mlp network;
};

inline Delegator make_delegator(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  return Delegator{
      nn::Mlp::build({arch.input_dim, arch.feat_dim}, sub_seed(seed, "delegator/extractor"),
                     nn::Activation::relu, nn::Activation::relu),
      nn::Mlp::build({arch.feat_dim, arch.classes}, sub_seed(seed, "delegator/predictor")),
      nn::Mlp::build({arch.feat_dim, arch.selector_hidden, arch.n_experts},
                     sub_seed(seed, "delegator/selector")),
  };
}

inline Expert make_expert(const Architecture& arch, std::size_t k, std::uint64_t seed) {
  arch.validate();
  const auto dims = arch.expert_dims(k);
  return Expert{nn::Mlp::build(std::span<const std::size_t>(dims),
                               sub_seed(seed, "expert/" + std::to_string(k)))};
}

struct DelegatorOutput {
  Matrix features;
  Matrix class_probs;      ///< m × C, rough prediction
  Matrix selection_probs;  ///< m × n, P
};

inline DelegatorOutput delegator_forward(const Delegator& d, const Matrix& batch,
                                         nn::OpCounter* counter = nullptr) {
  DelegatorOutput out;
  out.features = nn::apply(d.extractor, batch, counter);
  out.class_probs = nn::softmax_rows(nn::apply(d.predictor, out.features, counter));
  out.selection_probs = nn::softmax_rows(nn::apply(d.selector, out.features, counter));
  return out;
}

inline Matrix expert_forward(const Expert& e, const Matrix& batch,
                             nn::OpCounter* counter = nullptr) {
  return nn::softmax_rows(nn::apply(e.network, batch, counter));
}

/// Per-instance costs. flops counts multiply-accumulates; mac counts
/// parameter plus activation reads/writes.
struct CostProfile {
  std::uint64_t flops = 0;
  std::uint64_t mac = 0;
  std::uint64_t params = 0;

  CostProfile& operator+=(const CostProfile& o) {
    flops += o.flops;
    mac += o.mac;
    params += o.params;
    return *this;
  }
  friend CostProfile operator+(CostProfile a, const CostProfile& b) { return a += b; }
  friend bool operator==(const CostProfile&, const CostProfile&) = default;
};

inline CostProfile cost_profile(const nn::DenseLayer& l) {
  const std::uint64_t in = l.in();
  const std::uint64_t out = l.out();
  const std::uint64_t params = out * in + out;
  return {out * in, params + in + out, params};
}

inline CostProfile cost_profile(const nn::Mlp& mlp) {
  CostProfile p;
  for (const auto& l : mlp.layers()) p += cost_profile(l);
  return p;
}

inline CostProfile cost_profile(const Delegator& d) {
  return cost_profile(d.extractor) + cost_profile(d.predictor) + cost_profile(d.selector);
}

inline CostProfile cost_profile(const Expert& e) { return cost_profile(e.network); }

enum class Mode { coe, gate_value_soft, ensemble, category_random, single_expert };

NLOHMANN_JSON_SERIALIZE_ENUM(Mode, {{Mode::coe, "coe"},
                                    {Mode::gate_value_soft, "gate_value_soft"},
                                    {Mode::ensemble, "ensemble"},
                                    {Mode::category_random, "category_random"},
                                    {Mode::single_expert, "single_expert"}})

inline std::string to_string(Mode m) { return nlohmann::json(m).get<std::string>(); }

/// Everything needed to run inference: the delegator, the experts and how
/// experts are chosen.
struct Bundle {
  Architecture arch;
  Delegator delegator;
  std::vector<Expert> experts;
  Mode mode = Mode::coe;
  std::uint64_t seed = 0;
  std::string phase_completed = "none";  ///< "none", "phase1" or "phase2"
  /// category_random only: class → expert group.
  std::vector<std::size_t> class_groups;

  [[nodiscard]] bool trained() const { return phase_completed == "phase2"; }
};

inline Bundle make_bundle(const Architecture& arch, std::uint64_t seed, Mode mode = Mode::coe) {
  Bundle b{arch, make_delegator(arch, seed), {}, mode, seed, "none", {}};
  for (std::size_t k = 0; k < arch.n_experts; ++k) b.experts.push_back(make_expert(arch, k, seed));
  return b;
}

namespace detail {

inline void write_mlp(const std::filesystem::path& path, const nn::Mlp& mlp) {
  std::ostringstream os;
  nn::save_mlp(os, mlp);
  io::write_file_atomic(path, os.str());
}

inline nn::Mlp read_mlp(const std::filesystem::path& path) {
  std::istringstream is(io::read_file(path));
  return nn::load_mlp(is);
}

}  // namespace detail

inline std::string manifest_json(const Bundle& b) {
  nlohmann::json j;
  j["format"] = "coe-bundle";
  j["version"] = 1;
  j["architecture"] = b.arch;
  j["mode"] = b.mode;
  j["seed"] = b.seed;
  j["phase_completed"] = b.phase_completed;
  j["class_groups"] = b.class_groups;
  return j.dump(2) + "\n";
}

/// Directory layout: manifest.json, extractor.ckpt, predictor.ckpt,
/// selector.ckpt and expert_<k>.ckpt for k in [0, n).
inline void save_bundle(const std::filesystem::path& dir, const Bundle& b) {
  std::filesystem::create_directories(dir);
  detail::write_mlp(dir / "extractor.ckpt", b.delegator.extractor);
  detail::write_mlp(dir / "predictor.ckpt", b.delegator.predictor);
  detail::write_mlp(dir / "selector.ckpt", b.delegator.selector);
  for (std::size_t k = 0; k < b.experts.size(); ++k)
    detail::write_mlp(dir / ("expert_" + std::to_string(k) + ".ckpt"), b.experts[k].network);
  io::write_file_atomic(dir / "manifest.json", manifest_json(b));
}

inline Bundle load_bundle(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), "bundle directory not found: " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput("bad bundle manifest: " + std::string(e.what()));
  }
  require(j.value("format", "") == "coe-bundle", "not a coe bundle manifest");
  Bundle b;
  b.arch = j.at("architecture").get<Architecture>();
  b.arch.validate();
  b.mode = j.at("mode").get<Mode>();
  b.seed = j.at("seed").get<std::uint64_t>();
  b.phase_completed = j.at("phase_completed").get<std::string>();
  b.class_groups = j.value("class_groups", std::vector<std::size_t>{});
  b.delegator.extractor = detail::read_mlp(dir / "extractor.ckpt");
  b.delegator.predictor = detail::read_mlp(dir / "predictor.ckpt");
  b.delegator.selector = detail::read_mlp(dir / "selector.ckpt");
  for (std::size_t k = 0; k < b.arch.n_experts; ++k)
    b.experts.push_back({detail::read_mlp(dir / ("expert_" + std::to_string(k) + ".ckpt"))});
  return b;
}

}  // namespace coe::models
