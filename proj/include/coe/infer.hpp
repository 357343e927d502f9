#pragma once

// Inference engine: the delegator runs on every sample, confident samples
// (MCP > τ) exit with the rough prediction, the rest are grouped by selected
// expert and batch-inferred. Costs are accounted analytically per sample.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "coe/data.hpp"
#include "coe/error.hpp"
#include "coe/matrix.hpp"
#include "coe/models.hpp"

namespace coe::infer {

struct SampleTrace {
  double mcp = 0.0;
  bool early_exit = false;
  std::optional<std::size_t> selected_expert;
  std::size_t rough_class = 0;
  std::size_t final_class = 0;
  std::uint64_t flops = 0;
};

using InferenceTrace = std::vector<SampleTrace>;

/// Delegator results for a batch, reusable across thresholds.
struct DelegatorPass {
  Matrix class_probs;
  Matrix selection_probs;
  std::vector<std::size_t> rough;
  std::vector<double> mcp;
  std::vector<std::size_t> selected;  ///< expert each sample would go to
};

/// Expert chosen per sample: argmax of P (ties: lowest index), or the class
/// group of the rough prediction for category-partition bundles.
inline DelegatorPass run_delegator(const models::Bundle& b, const Matrix& batch) {
  const auto out = models::delegator_forward(b.delegator, batch);
  DelegatorPass pass{out.class_probs, out.selection_probs, {}, {}, {}};
  const std::size_t m = batch.rows();
  pass.rough.resize(m);
  pass.mcp.resize(m);
  pass.selected.resize(m);
  for (std::size_t j = 0; j < m; ++j) {
    pass.rough[j] = argmax(out.class_probs.row(j));
    pass.mcp[j] = out.class_probs(j, pass.rough[j]);
    if (b.mode == models::Mode::category_random) {
      require(pass.rough[j] < b.class_groups.size(), "bundle: class_groups too short");
      pass.selected[j] = b.class_groups[pass.rough[j]];
    } else {
      pass.selected[j] = argmax(out.selection_probs.row(j));
    }
  }
  return pass;
}

/// Final class of every listed sample under its selected expert, computed
/// one batched forward per expert group. Results are indexed like `rows`.
inline std::vector<std::size_t> refine(const models::Bundle& b, const DelegatorPass& pass,
                                       const Matrix& batch, std::span<const std::size_t> rows) {
  std::vector<std::size_t> result(rows.size());
  std::vector<std::vector<std::size_t>> groups(b.experts.size());
  for (std::size_t i = 0; i < rows.size(); ++i) groups.at(pass.selected[rows[i]]).push_back(i);
  for (std::size_t k = 0; k < groups.size(); ++k) {
    if (groups[k].empty()) continue;
    std::vector<std::size_t> src(groups[k].size());
    for (std::size_t i = 0; i < src.size(); ++i) src[i] = rows[groups[k][i]];
    const Matrix probs = models::expert_forward(b.experts[k], gather_rows(batch, src));
    for (std::size_t i = 0; i < src.size(); ++i) result[groups[k][i]] = argmax(probs.row(i));
  }
  return result;
}

struct Prediction {
  std::vector<std::size_t> classes;
  InferenceTrace trace;
  std::vector<std::size_t> group_sizes;  ///< non-exited samples per expert
};

namespace detail {

inline Prediction assemble(const models::Bundle& b, const DelegatorPass& pass,
                           std::span<const std::size_t> refined, double tau) {
  const std::uint64_t fd = models::cost_profile(b.delegator).flops;
  std::vector<std::uint64_t> fe;
  for (const auto& e : b.experts) fe.push_back(models::cost_profile(e).flops);
  const std::size_t m = pass.rough.size();
  Prediction p;
  p.classes.resize(m);
  p.trace.resize(m);
  p.group_sizes.assign(b.experts.size(), 0);
  for (std::size_t j = 0; j < m; ++j) {
    SampleTrace& t = p.trace[j];
    t.mcp = pass.mcp[j];
    t.rough_class = pass.rough[j];
    t.early_exit = t.mcp > tau;
    if (t.early_exit) {
      t.final_class = t.rough_class;
      t.flops = fd;
    } else {
      const std::size_t k = pass.selected[j];
      t.selected_expert = k;
      t.final_class = refined[j];
      t.flops = fd + fe[k];
      ++p.group_sizes[k];
    }
    p.classes[j] = t.final_class;
  }
  return p;
}

}  // namespace detail

inline void require_trained(const models::Bundle& b) {
  require(b.trained(), "bundle has not completed training (phase_completed=" +
                           b.phase_completed + ")");
  require(b.mode != models::Mode::ensemble, "ensemble bundles use ensemble_predict");
}

/// Early-exit prediction at threshold τ. Only non-exited samples are sent to
/// experts.
inline Prediction predict(const models::Bundle& b, const Matrix& batch, double tau) {
  require_trained(b);
  require(tau >= 0.0 && tau <= 1.0, "predict: tau outside [0,1]");
  const DelegatorPass pass = run_delegator(b, batch);
  std::vector<std::size_t> pending;
  for (std::size_t j = 0; j < batch.rows(); ++j)
    if (!(pass.mcp[j] > tau)) pending.push_back(j);
  const auto refined_pending = refine(b, pass, batch, pending);
  std::vector<std::size_t> refined(batch.rows(), 0);
  for (std::size_t i = 0; i < pending.size(); ++i) refined[pending[i]] = refined_pending[i];
  return detail::assemble(b, pass, refined, tau);
}

struct Metrics {
  double tau = 0.0;
  double accuracy = 0.0;
  double mean_flops = 0.0;
  double exit_fraction = 0.0;
  std::uint64_t total_flops = 0;
  std::size_t samples = 0;
  std::size_t exits = 0;
};

inline Metrics summarize(const InferenceTrace& trace, std::span<const std::size_t> labels,
                         double tau) {
  require(trace.size() == labels.size(), "summarize: trace/label length mismatch");
  require(!trace.empty(), "summarize: empty trace");
  Metrics m;
  m.tau = tau;
  m.samples = trace.size();
  std::size_t correct = 0;
  for (std::size_t j = 0; j < trace.size(); ++j) {
    m.total_flops += trace[j].flops;
    m.exits += trace[j].early_exit ? 1 : 0;
    correct += trace[j].final_class == labels[j] ? 1 : 0;
  }
  const double n = static_cast<double>(m.samples);
  m.accuracy = static_cast<double>(correct) / n;
  m.mean_flops = static_cast<double>(m.total_flops) / n;
  m.exit_fraction = static_cast<double>(m.exits) / n;
  return m;
}

inline Metrics evaluate(const models::Bundle& b, const data::Dataset& ds, double tau) {
  const auto p = predict(b, ds.features, tau);
  return summarize(p.trace, ds.labels, tau);
}

/// Ensemble baseline: mean of every expert's class probabilities, no
/// delegator. Accounted cost is Σ_k F_{E_k} per sample.
inline Metrics ensemble_evaluate(const models::Bundle& b, const data::Dataset& ds) {
  require(b.trained(), "ensemble_evaluate: bundle not trained");
  Matrix mean(ds.size(), ds.classes, 0.0);
  std::uint64_t per_sample = 0;
  for (const auto& e : b.experts) {
    const Matrix p = models::expert_forward(e, ds.features);
    for (std::size_t i = 0; i < mean.size(); ++i) mean.flat()[i] += p.flat()[i];
    per_sample += models::cost_profile(e).flops;
  }
  Metrics m;
  m.tau = 1.0;
  m.samples = ds.size();
  std::size_t correct = 0;
  for (std::size_t j = 0; j < ds.size(); ++j) correct += argmax(mean.row(j)) == ds.labels[j];
  m.total_flops = per_sample * ds.size();
  m.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  m.mean_flops = static_cast<double>(per_sample);
  return m;
}

struct BudgetRow {
  double tau = 0.0;
  double mean_flops = 0.0;
  double accuracy = 0.0;
  double exit_fraction = 0.0;
};

using BudgetCurve = std::vector<BudgetRow>;

/// One routing pass per τ. Delegator outputs and expert refinements are
/// computed once and reused, since neither depends on τ.
inline BudgetCurve sweep_tau(const models::Bundle& b, const data::Dataset& ds,
                             std::span<const double> taus,
                             std::vector<InferenceTrace>* traces = nullptr) {
  require_trained(b);
  require(!taus.empty(), "sweep_tau: empty tau list");
  require(std::is_sorted(taus.begin(), taus.end()), "sweep_tau: taus must be ascending");
  const DelegatorPass pass = run_delegator(b, ds.features);
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto refined = refine(b, pass, ds.features, all);
  BudgetCurve curve;
  for (double tau : taus) {
    require(tau >= 0.0 && tau <= 1.0, "sweep_tau: tau outside [0,1]");
    auto p = detail::assemble(b, pass, refined, tau);
    const auto m = summarize(p.trace, ds.labels, tau);
    curve.push_back({tau, m.mean_flops, m.accuracy, m.exit_fraction});
    if (traces) traces->push_back(std::move(p.trace));
  }
  return curve;
}

/// `count` evenly spaced thresholds from 0 to 1 inclusive.
inline std::vector<double> tau_grid(std::size_t count) {
  require(count >= 2, "tau_grid: need at least two points");
  std::vector<double> t(count);
  for (std::size_t i = 0; i < count; ++i)
    t[i] = static_cast<double>(i) / static_cast<double>(count - 1);
  return t;
}

inline std::string curve_csv(const BudgetCurve& curve) {
  std::string out = "tau,mean_flops,accuracy,exit_fraction\n";
  for (const auto& r : curve)
    out += io::format_double(r.tau) + "," + io::format_double(r.mean_flops) + "," +
           io::format_double(r.accuracy) + "," + io::format_double(r.exit_fraction) + "\n";
  return out;
}

enum class Binning { uniform, quantile };

struct TcpBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  /// Share of samples in the bin routed to each expert; absent when empty.
  std::optional<std::vector<double>> selection;
};

/// Bins samples by the delegator's true-class probability and reports how
/// often each expert is the argmax selection within each bin. Uniform bins
/// split [0,1] evenly; quantile bins hold (nearly) equal sample counts.
inline std::vector<TcpBin> selection_vs_tcp_report(const models::Bundle& b,
                                                   const data::Dataset& ds, std::size_t bins,
                                                   Binning binning = Binning::uniform) {
  require(bins >= 1, "selection_vs_tcp_report: need at least one bin");
  require(ds.size() > 0, "selection_vs_tcp_report: empty dataset");
  const DelegatorPass pass = run_delegator(b, ds.features);
  const std::size_t n = b.experts.size();
  std::vector<double> tcp(ds.size());
  for (std::size_t j = 0; j < ds.size(); ++j) tcp[j] = pass.class_probs(j, ds.labels[j]);

  std::vector<std::size_t> bin_of(ds.size());
  std::vector<TcpBin> out(bins);
  if (binning == Binning::uniform) {
    for (std::size_t i = 0; i < bins; ++i) {
      out[i].lo = static_cast<double>(i) / static_cast<double>(bins);
      out[i].hi = static_cast<double>(i + 1) / static_cast<double>(bins);
    }
    for (std::size_t j = 0; j < ds.size(); ++j)
      bin_of[j] = std::min(bins - 1, static_cast<std::size_t>(tcp[j] * static_cast<double>(bins)));
  } else {
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t c) { return tcp[a] < tcp[c]; });
    for (std::size_t r = 0; r < order.size(); ++r) bin_of[order[r]] = r * bins / order.size();
    for (auto& bin : out) {
      bin.lo = 1.0;
      bin.hi = 0.0;
    }
    for (std::size_t j = 0; j < ds.size(); ++j) {
      out[bin_of[j]].lo = std::min(out[bin_of[j]].lo, tcp[j]);
      out[bin_of[j]].hi = std::max(out[bin_of[j]].hi, tcp[j]);
    }
  }
  std::vector<std::vector<std::size_t>> counts(bins, std::vector<std::size_t>(n, 0));
  for (std::size_t j = 0; j < ds.size(); ++j) {
    ++out[bin_of[j]].count;
    ++counts[bin_of[j]][pass.selected[j]];
  }
  for (std::size_t i = 0; i < bins; ++i) {
    if (out[i].count == 0) continue;
    std::vector<double> share(n);
    for (std::size_t k = 0; k < n; ++k)
      share[k] = static_cast<double>(counts[i][k]) / static_cast<double>(out[i].count);
    out[i].selection = std::move(share);
  }
  return out;
}

inline std::string tcp_report_csv(const std::vector<TcpBin>& bins, std::size_t n_experts) {
  std::string out = "bin,tcp_lo,tcp_hi,count";
  for (std::size_t k = 0; k < n_experts; ++k) out += ",expert_" + std::to_string(k);
  out += '\n';
  for (std::size_t i = 0; i < bins.size(); ++i) {
    out += std::to_string(i) + "," + io::format_double(bins[i].lo) + "," +
           io::format_double(bins[i].hi) + "," + std::to_string(bins[i].count);
    for (std::size_t k = 0; k < n_experts; ++k) {
      out += ',';
      if (bins[i].selection) out += io::format_double((*bins[i].selection)[k]);
    }
    out += '\n';
  }
  return out;
}

struct ClassSelection {
  std::size_t count = 0;
  std::optional<std::vector<double>> selection;
};

/// Expert-selection distribution per rough-prediction class (one row per
/// class; classes never predicted have no distribution).
inline std::vector<ClassSelection> selection_vs_class_report(const models::Bundle& b,
                                                             const data::Dataset& ds) {
  const DelegatorPass pass = run_delegator(b, ds.features);
  const std::size_t n = b.experts.size();
  std::vector<ClassSelection> rows(ds.classes);
  std::vector<std::vector<std::size_t>> counts(ds.classes, std::vector<std::size_t>(n, 0));
  for (std::size_t j = 0; j < ds.size(); ++j) {
    require(pass.rough[j] < ds.classes, "selection_vs_class_report: class count mismatch");
    ++rows[pass.rough[j]].count;
    ++counts[pass.rough[j]][pass.selected[j]];
  }
  for (std::size_t c = 0; c < ds.classes; ++c) {
    if (rows[c].count == 0) continue;
    std::vector<double> share(n);
    for (std::size_t k = 0; k < n; ++k)
      share[k] = static_cast<double>(counts[c][k]) / static_cast<double>(rows[c].count);
    rows[c].selection = std::move(share);
  }
  return rows;
}

inline std::string class_report_csv(const std::vector<ClassSelection>& rows,
                                    std::size_t n_experts) {
  std::string out = "class,count";
  for (std::size_t k = 0; k < n_experts; ++k) out += ",expert_" + std::to_string(k);
  out += '\n';
  for (std::size_t c = 0; c < rows.size(); ++c) {
    out += std::to_string(c) + "," + std::to_string(rows[c].count);
    for (std::size_t k = 0; k < n_experts; ++k) {
      out += ',';
      if (rows[c].selection) out += io::format_double((*rows[c].selection)[k]);
    }
    out += '\n';
  }
  return out;
}

}  // namespace coe::infer
