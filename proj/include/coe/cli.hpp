#pragma once

// Command-line front end. `run` is the whole program; tools/coe.cpp only
// forwards argv to it.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "coe/data.hpp"
#include "coe/error.hpp"
#include "coe/infer.hpp"
#include "coe/io.hpp"
#include "coe/models.hpp"
#include "coe/train.hpp"
#include "coe/transport.hpp"
#include "coe/verify.hpp"

namespace coe::cli {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr double kGradcheckThreshold = 1e-4;

/// Dataset source: "synthetic:<benchmark>" (split picked by the caller), a
/// SyntheticSpec JSON file (*.json), or a CSV file.
inline data::Dataset load_source(const std::string& source, const std::string& split,
                                 std::optional<std::uint64_t> seed = std::nullopt) {
  const std::string prefix = "synthetic:";
  if (source.rfind(prefix, 0) == 0) {
    auto spec = data::named_benchmark(source.substr(prefix.size()), split);
    if (seed) spec.seed = *seed;
    return data::generate_synthetic(spec);
  }
  if (std::filesystem::path(source).extension() == ".json") {
    data::SyntheticSpec spec;
    try {
      spec = nlohmann::json::parse(io::read_file(source)).get<data::SyntheticSpec>();
    } catch (const nlohmann::json::exception& e) {
      throw InvalidInput("bad synthetic spec " + source + ": " + e.what());
    }
    spec.split = split;
    if (seed) spec.seed = *seed;
    return data::generate_synthetic(spec);
  }
  return data::load_csv(source);
}

inline transport::CostMatrix parse_cost_csv(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      require(end != cell.c_str() && *end == '\0',
              "cost csv line " + std::to_string(line_no) + ": bad value '" + cell + "'");
      row.push_back(v);
    }
    require(rows.empty() || row.size() == rows.front().size(),
            "cost csv line " + std::to_string(line_no) + ": ragged row");
    rows.push_back(std::move(row));
  }
  require(!rows.empty(), "cost csv is empty");
  transport::CostMatrix c(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy(rows[r].begin(), rows[r].end(), c.row(r).begin());
  return c;
}

inline std::string metrics_json(const infer::Metrics& m, const models::Bundle& b,
                                const std::vector<std::size_t>& group_sizes) {
  nlohmann::json j;
  j["tau"] = m.tau;
  j["accuracy"] = m.accuracy;
  j["mean_flops"] = m.mean_flops;
  j["exit_fraction"] = m.exit_fraction;
  j["samples"] = m.samples;
  j["exits"] = m.exits;
  j["total_flops"] = m.total_flops;
  j["mode"] = b.mode;
  j["flops_delegator"] = models::cost_profile(b.delegator).flops;
  std::vector<std::uint64_t> fe;
  for (const auto& e : b.experts) fe.push_back(models::cost_profile(e).flops);
  j["flops_experts"] = fe;
  if (!group_sizes.empty()) j["group_sizes"] = group_sizes;
  return j.dump(2) + "\n";
}

inline void emit(std::ostream& out, const std::string& text, const std::string& path) {
  if (path.empty())
    out << text;
  else
    io::write_file_atomic(path, text);
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Collaboration-of-experts toolkit: transport solver, training and early-exit "
               "inference",
               "coe"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "Global seed (overrides config / spec seeds)");
  const bool verbose = std::getenv("COE_VERBOSE") != nullptr;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset as CSV");
  std::string gen_source = "synthetic:coe4-synth", gen_split = "train", gen_out;
  gen->add_option("--data", gen_source, "synthetic:<name> or a SyntheticSpec JSON file");
  gen->add_option("--split", gen_split, "train or val")->check(CLI::IsMember({"train", "val"}));
  gen->add_option("--out", gen_out, "Output CSV (stdout when omitted)");

  // train
  auto* tr = app.add_subcommand("train", "Train a bundle");
  std::string tr_config, tr_data, tr_val, tr_out;
  tr->add_option("--config", tr_config, "TrainConfig JSON")->required();
  tr->add_option("--data", tr_data, "Training data source")->required();
  tr->add_option("--val", tr_val, "Validation data source");
  tr->add_option("--out", tr_out, "Checkpoint directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a bundle at one threshold");
  std::string ev_bundle, ev_data, ev_split = "val", ev_out;
  double ev_tau = 1.0;
  ev->add_option("--bundle", ev_bundle)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--split", ev_split)->check(CLI::IsMember({"train", "val"}));
  ev->add_option("--tau", ev_tau)->check(CLI::Range(0.0, 1.0));
  ev->add_option("--out", ev_out, "Metrics JSON path (stdout when omitted)");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Accuracy/FLOPs curve over thresholds");
  std::string sw_bundle, sw_data, sw_split = "val", sw_out;
  std::vector<double> sw_taus;
  std::size_t sw_grid = 0;
  sw->add_option("--bundle", sw_bundle)->required();
  sw->add_option("--data", sw_data)->required();
  sw->add_option("--split", sw_split)->check(CLI::IsMember({"train", "val"}));
  auto* taus_opt = sw->add_option("--taus", sw_taus)->delimiter(',');
  sw->add_option("--tau-grid", sw_grid, "N evenly spaced thresholds in [0,1]")->excludes(taus_opt);
  sw->add_option("--out", sw_out);

  // report
  auto* rp = app.add_subcommand("report", "Expert-selection pattern reports");
  std::string rp_bundle, rp_data, rp_split = "val", rp_kind = "tcp", rp_binning = "uniform",
                                  rp_out;
  std::size_t rp_bins = 10;
  rp->add_option("--bundle", rp_bundle)->required();
  rp->add_option("--data", rp_data)->required();
  rp->add_option("--split", rp_split)->check(CLI::IsMember({"train", "val"}));
  rp->add_option("--kind", rp_kind)->check(CLI::IsMember({"tcp", "class"}));
  rp->add_option("--bins", rp_bins);
  rp->add_option("--binning", rp_binning)->check(CLI::IsMember({"uniform", "quantile"}));
  rp->add_option("--out", rp_out);

  // solve
  auto* so = app.add_subcommand("solve", "Solve a balanced transportation problem");
  std::string so_costs;
  std::vector<std::size_t> so_demands;
  so->add_option("costs", so_costs, "Cost matrix CSV (m rows, n columns, no header)")
      ->required();
  so->add_option("--demands", so_demands)->delimiter(',');

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the joint objective");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*gen) {
      const auto ds = load_source(gen_source, gen_split, seed);
      emit(out, data::to_csv(ds), gen_out);
    } else if (*tr) {
      auto cfg = train::parse_config(io::read_file(tr_config));
      if (seed) cfg.seed = *seed;
      const auto train_set = load_source(tr_data, "train");
      std::optional<data::Dataset> val;
      if (!tr_val.empty())
        val = load_source(tr_val, "val");
      else if (tr_data.rfind("synthetic:", 0) == 0 || tr_data.ends_with(".json"))
        val = load_source(tr_data, "val");
      if (verbose) err << "training " << models::to_string(cfg.mode) << " on " << train_set.size()
                       << " samples\n";
      const auto result = train::train(cfg, train_set, val ? &*val : nullptr);
      models::save_bundle(tr_out, result.bundle);
      const std::string jsonl = result.report.to_jsonl();
      io::write_file_atomic(std::filesystem::path(tr_out) / "report.jsonl", jsonl);
      nlohmann::json summary;
      summary["config"] = cfg;
      summary["epochs"] = result.report.epochs.size();
      summary["phase_completed"] = result.bundle.phase_completed;
      if (val) {
        summary["val_rough_accuracy"] = train::rough_accuracy(result.bundle.delegator, *val);
        if (result.bundle.mode == models::Mode::ensemble)
          summary["val_accuracy"] = infer::ensemble_evaluate(result.bundle, *val).accuracy;
        else
          summary["val_accuracy"] = train::routed_accuracy(result.bundle, *val);
      }
      const std::string summary_text = summary.dump(2) + "\n";
      io::write_file_atomic(std::filesystem::path(tr_out) / "summary.json", summary_text);
      out << jsonl << summary.dump() << "\n";
    } else if (*ev) {
      const auto bundle = models::load_bundle(ev_bundle);
      const auto ds = load_source(ev_data, ev_split);
      if (bundle.mode == models::Mode::ensemble) {
        emit(out, metrics_json(infer::ensemble_evaluate(bundle, ds), bundle, {}), ev_out);
      } else {
        const auto p = infer::predict(bundle, ds.features, ev_tau);
        emit(out, metrics_json(infer::summarize(p.trace, ds.labels, ev_tau), bundle, p.group_sizes),
             ev_out);
      }
    } else if (*sw) {
      const auto bundle = models::load_bundle(sw_bundle);
      const auto ds = load_source(sw_data, sw_split);
      std::vector<double> taus = sw_grid > 0 ? infer::tau_grid(sw_grid) : sw_taus;
      require(!taus.empty(), "sweep: give --taus or --tau-grid");
      emit(out, infer::curve_csv(infer::sweep_tau(bundle, ds, taus)), sw_out);
    } else if (*rp) {
      const auto bundle = models::load_bundle(rp_bundle);
      const auto ds = load_source(rp_data, rp_split);
      const std::size_t n = bundle.experts.size();
      if (rp_kind == "tcp") {
        const auto bins = infer::selection_vs_tcp_report(
            bundle, ds, rp_bins,
            rp_binning == "quantile" ? infer::Binning::quantile : infer::Binning::uniform);
        emit(out, infer::tcp_report_csv(bins, n), rp_out);
      } else {
        emit(out, infer::class_report_csv(infer::selection_vs_class_report(bundle, ds), n), rp_out);
      }
    } else if (*so) {
      const auto costs = parse_cost_csv(io::read_file(so_costs));
      const auto demands = so_demands.empty()
                               ? transport::balanced_demands(costs.rows(), costs.cols())
                               : transport::DemandVector(so_demands.begin(), so_demands.end());
      const auto a = transport::solve_btp(costs, demands);
      for (std::size_t k : a) out << k << '\n';
      out << "objective " << io::format_double(transport::assignment_objective(costs, a)) << '\n';
    } else if (*gc) {
      auto inst = verify::make_gradcheck_instance(seed.value_or(7));
      double worst = 0.0;
      for (auto path : {verify::GradPath::selector, verify::GradPath::experts,
                        verify::GradPath::combined}) {
        auto copy = inst;
        worst = std::max(worst, verify::joint_gradient_error(copy, path));
      }
      out << "max_relative_error " << io::format_double(worst) << '\n';
      return worst < kGradcheckThreshold ? 0 : 1;
    }
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "fatal: " << e.what() << '\n';
    return 3;
  }
  return 0;
}

}  // namespace coe::cli
