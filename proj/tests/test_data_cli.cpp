#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "coe/cli.hpp"
#include "coe/data.hpp"
#include "coe/io.hpp"
#include "coe/seed.hpp"

using namespace coe;

namespace {

const std::filesystem::path kFixtures = COE_TEST_FIXTURES;

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("coe_cli_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "coe");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

data::SyntheticSpec small_spec() {
  data::SyntheticSpec s;
  s.modes = 2;
  s.classes = 3;
  s.dim = 5;
  s.samples = 600;
  s.directions_per_class = 1;
  return s;
}

}  // namespace

TEST(Seed, KnownVectors) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(mix64(0), 0xe220a8397b1dcdafULL);
  EXPECT_EQ(sub_seed(5, "x"), mix64(5 ^ fnv1a("x")));
  EXPECT_NE(sub_seed(0, "expert/0"), sub_seed(0, "expert/1"));
}

TEST(Io, FormatDoubleRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 123456789.125, 0.0}) {
    const auto s = io::format_double(v);
    EXPECT_EQ(std::strtod(s.c_str(), nullptr), v) << s;
  }
  EXPECT_EQ(io::format_double(0.25), "0.25");
}

TEST(Io, AtomicWriteReplacesContent) {
  const auto dir = scratch("io");
  io::write_file_atomic(dir / "f.txt", "one");
  io::write_file_atomic(dir / "f.txt", "two");
  EXPECT_EQ(io::read_file(dir / "f.txt"), "two");
  EXPECT_EQ(std::distance(std::filesystem::directory_iterator(dir),
                          std::filesystem::directory_iterator{}),
            1);
  EXPECT_THROW(io::read_file(dir / "missing"), InvalidInput);
}

TEST(Synthetic, DeterministicAndSplitsDiffer) {
  const auto a = data::generate_synthetic(small_spec());
  const auto b = data::generate_synthetic(small_spec());
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  auto v = small_spec();
  v.split = "val";
  EXPECT_FALSE(data::generate_synthetic(v).features == a.features);
}

TEST(Synthetic, ClassesBalanced) {
  auto s = small_spec();
  s.samples = 10 * s.modes * s.classes * 5;
  const auto ds = data::generate_synthetic(s);
  std::vector<std::size_t> counts(s.classes, 0);
  for (auto y : ds.labels) ++counts[y];
  for (auto c : counts)
    EXPECT_NEAR(static_cast<double>(c) / ds.size(), 1.0 / s.classes, 0.01);
  ds.validate();
}

TEST(Synthetic, NearestCentroidRecoversModes) {
  auto s = small_spec();
  s.mode_separation = 40.0;
  const auto ds = data::generate_synthetic(s);
  const auto g = data::synthetic_geometry(s);
  for (std::size_t j = 0; j < ds.size(); ++j) {
    std::size_t best = 0;
    double bd = INFINITY;
    for (std::size_t i = 0; i < s.modes; ++i) {
      double d = 0.0;
      for (std::size_t c = 0; c < s.dim; ++c)
        d += std::pow(ds.features(j, c) - g.centers(i, c), 2);
      if (d < bd) {
        bd = d;
        best = i;
      }
    }
    EXPECT_EQ(best, ds.modes[j]);
  }
}

TEST(Synthetic, LabelsFollowPerModeRule) {
  const auto s = small_spec();
  const auto ds = data::generate_synthetic(s);
  const auto g = data::synthetic_geometry(s);
  for (std::size_t j = 0; j < ds.size(); ++j) {
    std::vector<double> z(s.dim);
    for (std::size_t c = 0; c < s.dim; ++c) z[c] = ds.features(j, c) - g.centers(ds.modes[j], c);
    EXPECT_EQ(data::synthetic_rule(g, ds.modes[j], z), ds.labels[j]);
  }
}

TEST(Synthetic, RejectsInvalidSpecs) {
  auto s = small_spec();
  s.samples = 5;
  EXPECT_THROW(data::generate_synthetic(s), InvalidInput);
  s = small_spec();
  s.modes = 0;
  EXPECT_THROW(data::generate_synthetic(s), InvalidInput);
  s = small_spec();
  s.noise_std = -1;
  EXPECT_THROW(data::generate_synthetic(s), InvalidInput);
  EXPECT_THROW(data::named_benchmark("imagenet", "train"), InvalidInput);
  EXPECT_THROW(data::named_benchmark("coe4-synth", "test"), InvalidInput);
}

TEST(Synthetic, NamedBenchmarkSizes) {
  EXPECT_EQ(data::named_benchmark("coe4-synth", "train").samples, 20000u);
  EXPECT_EQ(data::named_benchmark("coe4-synth", "val").samples, 4000u);
  const auto s = data::named_benchmark("coe4-synth", "train");
  EXPECT_EQ(s.modes, 4u);
  EXPECT_EQ(s.classes, 8u);
  EXPECT_EQ(s.dim, 32u);
}

TEST(Csv, FixtureFile) {
  const auto ds = data::load_csv(kFixtures / "tiny.csv");
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.dim(), 2u);
  EXPECT_EQ(ds.classes, 3u);
  EXPECT_EQ(ds.labels, (std::vector<std::size_t>{2, 0, 1}));
  EXPECT_DOUBLE_EQ(ds.features(2, 1), 0.4);
}

TEST(Csv, Errors) {
  EXPECT_THROW(data::parse_csv(""), InvalidInput);
  EXPECT_THROW(data::parse_csv("\n\n"), InvalidInput);
  try {
    data::parse_csv("1,0\n2,1\nx,0\n", "f.csv");
    FAIL();
  } catch (const InvalidInput& e) {
    EXPECT_NE(std::string(e.what()).find("f.csv:3"), std::string::npos);
  }
  EXPECT_THROW(data::parse_csv("1,2,0\n1,1\n"), InvalidInput);
  EXPECT_THROW(data::parse_csv("1,0\n2,2\n"), InvalidInput);  // class 1 missing
  EXPECT_THROW(data::parse_csv("1,-1\n"), InvalidInput);
  EXPECT_THROW(data::parse_csv("1,0.5\n"), InvalidInput);
  EXPECT_THROW(data::load_csv(kFixtures / "nope.csv"), InvalidInput);
}

TEST(Csv, SaveLoadIsIdentity) {
  const auto ds = data::generate_synthetic(small_spec());
  const auto dir = scratch("csv");
  data::save_csv(dir / "d.csv", ds);
  const auto back = data::load_csv(dir / "d.csv");
  EXPECT_EQ(back.features, ds.features);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.classes, ds.classes);
}

TEST(Cli, VersionHelpAndErrors) {
  auto r = run_cli({"--version"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find(cli::kVersion), std::string::npos);
  r = run_cli({"--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* sub : {"gen-data", "train", "eval", "sweep", "report", "solve", "gradcheck"})
    EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
  EXPECT_NE(run_cli({"frobnicate"}).code, 0);
  EXPECT_NE(run_cli({"gradcheck", "--bogus"}).code, 0);
  EXPECT_NE(run_cli({}).code, 0);
  r = run_cli({"eval", "--bundle", "/nonexistent", "--data", "synthetic:coe4-synth-small"});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("error"), std::string::npos);
}

TEST(Cli, SolveFixture) {
  const auto r = run_cli({"solve", (kFixtures / "costs.csv").string()});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "0\n1\n0\n1\nobjective 1.25\n");
  const auto d = run_cli({"solve", (kFixtures / "costs.csv").string(), "--demands", "3,1"});
  EXPECT_EQ(d.code, 0);
  EXPECT_EQ(d.out.substr(0, 8), "0\n1\n0\n0\n");
  EXPECT_NE(run_cli({"solve", (kFixtures / "costs.csv").string(), "--demands", "3,3"}).code, 0);
}

TEST(Cli, GradcheckPasses) {
  const auto r = run_cli({"gradcheck"});
  EXPECT_EQ(r.code, 0);
  ASSERT_EQ(r.out.rfind("max_relative_error ", 0), 0u);
  EXPECT_LT(std::stod(r.out.substr(19)), 1e-4);
}

TEST(Cli, GenDataIsDeterministicAndSeeded) {
  const auto dir = scratch("gen");
  io::write_file_atomic(dir / "spec.json", nlohmann::json(small_spec()).dump());
  const auto spec = (dir / "spec.json").string();
  const auto a = run_cli({"gen-data", "--data", spec});
  const auto b = run_cli({"gen-data", "--data", spec});
  ASSERT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(a.out, data::to_csv(data::generate_synthetic(small_spec())));
  EXPECT_NE(run_cli({"--seed", "9", "gen-data", "--data", spec}).out, a.out);
  ASSERT_EQ(run_cli({"gen-data", "--data", spec, "--out", (dir / "d.csv").string()}).code, 0);
  EXPECT_EQ(io::read_file(dir / "d.csv"), a.out);
}

TEST(Cli, TrainEvalSweepReport) {
  const auto dir = scratch("pipeline");
  io::write_file_atomic(dir / "spec.json", nlohmann::json(small_spec()).dump());
  io::write_file_atomic(dir / "config.json", R"({"n_experts": 2, "epochs_phase1": 2,
      "epochs_phase2": 2, "batch_size": 30, "feat_dim": 8, "selector_hidden": 12,
      "expert_hidden": [8]})");
  const auto spec = (dir / "spec.json").string();
  const auto bundle = (dir / "bundle").string();
  const auto t = run_cli({"train", "--config", (dir / "config.json").string(), "--data", spec,
                      "--out", bundle});
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "bundle" / "report.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(dir / "bundle" / "summary.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "bundle" / "expert_1.ckpt"));
  std::istringstream lines(t.out);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    EXPECT_TRUE(nlohmann::json::accept(line));
    ++n;
  }
  EXPECT_EQ(n, 5u);  // 4 epochs and the summary

  const auto e = run_cli({"eval", "--bundle", bundle, "--data", spec, "--tau", "1"});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto m = nlohmann::json::parse(e.out);
  EXPECT_EQ(m["exit_fraction"], 0.0);
  EXPECT_EQ(m["mean_flops"].get<double>(),
            m["flops_delegator"].get<double>() + m["flops_experts"][0].get<double>());

  const auto s = run_cli({"sweep", "--bundle", bundle, "--data", spec, "--tau-grid", "5"});
  ASSERT_EQ(s.code, 0) << s.err;
  EXPECT_EQ(std::count(s.out.begin(), s.out.end(), '\n'), 6);
  EXPECT_EQ(s.out.rfind("tau,mean_flops,accuracy,exit_fraction\n", 0), 0u);
  const auto s2 = run_cli({"sweep", "--bundle", bundle, "--data", spec, "--taus", "0,0.5,1"});
  EXPECT_EQ(std::count(s2.out.begin(), s2.out.end(), '\n'), 4);

  const auto rt = run_cli({"report", "--bundle", bundle, "--data", spec, "--kind", "tcp", "--bins", "4"});
  ASSERT_EQ(rt.code, 0) << rt.err;
  EXPECT_EQ(std::count(rt.out.begin(), rt.out.end(), '\n'), 5);
  const auto rc = run_cli({"report", "--bundle", bundle, "--data", spec, "--kind", "class"});
  ASSERT_EQ(rc.code, 0) << rc.err;
  EXPECT_EQ(rc.out.rfind("class,count,expert_0,expert_1\n", 0), 0u);
  EXPECT_NE(run_cli({"report", "--bundle", bundle, "--data", spec, "--kind", "pie"}).code, 0);
}

TEST(Cli, TrainRejectsBadConfig) {
  const auto dir = scratch("badcfg");
  io::write_file_atomic(dir / "config.json", R"({"eta": -2})");
  const auto r = run_cli({"train", "--config", (dir / "config.json").string(), "--data",
                      (kFixtures / "tiny.csv").string(), "--out", (dir / "b").string()});
  EXPECT_EQ(r.code, 2);
}
