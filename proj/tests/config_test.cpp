#include <gtest/gtest.h>

#include "v2m/bench.hpp"
#include "v2m/config.hpp"
#include "v2m/suites.hpp"

namespace v2m {
namespace {

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

TEST(RunConfigText, AppliesKeysCommentsAndWhitespace) {
  RunConfig c;
  apply_config_text(c,
                    "# tiny run\n"
                    "\n"
                    "dim = 8\n"
                    "  depth=2  \n"
                    "cls_scheme = edge\n"
                    "directions = LR, UL\n"
                    "pipelines = v\n"
                    "lr = 0.01\n"
                    "hflip = true\n"
                    "precision = f64\n",
                    "test");
  EXPECT_EQ(c.model.dim, 8u);
  EXPECT_EQ(c.model.depth, 2u);
  EXPECT_EQ(c.model.scheme, ClassTokenScheme::edge_cross);
  EXPECT_EQ(c.model.rotations, (std::vector<int>{0, 2}));
  EXPECT_FALSE(c.model.pipelines.horizontal);
  EXPECT_TRUE(c.model.pipelines.vertical);
  EXPECT_DOUBLE_EQ(c.train.lr, 0.01);
  EXPECT_TRUE(c.train.hflip);
  EXPECT_EQ(c.precision, Precision::f64);
}

TEST(RunConfigText, UnknownKeyIsConfigErrorNamingTheKeyAndLine) {
  RunConfig c;
  try {
    apply_config_text(c, "dim = 8\nlearning_rate = 1\n", "run.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos) << e.what();
  }
}

TEST(RunConfigText, MalformedInputIsConfigError) {
  RunConfig c;
  EXPECT_THROW(apply_config_text(c, "dim 8\n", "t"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "dim = eight\n", "t"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "dim = 8x\n", "t"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "dim = 8\ndim = 9\n", "t"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "hflip = maybe\n", "t"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "precision = f16\n", "t"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "directions = UL,UL\n", "t"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "directions = UL,XY\n", "t"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "pipelines = d\n", "t"), ConfigError);
  EXPECT_THROW(apply_config_text(c, "cls_scheme = corner\n", "t"), ConfigError);
}

TEST(RunConfigText, EchoRoundTripsEveryKey) {
  RunConfig c;
  apply_config_text(c, "dim = 12\nlr = 0.1\nnoise_std = 0.3\ndirections = UR\nseed = 18446744073709551615\n", "t");
  const std::string echo = config_echo(c);
  RunConfig again;
  apply_config_text(again, echo, "echo");
  EXPECT_EQ(config_echo(again), echo);
  EXPECT_EQ(again.seed, 18446744073709551615ull);
  EXPECT_DOUBLE_EQ(again.task.noise_std, 0.3);
  EXPECT_EQ(std::count(echo.begin(), echo.end(), '\n'), static_cast<std::ptrdiff_t>(config_keys().size()));
}

TEST(RunConfigText, LaterValuesOverrideEarlierOnes) {
  RunConfig c;
  apply_config_text(c, "dim = 8\n", "file");
  set_config_value(c, "dim", "16");
  EXPECT_EQ(c.model.dim, 16u);
  EXPECT_THROW(set_config_value(c, "nope", "1"), ConfigError);
}

TEST(RunConfigValidation, CrossFieldChecks) {
  RunConfig ok;
  EXPECT_NO_THROW(validate_run_config(ok));
  EXPECT_EQ(ok.task.side, ok.model.image);

  RunConfig bad_patch;
  bad_patch.model.patch = 5;
  EXPECT_THROW(validate_run_config(bad_patch), ConfigError);

  RunConfig bad_classes;
  bad_classes.model.classes = 10;
  EXPECT_THROW(validate_run_config(bad_classes), ConfigError);

  RunConfig bad_blob;
  bad_blob.task.blob = 9;
  EXPECT_THROW(validate_run_config(bad_blob), ConfigError);

  RunConfig bad_suite;
  bad_suite.suite = "everything";
  EXPECT_THROW(validate_run_config(bad_suite), ConfigError);

  RunConfig idx_classes;
  idx_classes.data = DataSource::idx;
  idx_classes.model.classes = 10;
  EXPECT_NO_THROW(validate_run_config(idx_classes));
}

TEST(RunConfigValidation, ZeroWorkersMeansHardwareThreads) {
  RunConfig c;
  c.train.policy.workers = 0;
  validate_run_config(c);
  EXPECT_EQ(c.train.policy.workers, hardware_workers());
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

SuiteOptions quick_options() {
  SuiteOptions o;
  o.scan_configs = 30;
  o.roesser_instances = 5;
  o.equivariance_inputs = 5;
  return o;
}

TEST(Suites, PassOnCorrectImplementation) {
  for (const auto& name : {"scan", "roesser", "equivariance", "roundtrip"}) {
    const SuiteResult r = run_suite(name, quick_options());
    EXPECT_TRUE(r.passed) << name << ": " << r.detail;
    EXPECT_EQ(r.name, name);
  }
}

TEST(Suites, ScanSuiteCatchesACorruptedTreeScan) {
  hooks::flip_parallel_sign.store(true);
  const SuiteResult r = run_suite("scan", quick_options());
  hooks::flip_parallel_sign.store(false);
  EXPECT_FALSE(r.passed) << r.detail;
}

TEST(Suites, UnknownSuiteIsConfigError) { EXPECT_THROW(run_suite("speed", quick_options()), ConfigError); }

// ---------------------------------------------------------------------------
// Bench
// ---------------------------------------------------------------------------

TEST(Bench, TwoRowsPerCellWithPassingGates) {
  BenchConfig b;
  b.lengths = {8, 64};
  b.workers = {1, 2};
  b.repeats = 2;
  const BenchReport r = run_bench(b);
  ASSERT_EQ(r.rows.size(), 8u);
  EXPECT_TRUE(r.all_gates_passed());
  EXPECT_EQ(r.rows[0].impl, "sequential");
  EXPECT_EQ(r.rows[1].impl, "parallel");
  EXPECT_EQ(r.rows[3].workers, 2u);
  EXPECT_EQ(r.rows[7].length, 64u);
  for (const auto& row : r.rows) EXPECT_GE(row.mean_ms, 0.0);
}

TEST(Bench, CsvLayout) {
  BenchReport r;
  r.rows.push_back({256, 4, "parallel", 1.5, 0.25, 0.0, true});
  r.rows.push_back({512, 1, "sequential", 0.0, 0.0, 1.0, false});
  EXPECT_EQ(bench_csv(r),
            "L,workers,impl,mean_ms,stddev_ms\n"
            "256,4,parallel,1.5000,0.2500\n"
            "512,1,sequential,gate_failed,gate_failed\n");
  EXPECT_FALSE(r.all_gates_passed());
}

TEST(Bench, CorruptedTreeScanFailsTheGate) {
  BenchConfig b;
  b.lengths = {64};
  b.workers = {1};
  b.repeats = 1;
  hooks::flip_parallel_sign.store(true);
  const BenchReport r = run_bench(b);
  hooks::flip_parallel_sign.store(false);
  EXPECT_FALSE(r.all_gates_passed());
  EXPECT_NE(bench_csv(r).find("gate_failed"), std::string::npos);
}

}  // namespace
}  // namespace v2m
