// v2m command-line tool: check | bench | train | eval.
//
// Exit codes: 0 success, 1 a suite, gate or evaluation failed, 2 usage or
// configuration error (detected before any computation).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "v2m/bench.hpp"
#include "v2m/config.hpp"
#include "v2m/suites.hpp"
#include "v2m/train.hpp"

namespace {

using namespace v2m;

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

/// Flags shared by every subcommand; each maps onto a config key.
struct CommonFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
};

void add_common_flags(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "key = value configuration file");
  auto opt = [&](const char* flag, const char* key, const char* help) {
    cmd->add_option_function<std::string>(flag, [&flags, key](const std::string& v) { flags.values[key] = v; }, help);
  };
  opt("--seed", "seed", "seed for initialization, data and shuffles");
  opt("--out", "out", "output directory");
  opt("--precision", "precision", "f32 or f64");
  opt("--workers", "workers", "worker threads (0 = all hardware threads)");
}

void add_model_flags(CLI::App* cmd, CommonFlags& flags) {
  auto opt = [&](const char* flag, const char* key, const char* help) {
    cmd->add_option_function<std::string>(flag, [&flags, key](const std::string& v) { flags.values[key] = v; }, help);
  };
  opt("--data", "data", "synthetic or idx");
  opt("--images", "images", "IDX image file");
  opt("--labels", "labels", "IDX label file");
  opt("--directions", "directions", "scan corners, e.g. UL,UR,LR,LL");
  opt("--pipelines", "pipelines", "2D pipelines: h, v or h,v");
  opt("--cls-scheme", "cls_scheme", "mean, edge or center");
  opt("--scan", "scan", "sequential or parallel");
}

/// Defaults, then the config file, then flags; validated before returning.
RunConfig resolve_config(const CommonFlags& flags) {
  RunConfig cfg;
  if (!flags.config_path.empty()) apply_config_file(cfg, flags.config_path);
  for (const auto& [key, value] : flags.values) {
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("command line: ") + e.what());
    }
  }
  validate_run_config(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// data

template <std::floating_point T>
struct Splits {
  Dataset<T> train;
  Dataset<T> test;
};

template <std::floating_point T>
void check_dataset_fits(const Dataset<T>& d, const ModelConfig& c, const std::string& what) {
  if (d.size() == 0) throw ConfigError(what + " is empty");
  if (d.side() != c.image || d.images.dim(2) != c.image) {
    throw ConfigError(what + " has " + std::to_string(d.side()) + "x" + std::to_string(d.images.dim(2)) +
                      " images but image = " + std::to_string(c.image));
  }
  if (d.channels() != c.in_channels) throw ConfigError(what + " channel count does not match the model");
  for (int y : d.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c.classes) {
      throw ConfigError(what + " has label " + std::to_string(y) + " but classes = " + std::to_string(c.classes));
    }
  }
}

template <std::floating_point T>
Dataset<T> load_idx_checked(const std::string& images, const std::string& labels, const std::string& what) {
  if (images.empty() || labels.empty()) throw ConfigError("data = idx needs both images and labels for the " + what);
  try {
    return load_idx<T>(images, labels);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

/// Training and held-out sets. Synthetic data uses stream 1 for training and
/// stream 2 for the held-out split; an IDX set without test files holds out
/// its last `holdout_fraction` of samples.
template <std::floating_point T>
Splits<T> training_data(const RunConfig& cfg) {
  Splits<T> s;
  if (cfg.data == DataSource::synthetic) {
    s.train = generate_locality_dataset<T>(cfg.task, cfg.task.train, 1);
    s.test = generate_locality_dataset<T>(cfg.task, cfg.task.test, 2);
  } else {
    const auto all = load_idx_checked<T>(cfg.images, cfg.labels, "training set");
    if (!cfg.test_images.empty() || !cfg.test_labels.empty()) {
      s.train = all;
      s.test = load_idx_checked<T>(cfg.test_images, cfg.test_labels, "held-out set");
    } else {
      const auto held = static_cast<std::size_t>(static_cast<double>(all.size()) * cfg.holdout_fraction);
      if (held == 0 || held >= all.size()) throw ConfigError("IDX set too small to hold out a test split");
      s.train = all.slice(0, all.size() - held);
      s.test = all.slice(all.size() - held, all.size());
    }
  }
  check_dataset_fits(s.train, cfg.model, "training set");
  check_dataset_fits(s.test, cfg.model, "held-out set");
  return s;
}

/// Evaluation set: the synthetic held-out split, or the whole IDX file.
template <std::floating_point T>
Dataset<T> evaluation_data(const RunConfig& cfg) {
  Dataset<T> d = cfg.data == DataSource::synthetic ? generate_locality_dataset<T>(cfg.task, cfg.task.test, 2)
                                                    : load_idx_checked<T>(cfg.images, cfg.labels, "evaluation set");
  check_dataset_fits(d, cfg.model, "evaluation set");
  return d;
}

// ---------------------------------------------------------------------------
// subcommands

int run_check(const RunConfig& cfg, bool fault) {
  hooks::flip_parallel_sign.store(fault);
  SuiteOptions opt;
  opt.seed = cfg.seed;
  std::vector<std::string> names = cfg.suite == "all" ? suite_names() : std::vector<std::string>{cfg.suite};
  bool ok = true;
  for (const auto& name : names) {
    const SuiteResult r = run_suite(name, opt);
    std::printf("%s %-12s %8.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
    std::fflush(stdout);
    ok = ok && r.passed;
  }
  return ok ? 0 : kExitFailure;
}

int run_bench_cmd(const RunConfig& cfg) {
  BenchConfig bc;
  bc.seed = cfg.seed;
  bc.repeats = cfg.bench_repeats;
  const BenchReport report = run_bench(bc);
  const std::string csv = bench_csv(report);
  std::cout << csv;
  if (!cfg.out.empty()) {
    std::filesystem::create_directories(cfg.out);
    write_text(std::filesystem::path(cfg.out) / "bench.csv", csv);
  }
  if (!report.all_gates_passed()) {
    std::cerr << "bench: sequential and parallel scans disagree; timings withheld\n";
    return kExitFailure;
  }
  return 0;
}

template <std::floating_point T>
int run_train(const RunConfig& cfg) {
  const Splits<T> data = training_data<T>(cfg);
  const std::filesystem::path out(cfg.out);
  std::filesystem::create_directories(out);
  write_text(out / "config.txt", config_echo(cfg));
  const ParamMap<T> init = init_model<T>(cfg.model, cfg.seed);
  std::printf("training %zu parameters on %zu samples (%zu held out)\n", count_parameters(init), data.train.size(),
              data.test.size());
  const auto result = train_loop(cfg.model, cfg.train, init, data.train, data.test, out, [](const EpochMetrics& m) {
    std::printf("epoch %3zu  train loss %.4f acc %.4f  test loss %.4f acc %.4f\n", m.epoch, m.train_loss,
                m.train_accuracy, m.test_loss, m.test_accuracy);
    std::fflush(stdout);
  });
  std::printf("best held-out accuracy %.4f at epoch %zu; wrote %s\n", result.best_accuracy, result.best_epoch,
              out.string().c_str());
  return 0;
}

/// Names every model setting where the checkpoint and the configuration disagree.
void check_checkpoint_config(const RunConfig& cfg, const ModelConfig& stored) {
  RunConfig theirs = cfg;
  theirs.model = stored;
  std::string diff;
  for (const auto& k : config_keys()) {
    const std::string a = k.get(cfg), b = k.get(theirs);
    if (a != b) diff += " " + k.name + " (config " + a + ", checkpoint " + b + ")";
  }
  if (!diff.empty()) throw ConfigError("checkpoint was trained with different settings:" + diff);
}

template <std::floating_point T>
int run_eval(const RunConfig& cfg) {
  const std::string path =
      cfg.checkpoint.empty() ? (std::filesystem::path(cfg.out) / "checkpoint.v2m").string() : cfg.checkpoint;
  Checkpoint ck;
  try {
    ck = load_checkpoint(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  const ParamMap<T> params = checkpoint_params<T>(ck, cfg.model);
  check_checkpoint_config(cfg, checkpoint_model_config(ck));
  const Dataset<T> data = evaluation_data<T>(cfg);
  const EvalResult r = evaluate(cfg.model, params, data, cfg.train.policy);

  std::printf("accuracy %.4f (%zu/%zu), loss %.6f\n", r.accuracy, r.correct, r.total, r.loss);
  std::printf("confusion (rows: true class, columns: predicted class)\n");
  std::string csv = "true,predicted,count\n";
  for (std::size_t t = 0; t < r.classes; ++t) {
    std::printf("  %3zu:", t);
    for (std::size_t p = 0; p < r.classes; ++p) {
      const std::size_t n = r.confusion[t * r.classes + p];
      std::printf(" %6zu", n);
      csv += std::to_string(t) + "," + std::to_string(p) + "," + std::to_string(n) + "\n";
    }
    std::printf("\n");
  }
  const std::filesystem::path out(cfg.out);
  std::filesystem::create_directories(out);
  write_text(out / "confusion.csv", csv);
  write_text(out / "eval.csv", "accuracy,loss,correct,total\n" + format_double(r.accuracy) + "," +
                                   format_double(r.loss) + "," + std::to_string(r.correct) + "," +
                                   std::to_string(r.total) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"v2m: 2D selective state-space vision model"};
  app.require_subcommand(1);
  CommonFlags check_flags, bench_flags, train_flags, eval_flags;
  bool fault = false;

  auto* check = app.add_subcommand("check", "run the property suites");
  add_common_flags(check, check_flags);
  check->add_option_function<std::string>(
      "--suite", [&](const std::string& v) { check_flags.values["suite"] = v; },
      "all, scan, roesser, grad, equivariance or roundtrip");
  // Deliberately corrupts the tree scan so the suites can be shown to catch it.
  check->add_flag("--inject-scan-fault", fault)->group("");

  auto* bench = app.add_subcommand("bench", "time sequential against parallel scans");
  add_common_flags(bench, bench_flags);
  bench->add_option_function<std::string>(
      "--repeats", [&](const std::string& v) { bench_flags.values["bench_repeats"] = v; }, "timed runs per cell");

  auto* train = app.add_subcommand("train", "train a model, writing metrics.csv, checkpoint.v2m and config.txt");
  add_common_flags(train, train_flags);
  add_model_flags(train, train_flags);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint, writing eval.csv and confusion.csv");
  add_common_flags(eval, eval_flags);
  add_model_flags(eval, eval_flags);
  eval->add_option_function<std::string>(
      "--checkpoint", [&](const std::string& v) { eval_flags.values["checkpoint"] = v; },
      "checkpoint file (default <out>/checkpoint.v2m)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (check->parsed()) return run_check(resolve_config(check_flags), fault);
    if (bench->parsed()) return run_bench_cmd(resolve_config(bench_flags));
    if (train->parsed()) {
      const RunConfig cfg = resolve_config(train_flags);
      return cfg.precision == Precision::f32 ? run_train<float>(cfg) : run_train<double>(cfg);
    }
    if (eval->parsed()) {
      const RunConfig cfg = resolve_config(eval_flags);
      return cfg.precision == Precision::f32 ? run_eval<float>(cfg) : run_eval<double>(cfg);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
