#pragma once

// Run configuration: a plain-text document of `key = value` lines. Blank
// lines and lines starting with '#' are ignored. Every key has a default;
// unknown keys, repeated keys and malformed values are ConfigErrors. Command
// line flags are applied after the file, so they take precedence.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "v2m/data.hpp"
#include "v2m/directions.hpp"
#include "v2m/model.hpp"
#include "v2m/suites.hpp"
#include "v2m/train.hpp"

namespace v2m {

enum class DataSource { synthetic, idx };
enum class Precision { f32, f64 };

struct RunConfig {
  ModelConfig model;
  LocalityTaskSpec task;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::string out = "v2m_out";
  Precision precision = Precision::f32;
  DataSource data = DataSource::synthetic;
  std::string images, labels;            // IDX training (or evaluation) files
  std::string test_images, test_labels;  // optional IDX held-out files
  double holdout_fraction = 0.2;         // held-out share of an IDX set without test files
  std::string checkpoint;                // eval input; empty means <out>/checkpoint.v2m
  std::string suite = "all";
  std::size_t bench_repeats = 5;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("key '" + key + "': cannot parse '" + v + "' as a number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

inline std::string format_number(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

/// "UL,UR" -> sorted rotation indices {0, 1}.
inline std::vector<int> parse_directions(const std::string& v) {
  std::vector<int> rot;
  for (const auto& item : detail::split_list(v)) {
    const int r = rotation_of(parse_corner(item));
    if (std::find(rot.begin(), rot.end(), r) != rot.end()) throw ConfigError("direction '" + item + "' listed twice");
    rot.push_back(r);
  }
  if (rot.empty()) throw ConfigError("direction list is empty");
  std::sort(rot.begin(), rot.end());
  return rot;
}

inline std::string directions_string(const std::vector<int>& rotations) {
  std::string out;
  for (int r : rotations) out += std::string(out.empty() ? "" : ",") + corner_name(static_cast<Corner>(r));
  return out;
}

/// "h,v" / "horizontal" / "vertical".
inline PipelineMask parse_pipelines(const std::string& v) {
  PipelineMask m{false, false};
  for (const auto& item : detail::split_list(v)) {
    if (item == "h" || item == "horizontal") {
      m.horizontal = true;
    } else if (item == "v" || item == "vertical") {
      m.vertical = true;
    } else {
      throw ConfigError("unknown pipeline '" + item + "' (expected h or v)");
    }
  }
  if (!m.horizontal && !m.vertical) throw ConfigError("pipeline list is empty");
  return m;
}

inline std::string pipelines_string(const PipelineMask& m) {
  if (m.horizontal && m.vertical) return "h,v";
  return m.horizontal ? "h" : "v";
}

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
  using detail::format_number;
  using detail::parse_bool;
  using detail::parse_number;
  auto size_key = [](std::string name, std::string help, auto member) {
    return ConfigKey{name, std::move(help),
                     [name, member](RunConfig& c, const std::string& v) { member(c) = parse_number<std::size_t>(name, v); },
                     [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
  };
  auto real_key = [](std::string name, std::string help, auto member) {
    return ConfigKey{name, std::move(help),
                     [name, member](RunConfig& c, const std::string& v) { member(c) = parse_number<double>(name, v); },
                     [member](const RunConfig& c) { return format_number(member(const_cast<RunConfig&>(c))); }};
  };
  auto text_key = [](std::string name, std::string help, auto member) {
    return ConfigKey{name, std::move(help), [member](RunConfig& c, const std::string& v) { member(c) = v; },
                     [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); }};
  };
  static const std::vector<ConfigKey> keys{
      ConfigKey{"seed", "seed for initialization, data generation, shuffles and flips",
                [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); },
                [](const RunConfig& c) { return std::to_string(c.seed); }},
      text_key("out", "output directory", [](RunConfig& c) -> std::string& { return c.out; }),
      ConfigKey{"precision", "f32 or f64",
                [](RunConfig& c, const std::string& v) {
                  if (v == "f32") {
                    c.precision = Precision::f32;
                  } else if (v == "f64") {
                    c.precision = Precision::f64;
                  } else {
                    throw ConfigError("precision must be f32 or f64, got '" + v + "'");
                  }
                },
                [](const RunConfig& c) { return std::string(c.precision == Precision::f32 ? "f32" : "f64"); }},
      ConfigKey{"data", "synthetic (locality task) or idx",
                [](RunConfig& c, const std::string& v) {
                  if (v == "synthetic") {
                    c.data = DataSource::synthetic;
                  } else if (v == "idx") {
                    c.data = DataSource::idx;
                  } else {
                    throw ConfigError("data must be synthetic or idx, got '" + v + "'");
                  }
                },
                [](const RunConfig& c) { return std::string(c.data == DataSource::synthetic ? "synthetic" : "idx"); }},
      text_key("images", "IDX image file (training set for train, evaluation set for eval)",
               [](RunConfig& c) -> std::string& { return c.images; }),
      text_key("labels", "IDX label file matching `images`", [](RunConfig& c) -> std::string& { return c.labels; }),
      text_key("test_images", "optional IDX held-out image file for train",
               [](RunConfig& c) -> std::string& { return c.test_images; }),
      text_key("test_labels", "optional IDX held-out label file for train",
               [](RunConfig& c) -> std::string& { return c.test_labels; }),
      real_key("holdout_fraction", "held-out share of an IDX training set when no test files are given",
               [](RunConfig& c) -> double& { return c.holdout_fraction; }),
      text_key("checkpoint", "checkpoint read by eval (default <out>/checkpoint.v2m)",
               [](RunConfig& c) -> std::string& { return c.checkpoint; }),
      text_key("suite", "check suite: all, scan, roesser, grad, equivariance or roundtrip",
               [](RunConfig& c) -> std::string& { return c.suite; }),
      size_key("bench_repeats", "timed repetitions per bench cell",
               [](RunConfig& c) -> std::size_t& { return c.bench_repeats; }),
      // model
      size_key("image", "input side in pixels (square)",
               [](RunConfig& c) -> std::size_t& { return c.model.image; }),
      size_key("patch", "patch side in pixels", [](RunConfig& c) -> std::size_t& { return c.model.patch; }),
      size_key("dim", "token width D", [](RunConfig& c) -> std::size_t& { return c.model.dim; }),
      size_key("state", "state size N", [](RunConfig& c) -> std::size_t& { return c.model.state; }),
      size_key("depth", "number of blocks K", [](RunConfig& c) -> std::size_t& { return c.model.depth; }),
      size_key("mlp_ratio", "MLP hidden width as a multiple of D",
               [](RunConfig& c) -> std::size_t& { return c.model.mlp_ratio; }),
      size_key("classes", "number of classes", [](RunConfig& c) -> std::size_t& { return c.model.classes; }),
      ConfigKey{"cls_scheme", "mean, edge or center",
                [](RunConfig& c, const std::string& v) { c.model.scheme = parse_cls_scheme(v); },
                [](const RunConfig& c) { return std::string(cls_scheme_name(c.model.scheme)); }},
      ConfigKey{"directions", "scan corners, a subset of UL,UR,LR,LL",
                [](RunConfig& c, const std::string& v) { c.model.rotations = parse_directions(v); },
                [](const RunConfig& c) { return directions_string(c.model.rotations); }},
      ConfigKey{"pipelines", "2D scan pipelines, a subset of h (rows then columns), v (columns then rows)",
                [](RunConfig& c, const std::string& v) { c.model.pipelines = parse_pipelines(v); },
                [](const RunConfig& c) { return pipelines_string(c.model.pipelines); }},
      real_key("norm_eps", "layer-norm epsilon", [](RunConfig& c) -> double& { return c.model.norm_eps; }),
      // synthetic task
      size_key("blob", "locality task: blob side in pixels",
               [](RunConfig& c) -> std::size_t& { return c.task.blob; }),
      real_key("noise_std", "locality task: background noise std",
               [](RunConfig& c) -> double& { return c.task.noise_std; }),
      size_key("train_samples", "locality task: training samples",
               [](RunConfig& c) -> std::size_t& { return c.task.train; }),
      size_key("test_samples", "locality task: held-out samples",
               [](RunConfig& c) -> std::size_t& { return c.task.test; }),
      // optimization
      size_key("epochs", "training epochs", [](RunConfig& c) -> std::size_t& { return c.train.epochs; }),
      size_key("batch", "minibatch size", [](RunConfig& c) -> std::size_t& { return c.train.batch; }),
      real_key("lr", "peak learning rate", [](RunConfig& c) -> double& { return c.train.lr; }),
      size_key("warmup_epochs", "linear warmup length in epochs",
               [](RunConfig& c) -> std::size_t& { return c.train.warmup_epochs; }),
      real_key("weight_decay", "AdamW decoupled weight decay",
               [](RunConfig& c) -> double& { return c.train.adamw.weight_decay; }),
      real_key("beta1", "AdamW first-moment decay", [](RunConfig& c) -> double& { return c.train.adamw.beta1; }),
      real_key("beta2", "AdamW second-moment decay", [](RunConfig& c) -> double& { return c.train.adamw.beta2; }),
      real_key("adam_eps", "AdamW epsilon", [](RunConfig& c) -> double& { return c.train.adamw.eps; }),
      ConfigKey{"hflip", "random horizontal flips during training (true/false)",
                [](RunConfig& c, const std::string& v) { c.train.hflip = parse_bool("hflip", v); },
                [](const RunConfig& c) { return std::string(c.train.hflip ? "true" : "false"); }},
      real_key("stop_accuracy", "stop after the first epoch reaching this held-out accuracy (> 1 never stops)",
               [](RunConfig& c) -> double& { return c.train.target_accuracy; }),
      // execution
      size_key("workers", "worker threads (0 = all hardware threads)",
               [](RunConfig& c) -> std::size_t& { return c.train.policy.workers; }),
      ConfigKey{"scan", "scan implementation: sequential or parallel",
                [](RunConfig& c, const std::string& v) {
                  if (v == "sequential") {
                    c.train.policy.scan = ScanImpl::sequential;
                  } else if (v == "parallel") {
                    c.train.policy.scan = ScanImpl::parallel;
                  } else {
                    throw ConfigError("scan must be sequential or parallel, got '" + v + "'");
                  }
                },
                [](const RunConfig& c) {
                  return std::string(c.train.policy.scan == ScanImpl::sequential ? "sequential" : "parallel");
                }},
  };
  return keys;
}

inline const ConfigKey* find_config_key(const std::string& name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  const ConfigKey* k = find_config_key(key);
  if (!k) throw ConfigError("unknown config key '" + key + "'");
  k->set(c, detail::trim(value));
}

/// Applies every `key = value` line of `text` to `c`.
inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> seen;
  for (std::size_t number = 1; std::getline(in, line); ++number) {
    const std::string body = detail::trim(line);
    if (body.empty() || body[0] == '#') continue;
    const auto eq = body.find('=');
    const std::string where = origin + ":" + std::to_string(number) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + body + "'");
    const std::string key = detail::trim(body.substr(0, eq));
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) throw ConfigError(where + "key '" + key + "' repeated");
    seen.push_back(key);
    try {
      set_config_value(c, key, body.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& c, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  apply_config_text(c, text.str(), path);
}

/// Every key with its current value, one per line; readable by apply_config_text.
inline std::string config_echo(const RunConfig& c) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(c) + "\n";
  return out;
}

/// Cross-field checks run before any computation.
inline void validate_run_config(RunConfig& c) {
  c.task.side = c.model.image;
  c.task.seed = c.seed;
  c.train.seed = c.seed;
  c.model.validate();
  if (c.train.batch == 0) throw ConfigError("batch must be positive");
  if (c.train.policy.workers == 0) c.train.policy.workers = hardware_workers();
  if (!(c.holdout_fraction > 0.0 && c.holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must be in (0, 1)");
  if (c.data == DataSource::synthetic) {
    if (c.model.classes != 4) throw ConfigError("the locality task has 4 classes; set classes = 4");
    if (c.model.in_channels != 1) throw ConfigError("the locality task has 1 channel");
    c.task.validate();
  }
  const auto suites = suite_names();
  if (c.suite != "all" && std::find(suites.begin(), suites.end(), c.suite) == suites.end()) {
    throw ConfigError("unknown suite '" + c.suite + "'");
  }
}

}  // namespace v2m
