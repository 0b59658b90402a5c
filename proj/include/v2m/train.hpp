#pragma once

// Cross-entropy objective, evaluation and the seeded training loop.
//
// Every source of randomness (initialization, shuffles, flips) derives from
// TrainConfig::seed, and every reduction runs in a fixed order, so a run is a
// pure function of its inputs regardless of the worker count.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "v2m/autograd.hpp"
#include "v2m/checkpoint.hpp"
#include "v2m/data.hpp"
#include "v2m/model.hpp"
#include "v2m/optim.hpp"

namespace v2m {

namespace detail {

template <std::floating_point T>
void check_labels(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [B, C], got " + shape_str(logits.shape()));
  if (labels.size() != logits.dim(0)) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(logits.dim(0)) + " rows");
  }
  const auto classes = static_cast<int>(logits.dim(1));
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

/// -log softmax(row)[label] via log-sum-exp around the row maximum.
template <std::floating_point T>
double row_nll(const T* row, std::size_t c, int label) {
  double mx = row[0];
  for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, static_cast<double>(row[k]));
  double s = 0.0;
  for (std::size_t k = 0; k < c; ++k) s += std::exp(row[k] - mx);
  return mx + std::log(s) - row[label];
}

}  // namespace detail

/// Mean over rows of -log softmax(logits)[label].
template <std::floating_point T>
double cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  detail::check_labels(logits, labels);
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) total += detail::row_nll(logits.ptr() + i * c, c, labels[i]);
  return b == 0 ? 0.0 : total / static_cast<double>(b);
}

namespace ops {

template <std::floating_point T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const double loss = v2m::cross_entropy(logits.value(), labels);
  return logits.tape().record(Tensor<T>::scalar(static_cast<T>(loss)), {logits}, [logits, labels](const Tensor<T>& g) {
    const Tensor<T>& z = logits.value();
    const std::size_t b = z.dim(0), c = z.dim(1);
    const double scale = static_cast<double>(g[0]) / static_cast<double>(b);
    Tensor<T> dz(z.shape());
    for (std::size_t i = 0; i < b; ++i) {
      const T* row = z.ptr() + i * c;
      double mx = row[0];
      for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, static_cast<double>(row[k]));
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) s += std::exp(row[k] - mx);
      for (std::size_t k = 0; k < c; ++k) {
        const double p = std::exp(row[k] - mx) / s;
        dz[i * c + k] = static_cast<T>(scale * (p - (static_cast<int>(k) == labels[i] ? 1.0 : 0.0)));
      }
    }
    logits.tape().accumulate(logits, std::move(dz));
  });
}

}  // namespace ops

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::size_t> confusion;  // [true class][predicted class], row-major
  std::size_t classes = 0;
};

inline std::size_t argmax_row(const double* row, std::size_t c) {
  return static_cast<std::size_t>(std::max_element(row, row + c) - row);
}

/// Loss, accuracy and confusion counts over a whole dataset.
template <std::floating_point T>
EvalResult evaluate(const ModelConfig& c, const ParamMap<T>& params, const Dataset<T>& data,
                    const ExecPolicy& policy = {}, std::size_t batch = 256) {
  EvalResult r;
  r.classes = c.classes;
  r.total = data.size();
  r.confusion.assign(c.classes * c.classes, 0);
  double loss = 0.0;
  for (std::size_t begin = 0; begin < data.size(); begin += batch) {
    const auto part = data.slice(begin, std::min(data.size(), begin + batch));
    const Tensor<double> logits = model_forward(part.images, c, params, policy).template cast<double>();
    detail::check_labels(logits, part.labels);
    for (std::size_t i = 0; i < part.size(); ++i) {
      const double* row = logits.ptr() + i * c.classes;
      loss += detail::row_nll(row, c.classes, part.labels[i]);
      const std::size_t pred = argmax_row(row, c.classes);
      const auto truth = static_cast<std::size_t>(part.labels[i]);
      r.correct += pred == truth ? 1 : 0;
      ++r.confusion[truth * c.classes + pred];
    }
  }
  if (r.total > 0) {
    r.loss = loss / static_cast<double>(r.total);
    r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  }
  return r;
}

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch = 32;
  double lr = 3e-3;
  std::size_t warmup_epochs = 1;
  AdamWConfig adamw{};
  bool hflip = false;
  std::uint64_t seed = 0;
  ExecPolicy policy{};
  /// Stop after the first epoch whose held-out accuracy reaches this value (> 1 disables).
  double target_accuracy = 2.0;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
};

template <std::floating_point T>
struct TrainResult {
  std::vector<EpochMetrics> history;
  ParamMap<T> best;       // parameters of the best held-out epoch (initialization when no epoch ran)
  ParamMap<T> final;      // parameters after the last epoch
  std::size_t best_epoch = 0;
  double best_accuracy = -1.0;
};

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// CSV with header `epoch,split,loss,accuracy`, one row per (epoch, split).
inline std::string metrics_csv(const std::vector<EpochMetrics>& history) {
  std::string out = "epoch,split,loss,accuracy\n";
  for (const auto& m : history) {
    out += std::to_string(m.epoch) + ",train," + format_double(m.train_loss) + "," +
           format_double(m.train_accuracy) + "\n";
    out += std::to_string(m.epoch) + ",test," + format_double(m.test_loss) + "," + format_double(m.test_accuracy) +
           "\n";
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write '" + path.string() + "'");
}

/// Trains `params` in place. Held-out accuracy picks the best epoch; ties go
/// to the later epoch. When `out_dir` is non-empty, metrics.csv and
/// checkpoint.v2m (best parameters) are written there.
template <std::floating_point T>
TrainResult<T> train_loop(const ModelConfig& c, const TrainConfig& tc, ParamMap<T> params, const Dataset<T>& train,
                          const Dataset<T>& test, const std::filesystem::path& out_dir = {},
                          const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  c.validate();
  if (tc.batch == 0) throw ConfigError("batch size must be positive");
  if (train.size() == 0) throw ConfigError("training set is empty");
  check_model_shapes(c, params);
  const std::size_t steps_per_epoch = (train.size() + tc.batch - 1) / tc.batch;
  const std::size_t total_steps = steps_per_epoch * tc.epochs;
  const std::size_t warmup = steps_per_epoch * tc.warmup_epochs;
  AdamW<T> opt(tc.adamw);
  TrainResult<T> result;
  result.best = params;
  const Rng root = Rng(tc.seed).fork(0x7472);

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    Rng rng = root.fork(epoch);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += tc.batch, ++step) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), begin + tc.batch)));
      std::vector<bool> flip(idx.size(), false);
      if (tc.hflip) {
        for (std::size_t i = 0; i < idx.size(); ++i) flip[i] = rng.below(2) == 1;
      }
      const Dataset<T> batch = train.gather(idx, flip);
      Tape<T> tape(true, tc.policy);
      const VarMap<T> vars = bind_parameters(tape, params);
      const Var<T> logits = ops::model_logits(batch.images, vars, c);
      const Var<T> loss = ops::cross_entropy(logits, batch.labels);
      const auto grads = tape.backward(loss);
      opt.step(params, grads, cosine_lr(step, total_steps, warmup, tc.lr));
      loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const T* row = logits.value().ptr() + i * c.classes;
        const auto pred = static_cast<std::size_t>(std::max_element(row, row + c.classes) - row);
        correct += pred == static_cast<std::size_t>(batch.labels[i]) ? 1 : 0;
      }
    }
    const EvalResult held_out = evaluate(c, params, test, tc.policy);
    EpochMetrics m{epoch, loss_sum / static_cast<double>(train.size()),
                   static_cast<double>(correct) / static_cast<double>(train.size()), held_out.loss, held_out.accuracy};
    result.history.push_back(m);
    if (m.test_accuracy >= result.best_accuracy) {
      result.best_accuracy = m.test_accuracy;
      result.best_epoch = epoch;
      result.best = params;
    }
    if (on_epoch) on_epoch(m);
    if (m.test_accuracy >= tc.target_accuracy) break;
  }
  result.final = std::move(params);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_text(out_dir / "metrics.csv", metrics_csv(result.history));
    save_checkpoint((out_dir / "checkpoint.v2m").string(), make_checkpoint(c, result.best));
  }
  return result;
}

}  // namespace v2m
