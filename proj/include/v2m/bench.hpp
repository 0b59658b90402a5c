#pragma once

// Timing of the sequential and tree scans across sequence lengths and worker
// counts. Every timed run is first cross-checked against the other
// implementation; a cell whose outputs disagree is reported as a failure
// instead of a timing.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "v2m/parallel.hpp"
#include "v2m/scan1d.hpp"

namespace v2m {

struct BenchConfig {
  std::vector<std::size_t> lengths{256, 1024, 4096, 16384};
  std::vector<std::size_t> workers{1, 4, 0};  // 0 stands for all hardware threads
  std::size_t channels = 16;
  std::size_t state = 8;
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
  double tolerance = 1e-4;  // relative, f32
};

struct BenchRow {
  std::size_t length = 0;
  std::size_t workers = 0;
  std::string impl;
  double mean_ms = 0.0;
  double stddev_ms = 0.0;
  double rel_deviation = 0.0;  // max|parallel - sequential| / max|sequential| of the paired run
  bool gate_passed = false;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  bool all_gates_passed() const {
    for (const auto& r : rows) {
      if (!r.gate_passed) return false;
    }
    return !rows.empty();
  }
};

inline std::size_t resolve_workers(std::size_t w) { return w == 0 ? hardware_workers() : w; }

template <class Fn>
std::pair<double, double> time_ms(std::size_t repeats, Fn&& fn) {
  std::vector<double> ms;
  for (std::size_t i = 0; i < std::max<std::size_t>(repeats, 1); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  double mean = 0.0;
  for (double v : ms) mean += v;
  mean /= static_cast<double>(ms.size());
  double var = 0.0;
  for (double v : ms) var += (v - mean) * (v - mean);
  const double sd = ms.size() > 1 ? std::sqrt(var / static_cast<double>(ms.size() - 1)) : 0.0;
  return {mean, sd};
}

/// Two rows (sequential, parallel) per (length, workers) cell, in f32.
inline BenchReport run_bench(const BenchConfig& cfg) {
  BenchReport report;
  Rng rng(cfg.seed);
  for (std::size_t len : cfg.lengths) {
    const DiscreteScanInputs<float> in{rng_uniform<float>(rng, {1, len, cfg.channels, cfg.state}, 0.0, 1.0),
                                       rng_normal<float>(rng, {1, len, cfg.channels, cfg.state}, 0.0, 1.0)};
    for (std::size_t w_spec : cfg.workers) {
      const std::size_t w = resolve_workers(w_spec);
      const auto seq = scan_sequential(in, Tensor<float>(), w);
      const auto par = scan_parallel(in, Tensor<float>(), w);
      const double dev = max_abs_diff(seq, par) / std::max(static_cast<double>(max_abs(seq)), 1e-30);
      const bool ok = dev <= cfg.tolerance;
      for (const char* impl : {"sequential", "parallel"}) {
        BenchRow row{len, w, impl, 0.0, 0.0, dev, ok};
        if (ok) {
          const bool is_seq = row.impl == "sequential";
          auto [mean, sd] = time_ms(cfg.repeats, [&] {
            const auto h = is_seq ? scan_sequential(in, Tensor<float>(), w) : scan_parallel(in, Tensor<float>(), w);
            if (h.size() != in.bx.size()) throw ContractError("bench: scan returned the wrong size");
          });
          row.mean_ms = mean;
          row.stddev_ms = sd;
        }
        report.rows.push_back(row);
      }
    }
  }
  return report;
}

/// `L,workers,impl,mean_ms,stddev_ms`; a failed gate prints "gate_failed" in the timing columns.
inline std::string bench_csv(const BenchReport& report) {
  std::string out = "L,workers,impl,mean_ms,stddev_ms\n";
  char buf[160];
  for (const auto& r : report.rows) {
    if (r.gate_passed) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%s,%.4f,%.4f\n", r.length, r.workers, r.impl.c_str(), r.mean_ms,
                    r.stddev_ms);
    } else {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%s,gate_failed,gate_failed\n", r.length, r.workers, r.impl.c_str());
    }
    out += buf;
  }
  return out;
}

}  // namespace v2m
