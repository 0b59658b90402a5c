#pragma once

// Property suites shared by `v2m check` and the acceptance binary. Each suite
// draws its own random instances from a seed, compares against an
// independent oracle and reports the worst deviation it saw.

#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "v2m/train.hpp"

namespace v2m {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct SuiteOptions {
  std::uint64_t seed = 0;
  std::size_t scan_configs = 10000;
  std::size_t roesser_instances = 100;
  std::size_t equivariance_inputs = 100;
};

namespace detail {

inline std::string sci(double v) {
  std::ostringstream out;
  out.precision(3);
  out << std::scientific << v;
  return out.str();
}

template <class Fn>
SuiteResult timed(const std::string& name, Fn&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r{name, false, "", 0.0};
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

template <std::floating_point T>
DiscreteScanInputs<T> random_scan_inputs(Rng& rng, std::size_t g, std::size_t l, std::size_t d, std::size_t n) {
  return {rng_uniform<T>(rng, {g, l, d, n}, 0.0, 1.0), rng_normal<T>(rng, {g, l, d, n}, 0.0, 1.0)};
}

/// max|parallel - sequential| / max|sequential| for one random configuration.
template <std::floating_point T>
double scan_deviation(Rng& rng, std::size_t max_len, std::size_t max_width) {
  const std::size_t g = 1 + rng.below(2), l = 1 + rng.below(max_len);
  const std::size_t d = 1 + rng.below(max_width), n = 1 + rng.below(max_width);
  const std::size_t workers = 1 + rng.below(4);
  auto in = random_scan_inputs<T>(rng, g, l, d, n);
  auto h0 = rng_normal<T>(rng, {g, d, n}, 0.0, 1.0);
  const auto seq = scan_sequential(in, h0);
  const auto par = scan_parallel(in, h0, workers);
  return max_abs_diff(seq, par) / std::max(max_abs(seq), 1e-300);
}

inline Roesser2DParams<double> random_roesser(Rng& rng, std::size_t n, bool decoupled) {
  const double s = 0.35 / std::sqrt(static_cast<double>(n));
  Roesser2DParams<double> p{rng_normal<double>(rng, {n, n}, 0, s), rng_normal<double>(rng, {n, n}, 0, s),
                            rng_normal<double>(rng, {n, n}, 0, s), rng_normal<double>(rng, {n, n}, 0, s),
                            rng_normal<double>(rng, {n, 1}, 0, 1), rng_normal<double>(rng, {n, 1}, 0, 1),
                            rng_normal<double>(rng, {1, n}, 0, 1), rng_normal<double>(rng, {1, n}, 0, 1)};
  if (decoupled) {
    p.a2.fill(0.0);
    p.a3.fill(0.0);
  }
  return p;
}

/// Time-invariant 1D recurrence s_{t+1} = A s_t + B x_t, y_t = C s_t, s_0 = 0.
inline std::vector<double> time_invariant_scan(const std::vector<double>& x, const Tensor<double>& a,
                                               const Tensor<double>& b, const Tensor<double>& c) {
  const std::size_t n = a.dim(0);
  std::vector<double> s(n, 0.0), next(n), y;
  for (double xv : x) {
    double out = 0.0;
    for (std::size_t k = 0; k < n; ++k) out += c[k] * s[k];
    y.push_back(out);
    for (std::size_t r = 0; r < n; ++r) {
      next[r] = b[r] * xv;
      for (std::size_t k = 0; k < n; ++k) next[r] += a[r * n + k] * s[k];
    }
    s = next;
  }
  return y;
}

/// Shared-parameter directional operator: expand, 2D scan, de-rotate and project.
template <std::floating_point T>
Tensor<T> directional_operator(const Tensor<T>& x, const Pipeline2DParams<T>& ph, const Pipeline2DParams<T>& pv,
                               const Tensor<T>& w) {
  auto batch = expand_directions(x);
  batch.z = ssm2d_forward(batch.z, ph, pv);
  return aggregate_directions(batch, w);
}

inline SelectiveParams<double> random_selective(Rng& rng, std::size_t d, std::size_t n, BMode mode) {
  auto sp = SelectiveParams<double>::init(d, n, rng, mode);
  sp.a_log = rng_normal<double>(rng, {d, n}, 0.0, 0.5);
  if (mode == BMode::projected) sp.w_b = rng_normal<double>(rng, {d, n}, 0.0, 0.5);
  sp.w_c = rng_normal<double>(rng, {d, n}, 0.0, 0.5);
  sp.w_dt = rng_normal<double>(rng, {d, sp.dt_rank()}, 0.0, 0.5);
  sp.w_dt_up = rng_normal<double>(rng, {sp.dt_rank(), d}, 0.0, 0.5);
  sp.p = rng_normal<double>(rng, {d}, -1.0, 0.5);
  return sp;
}

inline void store_pipeline(ParamMap<double>& m, Rng& rng, std::size_t d, std::size_t n, const std::string& prefix) {
  random_selective(rng, d, n, BMode::projected).store(m, prefix + "first.");
  random_selective(rng, d, n, BMode::unit).store(m, prefix + "second.");
}

}  // namespace detail

/// The tiny model of the gradient suite: 4x4 token grid plus a centre cross,
/// D=8, N=4, two blocks, three classes.
inline ModelConfig gradient_check_model() {
  ModelConfig c;
  c.image = 4;
  c.patch = 1;
  c.dim = 8;
  c.state = 4;
  c.depth = 2;
  c.classes = 3;
  return c;
}

/// Initialization moved away from its symmetric starting point (zero output
/// projections, zero biases) so that every parameter carries a generic gradient.
inline ParamMap<double> generic_model_point(const ModelConfig& c, std::uint64_t seed) {
  auto p = init_model<double>(c, seed);
  Rng rng = Rng(seed).fork(1);
  for (auto& [name, t] : p) {
    if (name.ends_with("out.w")) t = rng_normal<double>(rng, t.shape(), 0.0, 1.0);
    if (name.ends_with(".b") || name == "cls") t = rng_normal<double>(rng, t.shape(), 0.0, 0.3);
  }
  return p;
}

struct GradCase {
  std::string name;
  ScalarGraph objective;
  ParamMap<double> params;
};

/// One finite-difference case per differentiable operation, plus the
/// end-to-end tiny model under cross-entropy.
inline std::vector<GradCase> gradient_cases(std::uint64_t seed) {
  Rng rng(seed);
  auto normal = [&](Shape s, double sd = 1.0) { return rng_normal<double>(rng, std::move(s), 0.0, sd); };
  std::vector<GradCase> cases;
  // Contract a tensor-valued op against fixed random weights to get a scalar.
  auto probe = [&](Shape out_shape) {
    auto w = normal(std::move(out_shape));
    return [w](Tape<double>& t, const Var<double>& y) { return ops::sum(ops::mul(y, t.constant(w))); };
  };
  auto add_case = [&](std::string name, ParamMap<double> params, Shape out, auto body) {
    auto contract = probe(std::move(out));
    cases.push_back({std::move(name),
                     [body, contract](Tape<double>& t, const VarMap<double>& v) { return contract(t, body(t, v)); },
                     std::move(params)});
  };
  auto x_of = [](const VarMap<double>& v) { return lookup(v, "x"); };

  add_case("add", {{"x", normal({3, 4})}, {"y", normal({3, 4})}}, {3, 4},
           [=](Tape<double>&, const VarMap<double>& v) { return ops::add(x_of(v), lookup(v, "y")); });
  add_case("mul", {{"x", normal({3, 4})}, {"y", normal({3, 4})}}, {3, 4},
           [=](Tape<double>&, const VarMap<double>& v) { return ops::mul(x_of(v), lookup(v, "y")); });
  add_case("scale", {{"x", normal({5})}}, {5},
           [=](Tape<double>&, const VarMap<double>& v) { return ops::scale(x_of(v), -1.7); });
  add_case("add_broadcast", {{"x", normal({2, 3, 4})}, {"y", normal({3, 4})}}, {2, 3, 4},
           [=](Tape<double>&, const VarMap<double>& v) { return ops::add_broadcast(x_of(v), lookup(v, "y")); });
  cases.push_back({"sum", [=](Tape<double>&, const VarMap<double>& v) { return ops::sum(ops::square(x_of(v))); },
                   {{"x", normal({7})}}});
  cases.push_back({"mean", [=](Tape<double>&, const VarMap<double>& v) { return ops::mean(ops::square(x_of(v))); },
                   {{"x", normal({2, 5})}}});
  add_case("square", {{"x", normal({6})}}, {6},
           [=](Tape<double>&, const VarMap<double>& v) { return ops::square(x_of(v)); });
  add_case("reshape", {{"x", normal({2, 6})}}, {3, 4},
           [=](Tape<double>&, const VarMap<double>& v) { return ops::reshape(x_of(v), {3, 4}); });
  add_case("linear", {{"x", normal({2, 3, 4})}, {"w", normal({4, 5})}}, {2, 3, 5},
           [=](Tape<double>&, const VarMap<double>& v) { return ops::linear(x_of(v), lookup(v, "w")); });
  add_case("linear_bias", {{"x", normal({3, 4})}, {"w", normal({4, 2})}, {"b", normal({2})}}, {3, 2},
           [=](Tape<double>&, const VarMap<double>& v) {
             return ops::linear(x_of(v), lookup(v, "w"), lookup(v, "b"));
           });
  add_case("softplus", {{"x", normal({8}, 2.0)}}, {8},
           [=](Tape<double>&, const VarMap<double>& v) { return ops::softplus(x_of(v)); });
  add_case("sigmoid", {{"x", normal({8}, 2.0)}}, {8},
           [=](Tape<double>&, const VarMap<double>& v) { return ops::sigmoid(x_of(v)); });
  add_case("silu", {{"x", normal({8}, 2.0)}}, {8},
           [=](Tape<double>&, const VarMap<double>& v) { return ops::silu(x_of(v)); });
  add_case("gelu", {{"x", normal({8}, 2.0)}}, {8},
           [=](Tape<double>&, const VarMap<double>& v) { return ops::gelu(x_of(v)); });
  add_case("layer_norm", {{"x", normal({3, 5})}, {"g", normal({5})}, {"b", normal({5})}}, {3, 5},
           [=](Tape<double>&, const VarMap<double>& v) {
             return ops::layer_norm(x_of(v), lookup(v, "g"), lookup(v, "b"), 1e-5);
           });

  for (BMode mode : {BMode::projected, BMode::unit}) {
    ParamMap<double> p{{"x", normal({2, 5, 3})}};
    detail::random_selective(rng, 3, 2, mode).store(p, "s.");
    add_case(mode == BMode::projected ? "selective_scan_projected" : "selective_scan_unit", p, {2, 5, 3},
             [=](Tape<double>&, const VarMap<double>& v) {
               return ops::selective_scan(x_of(v), SelectiveVars<double>::bind(v, "s."), mode);
             });
  }
  {
    ParamMap<double> p{{"x", normal({1, 3, 4, 3})}};
    detail::random_selective(rng, 3, 2, BMode::projected).store(p, "s.");
    add_case("row_scan", p, {1, 3, 4, 3}, [=](Tape<double>&, const VarMap<double>& v) {
      return ops::row_scan(x_of(v), SelectiveVars<double>::bind(v, "s."), BMode::projected);
    });
    add_case("col_scan", p, {1, 3, 4, 3}, [=](Tape<double>&, const VarMap<double>& v) {
      return ops::col_scan(x_of(v), SelectiveVars<double>::bind(v, "s."), BMode::projected);
    });
  }
  add_case("transpose_hw", {{"x", normal({2, 3, 4, 2})}}, {2, 4, 3, 2},
           [=](Tape<double>&, const VarMap<double>& v) { return ops::transpose_hw(x_of(v)); });
  {
    ParamMap<double> p{{"x", normal({1, 4, 4, 4})}};
    detail::store_pipeline(p, rng, 4, 4, "h.");
    detail::store_pipeline(p, rng, 4, 4, "v.");
    add_case("pipeline_forward", p, {1, 4, 4, 4}, [=](Tape<double>&, const VarMap<double>& v) {
      return ops::pipeline_forward(x_of(v), PipelineVars<double>::bind(v, "v.", AxisOrder::cols_then_rows));
    });
    add_case("ssm2d_forward", p, {1, 4, 4, 4}, [=](Tape<double>&, const VarMap<double>& v) {
      return ops::ssm2d_forward(x_of(v), PipelineVars<double>::bind(v, "h.", AxisOrder::rows_then_cols),
                                PipelineVars<double>::bind(v, "v.", AxisOrder::cols_then_rows));
    });
  }
  add_case("rot90", {{"x", normal({1, 3, 3, 2})}}, {1, 3, 3, 2},
           [=](Tape<double>&, const VarMap<double>& v) { return ops::rot90(x_of(v), 3); });
  add_case("expand_directions", {{"x", normal({1, 3, 3, 2})}}, {4, 3, 3, 2},
           [=](Tape<double>&, const VarMap<double>& v) { return ops::expand_directions(x_of(v), all_rotations()); });
  add_case("derotate_sum", {{"x", normal({4, 3, 3, 2})}}, {1, 3, 3, 2},
           [=](Tape<double>&, const VarMap<double>& v) { return ops::derotate_sum(x_of(v), all_rotations()); });
  add_case("aggregate_directions", {{"x", normal({2, 3, 3, 2})}, {"w", normal({2, 3})}}, {1, 3, 3, 3},
           [=](Tape<double>&, const VarMap<double>& v) {
             return ops::aggregate_directions(x_of(v), {0, 2}, lookup(v, "w"));
           });
  for (ClassTokenScheme scheme : {ClassTokenScheme::edge_cross, ClassTokenScheme::center_cross}) {
    add_case(std::string("insert_class_tokens_") + cls_scheme_name(scheme), {{"x", normal({2, 2, 2, 3})}, {"cls", normal({3})}},
             {2, 3, 3, 3}, [=](Tape<double>&, const VarMap<double>& v) {
               return ops::insert_class_tokens(x_of(v), scheme, lookup(v, "cls"));
             });
  }
  for (ClassTokenScheme scheme : {ClassTokenScheme::mean_pool, ClassTokenScheme::edge_cross,
                                  ClassTokenScheme::center_cross}) {
    add_case(std::string("extract_class_feature_") + cls_scheme_name(scheme), {{"x", normal({2, 3, 3, 4})}}, {2, 4},
             [=](Tape<double>&, const VarMap<double>& v) { return ops::extract_class_feature(x_of(v), scheme); });
  }
  {
    const std::vector<int> labels{2, 0, 1, 1};
    cases.push_back({"cross_entropy",
                     [labels](Tape<double>&, const VarMap<double>& v) {
                       return ops::cross_entropy(lookup(v, "x"), labels);
                     },
                     {{"x", normal({4, 3}, 1.5)}}});
  }

  const ModelConfig c = gradient_check_model();
  const ParamMap<double> model = generic_model_point(c, seed + 1);
  const Tensor<double> images = rng_uniform<double>(rng, {2, c.image, c.image, 1}, 0.0, 1.0);
  {
    ParamMap<double> p;
    for (const auto& [name, t] : model) {
      if (name.starts_with("blocks.0.")) p[name] = t;
    }
    p["x"] = normal({1, c.side(), c.side(), c.dim});
    add_case("v2m_block", p, {1, c.side(), c.side(), c.dim}, [=](Tape<double>&, const VarMap<double>& v) {
      return ops::v2m_block(x_of(v), v, block_prefix(0), c);
    });
  }
  {
    ParamMap<double> p;
    for (const char* name : {"embed.w", "embed.b", "embed.pos", "cls"}) p[name] = model.at(name);
    add_case("embed", p, {2, c.side(), c.side(), c.dim},
             [=](Tape<double>&, const VarMap<double>& v) { return ops::embed(images, v, c); });
  }
  {
    const std::vector<int> labels{1, 2};
    cases.push_back({"model_cross_entropy",
                     [=](Tape<double>&, const VarMap<double>& v) {
                       return ops::cross_entropy(ops::model_logits(images, v, c), labels);
                     },
                     model});
  }
  return cases;
}

/// Parallel vs sequential scans over random configurations, f64 and f32.
inline SuiteResult scan_equivalence_suite(const SuiteOptions& opt) {
  return detail::timed("scan", [&](SuiteResult& r) {
    Rng rng = Rng(opt.seed).fork(1);
    double worst64 = 0.0, worst32 = 0.0;
    for (std::size_t i = 0; i < opt.scan_configs; ++i) {
      worst64 = std::max(worst64, detail::scan_deviation<double>(rng, 512, 16));
      worst32 = std::max(worst32, detail::scan_deviation<float>(rng, 512, 16));
    }
    r.passed = worst64 <= 1e-9 && worst32 <= 1e-4;
    r.detail = std::to_string(opt.scan_configs) + " configs, max rel dev f64 " + detail::sci(worst64) + " (<= 1e-9), f32 " +
               detail::sci(worst32) + " (<= 1e-4)";
  });
}

/// Exact Roesser recurrence with A2 = A3 = 0 against two 1D scans, plus the 2x2 hand case.
inline SuiteResult roesser_suite(const SuiteOptions& opt) {
  return detail::timed("roesser", [&](SuiteResult& r) {
    Rng rng = Rng(opt.seed).fork(2);
    double worst = 0.0;
    const std::size_t side = 8;
    for (std::size_t trial = 0; trial < opt.roesser_instances; ++trial) {
      const auto p = detail::random_roesser(rng, 1 + rng.below(4), true);
      const auto x = rng_normal<double>(rng, {side, side}, 0, 1);
      const auto y = roesser_scan_exact(x, p);
      for (std::size_t i = 0; i < side; ++i) {
        const std::vector<double> row(x.ptr() + i * side, x.ptr() + (i + 1) * side);
        const auto yr = detail::time_invariant_scan(row, p.a1, p.b1, p.c1);
        for (std::size_t j = 0; j < side; ++j) {
          std::vector<double> col;
          for (std::size_t q = 0; q < side; ++q) col.push_back(x[q * side + j]);
          const double expect = yr[j] + detail::time_invariant_scan(col, p.a4, p.b2, p.c2)[i];
          worst = std::max(worst, std::abs(y[i * side + j] - expect));
        }
      }
    }
    const auto zero = Tensor<double>::zeros({1, 1});
    const auto one = Tensor<double>::ones({1, 1});
    const auto hand = roesser_scan_exact(Tensor<double>::ones({2, 2}), Roesser2DParams<double>{zero, zero, zero, zero,
                                                                                               one, one, one, one});
    const bool hand_ok = hand.values() == std::vector<double>{0, 1, 1, 2};
    r.passed = worst <= 1e-12 && hand_ok;
    r.detail = std::to_string(opt.roesser_instances) + " decoupled 8x8 instances, max abs dev " + detail::sci(worst) +
               " (<= 1e-12); 2x2 hand case " + (hand_ok ? "exact" : "WRONG");
  });
}

/// Finite differences (f64, h = 1e-4) against backward() for every op.
inline SuiteResult gradient_suite(const SuiteOptions& opt) {
  return detail::timed("grad", [&](SuiteResult& r) {
    double worst = 0.0;
    std::string worst_name = "none";
    std::size_t count = 0;
    for (const auto& gc : gradient_cases(opt.seed)) {
      const auto report = finite_diff_check(gc.objective, gc.params, 1e-4);
      ++count;
      if (report.max_rel_error() >= worst) {
        worst = report.max_rel_error();
        worst_name = gc.name + "/" + (report.worst() ? report.worst()->name : std::string("-"));
      }
    }
    r.passed = worst <= 1e-4;
    r.detail = std::to_string(count) + " ops incl. tiny model + cross-entropy, max rel err " + detail::sci(worst) +
               " (<= 1e-4) at " + worst_name;
  });
}

/// Quarter-turn equivariance of the shared-parameter directional operator
/// (f32, 8x8 grids) and the identity expand/aggregate round trip.
inline SuiteResult equivariance_suite(const SuiteOptions& opt) {
  return detail::timed("equivariance", [&](SuiteResult& r) {
    Rng rng = Rng(opt.seed).fork(4);
    double worst = 0.0;
    for (std::size_t trial = 0; trial < opt.equivariance_inputs; ++trial) {
      const std::size_t d = 1 + rng.below(8), n = 1 + rng.below(4);
      const auto ph = Pipeline2DParams<float>::init(d, n, AxisOrder::rows_then_cols, rng);
      const auto pv = Pipeline2DParams<float>::init(d, n, AxisOrder::cols_then_rows, rng);
      const auto w = rng_normal<float>(rng, {d, d}, 0, 1.0 / std::sqrt(static_cast<double>(d)));
      const auto x = rng_normal<float>(rng, {1, 8, 8, d}, 0, 1);
      const int k = 1 + static_cast<int>(rng.below(3));
      const auto lhs = detail::directional_operator(rot90(x, k), ph, pv, w);
      const auto rhs = rot90(detail::directional_operator(x, ph, pv, w), k);
      worst = std::max(worst, max_abs_diff(lhs, rhs));
    }
    bool exact = true;
    for (std::size_t trial = 0; trial < 10; ++trial) {
      const std::size_t d = 1 + rng.below(8);
      const auto x = rng_normal<float>(rng, {2, 8, 8, d}, 0, 1);
      Tensor<float> eye = Tensor<float>::zeros({d, d});
      for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0f;
      exact = exact && aggregate_directions(expand_directions(x), eye).bitwise_equal(scale(x, 4.0));
    }
    r.passed = worst <= 1e-5 && exact;
    r.detail = std::to_string(opt.equivariance_inputs) + " random 8x8xD inputs, max |F(rot x) - rot F(x)| " +
               detail::sci(worst) + " (<= 1e-5, f32); aggregate(expand(x)) == 4x " + (exact ? "exactly" : "NOT exact");
  });
}

/// Checkpoint and IDX write/read round trips.
inline SuiteResult roundtrip_suite(const SuiteOptions& opt) {
  return detail::timed("roundtrip", [&](SuiteResult& r) {
    ModelConfig c;
    c.image = 8;
    c.patch = 2;
    c.dim = 8;
    c.state = 4;
    c.depth = 2;
    const auto params = init_model<float>(c, opt.seed);
    const auto bytes = encode_checkpoint(make_checkpoint(c, params));
    const auto decoded = decode_checkpoint(bytes, "<memory>");
    const bool bytes_ok = encode_checkpoint(decoded) == bytes;
    const auto back = checkpoint_params<float>(decoded, checkpoint_model_config(decoded));
    bool values_ok = back.size() == params.size();
    for (const auto& [name, t] : params) values_ok = values_ok && t.bitwise_equal(back.at(name));

    const auto dir = std::filesystem::temp_directory_path() / ("v2m_roundtrip_" + std::to_string(opt.seed));
    std::filesystem::create_directories(dir);
    Rng rng(opt.seed);
    std::vector<unsigned char> pixels(5 * 6 * 6), labels(5);
    for (auto& p : pixels) p = static_cast<unsigned char>(rng.below(256));
    for (auto& l : labels) l = static_cast<unsigned char>(rng.below(10));
    write_idx((dir / "images").string(), (dir / "labels").string(), 6, 6, pixels, labels);
    const auto data = load_idx<double>((dir / "images").string(), (dir / "labels").string());
    bool idx_ok = data.size() == 5;
    for (std::size_t i = 0; i < pixels.size() && idx_ok; ++i) idx_ok = data.images[i] == pixels[i] / 255.0;
    for (std::size_t i = 0; i < labels.size() && idx_ok; ++i) idx_ok = data.labels[i] == labels[i];
    std::filesystem::remove_all(dir);

    r.passed = bytes_ok && values_ok && idx_ok;
    r.detail = std::string("checkpoint bytes ") + (bytes_ok ? "identical" : "DIFFER") + ", tensors " +
               (values_ok ? "bitwise equal" : "DIFFER") + ", IDX " + (idx_ok ? "exact" : "WRONG");
  });
}

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"scan", "roesser", "grad", "equivariance", "roundtrip"};
  return names;
}

inline SuiteResult run_suite(const std::string& name, const SuiteOptions& opt) {
  if (name == "scan") return scan_equivalence_suite(opt);
  if (name == "roesser") return roesser_suite(opt);
  if (name == "grad") return gradient_suite(opt);
  if (name == "equivariance") return equivariance_suite(opt);
  if (name == "roundtrip") return roundtrip_suite(opt);
  throw ConfigError("unknown suite '" + name + "' (expected scan, roesser, grad, equivariance or roundtrip)");
}

}  // namespace v2m
