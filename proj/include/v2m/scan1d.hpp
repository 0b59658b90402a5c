#pragma once

// 1D selective state-space scan.
//
// Shapes: x [G, L, D] (any number of leading axes fold into G), state size N.
//   A      = -exp(a_log)                       [D, N], diagonal per channel
//   B, C   = x * w_b, x * w_c                  [G, L, N]
//   delta  = softplus(x * w_dt * w_dt_up + p)  [G, L, D]
//   a_bar  = exp(delta A)
//   b_bar  = (exp(delta A) - 1) / (delta A) * delta * B
//   h_t    = a_bar_t * h_{t-1} + b_bar_t * x_t
//   y_t    = sum_n C_t[n] h_t[., n]
//
// B and C are shared across channels (one N-vector per position), D-channel
// inputs each carry their own N-dimensional state.

#include <atomic>
#include <bit>
#include <cmath>
#include <string>
#include <vector>

#include "v2m/autograd.hpp"
#include "v2m/numerics.hpp"
#include "v2m/parallel.hpp"
#include "v2m/tensor.hpp"

namespace v2m {

enum class BMode { projected, unit };

namespace hooks {
/// Test hook: corrupts scan_parallel's combine step so verification suites
/// can prove they detect a broken scan.
inline std::atomic<bool> flip_parallel_sign{false};
}  // namespace hooks

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

inline std::size_t default_dt_rank(std::size_t channels) { return std::max<std::size_t>(1, channels / 16); }

template <std::floating_point T>
struct SelectiveParams {
  Tensor<T> a_log;    // [D, N]
  Tensor<T> w_b;      // [D, N]; empty for sets only ever run with BMode::unit
  Tensor<T> w_c;      // [D, N]
  Tensor<T> w_dt;     // [D, R]
  Tensor<T> w_dt_up;  // [R, D]
  Tensor<T> p;        // [D]

  std::size_t channels() const { return a_log.dim(0); }
  std::size_t state() const { return a_log.dim(1); }
  std::size_t dt_rank() const { return w_dt.dim(1); }

  void validate() const {
    if (a_log.rank() != 2) throw DimensionError("SelectiveParams: a_log must be [D, N]");
    const std::size_t d = channels(), n = state();
    if (!w_b.empty()) require_shape(w_b, {d, n}, "SelectiveParams w_b");
    require_shape(w_c, {d, n}, "SelectiveParams w_c");
    if (w_dt.rank() != 2 || w_dt.dim(0) != d) throw DimensionError("SelectiveParams: w_dt must be [D, R]");
    require_shape(w_dt_up, {dt_rank(), d}, "SelectiveParams w_dt_up");
    require_shape(p, {d}, "SelectiveParams p");
  }

  /// A = -exp(a_log), strictly negative.
  Tensor<T> evolution() const {
    return map(a_log, [](double v) { return -std::exp(v); });
  }

  bool has_input_projection() const { return !w_b.empty(); }

  /// a_log[d, n] = ln(n + 1); softplus(p) log-uniform in [1e-3, 0.1].
  static SelectiveParams init(std::size_t channels, std::size_t state, Rng& rng, BMode mode = BMode::projected) {
    const std::size_t rank = default_dt_rank(channels);
    SelectiveParams sp;
    sp.a_log = Tensor<T>({channels, state});
    for (std::size_t d = 0; d < channels; ++d) {
      for (std::size_t n = 0; n < state; ++n) sp.a_log[d * state + n] = static_cast<T>(std::log(n + 1.0));
    }
    const double in_std = 1.0 / std::sqrt(static_cast<double>(channels));
    if (mode == BMode::projected) sp.w_b = rng_normal<T>(rng, {channels, state}, 0.0, in_std);
    sp.w_c = rng_normal<T>(rng, {channels, state}, 0.0, in_std);
    sp.w_dt = rng_uniform<T>(rng, {channels, rank}, -in_std, in_std);
    const double up = 1.0 / std::sqrt(static_cast<double>(rank));
    sp.w_dt_up = rng_uniform<T>(rng, {rank, channels}, -up, up);
    sp.p = Tensor<T>({channels});
    for (std::size_t d = 0; d < channels; ++d) {
      const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(0.1)));
      sp.p[d] = static_cast<T>(dt + std::log(-std::expm1(-dt)));
    }
    return sp;
  }

  void store(ParamMap<T>& out, const std::string& prefix) const {
    out[prefix + "a_log"] = a_log;
    if (has_input_projection()) out[prefix + "w_b"] = w_b;
    out[prefix + "w_c"] = w_c;
    out[prefix + "w_dt"] = w_dt;
    out[prefix + "w_dt_up"] = w_dt_up;
    out[prefix + "p"] = p;
  }

  static SelectiveParams load(const ParamMap<T>& in, const std::string& prefix) {
    auto get = [&](const char* n) {
      auto it = in.find(prefix + n);
      if (it == in.end()) throw ContractError("missing parameter '" + prefix + n + "'");
      return it->second;
    };
    const auto wb = in.find(prefix + "w_b");
    SelectiveParams sp{get("a_log"), wb == in.end() ? Tensor<T>() : wb->second, get("w_c"),
                       get("w_dt"),  get("w_dt_up"), get("p")};
    sp.validate();
    return sp;
  }
};

/// Tape handles for one selective parameter set.
template <std::floating_point T>
struct SelectiveVars {
  Var<T> a_log, w_b, w_c, w_dt, w_dt_up, p;

  static SelectiveVars bind(const VarMap<T>& vars, const std::string& prefix) {
    const auto wb = vars.find(prefix + "w_b");
    return {lookup(vars, prefix + "a_log"), wb == vars.end() ? Var<T>() : wb->second,
            lookup(vars, prefix + "w_c"),   lookup(vars, prefix + "w_dt"),
            lookup(vars, prefix + "w_dt_up"), lookup(vars, prefix + "p")};
  }

  SelectiveParams<T> values() const {
    return {a_log.value(), w_b.valid() ? w_b.value() : Tensor<T>(), w_c.value(), w_dt.value(), w_dt_up.value(),
            p.value()};
  }

  std::vector<Var<T>> all() const {
    std::vector<Var<T>> v{a_log, w_c, w_dt, w_dt_up, p};
    if (w_b.valid()) v.push_back(w_b);
    return v;
  }
};

// ---------------------------------------------------------------------------
// Projection and discretization
// ---------------------------------------------------------------------------

template <std::floating_point T>
struct Projection {
  Tensor<T> delta;  // [..., L, D]
  Tensor<T> b;      // [..., L, N]
  Tensor<T> c;      // [..., L, N]
};

template <std::floating_point T>
Projection<T> selective_project(const Tensor<T>& x, const SelectiveParams<T>& params, std::size_t workers = 1) {
  params.validate();
  if (x.rank() < 2 || x.last_dim() != params.channels()) {
    throw DimensionError("selective_project: input " + shape_str(x.shape()) + " needs trailing channel axis " +
                         std::to_string(params.channels()));
  }
  Projection<T> out;
  if (params.has_input_projection()) out.b = linear(x, params.w_b, workers);
  out.c = linear(x, params.w_c, workers);
  const Tensor<T> low = linear(x, params.w_dt, workers);
  out.delta = softplus(linear(low, params.w_dt_up, params.p, workers));
  for (std::size_t i = 0; i < out.delta.size(); ++i) {
    if (!(out.delta[i] > T(0))) throw NumericError("selective_project: timescale underflowed to zero");
  }
  out.delta.ensure_finite("selective_project delta");
  return out;
}

namespace detail {

inline constexpr double kSeriesThreshold = 1e-4;

/// (e^z - 1) / z with the series 1 + z/2 + z^2/6 near zero.
inline double zoh_phi(double z) {
  if (std::abs(z) < kSeriesThreshold) return 1.0 + z * (0.5 + z / 6.0);
  return std::expm1(z) / z;
}

/// d/dz of zoh_phi, given e = exp(z).
inline double zoh_phi_grad(double z, double e) {
  if (std::abs(z) < 1e-3) return 0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z / 30.0));
  return (e * (z - 1.0) + 1.0) / (z * z);
}

inline double zoh_phi_grad(double z) { return zoh_phi_grad(z, std::exp(z)); }

}  // namespace detail

template <std::floating_point T>
struct Discretized {
  Tensor<T> a_bar;  // [G, L, D, N]
  Tensor<T> b_bar;  // [G, L, D, N], multiplied by x_t before scanning
};

template <std::floating_point T>
struct DiscreteScanInputs {
  Tensor<T> a_bar;  // [G, L, D, N]
  Tensor<T> bx;     // [G, L, D, N]
};

/// Zero-order hold with diagonal A. delta [..., D], a [D, N], b [..., N].
template <std::floating_point T>
Discretized<T> zoh_discretize(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || delta.rank() == 0 || delta.last_dim() != a.dim(0)) {
    throw DimensionError("zoh_discretize: delta " + shape_str(delta.shape()) + " vs A " + shape_str(a.shape()));
  }
  const std::size_t d_ch = a.dim(0), n_st = a.dim(1);
  const std::size_t rows = delta.rows();
  if (b.rank() == 0 || b.last_dim() != n_st || b.rows() != rows) {
    throw DimensionError("zoh_discretize: B " + shape_str(b.shape()) + " vs delta " + shape_str(delta.shape()));
  }
  for (std::size_t i = 0; i < delta.size(); ++i) {
    if (!(delta[i] > T(0))) throw ContractError("zoh_discretize: timescale must be positive");
  }
  Shape s = delta.shape();
  s.push_back(n_st);
  Discretized<T> out{Tensor<T>(s), Tensor<T>(s)};
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t d = 0; d < d_ch; ++d) {
      const double dl = delta[r * d_ch + d];
      T* ab = out.a_bar.ptr() + (r * d_ch + d) * n_st;
      T* bb = out.b_bar.ptr() + (r * d_ch + d) * n_st;
      for (std::size_t n = 0; n < n_st; ++n) {
        const double z = dl * static_cast<double>(a[d * n_st + n]);
        ab[n] = static_cast<T>(std::exp(z));
        bb[n] = static_cast<T>(detail::zoh_phi(z) * dl * static_cast<double>(b[r * n_st + n]));
      }
    }
  }
  return out;
}

/// bx = b_bar * x broadcast over the state axis.
template <std::floating_point T>
DiscreteScanInputs<T> apply_input(Discretized<T> disc, const Tensor<T>& x) {
  const std::size_t n_st = disc.b_bar.last_dim();
  if (x.size() * n_st != disc.b_bar.size()) {
    throw DimensionError("apply_input: x " + shape_str(x.shape()) + " vs b_bar " + shape_str(disc.b_bar.shape()));
  }
  Tensor<T> bx = std::move(disc.b_bar);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T xv = x[i];
    T* row = bx.ptr() + i * n_st;
    for (std::size_t n = 0; n < n_st; ++n) row[n] = row[n] * xv;
  }
  return {std::move(disc.a_bar), std::move(bx)};
}

// ---------------------------------------------------------------------------
// Scans
// ---------------------------------------------------------------------------

namespace detail {

template <std::floating_point T>
void check_scan_inputs(const DiscreteScanInputs<T>& in, const Tensor<T>& h0) {
  if (in.a_bar.rank() != 4) throw DimensionError("scan: a_bar must be [G, L, D, N], got " + shape_str(in.a_bar.shape()));
  if (in.a_bar.shape() != in.bx.shape()) {
    throw DimensionError("scan: a_bar " + shape_str(in.a_bar.shape()) + " vs bx " + shape_str(in.bx.shape()));
  }
  if (!h0.empty()) {
    const auto& s = in.a_bar.shape();
    require_shape(h0, {s[0], s[2], s[3]}, "scan h0");
  }
}

}  // namespace detail

/// h_t = a_bar_t * h_{t-1} + bx_t, carried in double. h0 defaults to zeros.
/// Lanes are split across `workers`; each lane runs strictly in order, so the
/// result does not depend on the worker count.
template <std::floating_point T>
Tensor<T> scan_sequential(const DiscreteScanInputs<T>& in, const Tensor<T>& h0 = Tensor<T>(),
                          std::size_t workers = 1) {
  detail::check_scan_inputs(in, h0);
  const auto& s = in.a_bar.shape();
  const std::size_t groups = s[0], len = s[1], lanes = s[2] * s[3];
  Tensor<T> h(s);
  parallel_for(lanes, workers, [&](std::size_t k0, std::size_t k1) {
    std::vector<double> state(k1 - k0);
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t k = k0; k < k1; ++k) state[k - k0] = h0.empty() ? 0.0 : static_cast<double>(h0[g * lanes + k]);
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t off = (g * len + t) * lanes;
        const T* a = in.a_bar.ptr() + off;
        const T* b = in.bx.ptr() + off;
        T* out = h.ptr() + off;
        for (std::size_t k = k0; k < k1; ++k) {
          double& st = state[k - k0];
          st = static_cast<double>(a[k]) * st + static_cast<double>(b[k]);
          out[k] = static_cast<T>(st);
        }
      }
    }
  });
  return h;
}

/// Element of the affine-map monoid: h -> a * h + b.
struct AffinePair {
  double a = 1.0;
  double b = 0.0;
};

/// Apply `first`, then `second`.
inline AffinePair compose(const AffinePair& first, const AffinePair& second) {
  return {first.a * second.a, second.a * first.b + second.b};
}

namespace detail {

/// Work-efficient (Blelloch) exclusive scan over one lane, turned inclusive.
/// `buf` is padded to a power of two with identity elements.
inline void blelloch_lane(std::vector<AffinePair>& buf, const std::vector<AffinePair>& elems,
                          std::vector<AffinePair>& inclusive) {
  const std::size_t len = elems.size();
  const std::size_t size = std::bit_ceil(std::max<std::size_t>(len, 1));
  buf.assign(size, AffinePair{});
  std::copy(elems.begin(), elems.end(), buf.begin());
  const bool corrupt = hooks::flip_parallel_sign.load(std::memory_order_relaxed);
  auto combine = [corrupt](const AffinePair& first, const AffinePair& second) {
    AffinePair r = compose(first, second);
    if (corrupt) r.b = second.a * first.b - second.b;
    return r;
  };
  // Up-sweep: node k holds the composition of its subtree.
  for (std::size_t stride = 1; stride < size; stride *= 2) {
    for (std::size_t k = 2 * stride - 1; k < size; k += 2 * stride) {
      buf[k] = combine(buf[k - stride], buf[k]);
    }
  }
  // Down-sweep: node k receives the composition of everything before its subtree.
  buf[size - 1] = AffinePair{};
  for (std::size_t stride = size / 2; stride >= 1; stride /= 2) {
    for (std::size_t k = 2 * stride - 1; k < size; k += 2 * stride) {
      const AffinePair left = buf[k - stride];
      buf[k - stride] = buf[k];
      buf[k] = combine(buf[k], left);
    }
    if (stride == 1) break;
  }
  inclusive.resize(len);
  for (std::size_t t = 0; t < len; ++t) inclusive[t] = combine(buf[t], elems[t]);
}

}  // namespace detail

/// Same contract as scan_sequential. Each (g, d, n) lane is an independent
/// Blelloch scan over AffinePair; lanes are split across `workers`.
template <std::floating_point T>
Tensor<T> scan_parallel(const DiscreteScanInputs<T>& in, const Tensor<T>& h0 = Tensor<T>(),
                        std::size_t workers = 1) {
  detail::check_scan_inputs(in, h0);
  const auto& s = in.a_bar.shape();
  const std::size_t groups = s[0], len = s[1], lanes = s[2] * s[3];
  Tensor<T> h(s);
  parallel_for(groups * lanes, workers, [&](std::size_t begin, std::size_t end) {
    std::vector<AffinePair> elems(len), buf, inclusive;
    for (std::size_t lane = begin; lane < end; ++lane) {
      const std::size_t g = lane / lanes, k = lane % lanes;
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t idx = (g * len + t) * lanes + k;
        elems[t] = {static_cast<double>(in.a_bar[idx]), static_cast<double>(in.bx[idx])};
      }
      detail::blelloch_lane(buf, elems, inclusive);
      const double start = h0.empty() ? 0.0 : static_cast<double>(h0[g * lanes + k]);
      for (std::size_t t = 0; t < len; ++t) {
        h[(g * len + t) * lanes + k] = static_cast<T>(inclusive[t].a * start + inclusive[t].b);
      }
    }
  });
  return h;
}

template <std::floating_point T>
Tensor<T> run_scan(const DiscreteScanInputs<T>& in, const ExecPolicy& policy) {
  return policy.scan == ScanImpl::parallel ? scan_parallel(in, Tensor<T>(), policy.workers)
                                            : scan_sequential(in, Tensor<T>(), policy.workers);
}

/// y[g, t, d] = sum_n c[g, t, n] * h[g, t, d, n]
template <std::floating_point T>
Tensor<T> readout(const Tensor<T>& h, const Tensor<T>& c) {
  const std::size_t n_st = h.last_dim();
  const std::size_t positions = c.rows();
  const std::size_t d_ch = h.size() / (positions * n_st);
  Shape s(h.shape().begin(), h.shape().end() - 1);
  Tensor<T> y(s);
  for (std::size_t r = 0; r < positions; ++r) {
    const T* cr = c.ptr() + r * n_st;
    for (std::size_t d = 0; d < d_ch; ++d) {
      const T* hr = h.ptr() + (r * d_ch + d) * n_st;
      double acc = 0.0;
      for (std::size_t n = 0; n < n_st; ++n) acc += static_cast<double>(cr[n]) * hr[n];
      y[r * d_ch + d] = static_cast<T>(acc);
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Selective scan
// ---------------------------------------------------------------------------

/// Intermediate values a backward pass needs. `h` is left empty when the
/// policy asks for recomputation.
template <std::floating_point T>
struct ScanTrace {
  Projection<T> proj;
  Tensor<T> h;
};

namespace detail {

template <std::floating_point T>
Tensor<T> as_groups(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("selective_scan: input must be [..., L, D], got " + shape_str(x.shape()));
  const std::size_t len = x.dim(x.rank() - 2), d = x.last_dim();
  const std::size_t groups = (len * d == 0) ? 0 : x.size() / (len * d);
  return x.reshaped({groups, len, d});
}

}  // namespace detail

template <std::floating_point T>
Tensor<T> selective_scan(const Tensor<T>& x, const SelectiveParams<T>& params, BMode mode,
                         const ExecPolicy& policy = {}, ScanTrace<T>* trace = nullptr) {
  const Tensor<T> x3 = detail::as_groups(x);
  Projection<T> proj = selective_project(x3, params, policy.workers);
  if (mode == BMode::projected && !params.has_input_projection()) {
    throw ContractError("selective_scan: projected mode needs an input projection w_b");
  }
  const Tensor<T> b = mode == BMode::unit ? Tensor<T>::ones(proj.c.shape()) : proj.b;
  DiscreteScanInputs<T> in = apply_input(zoh_discretize(proj.delta, params.evolution(), b), x3);
  Tensor<T> h = run_scan(in, policy);
  Tensor<T> y = readout(h, proj.c);
  y.ensure_finite("selective_scan");
  if (trace) {
    trace->proj = std::move(proj);
    trace->h = policy.recompute ? Tensor<T>() : std::move(h);
  }
  return std::move(y).reshaped(x.shape());
}

template <std::floating_point T>
struct SelectiveGrads {
  Tensor<T> x, a_log, w_b, w_c, w_dt, w_dt_up, p;
};

/// Reverse pass of selective_scan for dy shaped like x. When trace.h is empty
/// the hidden states are regenerated one sequence at a time.
template <std::floating_point T>
SelectiveGrads<T> selective_scan_backward(const Tensor<T>& x, const SelectiveParams<T>& params, BMode mode,
                                          const ScanTrace<T>& trace, const Tensor<T>& dy, std::size_t workers = 1) {
  const Tensor<T> x3 = detail::as_groups(x);
  const std::size_t groups = x3.dim(0), len = x3.dim(1), d_ch = x3.dim(2), n_st = params.state();
  const std::size_t lanes = d_ch * n_st;
  const Tensor<T> a_mat = params.evolution();
  const Tensor<T>& delta = trace.proj.delta;
  const Tensor<T>& bproj = trace.proj.b;
  const Tensor<T>& cproj = trace.proj.c;
  const bool unit = mode == BMode::unit;

  std::vector<double> dx(x3.size(), 0.0), ddelta(delta.size(), 0.0);
  std::vector<double> db(unit ? 0 : bproj.size(), 0.0), dc(cproj.size(), 0.0), da(lanes, 0.0);
  // Per-sequence caches of the discretization, computed once per element so
  // the adjoint pass and the state regeneration share identical values.
  std::vector<double> gh(lanes), hseq(trace.h.empty() ? len * lanes : 0);
  std::vector<double> abar_c(len * lanes), phi_c(len * lanes), phig_c(len * lanes);

  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t pos = g * len + t;
      for (std::size_t d = 0; d < d_ch; ++d) {
        const double dl = delta[pos * d_ch + d];
        for (std::size_t n = 0; n < n_st; ++n) {
          const std::size_t k = t * lanes + d * n_st + n;
          const double z = dl * static_cast<double>(a_mat[d * n_st + n]);
          abar_c[k] = std::exp(z);
          phi_c[k] = detail::zoh_phi(z);
          phig_c[k] = detail::zoh_phi_grad(z, abar_c[k]);
        }
      }
    }
    if (trace.h.empty()) {
      // Regenerate h for this sequence with the forward rounding sequence.
      std::fill(gh.begin(), gh.end(), 0.0);  // reused as the running state
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t pos = g * len + t;
        for (std::size_t d = 0; d < d_ch; ++d) {
          const double dl = delta[pos * d_ch + d];
          const T xs = x3[pos * d_ch + d];
          for (std::size_t n = 0; n < n_st; ++n) {
            const std::size_t k = t * lanes + d * n_st + n;
            const T abar = static_cast<T>(abar_c[k]);
            const double bval = unit ? 1.0 : static_cast<double>(bproj[pos * n_st + n]);
            const T bbar = static_cast<T>(phi_c[k] * dl * bval);
            const T bx = bbar * xs;
            double& st = gh[d * n_st + n];
            st = static_cast<double>(abar) * st + static_cast<double>(bx);
            hseq[k] = static_cast<double>(static_cast<T>(st));
          }
        }
      }
    }
    auto hval = [&](std::size_t t, std::size_t k) -> double {
      if (trace.h.empty()) return hseq[t * lanes + k];
      return static_cast<double>(trace.h[(g * len + t) * lanes + k]);
    };

    std::fill(gh.begin(), gh.end(), 0.0);
    for (std::size_t t = len; t-- > 0;) {
      const std::size_t pos = g * len + t;
      for (std::size_t d = 0; d < d_ch; ++d) {
        const double dyv = dy[pos * d_ch + d];
        const double xs = x3[pos * d_ch + d];
        const double dl = delta[pos * d_ch + d];
        double acc_dx = 0.0, acc_ddelta = 0.0;
        for (std::size_t n = 0; n < n_st; ++n) {
          const std::size_t k = d * n_st + n;
          const double a = a_mat[k];
          const double abar = abar_c[t * lanes + k];
          const double phi = phi_c[t * lanes + k];
          const double bval = unit ? 1.0 : static_cast<double>(bproj[pos * n_st + n]);
          const double bbar = static_cast<double>(static_cast<T>(phi * dl * bval));
          const double ht = hval(t, k);
          const double hprev = t > 0 ? hval(t - 1, k) : 0.0;
          dc[pos * n_st + n] += dyv * ht;
          const double grad_h = gh[k] + dyv * static_cast<double>(cproj[pos * n_st + n]);
          const double d_abar = grad_h * hprev;
          const double d_bbar = grad_h * xs;
          acc_dx += grad_h * bbar;
          const double dz = d_abar * abar + d_bbar * dl * bval * phig_c[t * lanes + k];
          acc_ddelta += dz * a + d_bbar * phi * bval;
          da[k] += dz * dl;
          if (!unit) db[pos * n_st + n] += d_bbar * phi * dl;
          gh[k] = grad_h * static_cast<double>(static_cast<T>(abar));
        }
        dx[pos * d_ch + d] += acc_dx;
        ddelta[pos * d_ch + d] = acc_ddelta;
      }
    }
  }

  auto to_tensor = [](const std::vector<double>& v, Shape s) {
    Tensor<T> out(std::move(s));
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(v[i]);
    return out;
  };

  // delta = softplus(s) and softplus'(s) = 1 - exp(-delta).
  Tensor<T> ds(delta.shape());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ds[i] = static_cast<T>(ddelta[i] * -std::expm1(-static_cast<double>(delta[i])));
  }

  SelectiveGrads<T> out;
  const Tensor<T> low = linear(x3, params.w_dt, workers);
  out.w_dt_up = linear_grad_weight(low, ds, workers);
  out.p = sum_rows(ds);
  const Tensor<T> dlow = linear_grad_input(ds, params.w_dt_up, low.shape(), workers);
  out.w_dt = linear_grad_weight(x3, dlow, workers);
  Tensor<T> gx = linear_grad_input(dlow, params.w_dt, x3.shape(), workers);

  const Tensor<T> dc_t = to_tensor(dc, cproj.shape());
  out.w_c = linear_grad_weight(x3, dc_t, workers);
  add_in_place(gx, linear_grad_input(dc_t, params.w_c, x3.shape(), workers));
  if (unit) {
    if (params.has_input_projection()) out.w_b = Tensor<T>::zeros(params.w_b.shape());
  } else {
    const Tensor<T> db_t = to_tensor(db, bproj.shape());
    out.w_b = linear_grad_weight(x3, db_t, workers);
    add_in_place(gx, linear_grad_input(db_t, params.w_b, x3.shape(), workers));
  }
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = static_cast<T>(static_cast<double>(gx[i]) + dx[i]);
  out.x = std::move(gx).reshaped(x.shape());

  out.a_log = Tensor<T>(params.a_log.shape());
  for (std::size_t k = 0; k < lanes; ++k) out.a_log[k] = static_cast<T>(da[k] * static_cast<double>(a_mat[k]));
  return out;
}

namespace ops {

template <std::floating_point T>
Var<T> selective_scan(const Var<T>& x, const SelectiveVars<T>& vars, BMode mode) {
  Tape<T>& tape = x.tape();
  const ExecPolicy policy = tape.policy();
  auto params = std::make_shared<SelectiveParams<T>>(vars.values());
  auto trace = std::make_shared<ScanTrace<T>>();
  Tensor<T> y = v2m::selective_scan(x.value(), *params, mode, policy, tape.recording() ? trace.get() : nullptr);
  std::vector<Var<T>> parents = vars.all();
  parents.insert(parents.begin(), x);
  return tape.record(std::move(y), parents,
                     [x, vars, mode, params, trace, policy](const Tensor<T>& g) {
                       SelectiveGrads<T> gr =
                           selective_scan_backward(x.value(), *params, mode, *trace, g, policy.workers);
                       Tape<T>& tp = x.tape();
                       tp.accumulate(x, std::move(gr.x));
                       tp.accumulate(vars.a_log, std::move(gr.a_log));
                       if (vars.w_b.valid()) tp.accumulate(vars.w_b, std::move(gr.w_b));
                       tp.accumulate(vars.w_c, std::move(gr.w_c));
                       tp.accumulate(vars.w_dt, std::move(gr.w_dt));
                       tp.accumulate(vars.w_dt_up, std::move(gr.w_dt_up));
                       tp.accumulate(vars.p, std::move(gr.p));
                     });
}

}  // namespace ops

}  // namespace v2m
