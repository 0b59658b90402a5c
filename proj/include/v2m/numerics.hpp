#pragma once

// Deterministic dense kernels. Every reduction runs left to right in double
// precision regardless of the storage type.

#include <cmath>
#include <vector>

#include "v2m/parallel.hpp"
#include "v2m/tensor.hpp"

namespace v2m {

namespace detail {

template <std::floating_point T>
void check_linear_shapes(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b) {
  if (w.rank() != 2) throw DimensionError("linear: weight must be rank 2, got " + shape_str(w.shape()));
  if (x.rank() == 0 || x.last_dim() != w.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  if (b && (b->rank() != 1 || b->dim(0) != w.dim(1))) {
    throw DimensionError("linear: bias " + shape_str(b->shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
}

template <std::floating_point T>
Tensor<T> linear_impl(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, std::size_t workers) {
  check_linear_shapes(x, w, b);
  const std::size_t din = w.dim(0);
  const std::size_t dout = w.dim(1);
  const std::size_t rows = x.rows();
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor<T> y(out_shape);
  const T* xp = x.ptr();
  const T* wp = w.ptr();
  T* yp = y.ptr();
  parallel_for(rows, workers, [&](std::size_t begin, std::size_t end) {
    std::vector<double> acc(dout);
    for (std::size_t r = begin; r < end; ++r) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const T* xr = xp + r * din;
      for (std::size_t i = 0; i < din; ++i) {
        const double xi = xr[i];
        const T* wi = wp + i * dout;
        for (std::size_t o = 0; o < dout; ++o) acc[o] += xi * static_cast<double>(wi[o]);
      }
      T* yr = yp + r * dout;
      if (b) {
        for (std::size_t o = 0; o < dout; ++o) yr[o] = static_cast<T>(acc[o] + static_cast<double>((*b)[o]));
      } else {
        for (std::size_t o = 0; o < dout; ++o) yr[o] = static_cast<T>(acc[o]);
      }
    }
  });
  y.ensure_finite("linear");
  return y;
}

}  // namespace detail

/// y[..., o] = sum_i x[..., i] * w[i, o] + b[o]
template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t workers = 1) {
  return detail::linear_impl(x, w, &b, workers);
}

template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, std::size_t workers = 1) {
  return detail::linear_impl<T>(x, w, nullptr, workers);
}

/// Gradient of linear with respect to its input: dx = dy * w^T.
template <std::floating_point T>
Tensor<T> linear_grad_input(const Tensor<T>& dy, const Tensor<T>& w, const Shape& x_shape,
                            std::size_t workers = 1) {
  const std::size_t din = w.dim(0);
  const std::size_t dout = w.dim(1);
  const std::size_t rows = dy.rows();
  Tensor<T> dx(x_shape);
  parallel_for(rows, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      const T* g = dy.ptr() + r * dout;
      T* out = dx.ptr() + r * din;
      for (std::size_t i = 0; i < din; ++i) {
        const T* wi = w.ptr() + i * dout;
        double acc = 0.0;
        for (std::size_t o = 0; o < dout; ++o) acc += static_cast<double>(g[o]) * wi[o];
        out[i] = static_cast<T>(acc);
      }
    }
  });
  return dx;
}

/// Gradient of linear with respect to its weight: dw = x^T * dy, summed over
/// rows in ascending order.
template <std::floating_point T>
Tensor<T> linear_grad_weight(const Tensor<T>& x, const Tensor<T>& dy, std::size_t workers = 1) {
  const std::size_t din = x.last_dim();
  const std::size_t dout = dy.last_dim();
  const std::size_t rows = x.rows();
  Tensor<T> dw({din, dout});
  parallel_for(din, workers, [&](std::size_t begin, std::size_t end) {
    std::vector<double> acc((end - begin) * dout, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = x.ptr() + r * din;
      const T* g = dy.ptr() + r * dout;
      for (std::size_t i = begin; i < end; ++i) {
        const double xi = xr[i];
        if (xi == 0.0) continue;
        double* a = acc.data() + (i - begin) * dout;
        for (std::size_t o = 0; o < dout; ++o) a[o] += xi * static_cast<double>(g[o]);
      }
    }
    for (std::size_t i = begin; i < end; ++i) {
      for (std::size_t o = 0; o < dout; ++o) {
        dw[i * dout + o] = static_cast<T>(acc[(i - begin) * dout + o]);
      }
    }
  });
  return dw;
}

/// Sum over every axis but the last.
template <std::floating_point T>
Tensor<T> sum_rows(const Tensor<T>& g) {
  const std::size_t d = g.last_dim();
  std::vector<double> acc(d, 0.0);
  for (std::size_t r = 0; r < g.rows(); ++r) {
    const T* gr = g.ptr() + r * d;
    for (std::size_t o = 0; o < d; ++o) acc[o] += gr[o];
  }
  Tensor<T> out({d});
  for (std::size_t o = 0; o < d; ++o) out[o] = static_cast<T>(acc[o]);
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline double softplus_scalar(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <std::floating_point T, class Fn>
Tensor<T> map(const Tensor<T>& x, Fn&& fn) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<T>(fn(static_cast<double>(x[i])));
  return y;
}

/// ln(1 + e^x) in the overflow-safe form max(x, 0) + ln(1 + e^-|x|).
template <std::floating_point T>
Tensor<T> softplus(const Tensor<T>& x) {
  return map(x, softplus_scalar);
}

template <std::floating_point T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return map(x, sigmoid_scalar);
}

/// x * sigmoid(x)
template <std::floating_point T>
Tensor<T> silu(const Tensor<T>& x) {
  return map(x, [](double v) { return v * sigmoid_scalar(v); });
}

inline constexpr double kInvSqrt2 = 0.70710678118654752440;

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

inline double gelu_grad_scalar(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = std::exp(-0.5 * x * x) * (kInvSqrt2 * std::numbers::inv_sqrtpi);
  return cdf + x * pdf;
}

/// Exact (erf) GELU.
template <std::floating_point T>
Tensor<T> gelu(const Tensor<T>& x) {
  return map(x, gelu_scalar);
}

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  return y;
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
  return y;
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, double s) {
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = static_cast<T>(s * a[i]);
  return y;
}

template <std::floating_point T>
void add_in_place(Tensor<T>& acc, const Tensor<T>& g) {
  if (acc.shape() != g.shape()) {
    throw DimensionError("add_in_place: " + shape_str(acc.shape()) + " vs " + shape_str(g.shape()));
  }
  for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

template <std::floating_point T>
struct LayerNormStats {
  std::vector<double> mean;
  std::vector<double> rstd;
};

template <std::floating_point T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps,
                     LayerNormStats<T>* stats = nullptr) {
  const std::size_t d = x.last_dim();
  if (d == 0) throw DimensionError("layer_norm: empty feature axis");
  require_shape(gamma, {d}, "layer_norm gamma");
  require_shape(beta, {d}, "layer_norm beta");
  const std::size_t rows = x.rows();
  Tensor<T> y(x.shape());
  if (stats) {
    stats->mean.resize(rows);
    stats->rstd.resize(rows);
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double c = xr[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    T* yr = y.ptr() + r * d;
    for (std::size_t i = 0; i < d; ++i) {
      yr[i] = static_cast<T>((xr[i] - mean) * rstd * gamma[i] + static_cast<double>(beta[i]));
    }
    if (stats) {
      stats->mean[r] = mean;
      stats->rstd[r] = rstd;
    }
  }
  y.ensure_finite("layer_norm");
  return y;
}

}  // namespace v2m
