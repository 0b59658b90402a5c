#pragma once

// Two-dimensional state-space models.
//
// roesser_scan_exact is the classical time-invariant Roesser recurrence with a
// horizontal state h1 and a vertical state h2. It is the verification oracle.
//
// The model path is the decomposed input-dependent form: a selective scan
// along one grid axis whose outputs feed a second selective scan along the
// other axis with the input matrix pinned to ones. Two pipelines run with
// independent parameters (rows then columns, columns then rows) and their
// outputs are summed.

#include <string>
#include <vector>

#include "v2m/autograd.hpp"
#include "v2m/scan1d.hpp"
#include "v2m/tensor.hpp"

namespace v2m {

// ---------------------------------------------------------------------------
// Exact Roesser recurrence
// ---------------------------------------------------------------------------

template <std::floating_point T>
struct Roesser2DParams {
  Tensor<T> a1, a2, a3, a4;  // [N, N]
  Tensor<T> b1, b2;          // [N, 1]
  Tensor<T> c1, c2;          // [1, N]

  std::size_t state() const { return a1.dim(0); }

  void validate() const {
    const std::size_t n = a1.rank() == 2 ? a1.dim(0) : 0;
    for (const auto* a : {&a1, &a2, &a3, &a4}) require_shape(*a, {n, n}, "Roesser A");
    require_shape(b1, {n, 1}, "Roesser B1");
    require_shape(b2, {n, 1}, "Roesser B2");
    require_shape(c1, {1, n}, "Roesser C1");
    require_shape(c2, {1, n}, "Roesser C2");
  }
};

/// Single-channel Roesser scan with zero boundary states, evaluated along
/// anti-diagonals so each position only reads finished predecessors:
///   h1[i, j+1] = A1 h1[i, j] + A2 h2[i, j] + B1 x[i, j]
///   h2[i+1, j] = A3 h1[i, j] + A4 h2[i, j] + B2 x[i, j]
///   y[i, j]    = C1 h1[i, j] + C2 h2[i, j]
template <std::floating_point T>
Tensor<T> roesser_scan_exact(const Tensor<T>& x, const Roesser2DParams<T>& p) {
  p.validate();
  if (x.rank() != 2) throw DimensionError("roesser_scan_exact: x must be [H, W], got " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1), n = p.state();
  // h1 has an extra column (entering state), h2 an extra row.
  std::vector<double> h1(rows * (cols + 1) * n, 0.0), h2((rows + 1) * cols * n, 0.0);
  auto h1_at = [&](std::size_t i, std::size_t j) { return h1.data() + (i * (cols + 1) + j) * n; };
  auto h2_at = [&](std::size_t i, std::size_t j) { return h2.data() + (i * cols + j) * n; };
  Tensor<T> y({rows, cols});
  if (rows == 0 || cols == 0) return y;
  for (std::size_t diag = 0; diag + 1 < rows + cols; ++diag) {
    const std::size_t i_lo = diag >= cols ? diag - cols + 1 : 0;
    const std::size_t i_hi = std::min(diag, rows - 1);
    for (std::size_t i = i_lo; i <= i_hi; ++i) {
      const std::size_t j = diag - i;
      const double* s1 = h1_at(i, j);
      const double* s2 = h2_at(i, j);
      const double xv = x[i * cols + j];
      double out = 0.0;
      for (std::size_t k = 0; k < n; ++k) out += p.c1[k] * s1[k] + p.c2[k] * s2[k];
      y[i * cols + j] = static_cast<T>(out);
      double* n1 = h1_at(i, j + 1);
      double* n2 = h2_at(i + 1, j);
      for (std::size_t r = 0; r < n; ++r) {
        double v1 = p.b1[r] * xv, v2 = p.b2[r] * xv;
        for (std::size_t k = 0; k < n; ++k) {
          v1 += p.a1[r * n + k] * s1[k] + p.a2[r * n + k] * s2[k];
          v2 += p.a3[r * n + k] * s1[k] + p.a4[r * n + k] * s2[k];
        }
        n1[r] = v1;
        n2[r] = v2;
      }
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Grid helpers
// ---------------------------------------------------------------------------

/// [B, H, W, D] -> [B, W, H, D]
template <std::floating_point T>
Tensor<T> transpose_hw(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("transpose_hw: expected [B, H, W, D], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), d = x.dim(3);
  Tensor<T> out({b, w, h, d});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const T* src = x.ptr() + ((n * h + i) * w + j) * d;
        std::copy(src, src + d, out.ptr() + ((n * w + j) * h + i) * d);
      }
    }
  }
  return out;
}

namespace ops {

template <std::floating_point T>
Var<T> transpose_hw(const Var<T>& x) {
  return x.tape().record(v2m::transpose_hw(x.value()), {x},
                         [x](const Tensor<T>& g) { x.tape().accumulate(x, v2m::transpose_hw(g)); });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Decomposed selective 2D scan
// ---------------------------------------------------------------------------

enum class AxisOrder { rows_then_cols, cols_then_rows };

/// Selective scan along each row: rows fold into the batch, W is the sequence.
template <std::floating_point T>
Tensor<T> row_scan(const Tensor<T>& x, const SelectiveParams<T>& p, BMode mode = BMode::projected,
                   const ExecPolicy& policy = {}) {
  if (x.rank() != 4) throw DimensionError("row_scan: expected [B, H, W, D], got " + shape_str(x.shape()));
  return selective_scan(x, p, mode, policy);
}

/// Selective scan down each column: columns fold into the batch, H is the sequence.
template <std::floating_point T>
Tensor<T> col_scan(const Tensor<T>& x, const SelectiveParams<T>& p, BMode mode = BMode::unit,
                   const ExecPolicy& policy = {}) {
  if (x.rank() != 4) throw DimensionError("col_scan: expected [B, H, W, D], got " + shape_str(x.shape()));
  return transpose_hw(selective_scan(transpose_hw(x), p, mode, policy));
}

/// First stage scans with projected B, second stage with B pinned to ones.
template <std::floating_point T>
struct Pipeline2DParams {
  SelectiveParams<T> first;
  SelectiveParams<T> second;
  AxisOrder order = AxisOrder::rows_then_cols;

  static Pipeline2DParams init(std::size_t channels, std::size_t state, AxisOrder order, Rng& rng) {
    Pipeline2DParams pp;
    pp.first = SelectiveParams<T>::init(channels, state, rng, BMode::projected);
    pp.second = SelectiveParams<T>::init(channels, state, rng, BMode::unit);
    pp.order = order;
    return pp;
  }

  void store(ParamMap<T>& out, const std::string& prefix) const {
    first.store(out, prefix + "first.");
    second.store(out, prefix + "second.");
  }

  static Pipeline2DParams load(const ParamMap<T>& in, const std::string& prefix, AxisOrder order) {
    return {SelectiveParams<T>::load(in, prefix + "first."), SelectiveParams<T>::load(in, prefix + "second."), order};
  }
};

template <std::floating_point T>
Tensor<T> pipeline_forward(const Tensor<T>& x, const Pipeline2DParams<T>& pp, const ExecPolicy& policy = {}) {
  if (pp.order == AxisOrder::rows_then_cols) {
    return col_scan(row_scan(x, pp.first, BMode::projected, policy), pp.second, BMode::unit, policy);
  }
  return row_scan(col_scan(x, pp.first, BMode::projected, policy), pp.second, BMode::unit, policy);
}

struct PipelineMask {
  bool horizontal = true;  // rows then columns
  bool vertical = true;    // columns then rows
};

/// Sum of the enabled pipelines; a disabled pipeline contributes zeros.
template <std::floating_point T>
Tensor<T> ssm2d_forward(const Tensor<T>& x, const Pipeline2DParams<T>& horizontal,
                        const Pipeline2DParams<T>& vertical, PipelineMask mask = {}, const ExecPolicy& policy = {}) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  if (mask.horizontal) add_in_place(y, pipeline_forward(x, horizontal, policy));
  if (mask.vertical) add_in_place(y, pipeline_forward(x, vertical, policy));
  return y;
}

template <std::floating_point T>
struct PipelineVars {
  SelectiveVars<T> first, second;
  AxisOrder order = AxisOrder::rows_then_cols;

  static PipelineVars bind(const VarMap<T>& vars, const std::string& prefix, AxisOrder order) {
    return {SelectiveVars<T>::bind(vars, prefix + "first."), SelectiveVars<T>::bind(vars, prefix + "second."),
            order};
  }
};

namespace ops {

template <std::floating_point T>
Var<T> row_scan(const Var<T>& x, const SelectiveVars<T>& p, BMode mode) {
  if (x.value().rank() != 4) throw DimensionError("row_scan: expected [B, H, W, D]");
  return selective_scan(x, p, mode);
}

template <std::floating_point T>
Var<T> col_scan(const Var<T>& x, const SelectiveVars<T>& p, BMode mode) {
  if (x.value().rank() != 4) throw DimensionError("col_scan: expected [B, H, W, D]");
  return transpose_hw(selective_scan(transpose_hw(x), p, mode));
}

template <std::floating_point T>
Var<T> pipeline_forward(const Var<T>& x, const PipelineVars<T>& pp) {
  if (pp.order == AxisOrder::rows_then_cols) {
    return col_scan(row_scan(x, pp.first, BMode::projected), pp.second, BMode::unit);
  }
  return row_scan(col_scan(x, pp.first, BMode::projected), pp.second, BMode::unit);
}

template <std::floating_point T>
Var<T> ssm2d_forward(const Var<T>& x, const PipelineVars<T>& horizontal, const PipelineVars<T>& vertical,
                     PipelineMask mask = {}) {
  if (mask.horizontal && mask.vertical) {
    return add(pipeline_forward(x, horizontal), pipeline_forward(x, vertical));
  }
  if (mask.horizontal) return pipeline_forward(x, horizontal);
  if (mask.vertical) return pipeline_forward(x, vertical);
  return x.tape().constant(Tensor<T>::zeros(x.shape()));
}

}  // namespace ops

}  // namespace v2m
