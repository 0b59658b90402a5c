#include <gtest/gtest.h>

#include <cmath>

#include "v2m/ssm2d.hpp"

namespace v2m {
namespace {

Roesser2DParams<double> random_roesser(Rng& rng, std::size_t n, bool decoupled) {
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

// Time-invariant 1D recurrence s_{t+1} = A s_t + B x_t, y_t = C s_t, s_0 = 0.
std::vector<double> scan_1d(const std::vector<double>& x, const Tensor<double>& a, const Tensor<double>& b,
                            const Tensor<double>& c) {
  const std::size_t n = a.dim(0);
  std::vector<double> s(n, 0.0), y;
  for (double xv : x) {
    double out = 0;
    for (std::size_t k = 0; k < n; ++k) out += c[k] * s[k];
    y.push_back(out);
    std::vector<double> next(n);
    for (std::size_t r = 0; r < n; ++r) {
      next[r] = b[r] * xv;
      for (std::size_t k = 0; k < n; ++k) next[r] += a[r * n + k] * s[k];
    }
    s = next;
  }
  return y;
}

TEST(Roesser, TwoByTwoHandCase) {
  auto z = Tensor<double>::zeros({1, 1});
  auto one = Tensor<double>::ones({1, 1});
  Roesser2DParams<double> p{z, z, z, z, one, one, one, one};
  auto y = roesser_scan_exact(Tensor<double>::ones({2, 2}), p);
  EXPECT_EQ(y.values(), (std::vector<double>{0, 1, 1, 2}));
}

TEST(Roesser, ZeroInputGivesZero) {
  Rng rng(1);
  auto p = random_roesser(rng, 3, false);
  auto y = roesser_scan_exact(Tensor<double>::zeros({5, 4}), p);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Roesser, DecouplesIntoTwoOneDimensionalScans) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 1 + rng.below(8), w = 1 + rng.below(8), n = 1 + rng.below(4);
    auto p = random_roesser(rng, n, true);
    auto x = rng_normal<double>(rng, {h, w}, 0, 1);
    auto y = roesser_scan_exact(x, p);
    for (std::size_t i = 0; i < h; ++i) {
      std::vector<double> row(x.ptr() + i * w, x.ptr() + (i + 1) * w);
      auto yr = scan_1d(row, p.a1, p.b1, p.c1);
      for (std::size_t j = 0; j < w; ++j) {
        std::vector<double> col;
        for (std::size_t r = 0; r < h; ++r) col.push_back(x[r * w + j]);
        const double expected = yr[j] + scan_1d(col, p.a4, p.b2, p.c2)[i];
        ASSERT_NEAR(y[i * w + j], expected, 1e-12);
      }
    }
  }
}

TEST(Roesser, IsLinear) {
  Rng rng(3);
  auto p = random_roesser(rng, 3, false);
  auto x = rng_normal<double>(rng, {6, 7}, 0, 1);
  EXPECT_LE(max_abs_diff(roesser_scan_exact(scale(x, -2.5), p), scale(roesser_scan_exact(x, p), -2.5)), 1e-12);
}

SelectiveParams<double> random_params(Rng& rng, std::size_t d, std::size_t n, BMode mode = BMode::projected) {
  auto sp = SelectiveParams<double>::init(d, n, rng, mode);
  sp.a_log = rng_normal<double>(rng, {d, n}, 0.0, 0.5);
  if (mode == BMode::projected) sp.w_b = rng_normal<double>(rng, {d, n}, 0.0, 0.5);
  sp.w_c = rng_normal<double>(rng, {d, n}, 0.0, 0.5);
  sp.w_dt = rng_normal<double>(rng, {d, sp.dt_rank()}, 0.0, 0.5);
  sp.w_dt_up = rng_normal<double>(rng, {sp.dt_rank(), d}, 0.0, 0.5);
  sp.p = rng_normal<double>(rng, {d}, -0.5, 0.5);
  return sp;
}

Pipeline2DParams<double> random_pipeline(Rng& rng, std::size_t d, std::size_t n, AxisOrder order) {
  return {random_params(rng, d, n), random_params(rng, d, n, BMode::unit), order};
}

// Copy out one sequence [1, len, D] along a grid axis.
Tensor<double> take_row(const Tensor<double>& x, std::size_t b, std::size_t i) {
  const std::size_t w = x.dim(2), d = x.dim(3);
  Tensor<double> r({1, w, d});
  for (std::size_t j = 0; j < w; ++j)
    for (std::size_t k = 0; k < d; ++k) r[j * d + k] = x.at({b, i, j, k});
  return r;
}

Tensor<double> take_col(const Tensor<double>& x, std::size_t b, std::size_t j) {
  const std::size_t h = x.dim(1), d = x.dim(3);
  Tensor<double> c({1, h, d});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t k = 0; k < d; ++k) c[i * d + k] = x.at({b, i, j, k});
  return c;
}

TEST(RowScan, SingleRowIsOneScan) {
  Rng rng(4);
  auto sp = random_params(rng, 3, 2);
  auto x = rng_normal<double>(rng, {1, 1, 6, 3}, 0, 1);
  auto y = row_scan(x, sp);
  auto ref = selective_scan(x.reshaped({1, 6, 3}), sp, BMode::projected);
  EXPECT_TRUE(y.reshaped({1, 6, 3}).bitwise_equal(ref));
}

TEST(RowScan, MatchesPerRowLoopAndPermutesWithRows) {
  Rng rng(5);
  auto sp = random_params(rng, 4, 3);
  auto x = rng_normal<double>(rng, {2, 5, 6, 4}, 0, 1);
  auto y = row_scan(x, sp);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t i = 0; i < 5; ++i) {
      auto ref = selective_scan(take_row(x, b, i), sp, BMode::projected);
      EXPECT_LE(max_abs_diff(take_row(y, b, i), ref), 1e-12);
    }
  }
  // Reverse the row order of x; output rows follow.
  Tensor<double> xr(x.shape());
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 6; ++j)
        for (std::size_t k = 0; k < 4; ++k) xr.at({b, 4 - i, j, k}) = x.at({b, i, j, k});
  auto yr = row_scan(xr, sp);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 5; ++i) EXPECT_TRUE(take_row(yr, b, 4 - i).bitwise_equal(take_row(y, b, i)));
}

TEST(ColScan, SingleColumnIsOneScan) {
  Rng rng(6);
  auto sp = random_params(rng, 3, 2, BMode::unit);
  auto x = rng_normal<double>(rng, {1, 7, 1, 3}, 0, 1);
  auto y = col_scan(x, sp);
  auto ref = selective_scan(x.reshaped({1, 7, 3}), sp, BMode::unit);
  EXPECT_LE(max_abs_diff(y.reshaped({1, 7, 3}), ref), 1e-15);
}

TEST(ColScan, MatchesPerColumnLoop) {
  Rng rng(7);
  auto sp = random_params(rng, 4, 3, BMode::unit);
  auto x = rng_normal<double>(rng, {2, 5, 6, 4}, 0, 1);
  auto y = col_scan(x, sp);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 6; ++j)
      EXPECT_LE(max_abs_diff(take_col(y, b, j), selective_scan(take_col(x, b, j), sp, BMode::unit)), 1e-12);
}

TEST(ColScan, MemorylessLimitReadsInstantaneousInjection) {
  // Very negative A drives a_bar to zero: y_t = sum_n C_t[n] * b_bar_t[n] * x_t.
  Rng rng(8);
  auto sp = random_params(rng, 2, 3, BMode::unit);
  sp.a_log.fill(std::log(1e4));
  sp.p.fill(2.0);
  auto x = Tensor<double>::zeros({1, 4, 2, 2});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t k = 0; k < 2; ++k) x.at({0, i, j, k}) = 0.3 + 0.1 * k;
  auto y = col_scan(x, sp);
  auto proj = selective_project(x, sp);
  for (std::size_t pos = 0; pos < 8; ++pos) {
    for (std::size_t k = 0; k < 2; ++k) {
      const double dl = proj.delta[pos * 2 + k];
      double expected = 0;
      for (std::size_t n = 0; n < 3; ++n) {
        const double z = -dl * 1e4;
        expected += proj.c[pos * 3 + n] * (std::expm1(z) / z) * dl * x[pos * 2 + k];
      }
      EXPECT_NEAR(y[pos * 2 + k], expected, 1e-9);
    }
  }
}

TEST(Ssm2d, ZeroReadoutGivesZero) {
  Rng rng(9);
  auto ph = random_pipeline(rng, 3, 2, AxisOrder::rows_then_cols);
  auto pv = random_pipeline(rng, 3, 2, AxisOrder::cols_then_rows);
  ph.second.w_c.fill(0.0);
  pv.second.w_c.fill(0.0);
  auto y = ssm2d_forward(rng_normal<double>(rng, {2, 4, 4, 3}, 0, 1), ph, pv);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Ssm2d, DisabledVerticalPipelineLeavesHorizontal) {
  Rng rng(10);
  auto ph = random_pipeline(rng, 3, 2, AxisOrder::rows_then_cols);
  auto pv = random_pipeline(rng, 3, 2, AxisOrder::cols_then_rows);
  auto x = rng_normal<double>(rng, {1, 4, 5, 3}, 0, 1);
  auto y = ssm2d_forward(x, ph, pv, PipelineMask{true, false});
  EXPECT_LE(max_abs_diff(y, col_scan(row_scan(x, ph.first), ph.second)), 0.0);
  auto zeroed = pv;
  zeroed.second.w_c.fill(0.0);
  EXPECT_LE(max_abs_diff(ssm2d_forward(x, ph, zeroed), y), 0.0);
}

// Length-one selective scan on a single D-vector, written out by hand.
std::vector<double> scan_one(const std::vector<double>& x, const SelectiveParams<double>& sp, bool unit) {
  const std::size_t d = sp.channels(), n = sp.state(), r = sp.dt_rank();
  std::vector<double> y(d, 0.0), b(n, 0.0), c(n, 0.0);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < d; ++i) {
      if (!unit) b[k] += x[i] * sp.w_b[i * n + k];
      c[k] += x[i] * sp.w_c[i * n + k];
    }
  if (unit) std::fill(b.begin(), b.end(), 1.0);
  for (std::size_t o = 0; o < d; ++o) {
    double s = sp.p[o];
    for (std::size_t q = 0; q < r; ++q) {
      double u = 0;
      for (std::size_t i = 0; i < d; ++i) u += x[i] * sp.w_dt[i * r + q];
      s += u * sp.w_dt_up[q * d + o];
    }
    const double dl = std::log1p(std::exp(s));
    for (std::size_t k = 0; k < n; ++k) {
      const double z = -std::exp(sp.a_log[o * n + k]) * dl;
      y[o] += c[k] * (std::expm1(z) / z) * dl * b[k] * x[o];
    }
  }
  return y;
}

TEST(Ssm2d, OneByOneGridHandComposition) {
  Rng rng(11);
  auto ph = random_pipeline(rng, 4, 3, AxisOrder::rows_then_cols);
  auto pv = random_pipeline(rng, 4, 3, AxisOrder::cols_then_rows);
  auto x = rng_normal<double>(rng, {1, 1, 1, 4}, 0, 1);
  auto y = ssm2d_forward(x, ph, pv);
  std::vector<double> xv(x.ptr(), x.ptr() + 4);
  auto yh = scan_one(scan_one(xv, ph.first, false), ph.second, true);
  auto yv = scan_one(scan_one(xv, pv.first, false), pv.second, true);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(y[k], yh[k] + yv[k], 1e-12);
}

TEST(Ssm2d, RowsThenColsDependsOnlyOnUpperLeftQuadrant) {
  Rng rng(12);
  auto ph = random_pipeline(rng, 3, 2, AxisOrder::rows_then_cols);
  auto pv = ph;
  const std::size_t h = 5, w = 4;
  auto x = rng_normal<double>(rng, {1, h, w, 3}, 0, 1);
  for (ScanImpl impl : {ScanImpl::sequential, ScanImpl::parallel}) {
    ExecPolicy policy{1, impl, true};
    auto y = ssm2d_forward(x, ph, pv, PipelineMask{true, false}, policy);
    for (std::size_t pi = 0; pi < h; ++pi) {
      for (std::size_t pj = 0; pj < w; ++pj) {
        auto xp = x;
        for (std::size_t k = 0; k < 3; ++k) xp.at({0, pi, pj, k}) += 10.0;
        auto yp = ssm2d_forward(xp, ph, pv, PipelineMask{true, false}, policy);
        for (std::size_t i = 0; i < h; ++i) {
          for (std::size_t j = 0; j < w; ++j) {
            if (pi <= i && pj <= j) continue;
            for (std::size_t k = 0; k < 3; ++k) ASSERT_EQ(y.at({0, i, j, k}), yp.at({0, i, j, k}));
          }
        }
      }
    }
  }
}

TEST(Ssm2d, TapeMatchesValuePath) {
  Rng rng(13);
  auto ph = random_pipeline(rng, 4, 2, AxisOrder::rows_then_cols);
  auto pv = random_pipeline(rng, 4, 2, AxisOrder::cols_then_rows);
  auto x = rng_normal<double>(rng, {2, 3, 3, 4}, 0, 1);
  ParamMap<double> m;
  ph.store(m, "h.");
  pv.store(m, "v.");
  Tape<double> tape(false);
  auto vars = bind_parameters(tape, m);
  auto y = ops::ssm2d_forward(tape.constant(x), PipelineVars<double>::bind(vars, "h.", AxisOrder::rows_then_cols),
                              PipelineVars<double>::bind(vars, "v.", AxisOrder::cols_then_rows));
  EXPECT_TRUE(y.value().bitwise_equal(ssm2d_forward(x, ph, pv)));
}

TEST(Ssm2d, GradientsMatchFiniteDifferences) {
  Rng rng(14);
  const std::size_t d = 4, n = 4;
  auto ph = random_pipeline(rng, d, n, AxisOrder::rows_then_cols);
  auto pv = random_pipeline(rng, d, n, AxisOrder::cols_then_rows);
  ParamMap<double> m;
  ph.store(m, "h.");
  pv.store(m, "v.");
  m["x"] = rng_normal<double>(rng, {1, 4, 4, d}, 0, 1);
  auto weights = rng_normal<double>(rng, {1, 4, 4, d}, 0, 1);
  auto report = finite_diff_check(
      [&](Tape<double>& t, const VarMap<double>& v) {
        auto y = ops::ssm2d_forward(lookup(v, "x"), PipelineVars<double>::bind(v, "h.", AxisOrder::rows_then_cols),
                                    PipelineVars<double>::bind(v, "v.", AxisOrder::cols_then_rows));
        return ops::sum(ops::mul(y, t.constant(weights)));
      },
      m, 1e-4);
  EXPECT_LE(report.max_rel_error(), 1e-4) << report.worst()->name;
}

}  // namespace
}  // namespace v2m
