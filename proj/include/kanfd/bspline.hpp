#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "kanfd/common.hpp"

namespace kanfd {

struct SplineConfig {
  int order = 3;          // B-spline order k; the spline part has G+k basis functions
  int grid_intervals = 5; // G
  double adaptivity = 0.05; // g_e: 1 = fully uniform break points, 0 = fully adaptive

  void validate() const {
    if (order < 1) throw ConfigError("SplineConfig: order must be >= 1");
    if (grid_intervals < 1) throw ConfigError("SplineConfig: grid_intervals must be >= 1");
    if (adaptivity < 0.0 || adaptivity > 1.0)
      throw ConfigError("SplineConfig: adaptivity must be in [0,1]");
  }
};

// Knot vector of length G + 2k + 1: G+1 interior break points spanning the
// data range, extended by k knots per side at uniform spacing (range/G).
struct SplineGrid {
  std::vector<double> knots;
  int order = 0;

  int intervals() const { return static_cast<int>(knots.size()) - 2 * order - 1; }
  int num_basis() const { return intervals() + order; }
  double span_min() const { return knots[order]; }
  double span_max() const { return knots[order + intervals()]; }

  void validate() const {
    const int g = intervals();
    if (order < 1 || g < 1)
      throw ConfigError("SplineGrid: knot count inconsistent with order");
    for (std::size_t i = 1; i < knots.size(); ++i)
      if (knots[i] < knots[i - 1]) throw ConfigError("SplineGrid: knots must be nondecreasing");
    for (int j = order; j < order + g; ++j)
      if (!(knots[j] < knots[j + 1]))
        throw ConfigError("SplineGrid: interior break points must be strictly increasing");
  }
};

namespace detail {

// Index of the interval containing x: knots[j] <= x < knots[j+1], clamped to
// the interior span so the right endpoint (and out-of-span x) stay valid.
inline int find_span(const SplineGrid& grid, double x) {
  const int k = grid.order;
  const int g = grid.intervals();
  int lo = k, hi = k + g - 1;
  if (x <= grid.knots[k]) return k;
  if (x >= grid.knots[k + g]) return hi;
  while (lo < hi) {
    const int mid = (lo + hi + 1) / 2;
    if (grid.knots[mid] <= x)
      lo = mid;
    else
      hi = mid - 1;
  }
  return lo;
}

}  // namespace detail

// Evaluates the k+1 order-k basis functions that can be nonzero at x
// (indices first..first+k); x outside the span is clamped first.
// vals must hold order+1 doubles. Returns first.
inline int basis_nonzero(const SplineGrid& grid, double x, double* vals) {
  const int k = grid.order;
  x = std::clamp(x, grid.span_min(), grid.span_max());
  const int j = detail::find_span(grid, x);
  vals[0] = 1.0;
  for (int d = 1; d <= k; ++d) {
    double saved = 0.0;
    for (int r = 0; r < d; ++r) {
      const double right = grid.knots[j + r + 1] - x;
      const double left = x - grid.knots[j + 1 - d + r];
      const double temp = vals[r] / (right + left);
      vals[r] = saved + right * temp;
      saved = left * temp;
    }
    vals[d] = saved;
  }
  return j - k;
}

// Same, but also emits derivatives of the order-k basis at x. Out-of-span x
// is clamped, so derivatives are one-sided there.
inline int basis_nonzero_deriv(const SplineGrid& grid, double x, double* vals,
                               double* derivs) {
  const int k = grid.order;
  x = std::clamp(x, grid.span_min(), grid.span_max());
  const int j = detail::find_span(grid, x);
  vals[0] = 1.0;
  double lower[32];  // order k-1 values once d reaches k-1 (order <= 31)
  for (int d = 1; d <= k; ++d) {
    if (d == k)
      for (int r = 0; r < k; ++r) lower[r] = vals[r];
    double saved = 0.0;
    for (int r = 0; r < d; ++r) {
      const double right = grid.knots[j + r + 1] - x;
      const double left = x - grid.knots[j + 1 - d + r];
      const double temp = vals[r] / (right + left);
      vals[r] = saved + right * temp;
      saved = left * temp;
    }
    vals[d] = saved;
  }
  // lower[r] = B_{j-k+1+r, k-1}; derivative of B_{i,k} from the k-1 pair.
  const auto low = [&](int i) -> double {
    const int idx = i - (j - k + 1);
    return (idx >= 0 && idx < k) ? lower[idx] : 0.0;
  };
  for (int r = 0; r <= k; ++r) {
    const int i = j - k + r;
    const double d1 = grid.knots[i + k] - grid.knots[i];
    const double d2 = grid.knots[i + k + 1] - grid.knots[i + 1];
    double v = 0.0;
    if (d1 > 0.0) v += low(i) / d1;
    if (d2 > 0.0) v -= low(i + 1) / d2;
    derivs[r] = k * v;
  }
  return j - k;
}

// Dense basis vector of length G+k (Cox-de Boor via the local recursion).
inline Vector bspline_basis(const SplineGrid& grid, double x) {
  grid.validate();
  Vector out = Vector::Zero(grid.num_basis());
  std::vector<double> vals(grid.order + 1);
  const int first = basis_nonzero(grid, x, vals.data());
  for (int r = 0; r <= grid.order; ++r) out[first + r] = vals[r];
  return out;
}

// Quantile with linear interpolation between order statistics; data sorted.
inline double sorted_quantile(const std::vector<double>& sorted, double level) {
  const std::size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double rank = level * static_cast<double>(n - 1);
  const auto i = static_cast<std::size_t>(rank);
  if (i + 1 >= n) return sorted[n - 1];
  const double frac = rank - static_cast<double>(i);
  return sorted[i] + frac * (sorted[i + 1] - sorted[i]);
}

// Break points are the g_e-weighted mix of the uniform partition of
// [min,max] and the empirical quantiles at levels j/G; the knot vector is
// then extended by k knots per side at uniform spacing range/G.
inline SplineGrid make_grid(const std::vector<double>& samples,
                            const SplineConfig& config) {
  config.validate();
  if (samples.empty()) throw DataError("make_grid: samples must be nonempty");
  for (double v : samples)
    if (!std::isfinite(v)) throw DataError("make_grid: samples must be finite");

  std::vector<double> sorted(samples);
  std::sort(sorted.begin(), sorted.end());
  double mn = sorted.front(), mx = sorted.back();
  if (mx - mn <= 0.0) {  // degenerate range: widen symmetrically
    mn -= 1e-6;
    mx += 1e-6;
  }

  const int g = config.grid_intervals;
  const int k = config.order;
  const double ge = config.adaptivity;
  std::vector<double> breaks(g + 1);
  for (int j = 0; j <= g; ++j) {
    const double uniform =
        (j == 0) ? mn : (j == g) ? mx : mn + (mx - mn) * (static_cast<double>(j) / g);
    double adaptive = sorted_quantile(sorted, static_cast<double>(j) / g);
    if (j == 0) adaptive = mn;
    if (j == g) adaptive = mx;
    breaks[j] = ge * uniform + (1.0 - ge) * adaptive;
  }
  // Heavily tied samples can collapse adaptive break points; restore strict
  // monotonicity with a minimal nudge.
  const double eps = std::max(1e-12, 1e-9 * (mx - mn));
  for (int j = 1; j <= g; ++j)
    if (breaks[j] <= breaks[j - 1]) breaks[j] = breaks[j - 1] + eps;

  const double h = (mx - mn) / g;
  SplineGrid grid;
  grid.order = k;
  grid.knots.resize(g + 2 * k + 1);
  for (int m = 0; m < k; ++m) grid.knots[m] = breaks[0] - h * (k - m);
  for (int j = 0; j <= g; ++j) grid.knots[k + j] = breaks[j];
  for (int m = 1; m <= k; ++m) grid.knots[k + g + m] = breaks[g] + h * m;
  return grid;
}

}  // namespace kanfd
