#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "bevtrack/numerics/autodiff.hpp"
#include "bevtrack/numerics/tensor.hpp"

namespace bev {

// Lattice convention: cell (row, col) sits at continuous coordinate (v=row,
// u=col). Valid coordinates are [0, W-1] x [0, H-1]; anything else is out of
// bounds and samples to zero.
struct BilinearStencil {
  std::size_t x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  double fx = 0.0, fy = 0.0;
  bool in_bounds = false;
};

inline BilinearStencil bilinear_stencil(std::size_t height, std::size_t width, double u, double v) {
  BilinearStencil s;
  if (!(u >= 0.0 && v >= 0.0 && u <= static_cast<double>(width - 1) && v <= static_cast<double>(height - 1)))
    return s;
  s.in_bounds = true;
  auto axis = [](double c, std::size_t n, std::size_t& i0, std::size_t& i1, double& f) {
    if (n == 1) {
      i0 = i1 = 0;
      f = 0.0;
      return;
    }
    i0 = std::min(static_cast<std::size_t>(std::floor(c)), n - 2);
    i1 = i0 + 1;
    f = c - static_cast<double>(i0);
  };
  axis(u, width, s.x0, s.x1, s.fx);
  axis(v, height, s.y0, s.y1, s.fy);
  return s;
}

struct GridSample {
  std::vector<double> value;
  bool in_bounds = false;
};

inline GridSample bilinear_sample(const FeatureGrid& grid, double u, double v) {
  if (grid.empty()) throw DomainError("bilinear_sample on an empty grid");
  GridSample out{std::vector<double>(grid.channels, 0.0), false};
  const auto s = bilinear_stencil(grid.height, grid.width, u, v);
  if (!s.in_bounds) return out;
  out.in_bounds = true;
  const double w00 = (1 - s.fx) * (1 - s.fy), w01 = s.fx * (1 - s.fy);
  const double w10 = (1 - s.fx) * s.fy, w11 = s.fx * s.fy;
  auto a = grid.cell(s.y0, s.x0), b = grid.cell(s.y0, s.x1);
  auto c = grid.cell(s.y1, s.x0), d = grid.cell(s.y1, s.x1);
  for (std::size_t k = 0; k < grid.channels; ++k)
    out.value[k] = w00 * a[k] + w01 * b[k] + w10 * c[k] + w11 * d[k];
  return out;
}

namespace ad {

struct SampleResult {
  Var values;                       // [N, C]
  std::vector<std::uint8_t> valid;  // N flags
};

// Differentiable bilinear sampling of grid [H, W, C] at coords [N, 2] = (u, v).
inline SampleResult sample_bilinear(const Var& grid, const Var& coords) {
  Tape& t = detail::same_tape(grid, coords);
  if (grid.shape().size() != 3 || coords.shape().size() != 2 || coords.dim(1) != 2)
    throw DimensionError("sample_bilinear expects grid [H,W,C] and coords [N,2]");
  const std::size_t h = grid.dim(0), w = grid.dim(1), c = grid.dim(2), n = coords.dim(0);
  auto gv = grid.value();
  auto cv = coords.value();
  std::vector<BilinearStencil> st(n);
  SampleResult res;
  res.valid.assign(n, 0);
  std::vector<double> out(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    st[i] = bilinear_stencil(h, w, cv[2 * i], cv[2 * i + 1]);
    if (!st[i].in_bounds) continue;
    res.valid[i] = 1;
    const auto& s = st[i];
    const double w00 = (1 - s.fx) * (1 - s.fy), w01 = s.fx * (1 - s.fy);
    const double w10 = (1 - s.fx) * s.fy, w11 = s.fx * s.fy;
    const double* a = gv.data() + (s.y0 * w + s.x0) * c;
    const double* b = gv.data() + (s.y0 * w + s.x1) * c;
    const double* cc = gv.data() + (s.y1 * w + s.x0) * c;
    const double* d = gv.data() + (s.y1 * w + s.x1) * c;
    for (std::size_t k = 0; k < c; ++k) out[i * c + k] = w00 * a[k] + w01 * b[k] + w10 * cc[k] + w11 * d[k];
  }
  const bool rg = grid.requires_grad() || coords.requires_grad();
  Tape* tp = &t;
  Var gi = grid, ci = coords;
  res.values = t.make({n, c}, std::move(out), rg, [tp, gi, ci, st, w, c, n](std::span<const double> g) {
    auto gv = gi.value();
    double* gg = tp->grad_ptr(gi);
    double* gc = tp->grad_ptr(ci);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = st[i];
      if (!s.in_bounds) continue;
      const double w00 = (1 - s.fx) * (1 - s.fy), w01 = s.fx * (1 - s.fy);
      const double w10 = (1 - s.fx) * s.fy, w11 = s.fx * s.fy;
      const std::size_t i00 = (s.y0 * w + s.x0) * c, i01 = (s.y0 * w + s.x1) * c;
      const std::size_t i10 = (s.y1 * w + s.x0) * c, i11 = (s.y1 * w + s.x1) * c;
      double du = 0.0, dv = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double go = g[i * c + k];
        if (gg) {
          gg[i00 + k] += w00 * go;
          gg[i01 + k] += w01 * go;
          gg[i10 + k] += w10 * go;
          gg[i11 + k] += w11 * go;
        }
        if (gc) {
          du += go * ((1 - s.fy) * (gv[i01 + k] - gv[i00 + k]) + s.fy * (gv[i11 + k] - gv[i10 + k]));
          dv += go * ((1 - s.fx) * (gv[i10 + k] - gv[i00 + k]) + s.fx * (gv[i11 + k] - gv[i01 + k]));
        }
      }
      if (gc) {
        if (s.x0 != s.x1) gc[2 * i] += du;
        if (s.y0 != s.y1) gc[2 * i + 1] += dv;
      }
    }
  });
  return res;
}

}  // namespace ad
}  // namespace bev
