#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "metalens/error.hpp"
#include "metalens/vec.hpp"

namespace metalens {

/// Node-centered rectangular grid: node (i, j) sits at (x0 + i*hx, y0 + j*hy),
/// stored row-major with i fastest.
struct GridSpec {
  int nx = 0;
  int ny = 0;
  double x0 = 0.0;
  double y0 = 0.0;
  double hx = 0.0;
  double hy = 0.0;

  std::size_t size() const { return static_cast<std::size_t>(nx) * ny; }
  std::size_t idx(int i, int j) const { return static_cast<std::size_t>(j) * nx + i; }
  double x(int i) const { return x0 + i * hx; }
  double y(int j) const { return y0 + j * hy; }
  Vec2 node(int i, int j) const { return {x(i), y(j)}; }
  double xmax() const { return x0 + (nx - 1) * hx; }
  double ymax() const { return y0 + (ny - 1) * hy; }

  bool contains(Vec2 p) const {
    return p.x >= x0 && p.x <= xmax() && p.y >= y0 && p.y <= ymax();
  }

  bool same_layout(const GridSpec& o, double tol = 1e-9) const {
    return nx == o.nx && ny == o.ny && std::abs(x0 - o.x0) < tol &&
           std::abs(y0 - o.y0) < tol && std::abs(hx - o.hx) < tol &&
           std::abs(hy - o.hy) < tol;
  }
};

struct ScalarField {
  GridSpec grid;
  std::vector<double> v;

  ScalarField() = default;
  explicit ScalarField(GridSpec g) : grid(g), v(g.size(), 0.0) {}

  double& at(int i, int j) { return v[grid.idx(i, j)]; }
  double at(int i, int j) const { return v[grid.idx(i, j)]; }
};

using Mask = std::vector<std::uint8_t>;

/// Symmetric 2x2 matrix of second differences.
struct Sym2 {
  double xx = 0.0;
  double xy = 0.0;
  double yy = 0.0;

  double det() const { return xx * yy - xy * xy; }
  double trace() const { return xx + yy; }
  double min_eigenvalue() const {
    const double d = std::sqrt((xx - yy) * (xx - yy) + 4.0 * xy * xy);
    return 0.5 * (trace() - d);
  }
};

/// Square design grid centered at the origin covering a disk of radius
/// r_outer with `resolution` cells across the diameter plus a two-cell halo.
/// Node counts are odd so the center is an exact node.
inline GridSpec design_grid(double r_outer, int resolution) {
  const double h = 2.0 * r_outer / resolution;
  const int half = resolution / 2 + 2;
  GridSpec g;
  g.nx = g.ny = 2 * half + 1;
  g.hx = g.hy = h;
  g.x0 = g.y0 = -half * h;
  return g;
}

inline Mask annulus_mask(const GridSpec& g, double r_inner, double r_outer) {
  Mask m(g.size(), 0);
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i) {
      const double r = norm(g.node(i, j));
      if (r <= r_outer && r >= r_inner) m[g.idx(i, j)] = 1;
    }
  return m;
}

/// Nodes whose full 3x3 neighborhood lies inside the mask.
inline Mask interior_mask(const GridSpec& g, const Mask& m) {
  Mask out(g.size(), 0);
  for (int j = 1; j + 1 < g.ny; ++j)
    for (int i = 1; i + 1 < g.nx; ++i) {
      bool all = true;
      for (int dj = -1; dj <= 1 && all; ++dj)
        for (int di = -1; di <= 1; ++di)
          if (!m[g.idx(i + di, j + dj)]) {
            all = false;
            break;
          }
      if (all) out[g.idx(i, j)] = 1;
    }
  return out;
}

/// Centered differences in the interior, one-sided on the box edges.
inline std::pair<ScalarField, ScalarField> centered_gradient(const ScalarField& f) {
  const GridSpec& g = f.grid;
  ScalarField gx(g), gy(g);
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i) {
      const std::size_t k = g.idx(i, j);
      if (i == 0)
        gx.v[k] = (f.at(1, j) - f.at(0, j)) / g.hx;
      else if (i == g.nx - 1)
        gx.v[k] = (f.at(i, j) - f.at(i - 1, j)) / g.hx;
      else
        gx.v[k] = (f.at(i + 1, j) - f.at(i - 1, j)) / (2.0 * g.hx);
      if (j == 0)
        gy.v[k] = (f.at(i, 1) - f.at(i, 0)) / g.hy;
      else if (j == g.ny - 1)
        gy.v[k] = (f.at(i, j) - f.at(i, j - 1)) / g.hy;
      else
        gy.v[k] = (f.at(i, j + 1) - f.at(i, j - 1)) / (2.0 * g.hy);
    }
  return {std::move(gx), std::move(gy)};
}

/// Centered second differences at a box-interior node.
inline Sym2 hessian_at(const ScalarField& f, int i, int j) {
  const GridSpec& g = f.grid;
  Sym2 h;
  h.xx = (f.at(i + 1, j) - 2.0 * f.at(i, j) + f.at(i - 1, j)) / (g.hx * g.hx);
  h.yy = (f.at(i, j + 1) - 2.0 * f.at(i, j) + f.at(i, j - 1)) / (g.hy * g.hy);
  h.xy = (f.at(i + 1, j + 1) - f.at(i - 1, j + 1) - f.at(i + 1, j - 1) + f.at(i - 1, j - 1)) /
         (4.0 * g.hx * g.hy);
  return h;
}

/// Bilinear interpolation; the caller is responsible for grid.contains(p).
inline double bilinear(const ScalarField& f, Vec2 p) {
  const GridSpec& g = f.grid;
  double fi = (p.x - g.x0) / g.hx;
  double fj = (p.y - g.y0) / g.hy;
  int i = static_cast<int>(std::floor(fi));
  int j = static_cast<int>(std::floor(fj));
  i = std::max(0, std::min(i, g.nx - 2));
  j = std::max(0, std::min(j, g.ny - 2));
  const double tx = fi - i;
  const double ty = fj - j;
  return (1.0 - tx) * (1.0 - ty) * f.at(i, j) + tx * (1.0 - ty) * f.at(i + 1, j) +
         (1.0 - tx) * ty * f.at(i, j + 1) + tx * ty * f.at(i + 1, j + 1);
}

}  // namespace metalens
