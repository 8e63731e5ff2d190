#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "metalens/error.hpp"
#include "metalens/grid.hpp"
#include "metalens/parallel.hpp"
#include "metalens/scenario.hpp"
#include "metalens/vec.hpp"

namespace metalens {

struct SolverParams {
  /// Entropic regularization stages, strictly decreasing, in units of squared
  /// length. Empty selects the default geometric schedule from 0.1*diam(D2)^2
  /// down to 1e-3*diam(D2)^2 with factor 1/2.
  std::vector<double> epsilon_schedule;
  int max_iterations = 2000;  // per stage
  double marginal_tolerance = 1e-4;
  /// Resolution for an independent certification grid; 0 certifies on the
  /// problem grid itself.
  int residual_grid = 0;
  enum class Init { zero, random } init = Init::zero;
  unsigned init_seed = 0;
  /// Target cell size in units of the source grid spacing.
  double target_spacing_factor = 0.75;
};

struct ResidualStats {
  double median = 0.0;
  double p95 = 0.0;
  double max = 0.0;
  int interior_nodes = 0;
  // Interior nodes skipped because the discrete gradient fell inside the
  // hole of an annular target (the gradient-jump set of the potential).
  int kink_nodes = 0;
};

struct ResidualField {
  ScalarField field;
  ResidualStats stats;
};

struct ConvexityReport {
  double min_eigenvalue = 0.0;
  double fraction_nonconvex = 0.0;
};

struct StageReport {
  double epsilon = 0.0;
  int iterations = 0;
  double marginal_error = 0.0;
  double kept_fraction = 1.0;
};

struct SolverResult {
  ScalarField phi;
  ScalarField grad_x, grad_y;
  ResidualStats residual_stats;
  int iterations_used = 0;
  bool converged = false;
  double marginal_error = 0.0;
  std::vector<StageReport> stages;
  int zero_mass_nodes = 0;
  double max_gradient_radius = 0.0;
  double quadrature_defect = 0.0;
  /// Entropic Brenier potential and its gradient, evaluable at any point of
  /// the plane (convex by construction; gradient lies in the closed target).
  std::function<double(Vec2)> potential;
  std::function<Vec2(Vec2)> gradient;
};

namespace detail {

/// Polar quadrature cells over the target annulus: per-cell mass and
/// density-weighted centroid, 2x2 Gauss points per cell.
struct TargetCloud {
  std::vector<Vec2> points;
  std::vector<double> masses;
  double total = 0.0;
};

inline TargetCloud build_target_cloud(const TargetDomain& dom,
                                      const std::function<double(Vec2)>& f2, double spacing) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  const double gauss = 1.0 / std::sqrt(3.0);
  TargetCloud tc;
  const double span = dom.r_max - dom.r_min;
  const int n_r = std::max(2, static_cast<int>(std::lround(span / spacing)));
  const double dr = span / n_r;
  for (int k = 0; k < n_r; ++k) {
    const double r_lo = dom.r_min + k * dr;
    const double r_mid = r_lo + 0.5 * dr;
    const int n_phi = std::max(8, static_cast<int>(std::lround(kTwoPi * r_mid / spacing)));
    const double dphi = kTwoPi / n_phi;
    for (int l = 0; l < n_phi; ++l) {
      const double phi_mid = (l + 0.5) * dphi;
      double mass = 0.0;
      double cx = 0.0, cy = 0.0;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
          const double r = r_mid + 0.5 * dr * (a ? gauss : -gauss);
          const double phi = phi_mid + 0.5 * dphi * (b ? gauss : -gauss);
          const Vec2 p{r * std::cos(phi), r * std::sin(phi)};
          const double w = f2(p) * r * (0.25 * dr * dphi);
          mass += w;
          cx += w * p.x;
          cy += w * p.y;
        }
      if (!(mass > 0.0)) continue;  // cell carries no target mass
      tc.points.push_back({cx / mass, cy / mass});
      tc.masses.push_back(mass);
      tc.total += mass;
    }
  }
  if (tc.points.empty() || !(tc.total > 0.0))
    throw_error(ErrorCode::degenerate_density, "target density integrates to zero on its cap");
  return tc;
}

/// Compressed pair lists for one truncation level: rows over admissible j,
/// columns over admissible i.
struct PairLists {
  bool dense = true;
  std::vector<std::uint32_t> row_ptr, row_idx;
  std::vector<std::uint32_t> col_ptr, col_idx;
  double fraction = 1.0;
};

}  // namespace detail

inline std::vector<double> default_epsilon_schedule(double diam2) {
  std::vector<double> s;
  const double last = 1e-3 * diam2;
  for (double e = 0.1 * diam2; e > last * (1.0 + 1e-12); e *= 0.5) s.push_back(e);
  s.push_back(last);
  return s;
}

namespace detail {

struct Sinkhorn {
  const std::vector<Vec2>& xs;
  const std::vector<Vec2>& ys;
  const std::vector<double>& log_mu;
  const std::vector<double>& log_nu;
  const std::vector<double>& x_half;  // |x|^2/2
  const std::vector<double>& y_half;
  std::vector<double>& u;
  std::vector<double>& v;
  double eps = 1.0;
  PairLists lists;

  static constexpr double kTruncation = 35.0;

  std::size_t n() const { return xs.size(); }
  std::size_t m() const { return ys.size(); }

  void build_lists() {
    const std::size_t N = n(), M = m();
    const double inv_eps = 1.0 / eps;
    std::vector<double> zc(N), wc(M);
    for (std::size_t i = 0; i < N; ++i) zc[i] = (u[i] - x_half[i]) * inv_eps;
    for (std::size_t j = 0; j < M; ++j) wc[j] = (v[j] - y_half[j]) * inv_eps;

    std::vector<std::uint32_t> row_count(N, 0);
    std::vector<std::size_t> chunk_total((N + 1023) / 1024, 0);
    parallel_for(N, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        const Vec2 xi = xs[i] * inv_eps;
        std::uint32_t c = 0;
        for (std::size_t j = 0; j < M; ++j)
          if (zc[i] + wc[j] + xi.x * ys[j].x + xi.y * ys[j].y >= -kTruncation) ++c;
        row_count[i] = c;
      }
    });
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < N; ++i) pairs += row_count[i];
    lists.fraction = static_cast<double>(pairs) / (static_cast<double>(N) * M);
    if (lists.fraction > 0.6) {
      lists.dense = true;
      lists.row_ptr.clear();
      lists.row_idx.clear();
      lists.col_ptr.clear();
      lists.col_idx.clear();
      return;
    }
    lists.dense = false;
    lists.row_ptr.assign(N + 1, 0);
    for (std::size_t i = 0; i < N; ++i) lists.row_ptr[i + 1] = lists.row_ptr[i] + row_count[i];
    lists.row_idx.assign(pairs, 0);
    std::vector<std::uint32_t> col_count(M, 0);
    parallel_for(N, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        const Vec2 xi = xs[i] * inv_eps;
        std::uint32_t at = lists.row_ptr[i];
        for (std::size_t j = 0; j < M; ++j)
          if (zc[i] + wc[j] + xi.x * ys[j].x + xi.y * ys[j].y >= -kTruncation)
            lists.row_idx[at++] = static_cast<std::uint32_t>(j);
      }
    });
    for (std::size_t k = 0; k < pairs; ++k) ++col_count[lists.row_idx[k]];
    lists.col_ptr.assign(M + 1, 0);
    for (std::size_t j = 0; j < M; ++j) lists.col_ptr[j + 1] = lists.col_ptr[j] + col_count[j];
    lists.col_idx.assign(pairs, 0);
    std::vector<std::uint32_t> fill(lists.col_ptr.begin(), lists.col_ptr.end() - 1);
    for (std::size_t i = 0; i < N; ++i)
      for (std::uint32_t k = lists.row_ptr[i]; k < lists.row_ptr[i + 1]; ++k)
        lists.col_idx[fill[lists.row_idx[k]]++] = static_cast<std::uint32_t>(i);
  }

  // One row LSE: u_i = x_half_i - eps * LSE_j (log_nu_j + (v_j - y_half_j)/eps + x_i.y_j/eps)
  void update_u() {
    const std::size_t N = n(), M = m();
    const double inv_eps = 1.0 / eps;
    std::vector<double> w(M);
    for (std::size_t j = 0; j < M; ++j) w[j] = log_nu[j] + (v[j] - y_half[j]) * inv_eps;
    parallel_for(N, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        const Vec2 xi = xs[i] * inv_eps;
        double best = -1e300;
        if (lists.dense) {
          for (std::size_t j = 0; j < M; ++j)
            best = std::max(best, w[j] + xi.x * ys[j].x + xi.y * ys[j].y);
          double s = 0.0;
          for (std::size_t j = 0; j < M; ++j)
            s += std::exp(w[j] + xi.x * ys[j].x + xi.y * ys[j].y - best);
          u[i] = x_half[i] - eps * (best + std::log(s));
        } else {
          const std::uint32_t b0 = lists.row_ptr[i], b1 = lists.row_ptr[i + 1];
          for (std::uint32_t k = b0; k < b1; ++k) {
            const std::uint32_t j = lists.row_idx[k];
            best = std::max(best, w[j] + xi.x * ys[j].x + xi.y * ys[j].y);
          }
          double s = 0.0;
          for (std::uint32_t k = b0; k < b1; ++k) {
            const std::uint32_t j = lists.row_idx[k];
            s += std::exp(w[j] + xi.x * ys[j].x + xi.y * ys[j].y - best);
          }
          u[i] = x_half[i] - eps * (best + std::log(s));
        }
      }
    });
  }

  void update_v() {
    const std::size_t N = n(), M = m();
    const double inv_eps = 1.0 / eps;
    std::vector<double> z(N);
    for (std::size_t i = 0; i < N; ++i) z[i] = log_mu[i] + (u[i] - x_half[i]) * inv_eps;
    parallel_for(M, [&](std::size_t b, std::size_t e) {
      for (std::size_t j = b; j < e; ++j) {
        const Vec2 yj = ys[j] * inv_eps;
        double best = -1e300;
        if (lists.dense) {
          for (std::size_t i = 0; i < N; ++i)
            best = std::max(best, z[i] + yj.x * xs[i].x + yj.y * xs[i].y);
          double s = 0.0;
          for (std::size_t i = 0; i < N; ++i)
            s += std::exp(z[i] + yj.x * xs[i].x + yj.y * xs[i].y - best);
          v[j] = y_half[j] - eps * (best + std::log(s));
        } else {
          const std::uint32_t b0 = lists.col_ptr[j], b1 = lists.col_ptr[j + 1];
          for (std::uint32_t k = b0; k < b1; ++k) {
            const std::uint32_t i = lists.col_idx[k];
            best = std::max(best, z[i] + yj.x * xs[i].x + yj.y * xs[i].y);
          }
          double s = 0.0;
          for (std::uint32_t k = b0; k < b1; ++k) {
            const std::uint32_t i = lists.col_idx[k];
            s += std::exp(z[i] + yj.x * xs[i].x + yj.y * xs[i].y - best);
          }
          v[j] = y_half[j] - eps * (best + std::log(s));
        }
      }
    });
  }

  /// L1 violation of the target marginal at the current duals. With
  /// `full_kernel` the sum ignores the truncation lists, so it also detects
  /// mass the truncation might have lost.
  double target_marginal_error(bool full_kernel = false) {
    const std::size_t N = n(), M = m();
    const double inv_eps = 1.0 / eps;
    std::vector<double> z(N);
    for (std::size_t i = 0; i < N; ++i) z[i] = log_mu[i] + (u[i] - x_half[i]) * inv_eps;
    std::vector<double> err(M, 0.0);
    parallel_for(M, [&](std::size_t b, std::size_t e) {
      for (std::size_t j = b; j < e; ++j) {
        const Vec2 yj = ys[j] * inv_eps;
        const double off = (v[j] - y_half[j]) * inv_eps;
        double s = 0.0;
        if (lists.dense || full_kernel) {
          for (std::size_t i = 0; i < N; ++i)
            s += std::exp(off + z[i] + yj.x * xs[i].x + yj.y * xs[i].y);
        } else {
          for (std::uint32_t k = lists.col_ptr[j]; k < lists.col_ptr[j + 1]; ++k) {
            const std::uint32_t i = lists.col_idx[k];
            s += std::exp(off + z[i] + yj.x * xs[i].x + yj.y * xs[i].y);
          }
        }
        err[j] = std::abs(s - 1.0) * std::exp(log_nu[j]);
      }
    });
    double total = 0.0;
    for (double t : err) total += t;
    return total;
  }
};

}  // namespace detail

namespace detail {

inline ResidualStats summarize_residuals(std::vector<double>& r) {
  ResidualStats st;
  st.interior_nodes = static_cast<int>(r.size());
  if (r.empty()) return st;
  std::sort(r.begin(), r.end());
  st.median = r[r.size() / 2];
  st.p95 = r[static_cast<std::size_t>(0.95 * (r.size() - 1))];
  st.max = r.back();
  return st;
}

inline ResidualField residual_core(const ScalarField& phi, const std::vector<double>& f1,
                                   const Mask& mask, const TargetDomain& dom,
                                   const std::function<double(Vec2)>& f2) {
  const GridSpec& g = phi.grid;
  const Mask inner = interior_mask(g, mask);
  double f1_max = 0.0;
  for (std::size_t k = 0; k < f1.size(); ++k)
    if (mask[k]) f1_max = std::max(f1_max, f1[k]);
  const double floor = 1e-9 * f1_max;

  ResidualField out;
  out.field = ScalarField(g);
  std::vector<double> vals;
  int kinks = 0;
  for (int j = 1; j + 1 < g.ny; ++j)
    for (int i = 1; i + 1 < g.nx; ++i) {
      const std::size_t k = g.idx(i, j);
      if (!inner[k]) continue;
      const double gx = (phi.at(i + 1, j) - phi.at(i - 1, j)) / (2.0 * g.hx);
      const double gy = (phi.at(i, j + 1) - phi.at(i, j - 1)) / (2.0 * g.hy);
      const double r = std::hypot(gx, gy);
      const double cell = std::max(g.hx, g.hy);
      if (r > dom.r_max + cell)
        throw_error(ErrorCode::gradient_out_of_range,
                    "discrete gradient leaves the target disk by more than one cell");
      if (r < dom.r_min - cell) {
        // Annular targets force a gradient jump across the hole; nodes on the
        // jump set see an averaged gradient inside it and no meaningful
        // density value, so they are counted instead of certified.
        ++kinks;
        continue;
      }
      const Sym2 h = hessian_at(phi, i, j);
      const double lhs = h.det() * f2({gx, gy});
      const double res = std::abs(lhs - f1[k]) / std::max(f1[k], floor);
      out.field.v[k] = res;
      vals.push_back(res);
    }
  out.stats = summarize_residuals(vals);
  out.stats.kink_nodes = kinks;
  return out;
}

}  // namespace detail

/// Relative Monge-Ampere residual |det D^2 phi * f2(grad phi) - f1| / f1 at
/// interior nodes, with centered differences for both derivative orders.
inline ResidualField ma_residual(const ScalarField& phi, const MAProblem& problem) {
  return detail::residual_core(phi, problem.f1, problem.mask, problem.target, problem.f2);
}

/// Minimum eigenvalue of the centered-difference Hessian over box-interior
/// nodes and the fraction of nodes that fail positive semidefiniteness.
/// The masked overload restricts to nodes whose full 3x3 neighborhood lies
/// in the mask — the honest scope for a solved design, whose potential
/// saturates to a piecewise-affine extrapolation far outside the footprint
/// where the mixed-stencil Hessian is not meaningful.
inline ConvexityReport convexity_check(const ScalarField& phi, const Mask* mask = nullptr) {
  const GridSpec& g = phi.grid;
  Mask inner;
  if (mask) inner = interior_mask(g, *mask);
  ConvexityReport rep;
  rep.min_eigenvalue = 1e300;
  std::size_t count = 0, bad = 0;
  for (int j = 1; j + 1 < g.ny; ++j)
    for (int i = 1; i + 1 < g.nx; ++i) {
      if (mask && !inner[g.idx(i, j)]) continue;
      const double ev = hessian_at(phi, i, j).min_eigenvalue();
      rep.min_eigenvalue = std::min(rep.min_eigenvalue, ev);
      ++count;
      if (ev < -1e-8) ++bad;
    }
  rep.fraction_nonconvex = count ? static_cast<double>(bad) / count : 0.0;
  if (count == 0) rep.min_eigenvalue = 0.0;
  return rep;
}

inline SolverResult solve(const MAProblem& problem, const SolverParams& params = {}) {
  if (!(params.marginal_tolerance > 0.0 && params.marginal_tolerance < 1.0))
    throw_error(ErrorCode::validation_error, "marginal_tolerance must lie in (0, 1)");
  if (params.max_iterations < 1)
    throw_error(ErrorCode::validation_error, "max_iterations must be >= 1");
  for (std::size_t k = 1; k < params.epsilon_schedule.size(); ++k)
    if (!(params.epsilon_schedule[k] < params.epsilon_schedule[k - 1]))
      throw_error(ErrorCode::validation_error, "epsilon_schedule must be strictly decreasing");
  if (!params.epsilon_schedule.empty() && !(params.epsilon_schedule.back() > 0.0))
    throw_error(ErrorCode::validation_error, "epsilon_schedule must end above zero");

  const GridSpec& g = problem.grid;

  // Source cloud: one point per grid cell that meets the annulus. Cells
  // straddling the annulus boundary carry their clipped area fraction and
  // centroid, so the discrete measure quantizes the continuum source to
  // second order instead of first.
  const double diag = 0.5 * std::hypot(g.hx, g.hy);
  const double r_in = problem.r_inner, r_out = problem.r_outer;
  std::vector<Vec2> xs;
  std::vector<double> mu;
  std::size_t masked = 0, supported = 0;
  int zero_nodes = 0;
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i) {
      const std::size_t k = g.idx(i, j);
      if (problem.mask[k]) {
        ++masked;
        if (problem.f1[k] > 0.0)
          ++supported;
        else
          ++zero_nodes;
      }
      const Vec2 c = g.node(i, j);
      const double r = norm(c);
      if (r > r_out + diag || (r_in > 0.0 && r < r_in - diag)) continue;
      const bool full = r <= r_out - diag && (r_in == 0.0 || r >= r_in + diag);
      double fraction = 1.0;
      Vec2 pos = c;
      if (!full) {
        int inside = 0;
        double sx = 0.0, sy = 0.0;
        for (int a = 0; a < 8; ++a)
          for (int b = 0; b < 8; ++b) {
            const Vec2 p{c.x + ((a + 0.5) / 8.0 - 0.5) * g.hx,
                         c.y + ((b + 0.5) / 8.0 - 0.5) * g.hy};
            const double rr = norm(p);
            if (rr >= r_in && rr <= r_out) {
              ++inside;
              sx += p.x;
              sy += p.y;
            }
          }
        if (inside == 0) continue;
        fraction = inside / 64.0;
        pos = {sx / inside, sy / inside};
      }
      double fval;
      if (full && problem.mask[k])
        fval = problem.f1[k];
      else if (problem.f1_eval)
        fval = problem.f1_eval(pos);
      else if (problem.mask[k])
        fval = problem.f1[k];
      else
        continue;
      if (!(fval > 0.0)) continue;
      xs.push_back(pos);
      mu.push_back(fval * fraction);
    }
  if (masked == 0 || supported * 2 < masked)
    throw_error(ErrorCode::degenerate_density,
                "source density vanishes on more than half of the domain");
  if (xs.empty())
    throw_error(ErrorCode::degenerate_density, "source density integrates to zero");

  detail::TargetCloud tc = detail::build_target_cloud(
      problem.target, problem.f2, params.target_spacing_factor * g.hx);

  double mu_total = 0.0;
  for (double w : mu) mu_total += w;
  mu_total *= g.hx * g.hy;
  const double defect = std::abs(mu_total - tc.total) / mu_total;

  const std::size_t N = xs.size(), M = tc.points.size();
  std::vector<double> log_mu(N), log_nu(M), x_half(N), y_half(M);
  {
    double s = 0.0;
    for (double w : mu) s += w;
    for (std::size_t i = 0; i < N; ++i) log_mu[i] = std::log(mu[i] / s);
  }
  for (std::size_t j = 0; j < M; ++j) log_nu[j] = std::log(tc.masses[j] / tc.total);
  for (std::size_t i = 0; i < N; ++i) x_half[i] = 0.5 * norm2(xs[i]);
  for (std::size_t j = 0; j < M; ++j) y_half[j] = 0.5 * norm2(tc.points[j]);

  const double diam2 = 4.0 * problem.target.r_max * problem.target.r_max;
  const std::vector<double> schedule =
      params.epsilon_schedule.empty() ? default_epsilon_schedule(diam2) : params.epsilon_schedule;

  std::vector<double> u(N, 0.0), v(M, 0.0);
  if (params.init == SolverParams::Init::random) {
    std::mt19937 rng(params.init_seed);
    std::uniform_real_distribution<double> d(-0.05 * schedule.front(), 0.05 * schedule.front());
    for (double& w : u) w = d(rng);
  }

  SolverResult out;
  detail::Sinkhorn sk{xs, tc.points, log_mu, log_nu, x_half, y_half, u, v};
  for (std::size_t s = 0; s < schedule.size(); ++s) {
    sk.eps = schedule[s];
    sk.build_lists();
    const bool last = s + 1 == schedule.size();
    const double stage_tol =
        last ? params.marginal_tolerance : std::max(params.marginal_tolerance, 1e-3);
    StageReport rep;
    rep.epsilon = sk.eps;
    rep.kept_fraction = sk.lists.fraction;
    double err = 1e300;
    int it = 0;
    std::vector<double> u_old(N);
    while (it < params.max_iterations) {
      ++it;
      if (it % 200 == 0) sk.build_lists();  // duals drift; refresh truncation
      sk.update_v();
      u_old = u;
      sk.update_u();
      err = 0.0;
      for (std::size_t i = 0; i < N; ++i)
        err += std::exp(log_mu[i]) * std::abs(std::expm1((u_old[i] - u[i]) / sk.eps));
      if (err <= stage_tol) {
        if (!last) break;
        // The cheap dual-increment metric is a proxy; gate the final stage on
        // the measured target marginal instead.
        err = sk.target_marginal_error();
        if (err <= params.marginal_tolerance) break;
      }
    }
    rep.iterations = it;
    rep.marginal_error = err;
    out.stages.push_back(rep);
    out.iterations_used += it;
    if (last && err > params.marginal_tolerance)
      throw_error(ErrorCode::no_convergence,
                  "iteration budget exhausted at epsilon " + std::to_string(sk.eps) +
                      " with marginal error " + std::to_string(err));
  }

  // Re-measure over the full kernel so truncation cannot hide lost mass.
  out.marginal_error = sk.target_marginal_error(true);
  if (out.marginal_error > params.marginal_tolerance)
    throw_error(ErrorCode::no_convergence,
                "truncated iteration converged but the full-kernel target marginal error is " +
                    std::to_string(out.marginal_error));
  out.zero_mass_nodes = zero_nodes;
  out.quadrature_defect = defect;

  // Entropic Brenier potential phi(x) = |x|^2/2 - u(x) via the smooth
  // c-transform of the target-side dual: a log-sum-exp of affine functions,
  // convex by construction and defined on the whole plane.
  const double eps_f = schedule.back();
  auto ys_p = std::make_shared<std::vector<Vec2>>(tc.points);
  auto aj_p = std::make_shared<std::vector<double>>(M);
  for (std::size_t j = 0; j < M; ++j)
    (*aj_p)[j] = log_nu[j] + (v[j] - y_half[j]) / eps_f;
  auto potential = [ys_p, aj_p, eps_f](Vec2 p) {
    const std::vector<Vec2>& ys = *ys_p;
    const std::vector<double>& aj = *aj_p;
    double best = -1e300;
    for (std::size_t j = 0; j < ys.size(); ++j)
      best = std::max(best, aj[j] + (p.x * ys[j].x + p.y * ys[j].y) / eps_f);
    double s = 0.0;
    for (std::size_t j = 0; j < ys.size(); ++j)
      s += std::exp(aj[j] + (p.x * ys[j].x + p.y * ys[j].y) / eps_f - best);
    return eps_f * (best + std::log(s));
  };
  auto gradient = [ys_p, aj_p, eps_f](Vec2 p) {
    const std::vector<Vec2>& ys = *ys_p;
    const std::vector<double>& aj = *aj_p;
    double best = -1e300;
    for (std::size_t j = 0; j < ys.size(); ++j)
      best = std::max(best, aj[j] + (p.x * ys[j].x + p.y * ys[j].y) / eps_f);
    double s = 0.0, gx = 0.0, gy = 0.0;
    for (std::size_t j = 0; j < ys.size(); ++j) {
      const double w = std::exp(aj[j] + (p.x * ys[j].x + p.y * ys[j].y) / eps_f - best);
      s += w;
      gx += w * ys[j].x;
      gy += w * ys[j].y;
    }
    return Vec2{gx / s, gy / s};
  };
  out.potential = potential;
  out.gradient = gradient;

  out.phi = ScalarField(g);
  out.grad_x = ScalarField(g);
  out.grad_y = ScalarField(g);
  parallel_for(static_cast<std::size_t>(g.ny), [&](std::size_t b, std::size_t e) {
    for (std::size_t j = b; j < e; ++j)
      for (int i = 0; i < g.nx; ++i) {
        const Vec2 p = g.node(i, static_cast<int>(j));
        const std::size_t k = g.idx(i, static_cast<int>(j));
        out.phi.v[k] = potential(p);
        const Vec2 gr = gradient(p);
        out.grad_x.v[k] = gr.x;
        out.grad_y.v[k] = gr.y;
      }
  }, 1);

  for (std::size_t k = 0; k < out.phi.v.size(); ++k)
    if (problem.mask[k])
      out.max_gradient_radius =
          std::max(out.max_gradient_radius, std::hypot(out.grad_x.v[k], out.grad_y.v[k]));
  out.converged = out.marginal_error <= params.marginal_tolerance &&
                  out.max_gradient_radius <= problem.target.r_max + std::max(g.hx, g.hy);

  if (params.residual_grid > 0) {
    // Certify on an independent grid: the entropic potential is globally
    // defined, so it can be resampled at any resolution.
    const GridSpec cg = design_grid(problem.r_outer, params.residual_grid);
    const Mask cmask = annulus_mask(cg, problem.r_inner, problem.r_outer);
    ScalarField cphi(cg);
    ScalarField f1_field(problem.grid);
    f1_field.v = problem.f1;
    std::vector<double> cf1(cg.size(), 0.0);
    for (int j = 0; j < cg.ny; ++j)
      for (int i = 0; i < cg.nx; ++i) {
        const std::size_t k = cg.idx(i, j);
        const Vec2 p = cg.node(i, j);
        cphi.v[k] = potential(p);
        if (!cmask[k]) continue;
        cf1[k] = problem.f1_eval ? problem.f1_eval(p)
                                 : std::max(0.0, bilinear(f1_field, p));
      }
    out.residual_stats =
        detail::residual_core(cphi, cf1, cmask, problem.target, problem.f2).stats;
  } else {
    out.residual_stats = ma_residual(out.phi, problem).stats;
  }
  return out;
}

}  // namespace metalens
