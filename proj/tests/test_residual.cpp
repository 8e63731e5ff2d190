#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "metalens/solver.hpp"

using namespace metalens;

namespace {

MAProblem make_problem(double r_in, double r_out, const std::function<double(Vec2)>& f1,
                       TargetDomain dom, const std::function<double(Vec2)>& f2, int res) {
  MAProblem p;
  p.grid = design_grid(r_out, res);
  p.mask = annulus_mask(p.grid, r_in, r_out);
  p.f1.assign(p.grid.size(), 0.0);
  for (int j = 0; j < p.grid.ny; ++j)
    for (int i = 0; i < p.grid.nx; ++i) {
      const std::size_t k = p.grid.idx(i, j);
      if (p.mask[k]) p.f1[k] = f1(p.grid.node(i, j));
    }
  p.target = dom;
  p.f2 = f2;
  p.r_inner = r_in;
  p.r_outer = r_out;
  p.f1_eval = f1;
  return p;
}

ScalarField fill(const GridSpec& g, const std::function<double(Vec2)>& f) {
  ScalarField out(g);
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i) out.at(i, j) = f(g.node(i, j));
  return out;
}

}  // namespace

TEST_CASE("quadratic potential with matched densities has vanishing residual") {
  const MAProblem p = make_problem(
      0.0, 0.6, [](Vec2) { return 1.0; }, TargetDomain{0.0, 0.7}, [](Vec2) { return 1.0; }, 32);
  const ScalarField phi = fill(p.grid, [](Vec2 x) { return 0.5 * norm2(x); });
  const ResidualField r = ma_residual(phi, p);
  CHECK(r.stats.max < 1e-12);
  CHECK(r.stats.interior_nodes > 100);
}

TEST_CASE("residual of an exact non-quadratic pair shrinks at second order") {
  // phi = |x|^4 solves det D^2 phi = 48 r^4 against a unit target density;
  // the only residual left is the finite-difference truncation error.
  auto f1 = [](Vec2 x) { return 48.0 * norm2(x) * norm2(x); };
  auto phi_fn = [](Vec2 x) { return norm2(x) * norm2(x); };
  const TargetDomain dom{4.0 * 0.2 * 0.2 * 0.2, 4.0 * 0.6 * 0.6 * 0.6};
  auto f2 = [](Vec2) { return 1.0; };

  double max_coarse = 0.0, max_fine = 0.0;
  {
    const MAProblem p = make_problem(0.2, 0.6, f1, dom, f2, 32);
    max_coarse = ma_residual(fill(p.grid, phi_fn), p).stats.max;
  }
  {
    const MAProblem p = make_problem(0.2, 0.6, f1, dom, f2, 64);
    max_fine = ma_residual(fill(p.grid, phi_fn), p).stats.max;
  }
  INFO("max residual at 32: " << max_coarse << ", at 64: " << max_fine);
  CHECK(max_coarse < 0.05);
  CHECK(max_fine < max_coarse);
  const double order = std::log2(max_coarse / max_fine);
  CHECK(order > 1.5);
  CHECK(order < 2.5);
}

TEST_CASE("a corrupted node produces a residual spike confined to its 3x3 patch") {
  const MAProblem p = make_problem(
      0.0, 0.6, [](Vec2) { return 1.0; }, TargetDomain{0.0, 0.7}, [](Vec2) { return 1.0; }, 32);
  ScalarField phi = fill(p.grid, [](Vec2 x) { return 0.5 * norm2(x); });
  const auto [ic, jc] = center_node(p.grid);
  const int bi = ic + 3, bj = jc + 1;
  phi.at(bi, bj) += 10.0 * p.grid.hx * p.grid.hx;
  const ResidualField r = ma_residual(phi, p);
  const Mask inner = interior_mask(p.grid, p.mask);
  for (int j = 0; j < p.grid.ny; ++j)
    for (int i = 0; i < p.grid.nx; ++i) {
      if (!inner[p.grid.idx(i, j)]) continue;
      const int d = std::max(std::abs(i - bi), std::abs(j - bj));
      const double res = r.field.at(i, j);
      if (d <= 1) {
        CHECK(res > 1.0);
      } else {
        CHECK(res < 1e-12);
      }
    }
}

TEST_CASE("a gradient escaping the target domain is reported") {
  const MAProblem p = make_problem(
      0.0, 0.6, [](Vec2) { return 1.0; }, TargetDomain{0.0, 0.5}, [](Vec2) { return 1.0; }, 32);
  const ScalarField phi = fill(p.grid, [](Vec2 x) { return norm2(x); });  // gradient 2x
  REQUIRE_THROWS_MATCHES(ma_residual(phi, p), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                           return e.code() == ErrorCode::gradient_out_of_range;
                         }));
}

TEST_CASE("convexity check classifies definite and indefinite Hessians") {
  const GridSpec g = design_grid(1.0, 24);
  SECTION("convex paraboloid") {
    const ConvexityReport rep = convexity_check(fill(g, [](Vec2 x) { return 0.5 * norm2(x); }));
    CHECK(rep.min_eigenvalue == Catch::Approx(1.0).margin(1e-10));
    CHECK(rep.fraction_nonconvex == 0.0);
  }
  SECTION("concave paraboloid") {
    const ConvexityReport rep = convexity_check(fill(g, [](Vec2 x) { return -0.5 * norm2(x); }));
    CHECK(rep.min_eigenvalue == Catch::Approx(-1.0).margin(1e-10));
    CHECK(rep.fraction_nonconvex == 1.0);
  }
  SECTION("saddle") {
    const ConvexityReport rep =
        convexity_check(fill(g, [](Vec2 x) { return 0.5 * (x.x * x.x - x.y * x.y); }));
    CHECK(rep.min_eigenvalue == Catch::Approx(-1.0).margin(1e-10));
    CHECK(rep.fraction_nonconvex == 1.0);
  }
}

TEST_CASE("certification can run on an independent grid resolution") {
  MAProblem p = make_problem(
      0.0, 1.0, [](Vec2) { return 1.0 / M_PI; }, TargetDomain{0.0, 0.5},
      [](Vec2) { return 4.0 / M_PI; }, 32);
  const SolverResult base = solve(p);
  CHECK(base.converged);
  CHECK(base.quadrature_defect < 0.01);

  // A finer certification grid resolves the regularization scale, so it sees
  // at least as much residual as the problem grid and covers more nodes.
  SolverParams params;
  params.residual_grid = 64;
  const SolverResult fine = solve(p, params);
  CHECK(fine.residual_stats.interior_nodes > 3 * base.residual_stats.interior_nodes);
  CHECK(fine.residual_stats.median >= base.residual_stats.median);
  CHECK(std::isfinite(fine.residual_stats.max));

  // Certifying on the problem resolution reproduces the default statistics.
  params.residual_grid = 32;
  const SolverResult same = solve(p, params);
  CHECK(same.residual_stats.median == Catch::Approx(base.residual_stats.median));
  CHECK(same.residual_stats.max == Catch::Approx(base.residual_stats.max));
}
