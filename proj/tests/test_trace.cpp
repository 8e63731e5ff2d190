#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <random>

#include "metalens/optics.hpp"
#include "metalens/solver.hpp"
#include "metalens/trace.hpp"

using namespace metalens;

namespace {

constexpr double kTol = 1e-12;

Scenario make_scenario(Transport tr, SourceKind kind, double n1, double n2, double r_in,
                       double r_out, double th_min, double th_max) {
  Scenario sc;
  sc.transport = tr;
  sc.source.kind = kind;
  sc.source.r_inner = r_in;
  sc.source.r_outer = r_out;
  sc.media = {n1, n2};
  sc.target.theta_min = th_min;
  sc.target.theta_max = th_max;
  return sc;
}

ScalarField zero_phase(double r_out, int res) { return ScalarField(design_grid(r_out, res)); }

ScalarField fill(const GridSpec& g, const std::function<double(Vec2)>& f) {
  ScalarField out(g);
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i) out.at(i, j) = f(g.node(i, j));
  return out;
}

double kahan_sum(const std::vector<double>& xs) {
  double s = 0.0, c = 0.0;
  for (double x : xs) {
    const double y = x - c;
    const double t = s + y;
    c = (t - s) - y;
    s = t;
  }
  return s;
}

}  // namespace

TEST_CASE("a flat mirror sends every collimated ray straight back") {
  const Scenario sc =
      make_scenario(Transport::reflect, SourceKind::collimated, 1.0, 1.0, 0.0, 0.8, 0.0, 0.7);
  const TraceResult out = trace(sc, zero_phase(0.8, 48), 20000, 7);
  REQUIRE(out.size() == 20000);
  CHECK(out.evanescent_count == 0);
  for (std::size_t k = 0; k < out.size(); ++k) {
    REQUIRE(out.alive[k] == 1);
    REQUIRE(std::abs(out.directions[k].x) < kTol);
    REQUIRE(std::abs(out.directions[k].y) < kTol);
    REQUIRE(std::abs(out.directions[k].z + 1.0) < kTol);
    REQUIRE(norm(out.origins[k]) <= 0.8 + kTol);
  }
  // Power bookkeeping: equal weights summing to the source power.
  CHECK(out.total_power == Catch::Approx(M_PI * 0.64).epsilon(1e-12));
  CHECK(kahan_sum(out.weights) == Catch::Approx(out.total_power).epsilon(1e-12));
}

TEST_CASE("zero phase reproduces the classical laws ray by ray") {
  SECTION("point-source refraction matches Snell directions") {
    const Scenario sc =
        make_scenario(Transport::refract, SourceKind::point, 1.0, 1.5, 0.05, 0.9, 0.0, 0.7);
    const TraceResult out = trace(sc, zero_phase(0.9, 48), 5000, 11);
    for (std::size_t k = 0; k < out.size(); ++k) {
      REQUIRE(out.alive[k] == 1);
      const Vec2 p = out.origins[k];
      const double d = std::sqrt(norm2(p) + 1.0);
      const Vec3 s{p.x / d, p.y / d, 1.0 / d};
      const auto want = refract(s, {0.0, 0.0, 1.0}, {0.0, 0.0}, {1.0, 1.5});
      REQUIRE(std::abs(out.directions[k].x - want.m.x) < kTol);
      REQUIRE(std::abs(out.directions[k].y - want.m.y) < kTol);
      REQUIRE(std::abs(out.directions[k].z - want.m.z) < kTol);
    }
  }
  SECTION("point-source reflection mirrors the incident ray") {
    const Scenario sc =
        make_scenario(Transport::reflect, SourceKind::point, 1.0, 1.0, 0.05, 0.9, 0.0, 0.7);
    const TraceResult out = trace(sc, zero_phase(0.9, 48), 5000, 11);
    for (std::size_t k = 0; k < out.size(); ++k) {
      REQUIRE(out.alive[k] == 1);
      const Vec2 p = out.origins[k];
      const double d = std::sqrt(norm2(p) + 1.0);
      REQUIRE(std::abs(out.directions[k].x - p.x / d) < kTol);
      REQUIRE(std::abs(out.directions[k].y - p.y / d) < kTol);
      REQUIRE(std::abs(out.directions[k].z + 1.0 / d) < kTol);
    }
  }
}

TEST_CASE("the collimating phase straightens a point source") {
  // psi = n1 sqrt(x^2+y^2+1) cancels the tangential momentum exactly; the
  // only residue is the O(h^2) interpolation of its gradient.
  const Scenario sc =
      make_scenario(Transport::refract, SourceKind::point, 1.2, 1.5, 0.0, 0.9, 0.0, 0.7);
  auto lens = [](Vec2 p) { return 1.2 * std::sqrt(norm2(p) + 1.0); };
  double residue64 = 0.0, residue128 = 0.0;
  {
    const TraceResult out = trace(sc, fill(design_grid(0.9, 64), lens), 20000, 3);
    for (std::size_t k = 0; k < out.size(); ++k) {
      REQUIRE(out.alive[k] == 1);
      residue64 = std::max(residue64, std::hypot(out.directions[k].x, out.directions[k].y));
    }
  }
  {
    const TraceResult out = trace(sc, fill(design_grid(0.9, 128), lens), 20000, 3);
    for (std::size_t k = 0; k < out.size(); ++k)
      residue128 = std::max(residue128, std::hypot(out.directions[k].x, out.directions[k].y));
  }
  INFO("tangential residue at 64: " << residue64 << ", at 128: " << residue128);
  CHECK(residue64 < 5e-3);
  CHECK(residue128 < residue64 / 2.0);
}

TEST_CASE("tracing is deterministic for a fixed seed") {
  const Scenario sc =
      make_scenario(Transport::refract, SourceKind::collimated, 1.0, 1.4, 0.0, 0.7, 0.0, 0.6);
  const ScalarField psi = fill(design_grid(0.7, 32), [](Vec2 p) { return 0.1 * norm2(p); });
  const TraceResult a = trace(sc, psi, 70000, 99);  // spans two blocks
  const TraceResult b = trace(sc, psi, 70000, 99);
  REQUIRE(a.size() == b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    REQUIRE(a.origins[k].x == b.origins[k].x);
    REQUIRE(a.origins[k].y == b.origins[k].y);
    REQUIRE(a.directions[k].x == b.directions[k].x);
    REQUIRE(a.directions[k].z == b.directions[k].z);
  }
  const TraceResult c = trace(sc, psi, 70000, 100);  // different seed differs
  bool any_diff = false;
  for (std::size_t k = 0; k < a.size() && !any_diff; ++k)
    any_diff = a.origins[k].x != c.origins[k].x;
  CHECK(any_diff);
}

TEST_CASE("rays outside the phase grid are reported, not clamped") {
  const Scenario sc =
      make_scenario(Transport::reflect, SourceKind::collimated, 1.0, 1.0, 0.0, 0.8, 0.0, 0.7);
  REQUIRE_THROWS_MATCHES(trace(sc, zero_phase(0.5, 32), 100, 1), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                           return e.code() == ErrorCode::footprint_exceeded;
                         }));
}

TEST_CASE("evanescent rays keep their power in the bookkeeping") {
  // grad psi = 2x exceeds the refraction limit where |x| > 0.5.
  const Scenario sc =
      make_scenario(Transport::refract, SourceKind::collimated, 1.0, 1.0, 0.0, 0.8, 0.0, 0.7);
  const ScalarField psi = fill(design_grid(0.8, 64), [](Vec2 p) { return norm2(p); });
  const TraceResult out = trace(sc, psi, 100000, 5);
  REQUIRE(out.evanescent_count > 0);
  REQUIRE(out.evanescent_count < out.size());
  const SphericalHistogram h = sphere_histogram(out, 16, 16, target_band(sc));
  CHECK(h.binned_power + h.evanescent_power ==
        Catch::Approx(out.total_power).epsilon(1e-12));
  // The evanescent fraction approximates the area fraction where |2p| > 1:
  // the annulus 0.5 < |p| <= 0.8 inside the radius-0.8 source disk.
  const double frac = static_cast<double>(out.evanescent_count) / out.size();
  const double area_frac = (0.64 - 0.25) / 0.64;
  INFO("evanescent fraction " << frac << " vs area fraction " << area_frac);
  CHECK(std::abs(frac - area_frac) < 0.01);
}

TEST_CASE("a single direction lands in exactly one bin") {
  TraceResult one;
  const double v0 = 0.3, u0 = 1.1;
  one.origins = {{0.0, 0.0}};
  one.directions = {{std::sin(v0) * std::cos(u0), std::sin(v0) * std::sin(u0), std::cos(v0)}};
  one.weights = {1.0};
  one.alive = {1};
  one.total_power = 1.0;
  const SphericalHistogram h = sphere_histogram(one, 8, 8, {0.0, 0.7});
  int hot = 0;
  for (int iv = 0; iv < 8; ++iv)
    for (int iu = 0; iu < 8; ++iu) {
      const double p = h.power[h.idx(iu, iv)];
      if (p > 0.0) {
        ++hot;
        CHECK(p == 1.0);
        CHECK(h.density(iu, iv) == Catch::Approx(1.0 / h.solid_angle[h.idx(iu, iv)]));
        CHECK(iu == static_cast<int>(u0 / (kTwoPi / 8)));
        CHECK(iv == static_cast<int>(v0 / (0.7 / 8)));
      }
    }
  CHECK(hot == 1);
  CHECK(h.binned_power == 1.0);
  CHECK(h.spill_count == 0);
}

TEST_CASE("histograms add over concatenated batches") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto random_batch = [&](std::size_t n, double w) {
    TraceResult b;
    for (std::size_t k = 0; k < n; ++k) {
      const double v = 0.1 + 0.5 * unit(rng), u = kTwoPi * unit(rng);
      b.origins.push_back({0.0, 0.0});
      b.directions.push_back({std::sin(v) * std::cos(u), std::sin(v) * std::sin(u), std::cos(v)});
      b.weights.push_back(w);
      b.alive.push_back(1);
    }
    b.total_power = w * static_cast<double>(n);
    return b;
  };
  const TraceResult b1 = random_batch(3000, 0.5), b2 = random_batch(2000, 0.25);
  TraceResult both = b1;
  both.origins.insert(both.origins.end(), b2.origins.begin(), b2.origins.end());
  both.directions.insert(both.directions.end(), b2.directions.begin(), b2.directions.end());
  both.weights.insert(both.weights.end(), b2.weights.begin(), b2.weights.end());
  both.alive.insert(both.alive.end(), b2.alive.begin(), b2.alive.end());
  both.total_power = b1.total_power + b2.total_power;
  const PolarBand band{0.05, 0.65};
  const SphericalHistogram h1 = sphere_histogram(b1, 10, 10, band);
  const SphericalHistogram h2 = sphere_histogram(b2, 10, 10, band);
  const SphericalHistogram hb = sphere_histogram(both, 10, 10, band);
  for (std::size_t k = 0; k < hb.power.size(); ++k)
    REQUIRE(hb.power[k] == h1.power[k] + h2.power[k]);
}

TEST_CASE("isotropic directions produce uniform bin densities") {
  // Uniform solid-angle sampling over the cap v in [0, 1]: z uniform in
  // [cos 1, 1]. Binomial oracle: each bin's count stays within four standard
  // deviations of its expectation (fixed seed, so this is deterministic).
  const std::size_t n = 200000;
  TraceResult iso;
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double z_lo = std::cos(1.0);
  for (std::size_t k = 0; k < n; ++k) {
    const double z = z_lo + (1.0 - z_lo) * unit(rng);
    const double s = std::sqrt(1.0 - z * z), u = kTwoPi * unit(rng);
    iso.origins.push_back({0.0, 0.0});
    iso.directions.push_back({s * std::cos(u), s * std::sin(u), z});
    iso.weights.push_back(1.0 / n);
    iso.alive.push_back(1);
  }
  iso.total_power = 1.0;
  const SphericalHistogram h = sphere_histogram(iso, 12, 6, {0.0, 1.0});
  const double omega_total = kTwoPi * (1.0 - z_lo);
  for (int iv = 0; iv < 6; ++iv)
    for (int iu = 0; iu < 12; ++iu) {
      const double expected = n * h.solid_angle[h.idx(iu, iv)] / omega_total;
      const double count = h.power[h.idx(iu, iv)] * n;
      REQUIRE(std::abs(count - expected) <= 4.0 * std::sqrt(expected));
    }
}

TEST_CASE("density distance vanishes when the estimate equals the target") {
  const Scenario sc =
      make_scenario(Transport::refract, SourceKind::collimated, 1.0, 1.5, 0.0, 0.9, 0.1, 0.6);
  SphericalHistogram h;
  h.n_u = 10;
  h.n_v = 8;
  h.v_lo = 0.1;
  h.v_hi = 0.6;
  h.power.assign(80, 0.0);
  h.solid_angle.assign(80, 0.0);
  const double du = kTwoPi / h.n_u, dv = 0.5 / h.n_v;
  const double g_mass = 2.0 * M_PI * (std::cos(0.1) - std::cos(0.6));
  double binned = 0.0;
  for (int iv = 0; iv < h.n_v; ++iv)
    for (int iu = 0; iu < h.n_u; ++iu) {
      const double omega = du * (std::cos(0.1 + iv * dv) - std::cos(0.1 + (iv + 1) * dv));
      h.solid_angle[h.idx(iu, iv)] = omega;
      h.power[h.idx(iu, iv)] = omega / g_mass;  // exactly the uniform target
      binned += h.power[h.idx(iu, iv)];
    }
  h.binned_power = binned;
  h.total_power = binned;
  h.ray_weight = binned / 1e6;
  const DensityDistance d = density_distance(h, sc);
  CHECK(d.l1 < 1e-12);
  CHECK(d.linf < 1e-9);
  CHECK(d.linf_bins > 0);
}

TEST_CASE("power concentrated in one of K equal bins is total-variation 2(1-1/K)") {
  const Scenario sc =
      make_scenario(Transport::refract, SourceKind::collimated, 1.0, 1.5, 0.0, 0.9, 0.2, 0.5);
  SphericalHistogram h;
  h.n_u = 16;
  h.n_v = 1;
  h.v_lo = 0.2;
  h.v_hi = 0.5;
  h.power.assign(16, 0.0);
  h.solid_angle.assign(16, 0.0);
  const double du = kTwoPi / 16;
  for (int iu = 0; iu < 16; ++iu)
    h.solid_angle[h.idx(iu, 0)] = du * (std::cos(0.2) - std::cos(0.5));
  h.power[0] = 3.0;  // all power in bin 0
  h.binned_power = 3.0;
  h.total_power = 3.0;
  h.ray_weight = 3.0 / 1000.0;
  const DensityDistance d = density_distance(h, sc);
  CHECK(d.l1 == Catch::Approx(2.0 * (1.0 - 1.0 / 16.0)).epsilon(1e-12));
}

TEST_CASE("sampling the target itself stays within the Monte-Carlo noise floor") {
  // Directions drawn from the target density directly: the L1 distance is
  // pure binomial noise, about sqrt(2/pi) * sqrt(n_bins/N).
  const Scenario sc = make_scenario(Transport::refract, SourceKind::collimated, 1.0, 1.5, 0.0,
                                    0.9, 0.0, 0.6981317007977318);  // 40 degrees
  const std::size_t n = 300000;
  TraceResult batch;
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double z_lo = std::cos(sc.target.theta_max);
  for (std::size_t k = 0; k < n; ++k) {
    const double z = z_lo + (1.0 - z_lo) * unit(rng);
    const double s = std::sqrt(1.0 - z * z), u = kTwoPi * unit(rng);
    batch.origins.push_back({0.0, 0.0});
    batch.directions.push_back({s * std::cos(u), s * std::sin(u), z});
    batch.weights.push_back(1.0 / n);
    batch.alive.push_back(1);
  }
  batch.total_power = 1.0;
  const SphericalHistogram h = sphere_histogram(batch, 24, 24, target_band(sc));
  const DensityDistance d = density_distance(h, sc);
  INFO("L1 " << d.l1 << ", Linf " << d.linf << " over " << d.linf_bins << " bins");
  CHECK(d.l1 < 0.06);
  CHECK(d.linf < 0.25);
  CHECK(d.linf_bins > 400);
}

TEST_CASE("surface-measure identities hold for a quadratic collimated phase") {
  const Scenario sc =
      make_scenario(Transport::reflect, SourceKind::collimated, 1.0, 1.0, 0.0, 1.0, 0.0, 0.7);
  auto psi = [](Vec2 p) { return 0.5 * (0.1 * p.x * p.x + 0.2 * p.y * p.y); };
  std::vector<Vec2> probes;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unit(-0.7, 0.7);
  while (probes.size() < 25) {
    const Vec2 p{unit(rng), unit(rng)};
    if (norm(p) > 0.2) probes.push_back(p);
  }
  // Closed form at any probe: |det D^2 psi| / |T3| = 0.02 / |T3|.
  for (const Vec2& p : probes) {
    const PhaseDerivs d{{0.1 * p.x, 0.2 * p.y}, {0.1, 0.0, 0.2}};
    const auto co = scenario_pde_lhs(sc, p, d);
    const Vec3 t = scenario_T(sc, p, d.grad);
    REQUIRE(co.lhs == Catch::Approx(0.02 / std::abs(t.z)).epsilon(1e-12));
  }
  const JacobianReport rep = jacobian_identity_check(sc, psi, 0.02, probes);
  INFO("median errors " << rep.median_error[0] << " " << rep.median_error[1] << " "
                        << rep.median_error[2] << ", orders " << rep.order_coarse << " "
                        << rep.order_fine);
  CHECK(rep.observed_order > 1.8);
  CHECK(rep.observed_order < 2.2);
}

TEST_CASE("zero phase from a point source reduces to the spherical area element") {
  const Scenario sc =
      make_scenario(Transport::reflect, SourceKind::point, 1.0, 1.0, 0.0, 1.0, 0.0, 0.7);
  auto psi = [](Vec2) { return 0.0; };
  // Closed coefficient equals 1 after dividing by sin v: the zero-phase map
  // preserves the spherical area element.
  std::vector<Vec2> probes;
  for (int k = 0; k < 20; ++k) probes.push_back({0.31 * k, 0.15 + 0.025 * k});
  for (const Vec2& uv : probes) {
    const Vec3 q = plane_point(uv.x, uv.y);
    const PhaseDerivs d{{0.0, 0.0}, {0.0, 0.0, 0.0}};
    const auto co = scenario_pde_lhs(sc, {q.x, q.y}, d);
    REQUIRE(co.lhs == Catch::Approx(1.0).epsilon(1e-12));
  }
  const JacobianReport rep = jacobian_identity_check(sc, psi, 0.02, probes);
  INFO("median errors " << rep.median_error[0] << " " << rep.median_error[1] << " "
                        << rep.median_error[2]);
  CHECK(rep.observed_order > 1.8);
  CHECK(rep.observed_order < 2.2);
}

TEST_CASE("a linear collimated phase has an exactly degenerate map") {
  const Scenario sc =
      make_scenario(Transport::reflect, SourceKind::collimated, 1.0, 1.0, 0.0, 1.0, 0.0, 0.7);
  auto psi = [](Vec2 p) { return 0.3 * p.x - 0.2 * p.y + 0.05; };
  const std::vector<Vec2> probes{{0.1, 0.2}, {-0.3, 0.4}, {0.5, -0.1}};
  // The map is constant, so both the finite-difference cross product and the
  // closed form vanish identically at every spacing.
  const JacobianReport rep = jacobian_identity_check(sc, psi, 0.02, probes);
  CHECK(rep.median_error[0] < 1e-14);
  CHECK(rep.median_error[1] < 1e-14);
  CHECK(rep.median_error[2] < 1e-14);
}

TEST_CASE("mirror bookkeeping balances energy on subsets") {
  // Zero phase, point-source reflection: the exact map mirrors the cone onto
  // the antipodal cap, and source/target masses agree in closed form.
  const double th = 0.6981317007977318;  // 40 degrees
  const Scenario sc = make_scenario(Transport::reflect, SourceKind::point, 1.0, 1.0, 0.0,
                                    std::tan(th), 0.0, th);
  const ScalarField psi = zero_phase(std::tan(th), 64);
  const TraceResult rays = trace(sc, psi, 300000, 13);
  const SphericalHistogram hist = sphere_histogram(rays, 24, 24, target_band(sc));
  CHECK(rays.evanescent_count == 0);

  SECTION("full domain") {
    const EnergyBalance eb =
        energy_balance(sc, rays, hist, [](Vec2) { return true; }, 4 * psi.grid.nx);
    INFO("lhs " << eb.lhs << ", rhs " << eb.rhs);
    CHECK(eb.lhs == Catch::Approx(2.0 * M_PI * (1.0 - std::cos(th))).epsilon(5e-3));
    CHECK(eb.rel_err < 0.01);
  }
  SECTION("half plane") {
    const EnergyBalance eb =
        energy_balance(sc, rays, hist, [](Vec2 p) { return p.x > 0.0; }, 4 * psi.grid.nx);
    INFO("lhs " << eb.lhs << ", rhs " << eb.rhs);
    CHECK(eb.lhs == Catch::Approx(M_PI * (1.0 - std::cos(th))).epsilon(5e-3));
    CHECK(eb.rel_err < 0.02);
  }
  SECTION("empty region") {
    const EnergyBalance eb =
        energy_balance(sc, rays, hist, [](Vec2) { return false; }, 4 * psi.grid.nx);
    CHECK(eb.lhs == 0.0);
    CHECK(eb.rhs == 0.0);
    CHECK(eb.rel_err == 0.0);
  }

  SECTION("mirrored cap matches the prescribed density") {
    const DensityDistance d = density_distance(hist, sc);
    INFO("L1 " << d.l1 << ", Linf " << d.linf);
    CHECK(d.l1 < 0.06);
  }
}

TEST_CASE("a solved design redistributes a uniform disk onto a uniform cap") {
  // End-to-end smoke version of the acceptance run at reduced scale.
  Scenario sc =
      make_scenario(Transport::reflect, SourceKind::collimated, 1.0, 1.0, 0.0, 1.0, 0.0,
                    0.6981317007977318);
  const double f_mass = M_PI;
  const double g_mass = 2.0 * M_PI * (1.0 - std::cos(sc.target.theta_max));
  sc.source.intensity.value = 1.0;
  sc.target.intensity.value = f_mass / g_mass;  // balance the masses exactly
  const MAProblem problem = reduce_to_ma(sc, 32);
  const SolverResult sol = solve(problem);
  REQUIRE(sol.converged);
  const ScalarField psi = phase_from_potential(sol.phi, sc);
  const TraceResult rays = trace(sc, psi, 200000, 77);
  INFO("evanescent count " << rays.evanescent_count);
  CHECK(static_cast<double>(rays.evanescent_count) < 1e-3 * static_cast<double>(rays.size()));
  // Bins coarser than the entropic blur of the default schedule: the map
  // stays strictly inside the target cap, so fine rows at the rim would
  // report the smearing rather than the redistribution quality.
  const SphericalHistogram hist = sphere_histogram(rays, 12, 6, target_band(sc));
  const DensityDistance d = density_distance(hist, sc);
  INFO("L1 " << d.l1 << ", Linf " << d.linf << ", spill " << hist.spill_count);
  CHECK(d.l1 < 0.15);
  const EnergyBalance eb =
      energy_balance(sc, rays, hist, [](Vec2) { return true; }, 4 * psi.grid.nx);
  INFO("energy lhs " << eb.lhs << ", rhs " << eb.rhs);
  CHECK(eb.rel_err < 0.01);
}
