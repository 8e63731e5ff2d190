#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "metalens/error.hpp"
#include "metalens/grid.hpp"
#include "metalens/intensity.hpp"
#include "metalens/parallel.hpp"
#include "metalens/scenario.hpp"
#include "metalens/sphere_frame.hpp"
#include "metalens/vec.hpp"

namespace metalens {

constexpr double kTwoPi = 6.283185307179586476925286766559;

/// Outcome of tracing a batch of rays through a phase field. Evanescent rays
/// stay in the arrays (flagged, zero direction) so no power is dropped.
struct TraceResult {
  std::vector<Vec2> origins;  // footprint points on the plane {z = 1}
  std::vector<Vec3> directions;
  std::vector<double> weights;
  std::vector<std::uint8_t> alive;  // 0 marks an evanescent ray
  double total_power = 0.0;         // continuum source power the batch represents
  double evanescent_power = 0.0;
  std::size_t evanescent_count = 0;

  std::size_t size() const { return origins.size(); }
};

struct SphericalHistogram {
  int n_u = 0, n_v = 0;
  double v_lo = 0.0, v_hi = 0.0;  // polar band covered by the bins
  std::vector<double> power;      // row-major: index = iv * n_u + iu
  std::vector<double> solid_angle;
  double binned_power = 0.0;
  double evanescent_power = 0.0;
  double spill_power = 0.0;  // power clamped in from outside the band
  std::size_t spill_count = 0;
  double total_power = 0.0;
  double ray_weight = 0.0;  // per-ray power (rays are equally weighted)

  std::size_t idx(int iu, int iv) const { return static_cast<std::size_t>(iv) * n_u + iu; }
  double density(int iu, int iv) const { return power[idx(iu, iv)] / solid_angle[idx(iu, iv)]; }
};

struct PolarBand {
  double v_lo = 0.0, v_hi = 0.0;
};

/// Polar band on the unit sphere covered by the scenario's target cap.
inline PolarBand target_band(const Scenario& sc) {
  if (sc.transport == Transport::refract) return {sc.target.theta_min, sc.target.theta_max};
  return {M_PI - sc.target.theta_max, M_PI - sc.target.theta_min};
}

struct DensityDistance {
  double l1 = 0.0;
  double linf = 0.0;
  int linf_bins = 0;  // bins with enough expected rays to enter the max
};

struct JacobianReport {
  std::array<double, 3> median_error{};  // at h, h/2, h/4
  double order_coarse = 0.0;             // log2(e(h)/e(h/2))
  double order_fine = 0.0;               // log2(e(h/2)/e(h/4))
  double observed_order = 0.0;           // least-squares slope over the three grids
};

struct EnergyBalance {
  double lhs = 0.0;  // integral of f over the region
  double rhs = 0.0;  // target-side mass of the region's image, via traced rays
  double rel_err = 0.0;
};

namespace detail {

/// Deterministic per-block RNG stream.
inline std::mt19937_64 block_rng(std::uint64_t seed, std::uint64_t block) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(block), static_cast<std::uint32_t>(block >> 32),
                    0x9e3779b9u};
  return std::mt19937_64(seq);
}

/// Radial footprint density (per unit planar radius, angle integrated out as
/// uniform) for inverse-CDF sampling of analytic profiles.
inline std::function<double(double)> footprint_radial_density(const Scenario& sc) {
  const Intensity in = sc.source.intensity;
  if (sc.source.kind == SourceKind::collimated)
    return [in](double r) { return in.profile(r) * r; };
  return [in](double r) {
    const double dd = 1.0 + r * r;
    return in.profile(std::atan(r)) * r / (dd * std::sqrt(dd));
  };
}

}  // namespace detail

/// Traces n_rays rays sampled from the scenario's source through the phase
/// field using only the generalized reflection/refraction laws. Deterministic
/// for fixed (seed, n_rays) regardless of worker count: rays are generated in
/// fixed blocks of 65536 with one RNG stream per block.
inline TraceResult trace(const Scenario& sc, const ScalarField& psi, std::size_t n_rays,
                         std::uint64_t seed) {
  if (n_rays < 1) throw_error(ErrorCode::validation_error, "n_rays must be at least 1");
  validate(sc);
  const GridSpec& g = psi.grid;
  const double r_out = sc.source.r_outer, r_in = sc.source.r_inner;
  if (r_out > g.xmax() || -r_out < g.x0 || r_out > g.ymax() || -r_out < g.y0)
    throw_error(ErrorCode::footprint_exceeded,
                "source footprint radius " + std::to_string(r_out) +
                    " is not covered by the phase grid");

  const auto [grad_x, grad_y] = centered_gradient(psi);

  // Sampling recipe: inverse CDF for radially symmetric analytic profiles,
  // rejection sampling against a uniform annulus envelope for sampled maps.
  const bool radial = sc.source.intensity.kind != ProfileKind::sampled;
  RadialCdf cdf;
  double envelope = 0.0;
  if (radial) {
    cdf = RadialCdf::build(detail::footprint_radial_density(sc), r_in, r_out);
  } else {
    for (double s : sc.source.intensity.samples.v) envelope = std::max(envelope, s);
    const double dd = 1.0 + r_in * r_in;
    if (sc.source.kind == SourceKind::point) envelope /= dd * std::sqrt(dd);
    if (!(envelope > 0.0))
      throw_error(ErrorCode::degenerate_density, "sampled source intensity is identically zero");
  }

  TraceResult out;
  out.total_power = source_mass(sc);
  const double w_ray = out.total_power / static_cast<double>(n_rays);
  out.origins.resize(n_rays);
  out.directions.assign(n_rays, Vec3{0.0, 0.0, 0.0});
  out.weights.assign(n_rays, w_ray);
  out.alive.assign(n_rays, 1);

  constexpr std::size_t kBlock = 65536;
  const std::size_t blocks = (n_rays + kBlock - 1) / kBlock;
  std::vector<std::size_t> block_evanescent(blocks, 0);
  std::atomic<bool> escaped{false};

  parallel_for(
      blocks,
      [&](std::size_t bb, std::size_t be) {
        for (std::size_t b = bb; b < be; ++b) {
          std::mt19937_64 rng = detail::block_rng(seed, b);
          std::uniform_real_distribution<double> unit(0.0, 1.0);
          const std::size_t lo = b * kBlock, hi = std::min(n_rays, lo + kBlock);
          std::size_t evan = 0;
          for (std::size_t k = lo; k < hi; ++k) {
            Vec2 p;
            if (radial) {
              const double r = cdf.sample(unit(rng));
              const double phi = kTwoPi * unit(rng);
              p = {r * std::cos(phi), r * std::sin(phi)};
            } else {
              long attempts = 0;
              for (;;) {
                const double r = std::sqrt(r_in * r_in + (r_out * r_out - r_in * r_in) * unit(rng));
                const double phi = kTwoPi * unit(rng);
                p = {r * std::cos(phi), r * std::sin(phi)};
                const double dens = planar_source_density(sc, p);
                if (unit(rng) * envelope <= dens) break;
                if (++attempts > 100000)
                  throw_error(ErrorCode::degenerate_density,
                              "rejection sampling of the source intensity is not terminating");
              }
            }
            out.origins[k] = p;
            if (!g.contains(p)) {
              escaped.store(true);
              continue;
            }
            const TangentialGradient grad{bilinear(grad_x, p), bilinear(grad_y, p)};
            const std::optional<Vec3> dir = try_scenario_T(sc, p, grad);
            if (dir) {
              out.directions[k] = *dir;
            } else {
              out.alive[k] = 0;
              ++evan;
            }
          }
          block_evanescent[b] = evan;
        }
      },
      1);

  if (escaped.load())
    throw_error(ErrorCode::footprint_exceeded, "a sampled ray landed outside the phase grid");
  for (std::size_t b = 0; b < blocks; ++b) out.evanescent_count += block_evanescent[b];
  out.evanescent_power = static_cast<double>(out.evanescent_count) * w_ray;
  return out;
}

/// Bins outgoing directions over the global spherical chart restricted to a
/// polar band. Directions outside the band are clamped to the nearest edge
/// bin and reported as spill, so the power bookkeeping stays exact.
inline SphericalHistogram sphere_histogram(const TraceResult& rays, int n_u, int n_v,
                                           PolarBand band) {
  if (n_u < 1 || n_v < 1)
    throw_error(ErrorCode::validation_error, "histogram needs at least one bin per axis");
  if (!(band.v_lo >= 0.0 && band.v_hi <= M_PI && band.v_lo < band.v_hi))
    throw_error(ErrorCode::validation_error, "polar band must satisfy 0 <= v_lo < v_hi <= pi");

  SphericalHistogram h;
  h.n_u = n_u;
  h.n_v = n_v;
  h.v_lo = band.v_lo;
  h.v_hi = band.v_hi;
  h.total_power = rays.total_power;
  h.ray_weight = rays.size() ? rays.total_power / static_cast<double>(rays.size()) : 0.0;
  h.power.assign(static_cast<std::size_t>(n_u) * n_v, 0.0);
  h.solid_angle.assign(h.power.size(), 0.0);
  const double du = kTwoPi / n_u;
  const double dv = (band.v_hi - band.v_lo) / n_v;
  for (int iv = 0; iv < n_v; ++iv) {
    const double omega =
        du * (std::cos(band.v_lo + iv * dv) - std::cos(band.v_lo + (iv + 1) * dv));
    for (int iu = 0; iu < n_u; ++iu) h.solid_angle[h.idx(iu, iv)] = omega;
  }

  double evan = 0.0, spill = 0.0;
  for (std::size_t k = 0; k < rays.size(); ++k) {
    if (!rays.alive[k]) {
      evan += rays.weights[k];
      continue;
    }
    const Vec3 m = rays.directions[k];
    const double v = std::acos(std::min(1.0, std::max(-1.0, m.z)));
    double u = std::atan2(m.y, m.x);
    if (u < 0.0) u += kTwoPi;
    int iu = std::min(n_u - 1, static_cast<int>(u / du));
    int iv;
    if (v < band.v_lo || v > band.v_hi) {
      iv = v < band.v_lo ? 0 : n_v - 1;
      spill += rays.weights[k];
      ++h.spill_count;
    } else {
      iv = std::min(n_v - 1, static_cast<int>((v - band.v_lo) / dv));
    }
    h.power[h.idx(iu, iv)] += rays.weights[k];
  }
  h.evanescent_power = evan;
  h.spill_power = spill;
  double total = 0.0;
  for (double p : h.power) total += p;
  h.binned_power = total;
  return h;
}

/// Prescribed target density at a direction given by polar angle v in the
/// global chart; theta is the cap angle measured from the scenario's axis.
inline double target_density_at(const Scenario& sc, double v) {
  const double theta = sc.transport == Transport::refract ? v : M_PI - v;
  const Intensity& gi = sc.target.intensity;
  if (gi.kind == ProfileKind::sampled) {
    const double s = std::sin(theta);
    return gi.sample_at({s, 0.0});  // radially sampled maps; azimuth handled below
  }
  return gi.profile(theta);
}

namespace detail {

inline double target_density_dir(const Scenario& sc, double u, double v) {
  const Intensity& gi = sc.target.intensity;
  if (gi.kind != ProfileKind::sampled) return target_density_at(sc, v);
  const double theta = sc.transport == Transport::refract ? v : M_PI - v;
  const double s = std::sin(theta);
  return gi.sample_at({s * std::cos(u), s * std::sin(u)});
}

}  // namespace detail

/// L1 and relative Linf distance between the histogram density estimate and
/// the prescribed target density, the latter rescaled so its mass over the
/// cap equals the binned power. Linf only counts bins whose expected ray
/// count is at least 100.
inline DensityDistance density_distance(const SphericalHistogram& est, const Scenario& sc) {
  const double g_mass = target_mass(sc);
  if (!(g_mass > 0.0))
    throw_error(ErrorCode::degenerate_density, "target intensity integrates to zero");
  const double scale = est.binned_power / g_mass;
  const double du = kTwoPi / est.n_u;
  const double dv = (est.v_hi - est.v_lo) / est.n_v;
  DensityDistance out;
  double l1 = 0.0;
  for (int iv = 0; iv < est.n_v; ++iv) {
    const double vc = est.v_lo + (iv + 0.5) * dv;
    for (int iu = 0; iu < est.n_u; ++iu) {
      const double omega = est.solid_angle[est.idx(iu, iv)];
      const double want = scale * detail::target_density_dir(sc, (iu + 0.5) * du, vc);
      const double got = est.power[est.idx(iu, iv)] / omega;
      l1 += std::abs(got - want) * omega;
      const double expected_rays = est.ray_weight > 0.0 ? want * omega / est.ray_weight : 0.0;
      if (expected_rays >= 100.0 && want > 0.0) {
        ++out.linf_bins;
        out.linf = std::max(out.linf, std::abs(got - want) / want);
      }
    }
  }
  out.l1 = est.binned_power > 0.0 ? l1 / est.binned_power : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Jacobian identity check: finite-difference surface-measure distortion of
// the transport map against the closed-form PDE coefficient, on grid spacings
// h, h/2, h/4.

namespace detail {

inline PhaseDerivs numeric_derivs(const std::function<double(Vec2)>& psi, Vec2 p, double h) {
  PhaseDerivs d;
  const double fpx = psi({p.x + h, p.y}), fmx = psi({p.x - h, p.y});
  const double fpy = psi({p.x, p.y + h}), fmy = psi({p.x, p.y - h});
  const double f0 = psi(p);
  d.grad = {(fpx - fmx) / (2.0 * h), (fpy - fmy) / (2.0 * h)};
  d.hess.xx = (fpx - 2.0 * f0 + fmx) / (h * h);
  d.hess.yy = (fpy - 2.0 * f0 + fmy) / (h * h);
  d.hess.xy = (psi({p.x + h, p.y + h}) - psi({p.x + h, p.y - h}) - psi({p.x - h, p.y + h}) +
               psi({p.x - h, p.y - h})) /
              (4.0 * h * h);
  return d;
}

inline Vec3 map_at(const Scenario& sc, const std::function<double(Vec2)>& psi, Vec2 p, double h) {
  const PhaseDerivs d = numeric_derivs(psi, p, h);
  return scenario_T(sc, p, d.grad);
}

/// |T_x x T_y| by centered differences in the plane (collimated sources).
inline double fd_cross_planar(const Scenario& sc, const std::function<double(Vec2)>& psi, Vec2 p,
                              double h) {
  const Vec3 tx = (1.0 / (2.0 * h)) * (map_at(sc, psi, {p.x + h, p.y}, h) -
                                       map_at(sc, psi, {p.x - h, p.y}, h));
  const Vec3 ty = (1.0 / (2.0 * h)) * (map_at(sc, psi, {p.x, p.y + h}, h) -
                                       map_at(sc, psi, {p.x, p.y - h}, h));
  return norm(cross(tx, ty));
}

/// |(T.s)_u x (T.s)_v| / sin(v) by centered differences in the spherical
/// chart (point sources); probes are (u, v) pairs.
inline double fd_cross_spherical(const Scenario& sc, const std::function<double(Vec2)>& psi,
                                 Vec2 uv, double h) {
  auto T = [&](double u, double v) {
    const Vec3 q = plane_point(u, v);
    const Vec2 p{q.x, q.y};
    return map_at(sc, psi, p, h);
  };
  const Vec3 tu = (1.0 / (2.0 * h)) * (T(uv.x + h, uv.y) - T(uv.x - h, uv.y));
  const Vec3 tv = (1.0 / (2.0 * h)) * (T(uv.x, uv.y + h) - T(uv.x, uv.y - h));
  return norm(cross(tu, tv)) / std::sin(uv.y);
}

}  // namespace detail

/// Compares the finite-difference surface-measure distortion of the scenario
/// map against the closed-form coefficient at spacings h, h/2, h/4 and
/// reports the observed convergence order of their difference. Probes are
/// plane points for collimated sources and (u, v) chart points for the
/// origin source.
inline JacobianReport jacobian_identity_check(const Scenario& sc,
                                              const std::function<double(Vec2)>& psi,
                                              double base_h, const std::vector<Vec2>& probes) {
  if (probes.empty()) throw_error(ErrorCode::validation_error, "no probe points given");
  JacobianReport rep;
  const bool planar = sc.source.kind == SourceKind::collimated;
  for (int level = 0; level < 3; ++level) {
    const double h = base_h / (1 << level);
    std::vector<double> errs;
    errs.reserve(probes.size());
    for (const Vec2& q : probes) {
      const Vec2 p = planar ? q : Vec2{plane_point(q.x, q.y).x, plane_point(q.x, q.y).y};
      const PhaseDerivs d = detail::numeric_derivs(psi, p, h);
      const double closed = scenario_pde_lhs(sc, p, d).lhs;
      const double fd = planar ? detail::fd_cross_planar(sc, psi, q, h)
                               : detail::fd_cross_spherical(sc, psi, q, h);
      errs.push_back(std::abs(fd - closed));
    }
    std::nth_element(errs.begin(), errs.begin() + errs.size() / 2, errs.end());
    rep.median_error[level] = errs[errs.size() / 2];
  }
  rep.order_coarse = std::log2(rep.median_error[0] / rep.median_error[1]);
  rep.order_fine = std::log2(rep.median_error[1] / rep.median_error[2]);
  rep.observed_order = 0.5 * std::log2(rep.median_error[0] / rep.median_error[2]);
  return rep;
}

// ---------------------------------------------------------------------------
// Set-wise energy conservation: integral of f over a region E against the
// target-side mass of T(E), estimated from the traced pushforward.

/// lhs = integral of f over E (subsampled midpoint quadrature on a refined
/// grid); rhs = sum over bins of the bin's prescribed target mass times the
/// fraction of its rays that originated in E.
inline EnergyBalance energy_balance(const Scenario& sc, const TraceResult& rays,
                                    const SphericalHistogram& hist,
                                    const std::function<bool(Vec2)>& region, int quad_resolution) {
  EnergyBalance out;

  // Source-side quadrature with 4x4 subsampling per cell against the annulus
  // and region indicators.
  const double r_out = sc.source.r_outer, r_in = sc.source.r_inner;
  const int n = std::max(16, quad_resolution);
  const double h = 2.0 * r_out / n;
  double lhs = 0.0;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      const double x0 = -r_out + i * h, y0 = -r_out + j * h;
      double cell = 0.0;
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
          const Vec2 p{x0 + (a + 0.5) * h / 4.0, y0 + (b + 0.5) * h / 4.0};
          const double r = norm(p);
          if (r < r_in || r > r_out || !region(p)) continue;
          cell += planar_source_density(sc, p);
        }
      lhs += cell * (h * h / 16.0);
    }
  out.lhs = lhs;

  // Per-bin ray counts, split into "from E" and total.
  const double du = kTwoPi / hist.n_u;
  const double dv = (hist.v_hi - hist.v_lo) / hist.n_v;
  std::vector<double> in_region(hist.power.size(), 0.0), total(hist.power.size(), 0.0);
  for (std::size_t k = 0; k < rays.size(); ++k) {
    if (!rays.alive[k]) continue;
    const Vec3 m = rays.directions[k];
    const double v = std::acos(std::min(1.0, std::max(-1.0, m.z)));
    double u = std::atan2(m.y, m.x);
    if (u < 0.0) u += kTwoPi;
    const int iu = std::min(hist.n_u - 1, static_cast<int>(u / du));
    int iv;
    if (v < hist.v_lo || v > hist.v_hi)
      iv = v < hist.v_lo ? 0 : hist.n_v - 1;
    else
      iv = std::min(hist.n_v - 1, static_cast<int>((v - hist.v_lo) / dv));
    const std::size_t bin = hist.idx(iu, iv);
    total[bin] += 1.0;
    if (region(rays.origins[k])) in_region[bin] += 1.0;
  }

  const double g_mass = target_mass(sc);
  const double scale = source_mass(sc) / g_mass;
  double rhs = 0.0;
  for (int iv = 0; iv < hist.n_v; ++iv) {
    const double vc = hist.v_lo + (iv + 0.5) * dv;
    for (int iu = 0; iu < hist.n_u; ++iu) {
      const std::size_t bin = hist.idx(iu, iv);
      if (total[bin] == 0.0) continue;
      const double bin_mass =
          scale * detail::target_density_dir(sc, (iu + 0.5) * du, vc) * hist.solid_angle[bin];
      rhs += bin_mass * (in_region[bin] / total[bin]);
    }
  }
  out.rhs = rhs;
  const double denom = std::max(std::abs(out.lhs), 1e-300);
  out.rel_err = std::abs(out.lhs - out.rhs) / denom;
  return out;
}

/// Convenience form: traces a fresh batch and bins it over the scenario's
/// target band before running the set-wise balance.
inline EnergyBalance energy_balance(const Scenario& sc, const ScalarField& psi,
                                    const std::function<bool(Vec2)>& region, std::size_t n_rays,
                                    std::uint64_t seed = 1, int n_u = 24, int n_v = 24) {
  const TraceResult rays = trace(sc, psi, n_rays, seed);
  const SphericalHistogram hist = sphere_histogram(rays, n_u, n_v, target_band(sc));
  return energy_balance(sc, rays, hist, region, 4 * psi.grid.nx);
}

}  // namespace metalens
