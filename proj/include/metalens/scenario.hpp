#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>

#include "metalens/error.hpp"
#include "metalens/grid.hpp"
#include "metalens/intensity.hpp"
#include "metalens/optics.hpp"
#include "metalens/sphere_frame.hpp"
#include "metalens/vec.hpp"

namespace metalens {

enum class Transport { reflect, refract };
enum class SourceKind { collimated, point };

/// Target caps are clipped at 80 degrees: the projected density carries a
/// 1/sqrt(1-|p|^2) factor that blows up at the equator.
constexpr double kThetaCapMax = 1.3962634015954636;

struct SourceSpec {
  SourceKind kind = SourceKind::collimated;
  double r_inner = 0.0;
  double r_outer = 1.0;
  Intensity intensity;
};

struct TargetSpec {
  double theta_min = 0.0;
  double theta_max = 0.7;
  Intensity intensity;
};

struct Scenario {
  Transport transport = Transport::refract;
  SourceSpec source;
  TargetSpec target;
  MediumPair media;
  double plane_height = 1.0;

  /// Cap axis: -e3 for reflection targets, +e3 for refraction targets.
  int axis_sign() const { return transport == Transport::reflect ? -1 : +1; }
};

namespace detail {

inline void validate_intensity(const Intensity& in, const std::string& who) {
  switch (in.kind) {
    case ProfileKind::uniform:
      if (!(in.value > 0.0)) throw_error(ErrorCode::validation_error, who + ": value must be > 0");
      break;
    case ProfileKind::gaussian:
      if (!(in.value > 0.0)) throw_error(ErrorCode::validation_error, who + ": value must be > 0");
      if (!(in.sigma > 0.0)) throw_error(ErrorCode::validation_error, who + ": sigma must be > 0");
      break;
    case ProfileKind::sampled: {
      if (in.samples.v.empty())
        throw_error(ErrorCode::validation_error, who + ": sampled intensity has no grid");
      for (double v : in.samples.v)
        if (!std::isfinite(v) || v < 0.0)
          throw_error(ErrorCode::validation_error, who + ": samples must be finite and >= 0");
      break;
    }
  }
}

}  // namespace detail

inline void validate(const Scenario& sc) {
  if (!(sc.media.n1 > 0.0) || !(sc.media.n2 > 0.0))
    throw_error(ErrorCode::validation_error, "scenario: refractive indices must be > 0");
  if (sc.transport == Transport::reflect && sc.media.n1 != sc.media.n2)
    throw_error(ErrorCode::validation_error,
                "scenario: reflection requires equal refractive indices (n1 = n2)");
  if (std::abs(sc.plane_height - 1.0) > 1e-12)
    throw_error(ErrorCode::validation_error,
                "scenario: plane height must be 1 (rescale coordinates first)");
  if (!(sc.source.r_outer > 0.0) || !(sc.source.r_inner >= 0.0) ||
      !(sc.source.r_inner < sc.source.r_outer))
    throw_error(ErrorCode::validation_error,
                "source: radii must satisfy 0 <= r_inner < r_outer");
  if (!(sc.target.theta_min >= 0.0) || !(sc.target.theta_min < sc.target.theta_max))
    throw_error(ErrorCode::validation_error,
                "target: angles must satisfy 0 <= theta_min < theta_max");
  if (sc.target.theta_max >= 1.5707963267948966)
    throw_error(ErrorCode::validation_error, "target: target cap reaches equator");
  if (sc.target.theta_max > kThetaCapMax)
    throw_error(ErrorCode::validation_error,
                "target: theta_max exceeds the 80 degree cap limit");
  detail::validate_intensity(sc.source.intensity, "source intensity");
  detail::validate_intensity(sc.target.intensity, "target intensity");
}

// -------------------------------------------------------------------------
// Scenario maps. The named forms assume n1 = n2 = 1 where no media argument
// appears, matching their derivations; the dispatcher below generalizes.

inline Vec3 collimated_reflection_T(TangentialGradient g) {
  const double rr = g.gx * g.gx + g.gy * g.gy;
  if (rr >= 1.0) throw_error(ErrorCode::evanescent_ray, "collimated reflection: |grad psi| >= 1");
  return {-g.gx, -g.gy, -std::sqrt(1.0 - rr)};
}

inline Vec3 point_reflection_T(double x, double y, TangentialGradient g) {
  const double d = std::sqrt(x * x + y * y + 1.0);
  const double tx = x / d - g.gx;
  const double ty = y / d - g.gy;
  const double delta = 1.0 - tx * tx - ty * ty;
  if (delta <= 0.0) throw_error(ErrorCode::evanescent_ray, "point reflection: delta <= 0");
  return {tx, ty, -std::sqrt(delta)};
}

inline Vec3 collimated_refraction_T(TangentialGradient g, MediumPair media) {
  const double rr = g.gx * g.gx + g.gy * g.gy;
  const double n2 = media.n2;
  if (rr >= n2 * n2)
    throw_error(ErrorCode::evanescent_ray, "collimated refraction: |grad psi| >= n2");
  return {-g.gx / n2, -g.gy / n2, std::sqrt(1.0 - rr / (n2 * n2))};
}

inline Vec3 point_refraction_T(double x, double y, TangentialGradient g, MediumPair media) {
  const double d = std::sqrt(x * x + y * y + 1.0);
  const double wx = media.n1 * x / d - g.gx;
  const double wy = media.n1 * y / d - g.gy;
  const double delta = media.n2 * media.n2 - wx * wx - wy * wy;
  if (delta <= 0.0) throw_error(ErrorCode::evanescent_ray, "point refraction: delta <= 0");
  return {wx / media.n2, wy / media.n2, std::sqrt(delta) / media.n2};
}

/// Outgoing direction for any scenario at strike point p with phase gradient
/// g; nullopt marks an evanescent ray.
inline std::optional<Vec3> try_scenario_T(const Scenario& sc, Vec2 p, TangentialGradient g) {
  double ax = 0.0, ay = 0.0;
  if (sc.source.kind == SourceKind::point) {
    const double d = std::sqrt(p.x * p.x + p.y * p.y + 1.0);
    ax = p.x / d;
    ay = p.y / d;
  }
  double tx, ty;
  if (sc.transport == Transport::reflect) {
    tx = ax - g.gx / sc.media.n1;
    ty = ay - g.gy / sc.media.n1;
  } else {
    tx = (sc.media.n1 * ax - g.gx) / sc.media.n2;
    ty = (sc.media.n1 * ay - g.gy) / sc.media.n2;
  }
  const double delta = 1.0 - tx * tx - ty * ty;
  if (delta <= 0.0) return std::nullopt;
  return Vec3{tx, ty, sc.axis_sign() * std::sqrt(delta)};
}

inline Vec3 scenario_T(const Scenario& sc, Vec2 p, TangentialGradient g) {
  const auto m = try_scenario_T(sc, p, g);
  if (!m) throw_error(ErrorCode::evanescent_ray, "scenario map: evanescent ray");
  return *m;
}

// -------------------------------------------------------------------------
// Pointwise PDE forms. Two independent routes compute the transport
// coefficient L with f_source(x) = L(x) * g(T(x)): the scenario-specific
// derivations (determinant of the phase Hessian for collimated sources, the
// A/B matrix form for point sources) and the unified convex-potential form.
// f_source is measured per unit area for collimated sources and per unit
// solid angle for point sources.

struct PhaseDerivs {
  TangentialGradient grad;
  Sym2 hess;
};

struct PdeCoefficient {
  double lhs = 0.0;
  Vec3 direction{0.0, 0.0, 1.0};
};

/// phi = (n1 d_Q - psi)/n2 derivative data at one point.
inline PhaseDerivs potential_derivs(const Scenario& sc, Vec2 p, const PhaseDerivs& psi) {
  const double n1 = sc.media.n1, n2 = sc.media.n2;
  PhaseDerivs phi;
  if (sc.source.kind == SourceKind::point) {
    const double d = std::sqrt(p.x * p.x + p.y * p.y + 1.0);
    phi.grad.gx = (n1 * p.x / d - psi.grad.gx) / n2;
    phi.grad.gy = (n1 * p.y / d - psi.grad.gy) / n2;
    const Sym2 hd = hess_distance(p.x, p.y);
    phi.hess.xx = (n1 * hd.xx - psi.hess.xx) / n2;
    phi.hess.xy = (n1 * hd.xy - psi.hess.xy) / n2;
    phi.hess.yy = (n1 * hd.yy - psi.hess.yy) / n2;
  } else {
    phi.grad.gx = -psi.grad.gx / n2;
    phi.grad.gy = -psi.grad.gy / n2;
    phi.hess.xx = -psi.hess.xx / n2;
    phi.hess.xy = -psi.hess.xy / n2;
    phi.hess.yy = -psi.hess.yy / n2;
  }
  return phi;
}

inline PdeCoefficient scenario_pde_lhs(const Scenario& sc, Vec2 p, const PhaseDerivs& psi) {
  PdeCoefficient out;
  const double n1 = sc.media.n1, n2 = sc.media.n2;
  if (sc.source.kind == SourceKind::collimated) {
    out.direction = sc.transport == Transport::reflect
                        ? collimated_reflection_T({psi.grad.gx / n1, psi.grad.gy / n1})
                        : collimated_refraction_T(psi.grad, sc.media);
    const double det = psi.hess.det() / (n2 * n2);
    out.lhs = std::abs(det) / std::abs(out.direction.z);
  } else {
    TangentialGradient g = psi.grad;
    Vec3 T;
    Mat2 M;
    if (sc.transport == Transport::reflect) {
      // n1 = n2 = n: components cos(u)sin(v) - psi_x/n, so the phase Hessian
      // enters scaled by 1/n.
      TangentialGradient gn{g.gx / n1, g.gy / n1};
      T = point_reflection_T(p.x, p.y, gn);
      M = frame_A(p.x, p.y) -
          mul(Sym2{psi.hess.xx / n1, psi.hess.xy / n1, psi.hess.yy / n1}, frame_B(p.x, p.y));
    } else {
      T = point_refraction_T(p.x, p.y, g, sc.media);
      M = (n1 / n2) * frame_A(p.x, p.y) -
          mul(Sym2{psi.hess.xx / n2, psi.hess.xy / n2, psi.hess.yy / n2}, frame_B(p.x, p.y));
    }
    out.direction = T;
    out.lhs = std::abs(M.det()) / (std::abs(T.z) * sin_polar(p.x, p.y));
  }
  return out;
}

inline PdeCoefficient unified_pde_lhs(const Scenario& sc, Vec2 p, const PhaseDerivs& psi) {
  const PhaseDerivs phi = potential_derivs(sc, p, psi);
  const double rr = phi.grad.gx * phi.grad.gx + phi.grad.gy * phi.grad.gy;
  if (rr >= 1.0) throw_error(ErrorCode::evanescent_ray, "unified form: |grad phi| >= 1");
  const double z = std::sqrt(1.0 - rr);
  double d_factor = 1.0;
  if (sc.source.kind == SourceKind::point) {
    const double dd = p.x * p.x + p.y * p.y + 1.0;
    d_factor = dd * std::sqrt(dd);
  }
  PdeCoefficient out;
  out.direction = {phi.grad.gx, phi.grad.gy, sc.axis_sign() * z};
  out.lhs = d_factor * std::abs(phi.hess.det()) / z;
  return out;
}

// -------------------------------------------------------------------------
// Reduction to the Monge-Ampere second-boundary-value problem.

struct TargetDomain {
  double r_min = 0.0;
  double r_max = 1.0;
};

struct MAProblem {
  GridSpec grid;
  Mask mask;
  std::vector<double> f1;
  TargetDomain target;
  std::function<double(Vec2)> f2;
  double total_mass = 0.0;
  double target_mass_raw = 0.0;
  double target_scale = 1.0;
  double f1_grid_mass = 0.0;
  int zero_f1_nodes = 0;
  bool source_convex = true;
  bool target_convex = true;
  /// Annulus bounds the mask was built from, so certification can rebuild it
  /// at another resolution.
  double r_inner = 0.0;
  double r_outer = 1.0;
  /// Continuum source density (optional); enables certification grids other
  /// than the problem grid.
  std::function<double(Vec2)> f1_eval;
};

inline double source_mass(const Scenario& sc) {
  const SourceSpec& s = sc.source;
  if (s.intensity.kind == ProfileKind::sampled) {
    if (s.kind == SourceKind::collimated)
      return sampled_annulus_mass(s.intensity, s.r_inner, s.r_outer, [](Vec2) { return 1.0; });
    return sampled_annulus_mass(s.intensity, s.r_inner, s.r_outer, [](Vec2 p) {
      const double dd = p.x * p.x + p.y * p.y + 1.0;
      return 1.0 / (dd * std::sqrt(dd));
    });
  }
  if (s.kind == SourceKind::collimated) return planar_mass(s.intensity, s.r_inner, s.r_outer);
  return cone_mass(s.intensity, std::atan(s.r_inner), std::atan(s.r_outer));
}

inline double target_mass(const Scenario& sc) {
  const TargetSpec& t = sc.target;
  if (t.intensity.kind == ProfileKind::sampled)
    return sampled_annulus_mass(t.intensity, std::sin(t.theta_min), std::sin(t.theta_max),
                                [](Vec2 p) { return 1.0 / std::sqrt(1.0 - norm2(p)); });
  return cone_mass(t.intensity, t.theta_min, t.theta_max);
}

/// Planar source density: the intensity itself for collimated sources, the
/// solid-angle density pulled back through q(x,y) for point sources.
inline double planar_source_density(const Scenario& sc, Vec2 p) {
  const SourceSpec& s = sc.source;
  double base;
  if (s.intensity.kind == ProfileKind::sampled) {
    base = s.intensity.sample_at(p);
  } else if (s.kind == SourceKind::collimated) {
    base = s.intensity.profile(norm(p));
  } else {
    base = s.intensity.profile(std::atan(norm(p)));
  }
  if (s.kind == SourceKind::point) {
    const double dd = p.x * p.x + p.y * p.y + 1.0;
    base /= dd * std::sqrt(dd);
  }
  return base;
}

inline MAProblem reduce_to_ma(const Scenario& sc, int grid_resolution,
                              bool normalize_masses = false) {
  if (std::sin(sc.target.theta_max) >= 1.0 - 1e-9)
    throw_error(ErrorCode::domain_touches_equator,
                "target: projected cap reaches the unit circle");
  validate(sc);
  if (grid_resolution < 8)
    throw_error(ErrorCode::validation_error, "grid resolution must be at least 8");

  MAProblem mp;
  mp.total_mass = source_mass(sc);
  mp.target_mass_raw = target_mass(sc);
  if (!(mp.total_mass > 0.0))
    throw_error(ErrorCode::degenerate_density, "source intensity integrates to zero");
  if (!(mp.target_mass_raw > 0.0))
    throw_error(ErrorCode::degenerate_density, "target intensity integrates to zero");
  if (normalize_masses) {
    mp.target_scale = mp.total_mass / mp.target_mass_raw;
  } else {
    const double rel = std::abs(mp.total_mass - mp.target_mass_raw) / mp.total_mass;
    if (rel > 1e-6)
      throw_error(ErrorCode::mass_imbalance,
                  "source and target masses differ by relative " + std::to_string(rel) +
                      " (source " + std::to_string(mp.total_mass) + ", target " +
                      std::to_string(mp.target_mass_raw) +
                      "); set normalize_masses to rescale the target");
  }

  mp.grid = design_grid(sc.source.r_outer, grid_resolution);
  mp.mask = annulus_mask(mp.grid, sc.source.r_inner, sc.source.r_outer);
  mp.f1.assign(mp.grid.size(), 0.0);
  int masked = 0;
  for (int j = 0; j < mp.grid.ny; ++j)
    for (int i = 0; i < mp.grid.nx; ++i) {
      const std::size_t k = mp.grid.idx(i, j);
      if (!mp.mask[k]) continue;
      ++masked;
      mp.f1[k] = planar_source_density(sc, mp.grid.node(i, j));
      if (mp.f1[k] <= 0.0) ++mp.zero_f1_nodes;
    }
  mp.f1_grid_mass = 0.0;
  for (double v : mp.f1) mp.f1_grid_mass += v;
  mp.f1_grid_mass *= mp.grid.hx * mp.grid.hy;
  if (masked == 0 || mp.zero_f1_nodes * 2 > masked)
    throw_error(ErrorCode::degenerate_density, "source density vanishes on most of the domain");

  mp.target = {std::sin(sc.target.theta_min), std::sin(sc.target.theta_max)};
  mp.source_convex = sc.source.r_inner == 0.0;
  mp.target_convex = sc.target.theta_min == 0.0;
  mp.r_inner = sc.source.r_inner;
  mp.r_outer = sc.source.r_outer;
  mp.f1_eval = [sc](Vec2 p) { return planar_source_density(sc, p); };

  const Intensity gi = sc.target.intensity;
  const TargetDomain dom = mp.target;
  const double scale = mp.target_scale;
  mp.f2 = [gi, dom, scale](Vec2 p) {
    double r = norm(p);
    r = std::min(std::max(r, dom.r_min), dom.r_max);
    const double z = std::sqrt(1.0 - r * r);
    double base;
    if (gi.kind == ProfileKind::sampled) {
      base = gi.sample_at(p);
    } else {
      base = gi.profile(std::asin(r));
    }
    return scale * base / z;
  };
  return mp;
}

// -------------------------------------------------------------------------
// Phase <-> potential conversion: psi = n1 d_Q - n2 phi, with d_Q = 1 for
// collimated sources and sqrt(x^2+y^2+1) for the origin source; psi is
// pinned to 0 at the grid center.

inline std::pair<int, int> center_node(const GridSpec& g) {
  const int ic = static_cast<int>(std::lround(-g.x0 / g.hx));
  const int jc = static_cast<int>(std::lround(-g.y0 / g.hy));
  if (ic < 0 || ic >= g.nx || jc < 0 || jc >= g.ny)
    throw_error(ErrorCode::validation_error, "grid does not cover the origin");
  return {ic, jc};
}

inline double source_distance(const Scenario& sc, Vec2 p) {
  if (sc.source.kind == SourceKind::collimated) return 1.0;
  return std::sqrt(p.x * p.x + p.y * p.y + 1.0);
}

inline ScalarField phase_from_potential(const ScalarField& phi, const Scenario& sc) {
  ScalarField psi(phi.grid);
  for (int j = 0; j < phi.grid.ny; ++j)
    for (int i = 0; i < phi.grid.nx; ++i)
      psi.at(i, j) =
          sc.media.n1 * source_distance(sc, phi.grid.node(i, j)) - sc.media.n2 * phi.at(i, j);
  const auto [ic, jc] = center_node(phi.grid);
  const double c = psi.at(ic, jc);
  for (double& v : psi.v) v -= c;
  return psi;
}

inline ScalarField potential_from_phase(const ScalarField& psi, const Scenario& sc) {
  ScalarField phi(psi.grid);
  for (int j = 0; j < psi.grid.ny; ++j)
    for (int i = 0; i < psi.grid.nx; ++i)
      phi.at(i, j) =
          (sc.media.n1 * source_distance(sc, psi.grid.node(i, j)) - psi.at(i, j)) / sc.media.n2;
  return phi;
}

}  // namespace metalens
