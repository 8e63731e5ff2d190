#pragma once

// Orchestration: configuration -> solved design artifacts -> ray-trace
// verification artifacts. Everything written here is a pure function of
// (config, seeds): no timestamps, no machine identifiers, so identical runs
// produce byte-identical files.
//
// Artifact layout (inside the chosen output directory):
//   run_solve   phase.grid, potential.grid, residual.grid, report.json
//   run_verify  verify_report.json, histogram.tsv
//
// Grids are written in the physical frame of the config. When plane_height
// a != 1, the solve happens in the normalized frame (plane at height 1) and
// maps back through psi_a(x, y) = a * psi(x/a, y/a).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "metalens/config.hpp"
#include "metalens/gridfile.hpp"
#include "metalens/scenario.hpp"
#include "metalens/solver.hpp"
#include "metalens/trace.hpp"

namespace metalens {

namespace detail {

/// Rescales a normalized-frame field to the physical frame at plane height a.
/// Coordinates always scale by a; values scale by a only for 1-homogeneous
/// quantities (phase, potential), not for dimensionless ones (residual).
inline ScalarField to_physical(const ScalarField& f, double a, bool scale_values) {
  if (a == 1.0) return f;
  ScalarField out = f;
  out.grid.x0 *= a;
  out.grid.y0 *= a;
  out.grid.hx *= a;
  out.grid.hy *= a;
  if (scale_values)
    for (double& v : out.v) v *= a;
  return out;
}

/// Inverse of to_physical for a phase grid read from disk.
inline ScalarField phase_to_normalized(const ScalarField& f, double a) {
  if (a == 1.0) return f;
  ScalarField out = f;
  out.grid.x0 /= a;
  out.grid.y0 /= a;
  out.grid.hx /= a;
  out.grid.hy /= a;
  for (double& v : out.v) v /= a;
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw_error(ErrorCode::format_error,
                "cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.flush();
  if (!out) throw_error(ErrorCode::format_error, "write to '" + path.string() + "' failed");
}

inline nlohmann::json energy_json(const EnergyBalance& eb) {
  return {{"lhs", eb.lhs}, {"rhs", eb.rhs}, {"rel_err", eb.rel_err}};
}

}  // namespace detail

/// Result of a design solve, alongside the artifacts written to disk.
struct SolveOutcome {
  SolverResult result;    // normalized-frame solution
  ScalarField phase;      // physical-frame phase, as written to phase.grid
  ResidualField residual; // normalized-frame residual certification
  nlohmann::json report;  // contents of report.json
  bool converged = false;
};

/// Solves the design problem in `cfg` and writes phase.grid, potential.grid,
/// residual.grid, and report.json into `out_dir`.
inline SolveOutcome run_solve(const DesignConfig& cfg, const std::filesystem::path& out_dir) {
  const double a = cfg.scenario.plane_height;
  const Scenario sc = normalized_scenario(cfg.scenario);
  const MAProblem problem = reduce_to_ma(sc, cfg.resolution, cfg.normalize_masses);

  SolveOutcome out;
  out.result = solve(problem, cfg.solver);
  out.converged = out.result.converged;
  const ScalarField psi = phase_from_potential(out.result.phi, sc);
  out.residual = ma_residual(out.result.phi, problem);
  const ConvexityReport convexity = convexity_check(out.result.phi, &problem.mask);

  out.phase = detail::to_physical(psi, a, true);
  const ScalarField potential_physical = detail::to_physical(out.result.phi, a, true);
  const ScalarField residual_physical = detail::to_physical(out.residual.field, a, false);

  nlohmann::json stages = nlohmann::json::array();
  int iterations = 0;
  for (const StageReport& st : out.result.stages) {
    stages.push_back({{"epsilon", st.epsilon},
                      {"iterations", st.iterations},
                      {"marginal_error", st.marginal_error},
                      {"kept_fraction", st.kept_fraction}});
    iterations += st.iterations;
  }
  out.report = {
      {"converged", out.result.converged},
      {"iterations", iterations},
      {"stages", stages},
      {"marginal_error", out.result.marginal_error},
      {"mass",
       {{"source", problem.total_mass},
        {"target_raw", problem.target_mass_raw},
        {"target_scale", problem.target_scale},
        {"normalized", cfg.normalize_masses}}},
      {"residual",
       {{"median", out.residual.stats.median},
        {"p95", out.residual.stats.p95},
        {"max", out.residual.stats.max},
        {"interior_nodes", out.residual.stats.interior_nodes},
        {"kink_nodes", out.residual.stats.kink_nodes}}},
      {"convexity",
       {{"min_eigenvalue", convexity.min_eigenvalue},
        {"fraction_nonconvex", convexity.fraction_nonconvex}}},
      {"gradient",
       {{"max_radius", out.result.max_gradient_radius},
        {"target_r_min", problem.target.r_min},
        {"target_r_max", problem.target.r_max}}},
      {"domain",
       {{"source_convex", problem.source_convex}, {"target_convex", problem.target_convex}}},
      {"quadrature_defect", out.result.quadrature_defect},
      {"zero_mass_target_cells", out.result.zero_mass_nodes},
      {"grid",
       {{"resolution", cfg.resolution},
        {"hx", out.phase.grid.hx},
        {"plane_height", a}}},
  };

  std::filesystem::create_directories(out_dir);
  write_grid(out_dir / "phase.grid", out.phase, "phase");
  write_grid(out_dir / "potential.grid", potential_physical, "potential");
  write_grid(out_dir / "residual.grid", residual_physical, "residual");
  detail::write_text(out_dir / "report.json", out.report.dump(2) + "\n");
  return out;
}

/// Result of a ray-trace verification, alongside the artifacts written.
struct VerifyOutcome {
  SphericalHistogram histogram;
  DensityDistance distance;
  double evanescent_fraction = 0.0;
  bool passed = false;  // evanescent fraction within the 0.1% budget
  nlohmann::json report;
};

/// Traces cfg.verify.rays rays through the phase grid at `phase_path` and
/// writes verify_report.json plus histogram.tsv into `out_dir`.
inline VerifyOutcome run_verify(const DesignConfig& cfg,
                                const std::filesystem::path& phase_path,
                                const std::filesystem::path& out_dir) {
  const NamedField loaded = read_grid(phase_path);
  if (loaded.quantity != "phase")
    throw_error(ErrorCode::format_error,
                "verify: expected a grid with quantity 'phase', got '" + loaded.quantity +
                    "' (was this the potential or residual export?)");
  const double a = cfg.scenario.plane_height;
  const Scenario sc = normalized_scenario(cfg.scenario);
  const ScalarField psi = detail::phase_to_normalized(loaded.field, a);

  VerifyOutcome out;
  const TraceResult rays = trace(sc, psi, static_cast<std::size_t>(cfg.verify.rays),
                                 cfg.verify.seed);
  out.histogram = sphere_histogram(rays, cfg.verify.bins_u, cfg.verify.bins_v, target_band(sc));
  out.distance = density_distance(out.histogram, sc);
  out.evanescent_fraction =
      static_cast<double>(rays.evanescent_count) / static_cast<double>(rays.size());
  out.passed = out.evanescent_fraction <= 1e-3;

  const int quad_res = 4 * std::max(psi.grid.nx, 32);
  const EnergyBalance full =
      energy_balance(sc, rays, out.histogram, [](Vec2) { return true; }, quad_res);
  const EnergyBalance q1 = energy_balance(
      sc, rays, out.histogram, [](Vec2 p) { return p.x >= 0.0 && p.y >= 0.0; }, quad_res);
  const EnergyBalance q2 = energy_balance(
      sc, rays, out.histogram, [](Vec2 p) { return p.x < 0.0 && p.y >= 0.0; }, quad_res);
  const EnergyBalance q3 = energy_balance(
      sc, rays, out.histogram, [](Vec2 p) { return p.x < 0.0 && p.y < 0.0; }, quad_res);
  const EnergyBalance q4 = energy_balance(
      sc, rays, out.histogram, [](Vec2 p) { return p.x >= 0.0 && p.y < 0.0; }, quad_res);

  out.report = {
      {"rays", cfg.verify.rays},
      {"bins_u", cfg.verify.bins_u},
      {"bins_v", cfg.verify.bins_v},
      {"seed", cfg.verify.seed},
      {"l1", out.distance.l1},
      {"linf", out.distance.linf},
      {"linf_bins", out.distance.linf_bins},
      {"evanescent",
       {{"count", rays.evanescent_count},
        {"fraction", out.evanescent_fraction},
        {"power", rays.evanescent_power}}},
      {"spill", {{"count", out.histogram.spill_count}, {"power", out.histogram.spill_power}}},
      {"binned_power", out.histogram.binned_power},
      {"total_power", rays.total_power},
      {"energy",
       {{"full", detail::energy_json(full)},
        {"quadrant_pp", detail::energy_json(q1)},
        {"quadrant_mp", detail::energy_json(q2)},
        {"quadrant_mm", detail::energy_json(q3)},
        {"quadrant_pm", detail::energy_json(q4)}}},
      {"passed", out.passed},
  };

  // Plot-ready histogram table: bin centers, solid angle, measured density,
  // and the target density scaled to the binned power.
  const double tmass = target_mass(sc);
  const double scale = tmass > 0.0 ? out.histogram.binned_power / tmass : 0.0;
  std::string tsv = "u_center\tv_center\tsolid_angle\tmeasured_density\ttarget_density\n";
  for (int iv = 0; iv < out.histogram.n_v; ++iv)
    for (int iu = 0; iu < out.histogram.n_u; ++iu) {
      const std::size_t k = out.histogram.idx(iu, iv);
      const double du = kTwoPi / out.histogram.n_u;
      const double dv = (out.histogram.v_hi - out.histogram.v_lo) / out.histogram.n_v;
      const double uc = (iu + 0.5) * du;
      const double vc = out.histogram.v_lo + (iv + 0.5) * dv;
      const double omega = out.histogram.solid_angle[k];
      const double measured = omega > 0.0 ? out.histogram.power[k] / omega : 0.0;
      const double want = scale * detail::target_density_dir(sc, uc, vc);
      detail::append_double(tsv, uc);
      tsv.push_back('\t');
      detail::append_double(tsv, vc);
      tsv.push_back('\t');
      detail::append_double(tsv, omega);
      tsv.push_back('\t');
      detail::append_double(tsv, measured);
      tsv.push_back('\t');
      detail::append_double(tsv, want);
      tsv.push_back('\n');
    }

  std::filesystem::create_directories(out_dir);
  detail::write_text(out_dir / "verify_report.json", out.report.dump(2) + "\n");
  detail::write_text(out_dir / "histogram.tsv", tsv);
  return out;
}

/// Recomputes the residual certification for an existing phase grid against
/// the design problem described by `cfg`. Returns the report (no artifacts).
inline nlohmann::json run_residual(const DesignConfig& cfg,
                                   const std::filesystem::path& phase_path) {
  const NamedField loaded = read_grid(phase_path);
  if (loaded.quantity != "phase")
    throw_error(ErrorCode::format_error,
                "residual: expected a grid with quantity 'phase', got '" + loaded.quantity +
                    "'");
  const double a = cfg.scenario.plane_height;
  const Scenario sc = normalized_scenario(cfg.scenario);
  const ScalarField psi = detail::phase_to_normalized(loaded.field, a);
  if (psi.grid.nx < 8 || psi.grid.nx != psi.grid.ny)
    throw_error(ErrorCode::format_error, "residual: phase grid must be square, at least 8x8");
  // The design grid is parameterized by resolution = 2 r_outer / h; recover
  // it from the spacing and confirm the layout matches exactly.
  const long resolution = std::lround(2.0 * sc.source.r_outer / psi.grid.hx);
  if (resolution < 8 || resolution > 4096)
    throw_error(ErrorCode::format_error,
                "residual: phase grid spacing does not correspond to a design resolution");
  const MAProblem problem =
      reduce_to_ma(sc, static_cast<int>(resolution), cfg.normalize_masses);
  if (!problem.grid.same_layout(psi.grid))
    throw_error(ErrorCode::format_error,
                "residual: phase grid does not match the design footprint of the config "
                "(expected the grid written by solve for this scenario)");
  const ScalarField phi = potential_from_phase(psi, sc);
  const ResidualField res = ma_residual(phi, problem);
  const ConvexityReport convexity = convexity_check(phi, &problem.mask);
  return {
      {"residual",
       {{"median", res.stats.median},
        {"p95", res.stats.p95},
        {"max", res.stats.max},
        {"interior_nodes", res.stats.interior_nodes},
        {"kink_nodes", res.stats.kink_nodes}}},
      {"convexity",
       {{"min_eigenvalue", convexity.min_eigenvalue},
        {"fraction_nonconvex", convexity.fraction_nonconvex}}},
      {"grid", {{"resolution", resolution}, {"plane_height", a}}},
  };
}

/// Names of the built-in demonstration designs.
inline std::vector<std::string> demo_names() { return {"uniform-disk", "gaussian-to-ring"}; }

/// Returns the configuration text of a built-in demonstration design.
///
/// uniform-disk:     collimated reflection; uniform unit disk folded onto a
///                   uniform 40-degree cap.
/// gaussian-to-ring: collimated refraction into a denser medium; Gaussian
///                   beam spread onto a uniform 20-35 degree ring (a
///                   non-convex target handled by the transport solver).
inline std::string demo_config(const std::string& name) {
  if (name == "uniform-disk")
    return R"({
  "scenario": {"transport": "reflect", "source": "collimated", "n1": 1.0, "n2": 1.0},
  "source": {"r_outer": 1.0, "intensity": {"kind": "uniform", "value": 1.0}},
  "target": {"theta_max": 0.6981317007977318, "intensity": {"kind": "uniform", "value": 1.0}},
  "grid": {"resolution": 64},
  "verify": {"rays": 400000, "bins_u": 16, "bins_v": 8, "seed": 1},
  "normalize_masses": true
}
)";
  if (name == "gaussian-to-ring")
    return R"({
  "scenario": {"transport": "refract", "source": "collimated", "n1": 1.0, "n2": 1.5},
  "source": {"r_outer": 1.0, "intensity": {"kind": "gaussian", "value": 1.0, "sigma": 0.5}},
  "target": {"theta_min": 0.3490658503988659, "theta_max": 0.6108652381980153,
             "intensity": {"kind": "uniform", "value": 1.0}},
  "grid": {"resolution": 64},
  "verify": {"rays": 400000, "bins_u": 16, "bins_v": 8, "seed": 1},
  "normalize_masses": true
}
)";
  throw_error(ErrorCode::validation_error,
              "unknown demo '" + name + "' (available: uniform-disk, gaussian-to-ring)");
}

}  // namespace metalens
