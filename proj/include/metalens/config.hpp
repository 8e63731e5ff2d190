#pragma once

// JSON design-configuration ingestion with strict schema checking.
//
// A config is a single JSON object with blocks:
//   scenario  {transport, source, n1, n2, plane_height}
//   source    {r_inner, r_outer, intensity}
//   target    {axis, theta_min, theta_max, intensity}
//   grid      {resolution}
//   solver    {epsilon_schedule, max_iterations, marginal_tolerance,
//              init, init_seed, target_spacing_factor}
//   verify    {rays, bins_u, bins_v, seed}
//   normalize_masses (boolean)
//
// Angles are radians. Unknown keys are rejected with their full path so a
// typo never silently falls back to a default. Syntax errors report line and
// column; semantic violations report the offending field path.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "metalens/error.hpp"
#include "metalens/gridfile.hpp"
#include "metalens/scenario.hpp"
#include "metalens/solver.hpp"

namespace metalens {

/// Ray-trace verification parameters.
struct VerifySpec {
  long long rays = 1000000;
  int bins_u = 24;
  int bins_v = 24;
  std::uint64_t seed = 1;
};

/// A parsed design configuration. The scenario is kept exactly as written
/// (plane_height may differ from 1); the pipeline normalizes it before
/// solving. Sampled intensities referenced by path are loaded by
/// load_config; parse_config records the paths.
struct DesignConfig {
  Scenario scenario;
  int cap_axis = 0;  // +1 for a cap around +z, -1 for one around -z
  std::string source_intensity_path;
  std::string target_intensity_path;
  int resolution = 64;
  SolverParams solver;
  VerifySpec verify;
  bool normalize_masses = false;
};

namespace detail {

using json = nlohmann::json;

[[noreturn]] inline void parse_fail(const std::string& path, const std::string& msg) {
  throw_error(ErrorCode::parse_error, "config: " + (path.empty() ? msg : path + ": " + msg));
}

[[noreturn]] inline void invalid(const std::string& path, const std::string& msg) {
  throw_error(ErrorCode::validation_error, "config: " + path + ": " + msg);
}

inline void require_keys(const json& obj, const std::string& path,
                         std::initializer_list<const char*> allowed) {
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known)
      parse_fail(path.empty() ? "top level" : path, "unknown key '" + item.key() + "'");
  }
}

inline const json* find(const json& obj, const char* key) {
  const auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

inline std::string join(const std::string& path, const char* key) {
  return path.empty() ? std::string(key) : path + "." + key;
}

inline double get_number(const json& obj, const std::string& path, const char* key,
                         double fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_number()) parse_fail(join(path, key), "expected a number");
  const double x = v->get<double>();
  if (!std::isfinite(x)) parse_fail(join(path, key), "expected a finite number");
  return x;
}

inline long long get_integer(const json& obj, const std::string& path, const char* key,
                             long long fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_number_integer()) parse_fail(join(path, key), "expected an integer");
  return v->get<long long>();
}

inline std::uint64_t get_seed(const json& obj, const std::string& path, const char* key,
                              std::uint64_t fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() &&
                                  v->get<long long>() < 0))
    parse_fail(join(path, key), "expected a non-negative integer");
  return v->get<std::uint64_t>();
}

inline std::string get_string(const json& obj, const std::string& path, const char* key,
                              const std::string& fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_string()) parse_fail(join(path, key), "expected a string");
  return v->get<std::string>();
}

inline bool get_bool(const json& obj, const std::string& path, const char* key, bool fallback) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_boolean()) parse_fail(join(path, key), "expected true or false");
  return v->get<bool>();
}

/// Parses one intensity block. Returns the file path for kind "grid" through
/// `grid_path`; the samples themselves are loaded later.
inline Intensity parse_intensity(const json& obj, const std::string& path,
                                 std::string& grid_path) {
  if (!obj.is_object()) parse_fail(path, "expected an object");
  require_keys(obj, path, {"kind", "value", "sigma", "path"});
  Intensity out;
  const std::string kind = get_string(obj, path, "kind", "uniform");
  if (kind == "uniform") {
    out.kind = ProfileKind::uniform;
    if (find(obj, "sigma")) parse_fail(join(path, "sigma"), "only gaussian profiles take sigma");
    if (find(obj, "path")) parse_fail(join(path, "path"), "only grid profiles take a path");
  } else if (kind == "gaussian") {
    out.kind = ProfileKind::gaussian;
    if (find(obj, "path")) parse_fail(join(path, "path"), "only grid profiles take a path");
    if (!find(obj, "sigma")) parse_fail(join(path, "sigma"), "gaussian profiles require sigma");
  } else if (kind == "grid") {
    out.kind = ProfileKind::sampled;
    if (find(obj, "value")) parse_fail(join(path, "value"), "grid profiles take no value");
    if (find(obj, "sigma")) parse_fail(join(path, "sigma"), "grid profiles take no sigma");
    grid_path = get_string(obj, path, "path", "");
    if (grid_path.empty()) parse_fail(join(path, "path"), "grid profiles require a file path");
  } else {
    invalid(join(path, "kind"), "unknown intensity kind '" + kind +
                                    "' (expected uniform, gaussian, or grid)");
  }
  out.value = get_number(obj, path, "value", 1.0);
  out.sigma = get_number(obj, path, "sigma", 1.0);
  if (out.kind != ProfileKind::sampled) {
    if (!(out.value > 0.0)) invalid(join(path, "value"), "peak value must be > 0");
    if (!(out.sigma > 0.0)) invalid(join(path, "sigma"), "sigma must be > 0");
  }
  return out;
}

}  // namespace detail

/// Maps a scenario whose emission plane sits at height a to the equivalent
/// one at height 1: lengths shrink by a, planar power densities scale by a^2
/// (directional profiles are frame-independent), and the solved phase maps
/// back through psi_a(x, y) = a * psi(x/a, y/a).
inline Scenario normalized_scenario(const Scenario& sc) {
  const double a = sc.plane_height;
  if (a == 1.0) return sc;
  Scenario out = sc;
  out.plane_height = 1.0;
  out.source.r_inner /= a;
  out.source.r_outer /= a;
  Intensity& in = out.source.intensity;
  if (sc.source.kind == SourceKind::collimated) {
    switch (in.kind) {
      case ProfileKind::uniform:
        in.value *= a * a;
        break;
      case ProfileKind::gaussian:
        in.value *= a * a;
        in.sigma /= a;
        break;
      case ProfileKind::sampled:
        in.samples.grid.x0 /= a;
        in.samples.grid.y0 /= a;
        in.samples.grid.hx /= a;
        in.samples.grid.hy /= a;
        for (double& v : in.samples.v) v *= a * a;
        break;
    }
  } else if (in.kind == ProfileKind::sampled) {
    // Point-source samples are a directional intensity indexed by the
    // footprint coordinate; only the footprint rescales.
    in.samples.grid.x0 /= a;
    in.samples.grid.y0 /= a;
    in.samples.grid.hx /= a;
    in.samples.grid.hy /= a;
  }
  return out;
}

/// Parses and validates a configuration document. Sampled intensities are
/// recorded by path but not loaded; use load_config for that.
inline DesignConfig parse_config(const std::string& text) {
  using detail::json;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    // Convert the byte offset to a line/column position.
    std::size_t byte = e.byte > 0 ? e.byte - 1 : 0;
    if (byte > text.size()) byte = text.size();
    std::size_t line = 1, last_nl = 0;
    for (std::size_t k = 0; k < byte; ++k)
      if (text[k] == '\n') {
        ++line;
        last_nl = k + 1;
      }
    const std::size_t column = byte - last_nl + 1;
    throw_error(ErrorCode::parse_error,
                "config: JSON syntax error at line " + std::to_string(line) + ", column " +
                    std::to_string(column));
  }
  if (!doc.is_object()) detail::parse_fail("", "top level must be a JSON object");
  detail::require_keys(doc, "",
                       {"scenario", "source", "target", "grid", "solver", "verify",
                        "normalize_masses"});

  DesignConfig cfg;

  const detail::json* sc_block = detail::find(doc, "scenario");
  if (!sc_block) detail::parse_fail("scenario", "required block is missing");
  if (!sc_block->is_object()) detail::parse_fail("scenario", "expected an object");
  detail::require_keys(*sc_block, "scenario",
                       {"transport", "source", "n1", "n2", "plane_height"});
  const std::string transport = detail::get_string(*sc_block, "scenario", "transport", "");
  if (transport == "reflect") cfg.scenario.transport = Transport::reflect;
  else if (transport == "refract") cfg.scenario.transport = Transport::refract;
  else if (transport.empty()) detail::parse_fail("scenario.transport", "required field");
  else detail::invalid("scenario.transport", "expected \"reflect\" or \"refract\"");
  const std::string kind = detail::get_string(*sc_block, "scenario", "source", "");
  if (kind == "collimated") cfg.scenario.source.kind = SourceKind::collimated;
  else if (kind == "point") cfg.scenario.source.kind = SourceKind::point;
  else if (kind.empty()) detail::parse_fail("scenario.source", "required field");
  else detail::invalid("scenario.source", "expected \"collimated\" or \"point\"");
  cfg.scenario.media.n1 = detail::get_number(*sc_block, "scenario", "n1", 1.0);
  cfg.scenario.media.n2 = detail::get_number(*sc_block, "scenario", "n2", 1.0);
  cfg.scenario.plane_height = detail::get_number(*sc_block, "scenario", "plane_height", 1.0);
  if (!(cfg.scenario.media.n1 > 0.0) || !(cfg.scenario.media.n2 > 0.0))
    detail::invalid("scenario", "refractive indices must be > 0");
  if (cfg.scenario.transport == Transport::reflect &&
      cfg.scenario.media.n1 != cfg.scenario.media.n2)
    detail::invalid("scenario",
                    "reflection requires equal refractive indices (n1 = n2)");
  if (!(cfg.scenario.plane_height > 0.0))
    detail::invalid("scenario.plane_height", "plane height must be > 0");

  if (const detail::json* src = detail::find(doc, "source")) {
    if (!src->is_object()) detail::parse_fail("source", "expected an object");
    detail::require_keys(*src, "source", {"r_inner", "r_outer", "intensity"});
    cfg.scenario.source.r_inner = detail::get_number(*src, "source", "r_inner", 0.0);
    cfg.scenario.source.r_outer = detail::get_number(*src, "source", "r_outer", 1.0);
    if (const detail::json* in = detail::find(*src, "intensity"))
      cfg.scenario.source.intensity =
          detail::parse_intensity(*in, "source.intensity", cfg.source_intensity_path);
  }
  if (!(cfg.scenario.source.r_inner >= 0.0) ||
      !(cfg.scenario.source.r_outer > cfg.scenario.source.r_inner))
    detail::invalid("source", "radii must satisfy 0 <= r_inner < r_outer");

  const detail::json* tgt = detail::find(doc, "target");
  if (!tgt) detail::parse_fail("target", "required block is missing");
  if (!tgt->is_object()) detail::parse_fail("target", "expected an object");
  detail::require_keys(*tgt, "target", {"axis", "theta_min", "theta_max", "intensity"});
  cfg.scenario.target.theta_min = detail::get_number(*tgt, "target", "theta_min", 0.0);
  const detail::json* tmax = detail::find(*tgt, "theta_max");
  if (!tmax) detail::parse_fail("target.theta_max", "required field");
  cfg.scenario.target.theta_max = detail::get_number(*tgt, "target", "theta_max", 0.0);
  if (!(cfg.scenario.target.theta_min >= 0.0) ||
      !(cfg.scenario.target.theta_max > cfg.scenario.target.theta_min))
    detail::invalid("target", "angles must satisfy 0 <= theta_min < theta_max (radians)");
  if (cfg.scenario.target.theta_max >= 1.5707963267948966)
    detail::invalid("target.theta_max", "target cap reaches equator");
  if (cfg.scenario.target.theta_max > kThetaCapMax)
    detail::invalid("target.theta_max", "theta_max exceeds the 80 degree cap limit");
  const int default_axis = cfg.scenario.transport == Transport::reflect ? -1 : +1;
  const std::string axis = detail::get_string(*tgt, "target", "axis",
                                              default_axis > 0 ? "+z" : "-z");
  if (axis == "+z") cfg.cap_axis = +1;
  else if (axis == "-z") cfg.cap_axis = -1;
  else detail::invalid("target.axis", "expected \"+z\" or \"-z\"");
  if (cfg.cap_axis != default_axis)
    detail::invalid("target.axis",
                    cfg.scenario.transport == Transport::reflect
                        ? "reflection sends light back below the plane (axis must be \"-z\")"
                        : "refraction sends light above the plane (axis must be \"+z\")");
  if (const detail::json* in = detail::find(*tgt, "intensity"))
    cfg.scenario.target.intensity =
        detail::parse_intensity(*in, "target.intensity", cfg.target_intensity_path);

  if (const detail::json* grid = detail::find(doc, "grid")) {
    if (!grid->is_object()) detail::parse_fail("grid", "expected an object");
    detail::require_keys(*grid, "grid", {"resolution"});
    const long long res = detail::get_integer(*grid, "grid", "resolution", 64);
    if (res < 8 || res > 2048)
      detail::invalid("grid.resolution", "must be an integer in [8, 2048]");
    cfg.resolution = static_cast<int>(res);
  }

  if (const detail::json* sv = detail::find(doc, "solver")) {
    if (!sv->is_object()) detail::parse_fail("solver", "expected an object");
    detail::require_keys(*sv, "solver",
                         {"epsilon_schedule", "max_iterations", "marginal_tolerance", "init",
                          "init_seed", "target_spacing_factor"});
    if (const detail::json* sched = detail::find(*sv, "epsilon_schedule")) {
      if (!sched->is_array()) detail::parse_fail("solver.epsilon_schedule", "expected an array");
      cfg.solver.epsilon_schedule.clear();
      for (const auto& e : *sched) {
        if (!e.is_number())
          detail::parse_fail("solver.epsilon_schedule", "expected an array of numbers");
        cfg.solver.epsilon_schedule.push_back(e.get<double>());
      }
      for (std::size_t k = 0; k < cfg.solver.epsilon_schedule.size(); ++k) {
        const double e = cfg.solver.epsilon_schedule[k];
        if (!(e > 0.0) || !std::isfinite(e))
          detail::invalid("solver.epsilon_schedule", "entries must be positive and finite");
        if (k > 0 && !(e < cfg.solver.epsilon_schedule[k - 1]))
          detail::invalid("solver.epsilon_schedule", "entries must be strictly decreasing");
      }
      if (cfg.solver.epsilon_schedule.empty())
        detail::invalid("solver.epsilon_schedule", "schedule must not be empty");
    }
    const long long mi = detail::get_integer(*sv, "solver", "max_iterations",
                                             cfg.solver.max_iterations);
    if (mi < 1 || mi > 1000000) detail::invalid("solver.max_iterations", "must be in [1, 1e6]");
    cfg.solver.max_iterations = static_cast<int>(mi);
    cfg.solver.marginal_tolerance = detail::get_number(*sv, "solver", "marginal_tolerance",
                                                       cfg.solver.marginal_tolerance);
    if (!(cfg.solver.marginal_tolerance > 0.0))
      detail::invalid("solver.marginal_tolerance", "must be > 0");
    const std::string init = detail::get_string(*sv, "solver", "init", "zero");
    if (init == "zero") cfg.solver.init = SolverParams::Init::zero;
    else if (init == "random") cfg.solver.init = SolverParams::Init::random;
    else detail::invalid("solver.init", "expected \"zero\" or \"random\"");
    cfg.solver.init_seed = detail::get_seed(*sv, "solver", "init_seed", cfg.solver.init_seed);
    cfg.solver.target_spacing_factor = detail::get_number(
        *sv, "solver", "target_spacing_factor", cfg.solver.target_spacing_factor);
    if (!(cfg.solver.target_spacing_factor > 0.05) ||
        !(cfg.solver.target_spacing_factor <= 2.0))
      detail::invalid("solver.target_spacing_factor", "must be in (0.05, 2]");
  }

  if (const detail::json* vf = detail::find(doc, "verify")) {
    if (!vf->is_object()) detail::parse_fail("verify", "expected an object");
    detail::require_keys(*vf, "verify", {"rays", "bins_u", "bins_v", "seed"});
    cfg.verify.rays = detail::get_integer(*vf, "verify", "rays", cfg.verify.rays);
    if (cfg.verify.rays < 1 || cfg.verify.rays > 2000000000LL)
      detail::invalid("verify.rays", "must be in [1, 2e9]");
    const long long bu = detail::get_integer(*vf, "verify", "bins_u", cfg.verify.bins_u);
    const long long bv = detail::get_integer(*vf, "verify", "bins_v", cfg.verify.bins_v);
    if (bu < 1 || bu > 4096 || bv < 1 || bv > 4096)
      detail::invalid("verify", "bins_u and bins_v must be in [1, 4096]");
    cfg.verify.bins_u = static_cast<int>(bu);
    cfg.verify.bins_v = static_cast<int>(bv);
    cfg.verify.seed = detail::get_seed(*vf, "verify", "seed", cfg.verify.seed);
  }

  cfg.normalize_masses = detail::get_bool(doc, "", "normalize_masses", false);

  // When no sampled intensities are pending, the normalized scenario must
  // already satisfy every scenario invariant.
  if (cfg.source_intensity_path.empty() && cfg.target_intensity_path.empty())
    validate(normalized_scenario(cfg.scenario));
  return cfg;
}

/// Reads a config file, resolves sampled-intensity grids relative to the
/// config's directory, and validates the result.
inline DesignConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in)
    throw_error(ErrorCode::parse_error,
                "config: cannot open '" + file.string() + "' for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  DesignConfig cfg = parse_config(buf.str());
  const std::filesystem::path base = file.has_parent_path()
                                         ? file.parent_path()
                                         : std::filesystem::path(".");
  if (!cfg.source_intensity_path.empty())
    cfg.scenario.source.intensity.samples =
        read_grid(base / cfg.source_intensity_path).field;
  if (!cfg.target_intensity_path.empty())
    cfg.scenario.target.intensity.samples =
        read_grid(base / cfg.target_intensity_path).field;
  validate(normalized_scenario(cfg.scenario));
  return cfg;
}

}  // namespace metalens
