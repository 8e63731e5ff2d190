// Command-line workflow for metasurface phase design and verification.
//
//   metalens solve    -c design.json -o out/          solve and export
//   metalens verify   -c design.json --phase p.grid -o out/
//   metalens residual -c design.json --phase p.grid   recertify, print JSON
//   metalens demo     <name> [-o dir]                 built-in presets
//
// Exit codes: 0 success, 2 invalid input (syntax, schema, or format),
// 3 mass imbalance, 4 solver did not converge, 5 verification failure,
// 1 unexpected error.

#include <cstdio>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "metalens/pipeline.hpp"

namespace {

using namespace metalens;
namespace fs = std::filesystem;

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::parse_error:
    case ErrorCode::validation_error:
    case ErrorCode::format_error:
    case ErrorCode::domain_touches_equator:
    case ErrorCode::degenerate_density:
      return 2;
    case ErrorCode::mass_imbalance:
      return 3;
    case ErrorCode::no_convergence:
      return 4;
    case ErrorCode::footprint_exceeded:
    case ErrorCode::gradient_out_of_range:
      return 5;
    default:
      return 1;
  }
}

void print_solve_summary(const SolveOutcome& out, const fs::path& dir) {
  const auto& rep = out.report;
  std::printf("solve: %s after %d iterations over %zu stages (marginal error %.3e)\n",
              out.converged ? "converged" : "did not converge",
              rep["iterations"].get<int>(), rep["stages"].size(),
              rep["marginal_error"].get<double>());
  std::printf("  mass: source %.6g, target scale %.6g%s\n",
              rep["mass"]["source"].get<double>(), rep["mass"]["target_scale"].get<double>(),
              rep["mass"]["normalized"].get<bool>() ? " (normalized)" : "");
  std::printf("  residual: median %.4g, p95 %.4g, max %.4g over %d interior nodes\n",
              rep["residual"]["median"].get<double>(), rep["residual"]["p95"].get<double>(),
              rep["residual"]["max"].get<double>(),
              rep["residual"]["interior_nodes"].get<int>());
  if (rep["residual"]["kink_nodes"].get<int>() > 0)
    std::printf("  note: annular target; %d gradient-jump nodes excluded from the residual\n",
                rep["residual"]["kink_nodes"].get<int>());
  if (!rep["domain"]["target_convex"].get<bool>())
    std::printf("  note: target domain is not convex (annulus)\n");
  if (!rep["domain"]["source_convex"].get<bool>())
    std::printf("  note: source domain is not convex (annulus)\n");
  std::printf("  gradient radius %.4g within target disk [%.4g, %.4g]\n",
              rep["gradient"]["max_radius"].get<double>(),
              rep["gradient"]["target_r_min"].get<double>(),
              rep["gradient"]["target_r_max"].get<double>());
  std::printf("  wrote phase.grid potential.grid residual.grid report.json -> %s\n",
              dir.string().c_str());
}

void print_verify_summary(const VerifyOutcome& out, const fs::path& dir) {
  const auto& rep = out.report;
  std::printf("verify: %lld rays into %dx%d bins (seed %llu)\n",
              rep["rays"].get<long long>(), rep["bins_u"].get<int>(), rep["bins_v"].get<int>(),
              static_cast<unsigned long long>(rep["seed"].get<std::uint64_t>()));
  std::printf("  density distance: L1 %.4g, Linf %.4g over %d well-sampled bins\n",
              out.distance.l1, out.distance.linf, out.distance.linf_bins);
  std::printf("  evanescent: %.5g%% of rays; spilled bins hold %.4g of power\n",
              100.0 * out.evanescent_fraction, rep["spill"]["power"].get<double>());
  double worst_quadrant = 0.0;
  for (const char* q : {"quadrant_pp", "quadrant_mp", "quadrant_mm", "quadrant_pm"})
    worst_quadrant = std::max(worst_quadrant, rep["energy"][q]["rel_err"].get<double>());
  std::printf("  energy balance: full-domain rel err %.3e, worst quadrant %.3e\n",
              rep["energy"]["full"]["rel_err"].get<double>(), worst_quadrant);
  std::printf("  wrote verify_report.json histogram.tsv -> %s\n", dir.string().c_str());
  std::printf("%s\n", out.passed ? "PASS" : "FAIL: evanescent fraction exceeds 0.1%");
}

int do_solve(const fs::path& config_path, const fs::path& out_dir) {
  const DesignConfig cfg = load_config(config_path);
  const SolveOutcome out = run_solve(cfg, out_dir);
  print_solve_summary(out, out_dir);
  return out.converged ? 0 : 4;
}

int do_verify(const fs::path& config_path, const fs::path& phase, const fs::path& out_dir) {
  const DesignConfig cfg = load_config(config_path);
  const VerifyOutcome out = run_verify(cfg, phase, out_dir);
  print_verify_summary(out, out_dir);
  return out.passed ? 0 : 5;
}

int do_residual(const fs::path& config_path, const fs::path& phase) {
  const DesignConfig cfg = load_config(config_path);
  const nlohmann::json rep = run_residual(cfg, phase);
  std::printf("%s\n", rep.dump(2).c_str());
  return 0;
}

int do_demo(const std::string& name, fs::path out_dir) {
  if (out_dir.empty()) out_dir = fs::path("demo-" + name);
  const std::string text = demo_config(name);  // throws for unknown names
  fs::create_directories(out_dir);
  detail::write_text(out_dir / "config.json", text);
  std::printf("demo '%s': wrote %s\n", name.c_str(), (out_dir / "config.json").string().c_str());
  const DesignConfig cfg = parse_config(text);
  const SolveOutcome solved = run_solve(cfg, out_dir);
  print_solve_summary(solved, out_dir);
  if (!solved.converged) return 4;
  const VerifyOutcome verified = run_verify(cfg, out_dir / "phase.grid", out_dir);
  print_verify_summary(verified, out_dir);
  return verified.passed ? 0 : 5;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "metalens: phase-discontinuity design for planar metasurfaces via optimal "
      "transport, with ray-traced verification"};
  app.require_subcommand(1);

  std::string config_path, phase_path, out_dir, demo_name;

  CLI::App* solve_cmd = app.add_subcommand("solve", "solve a design and export artifacts");
  solve_cmd->add_option("-c,--config", config_path, "design configuration (JSON)")
      ->required();
  solve_cmd->add_option("-o,--output", out_dir, "output directory")->required();

  CLI::App* verify_cmd =
      app.add_subcommand("verify", "trace rays through a phase grid and compare far fields");
  verify_cmd->add_option("-c,--config", config_path, "design configuration (JSON)")
      ->required();
  verify_cmd->add_option("--phase", phase_path, "phase grid produced by solve")->required();
  verify_cmd->add_option("-o,--output", out_dir, "output directory")->required();

  CLI::App* residual_cmd =
      app.add_subcommand("residual", "recertify a phase grid against its design equation");
  residual_cmd->add_option("-c,--config", config_path, "design configuration (JSON)")
      ->required();
  residual_cmd->add_option("--phase", phase_path, "phase grid produced by solve")->required();

  CLI::App* demo_cmd = app.add_subcommand("demo", "run a built-in demonstration design");
  demo_cmd->add_option("name", demo_name, "one of: uniform-disk, gaussian-to-ring")
      ->required();
  demo_cmd->add_option("-o,--output", out_dir, "output directory (default demo-<name>)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (solve_cmd->parsed()) return do_solve(config_path, out_dir);
    if (verify_cmd->parsed()) return do_verify(config_path, phase_path, out_dir);
    if (residual_cmd->parsed()) return do_residual(config_path, phase_path);
    if (demo_cmd->parsed()) return do_demo(demo_name, out_dir);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
  return 1;
}
