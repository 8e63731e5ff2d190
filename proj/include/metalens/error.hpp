#pragma once

#include <stdexcept>
#include <string>

namespace metalens {

enum class ErrorCode {
  not_unit,
  evanescent_ray,
  mass_imbalance,
  domain_touches_equator,
  no_convergence,
  degenerate_density,
  gradient_out_of_range,
  footprint_exceeded,
  parse_error,
  validation_error,
  format_error,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::not_unit: return "NotUnit";
    case ErrorCode::evanescent_ray: return "EvanescentRay";
    case ErrorCode::mass_imbalance: return "MassImbalance";
    case ErrorCode::domain_touches_equator: return "DomainTouchesEquator";
    case ErrorCode::no_convergence: return "NoConvergence";
    case ErrorCode::degenerate_density: return "DegenerateDensity";
    case ErrorCode::gradient_out_of_range: return "GradientOutOfRange";
    case ErrorCode::footprint_exceeded: return "FootprintExceeded";
    case ErrorCode::parse_error: return "ParseError";
    case ErrorCode::validation_error: return "ValidationError";
    case ErrorCode::format_error: return "FormatError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void throw_error(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace metalens
