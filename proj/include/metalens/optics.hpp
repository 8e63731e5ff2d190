#pragma once

#include <cmath>
#include <optional>

#include "metalens/error.hpp"
#include "metalens/vec.hpp"

namespace metalens {

/// Pair of refractive indices across the interface. Reflection is the special
/// case n1 == n2: the outgoing ray stays in the incidence medium.
struct MediumPair {
  double n1 = 1.0;
  double n2 = 1.0;
};

/// Outgoing unit direction together with the multiplier lambda of the surface
/// normal in the momentum balance n1*x - n2*m = lambda*nu + grad_psi.
struct LawResult {
  Vec3 m;
  double lambda = 0.0;
};

namespace detail {

inline void check_law_inputs(Vec3 x, Vec3 nu) {
  if (!is_unit(x)) throw_error(ErrorCode::not_unit, "incident direction is not a unit vector");
  if (!is_unit(nu)) throw_error(ErrorCode::not_unit, "surface normal is not a unit vector");
}

}  // namespace detail

/// Refraction with a phase gradient: solves n1*x - n2*m = lambda*nu + grad_psi
/// for the unit direction m on the transmission side (m . nu >= 0).
/// Returns nullopt when the discriminant is negative (evanescent input).
inline std::optional<LawResult> try_refract(Vec3 x, Vec3 nu, TangentialGradient grad_psi,
                                            MediumPair media) {
  const Vec3 w = media.n1 * x - grad_psi.as_vec3();
  const double wn = dot(w, nu);
  const double disc = media.n2 * media.n2 - norm2(w) + wn * wn;
  if (disc < 0.0) return std::nullopt;
  const double lambda = wn - std::sqrt(disc);
  return LawResult{(w - lambda * nu) / media.n2, lambda};
}

inline LawResult refract(Vec3 x, Vec3 nu, TangentialGradient grad_psi, MediumPair media) {
  detail::check_law_inputs(x, nu);
  auto r = try_refract(x, nu, grad_psi, media);
  if (!r) throw_error(ErrorCode::evanescent_ray, "no transmitted direction exists");
  return *r;
}

/// Reflection with a phase gradient: n1*(x - m) = lambda*nu + grad_psi with the
/// plus branch of the square root, so the outgoing ray stays on the incidence
/// side (m . nu <= 0).
inline std::optional<LawResult> try_reflect(Vec3 x, Vec3 nu, TangentialGradient grad_psi,
                                            double n1) {
  const Vec3 w = n1 * x - grad_psi.as_vec3();
  const double wn = dot(w, nu);
  const double disc = n1 * n1 - norm2(w) + wn * wn;
  if (disc < 0.0) return std::nullopt;
  const double lambda = wn + std::sqrt(disc);
  return LawResult{(w - lambda * nu) / n1, lambda};
}

inline LawResult reflect(Vec3 x, Vec3 nu, TangentialGradient grad_psi, double n1) {
  detail::check_law_inputs(x, nu);
  auto r = try_reflect(x, nu, grad_psi, n1);
  if (!r) throw_error(ErrorCode::evanescent_ray, "no reflected direction exists");
  return *r;
}

/// Residue n1*x - n2*m - grad_psi of the momentum balance; for valid outputs it
/// is parallel to the surface normal.
inline Vec3 law_residue(Vec3 x, Vec3 m, TangentialGradient grad_psi, MediumPair media) {
  return media.n1 * x - media.n2 * m - grad_psi.as_vec3();
}

}  // namespace metalens
