#pragma once

#include <cmath>

#include "metalens/grid.hpp"
#include "metalens/vec.hpp"

namespace metalens {

struct Mat2 {
  double m00 = 0.0, m01 = 0.0, m10 = 0.0, m11 = 0.0;
  double det() const { return m00 * m11 - m01 * m10; }
};

inline Mat2 operator-(Mat2 a, Mat2 b) {
  return {a.m00 - b.m00, a.m01 - b.m01, a.m10 - b.m10, a.m11 - b.m11};
}
inline Mat2 operator*(double s, Mat2 m) { return {s * m.m00, s * m.m01, s * m.m10, s * m.m11}; }

/// Product H * B of a symmetric matrix with a general one.
inline Mat2 mul(Sym2 h, Mat2 b) {
  return {h.xx * b.m00 + h.xy * b.m10, h.xx * b.m01 + h.xy * b.m11,
          h.xy * b.m00 + h.yy * b.m10, h.xy * b.m01 + h.yy * b.m11};
}

inline Mat2 mul(Mat2 a, Mat2 b) {
  return {a.m00 * b.m00 + a.m01 * b.m10, a.m00 * b.m01 + a.m01 * b.m11,
          a.m10 * b.m00 + a.m11 * b.m10, a.m10 * b.m01 + a.m11 * b.m11};
}

inline Mat2 inverse(Mat2 m) {
  const double d = m.det();
  return {m.m11 / d, -m.m01 / d, -m.m10 / d, m.m00 / d};
}

/// Unit sphere point at azimuth u, polar angle v from +e3.
inline Vec3 sphere_point(double u, double v) {
  return {std::sin(v) * std::cos(u), std::sin(v) * std::sin(u), std::cos(v)};
}

/// Strike point of the ray with direction s(u,v) on the plane z=1,
/// r(u,v) = s(u,v)/cos(v); third component is exactly 1.
inline Vec3 plane_point(double u, double v) {
  const double t = std::tan(v);
  return {std::cos(u) * t, std::sin(u) * t, 1.0};
}

/// Derivative matrix of the incident-field tangential part with respect to
/// (u, v), expressed in rectangular coordinates of the strike point. Requires
/// (x, y) != 0 (the polar chart is singular on the axis).
inline Mat2 frame_A(double x, double y) {
  const double rho = std::hypot(x, y);
  const double d = std::sqrt(x * x + y * y + 1.0);
  return {-y / d, x / (rho * d), x / d, y / (rho * d)};
}

/// Derivative matrix of the strike point (x, y) with respect to (u, v).
inline Mat2 frame_B(double x, double y) {
  const double rho = std::hypot(x, y);
  const double q = (1.0 + x * x + y * y) / rho;
  return {-y, x * q, x, y * q};
}

inline double frame_b(double x, double y) {
  const double rr = x * x + y * y;
  return rr * std::sqrt(rr + 1.0);
}

inline double frame_c(double x, double y) {
  const double rr = x * x + y * y;
  return rr * (rr + 1.0) * std::sqrt(rr + 1.0);
}

/// |s_u x s_v| = sin(v) = sqrt(x^2+y^2)/sqrt(x^2+y^2+1).
inline double sin_polar(double x, double y) {
  return std::hypot(x, y) / std::sqrt(x * x + y * y + 1.0);
}

/// Hessian of the source-to-plane distance sqrt(1+x^2+y^2); equals A*B^{-1}.
inline Sym2 hess_distance(double x, double y) {
  const double d = std::sqrt(1.0 + x * x + y * y);
  const double d3 = d * d * d;
  return {(1.0 + y * y) / d3, -x * y / d3, (1.0 + x * x) / d3};
}

}  // namespace metalens
