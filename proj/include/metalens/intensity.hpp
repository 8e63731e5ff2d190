#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "metalens/error.hpp"
#include "metalens/grid.hpp"

namespace metalens {

enum class ProfileKind { uniform, gaussian, sampled };

/// Emission or illumination density. Radial kinds are profiles of a single
/// radial coordinate (planar radius for collimated sources, polar angle for
/// point sources and targets). Sampled kinds carry a grid of values indexed
/// by the planar footprint (source) or the projected cap coordinate (target).
struct Intensity {
  ProfileKind kind = ProfileKind::uniform;
  double value = 1.0;
  double sigma = 1.0;
  ScalarField samples;

  bool is_radial() const { return kind != ProfileKind::sampled; }

  double profile(double rho) const {
    switch (kind) {
      case ProfileKind::uniform:
        return value;
      case ProfileKind::gaussian:
        return value * std::exp(-rho * rho / (2.0 * sigma * sigma));
      case ProfileKind::sampled:
        throw_error(ErrorCode::validation_error, "sampled intensity has no radial profile");
    }
    return 0.0;
  }

  double sample_at(Vec2 p) const {
    if (!samples.grid.contains(p)) return 0.0;
    return std::max(0.0, bilinear(samples, p));
  }
};

/// Composite Simpson rule, n subintervals (rounded up to even).
inline double simpson(const std::function<double(double)>& f, double a, double b, int n) {
  if (n % 2) ++n;
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int k = 1; k < n; ++k) s += f(a + k * h) * (k % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

/// Mass of a radial intensity over the planar annulus r0 <= |x| <= r1,
/// closed form where one exists.
inline double planar_mass(const Intensity& in, double r0, double r1) {
  constexpr double two_pi = 6.283185307179586476925286766559;
  switch (in.kind) {
    case ProfileKind::uniform:
      return in.value * 0.5 * two_pi * (r1 * r1 - r0 * r0);
    case ProfileKind::gaussian: {
      const double s2 = in.sigma * in.sigma;
      return in.value * two_pi * s2 *
             (std::exp(-r0 * r0 / (2.0 * s2)) - std::exp(-r1 * r1 / (2.0 * s2)));
    }
    case ProfileKind::sampled:
      throw_error(ErrorCode::validation_error, "planar_mass needs a radial intensity");
  }
  return 0.0;
}

/// Mass of a radial intensity over the solid-angle cone th0 <= theta <= th1.
inline double cone_mass(const Intensity& in, double th0, double th1) {
  constexpr double two_pi = 6.283185307179586476925286766559;
  switch (in.kind) {
    case ProfileKind::uniform:
      return in.value * two_pi * (std::cos(th0) - std::cos(th1));
    case ProfileKind::gaussian:
      return two_pi *
             simpson([&](double t) { return in.profile(t) * std::sin(t); }, th0, th1, 100000);
    case ProfileKind::sampled:
      throw_error(ErrorCode::validation_error, "cone_mass needs a radial intensity");
  }
  return 0.0;
}

/// Midpoint quadrature of `weight(p) * field(p)` over an origin-centered
/// annulus, at a fixed fine resolution. Used for sampled intensities, where
/// this quadrature is the defined continuum mass.
inline double sampled_annulus_mass(const Intensity& in, double r0, double r1,
                                   const std::function<double(Vec2)>& weight) {
  const int n = 2048;
  const double h = 2.0 * r1 / n;
  double acc = 0.0;
  for (int j = 0; j < n; ++j) {
    const double y = -r1 + (j + 0.5) * h;
    double row = 0.0;
    for (int i = 0; i < n; ++i) {
      const double x = -r1 + (i + 0.5) * h;
      const double rr = x * x + y * y;
      if (rr > r1 * r1 || rr < r0 * r0) continue;
      const Vec2 p{x, y};
      row += in.sample_at(p) * weight(p);
    }
    acc += row;
  }
  return acc * h * h;
}

/// Tabulated inverse CDF of a 1-D density on [r0, r1].
struct RadialCdf {
  double r0 = 0.0;
  double r1 = 1.0;
  std::vector<double> cdf;

  static RadialCdf build(const std::function<double(double)>& density, double r0, double r1,
                         int n = 8192) {
    RadialCdf c;
    c.r0 = r0;
    c.r1 = r1;
    c.cdf.assign(n + 1, 0.0);
    const double h = (r1 - r0) / n;
    double prev = std::max(0.0, density(r0));
    for (int k = 1; k <= n; ++k) {
      const double cur = std::max(0.0, density(r0 + k * h));
      c.cdf[k] = c.cdf[k - 1] + 0.5 * (prev + cur) * h;
      prev = cur;
    }
    const double total = c.cdf[n];
    if (!(total > 0.0))
      throw_error(ErrorCode::degenerate_density, "radial density integrates to zero");
    for (double& v : c.cdf) v /= total;
    return c;
  }

  double sample(double u) const {
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    std::size_t k = it == cdf.begin() ? 0 : static_cast<std::size_t>(it - cdf.begin()) - 1;
    k = std::min(k, cdf.size() - 2);
    const double lo = cdf[k], hi = cdf[k + 1];
    const double t = hi > lo ? (u - lo) / (hi - lo) : 0.0;
    const double h = (r1 - r0) / static_cast<double>(cdf.size() - 1);
    return r0 + (static_cast<double>(k) + std::min(1.0, std::max(0.0, t))) * h;
  }
};

}  // namespace metalens
