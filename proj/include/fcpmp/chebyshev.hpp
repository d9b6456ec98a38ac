#pragma once

#include <array>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fcpmp/geometry.hpp"

namespace fcpmp::cheb {

// Rectangle over which raw coordinates are affinely mapped onto [-1,1] per axis.
struct FitDomain {
  double x_lo, x_hi, y_lo, y_hi;

  bool contains(double x, double y) const {
    return x >= x_lo && x <= x_hi && y >= y_lo && y <= y_hi;
  }
  // Affine map into the canonical interval.
  double map_x(double x) const { return (2.0 * x - (x_hi + x_lo)) / (x_hi - x_lo); }
  double map_y(double y) const { return (2.0 * y - (y_hi + y_lo)) / (y_hi - y_lo); }
  double diagonal() const { return std::hypot(x_hi - x_lo, y_hi - y_lo); }
};

// 3x3 coefficient matrix of the tensor-product basis T_n(x~)T_m(y~) together
// with the rectangle its canonical coordinates refer to.
struct ChebCoeffMatrix {
  std::array<std::array<double, 3>, 3> c{};
  FitDomain domain{-1.0, 1.0, -1.0, 1.0};
};

// First-kind Chebyshev polynomial T_n(u) by the recurrence
// T_{n+1} = 2u T_n - T_{n-1}, T_0 = 1, T_1 = u. Supports n <= 4.
double cheb_basis(int n, double u);

// Evaluates sum_{n,m<=2} c_nm T_n(x~) T_m(y~) at a raw point. Evaluation
// outside the domain is permitted; *extrapolated reports it when non-null.
double eval_surface(const ChebCoeffMatrix& m, double x, double y,
                    bool* extrapolated = nullptr);

struct SurfaceSample {
  double x, y, f;
};

// Least-squares 3x3 coefficient fit over an arbitrary sample grid.
// Throws std::invalid_argument for fewer than 9 samples or a degenerate grid.
ChebCoeffMatrix fit_coeffs(std::span<const SurfaceSample> samples, const FitDomain& domain);

// Tensor grid of n x n Chebyshev-Gauss abscissae over the domain, sampled from f.
std::vector<SurfaceSample> chebyshev_gauss_grid(const FitDomain& domain, int n,
                                                const std::function<double(double, double)>& f);

// Convenience: fit of sqrt(x^2 + y^2) on an n x n Chebyshev-Gauss grid.
// Plain least squares; most accurate in the mid-domain band where range
// messages live.
ChebCoeffMatrix fit_distance_surface(const FitDomain& domain, int n = 32);

// Relative-error fit of sqrt(x^2 + y^2): Lawson-style iteratively reweighted
// least squares driving down max |fit - r| / r outside a disc of radius
// guard_frac * diagonal around the singularity. A plain least-squares fit
// concentrates its worst relative error just outside that disc (measured
// ~15.7% on corner-anchored squares); this variant lands under 10%.
ChebCoeffMatrix fit_distance_surface_relative(const FitDomain& domain, int n = 64,
                                              double guard_frac = 0.1);

struct DomainSearchResult {
  FitDomain domain;
  ChebCoeffMatrix fitted;        // fresh sqrt fit on `domain`
  double max_abs_deviation;      // per-entry max |fitted - target|
  bool reproduced;               // deviation <= 0.05
};

// Searches a candidate list of fit domains for the one whose sqrt fit is
// closest (max-abs per entry) to `target`. The target's own domain field is
// ignored; only its coefficients matter.
DomainSearchResult identify_domain(const ChebCoeffMatrix& target);
DomainSearchResult identify_domain(const ChebCoeffMatrix& target,
                                   std::span<const FitDomain> candidates);

// The published coefficient table used as the domain-search target. Its true
// fit domain is not known; the stored domain is a placeholder.
const ChebCoeffMatrix& reference_coeffs();

// JSON round-trip: {"domain": {...}, "c": [[..],[..],[..]], "deviation_from_paper": ...}.
std::string to_json(const ChebCoeffMatrix& m, double deviation_from_reference);
ChebCoeffMatrix from_json(const std::string& text);

}  // namespace fcpmp::cheb
