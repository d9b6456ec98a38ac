#include "fcpmp/chebyshev.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "json.hpp"

namespace fcpmp::cheb {

double cheb_basis(int n, double u) {
  if (n < 0 || n > 4) throw std::invalid_argument("cheb_basis: order must be in [0,4]");
  if (n == 0) return 1.0;
  if (n == 1) return u;
  double tkm1 = 1.0, tk = u;
  for (int k = 1; k < n; ++k) {
    double tkp1 = 2.0 * u * tk - tkm1;
    tkm1 = tk;
    tk = tkp1;
  }
  return tk;
}

double eval_surface(const ChebCoeffMatrix& m, double x, double y, bool* extrapolated) {
  if (extrapolated) *extrapolated = !m.domain.contains(x, y);
  const double xt = m.domain.map_x(x);
  const double yt = m.domain.map_y(y);
  double tx[3] = {1.0, xt, 2.0 * xt * xt - 1.0};
  double ty[3] = {1.0, yt, 2.0 * yt * yt - 1.0};
  double s = 0.0;
  for (int n = 0; n < 3; ++n)
    for (int mm = 0; mm < 3; ++mm) s += m.c[n][mm] * tx[n] * ty[mm];
  return s;
}

namespace {

// Solves the 9x9 system G a = r in place by Gaussian elimination with partial
// pivoting. Returns false when the pivot collapses (degenerate sample grid).
bool solve9(std::array<std::array<double, 9>, 9>& g, std::array<double, 9>& r) {
  for (int col = 0; col < 9; ++col) {
    int piv = col;
    for (int row = col + 1; row < 9; ++row)
      if (std::abs(g[row][col]) > std::abs(g[piv][col])) piv = row;
    if (std::abs(g[piv][col]) < 1e-12) return false;
    std::swap(g[col], g[piv]);
    std::swap(r[col], r[piv]);
    for (int row = col + 1; row < 9; ++row) {
      double f = g[row][col] / g[col][col];
      if (f == 0.0) continue;
      for (int k = col; k < 9; ++k) g[row][k] -= f * g[col][k];
      r[row] -= f * r[col];
    }
  }
  for (int col = 8; col >= 0; --col) {
    double s = r[col];
    for (int k = col + 1; k < 9; ++k) s -= g[col][k] * r[k];
    r[col] = s / g[col][col];
  }
  return true;
}

}  // namespace

ChebCoeffMatrix fit_coeffs(std::span<const SurfaceSample> samples, const FitDomain& domain) {
  if (samples.size() < 9)
    throw std::invalid_argument("fit_coeffs: need at least 9 samples");
  if (!(domain.x_hi > domain.x_lo) || !(domain.y_hi > domain.y_lo))
    throw std::invalid_argument("fit_coeffs: empty domain");

  // Normal equations for the 9 tensor-basis functions, indexed 3n+m.
  std::array<std::array<double, 9>, 9> gram{};
  std::array<double, 9> rhs{};
  for (const auto& s : samples) {
    const double xt = domain.map_x(s.x);
    const double yt = domain.map_y(s.y);
    double tx[3] = {1.0, xt, 2.0 * xt * xt - 1.0};
    double ty[3] = {1.0, yt, 2.0 * yt * yt - 1.0};
    double phi[9];
    for (int n = 0; n < 3; ++n)
      for (int m = 0; m < 3; ++m) phi[3 * n + m] = tx[n] * ty[m];
    for (int i = 0; i < 9; ++i) {
      rhs[i] += phi[i] * s.f;
      for (int j = i; j < 9; ++j) gram[i][j] += phi[i] * phi[j];
    }
  }
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < i; ++j) gram[i][j] = gram[j][i];

  if (!solve9(gram, rhs))
    throw std::invalid_argument("fit_coeffs: degenerate sample grid");

  ChebCoeffMatrix out;
  out.domain = domain;
  for (int n = 0; n < 3; ++n)
    for (int m = 0; m < 3; ++m) out.c[n][m] = rhs[3 * n + m];
  return out;
}

std::vector<SurfaceSample> chebyshev_gauss_grid(const FitDomain& domain, int n,
                                                const std::function<double(double, double)>& f) {
  if (n < 3) throw std::invalid_argument("chebyshev_gauss_grid: need n >= 3");
  std::vector<double> xs(n), ys(n);
  for (int k = 0; k < n; ++k) {
    // Chebyshev-Gauss node in [-1,1], then mapped back to the raw rectangle.
    const double u = std::cos((2.0 * k + 1.0) * std::numbers::pi / (2.0 * n));
    xs[k] = 0.5 * (domain.x_hi + domain.x_lo) + 0.5 * (domain.x_hi - domain.x_lo) * u;
    ys[k] = 0.5 * (domain.y_hi + domain.y_lo) + 0.5 * (domain.y_hi - domain.y_lo) * u;
  }
  std::vector<SurfaceSample> out;
  out.reserve(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) out.push_back({xs[i], ys[j], f(xs[i], ys[j])});
  return out;
}

ChebCoeffMatrix fit_distance_surface(const FitDomain& domain, int n) {
  auto grid = chebyshev_gauss_grid(domain, n,
                                   [](double x, double y) { return std::hypot(x, y); });
  return fit_coeffs(grid, domain);
}

namespace {

ChebCoeffMatrix weighted_fit(std::span<const SurfaceSample> samples,
                             std::span<const double> w, const FitDomain& domain) {
  std::array<std::array<double, 9>, 9> gram{};
  std::array<double, 9> rhs{};
  for (size_t s = 0; s < samples.size(); ++s) {
    if (w[s] == 0.0) continue;
    const double xt = domain.map_x(samples[s].x);
    const double yt = domain.map_y(samples[s].y);
    double tx[3] = {1.0, xt, 2.0 * xt * xt - 1.0};
    double ty[3] = {1.0, yt, 2.0 * yt * yt - 1.0};
    double phi[9];
    for (int n = 0; n < 3; ++n)
      for (int m = 0; m < 3; ++m) phi[3 * n + m] = tx[n] * ty[m];
    const double w2 = w[s] * w[s];
    for (int i = 0; i < 9; ++i) {
      rhs[i] += w2 * phi[i] * samples[s].f;
      for (int j = i; j < 9; ++j) gram[i][j] += w2 * phi[i] * phi[j];
    }
  }
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < i; ++j) gram[i][j] = gram[j][i];
  if (!solve9(gram, rhs))
    throw std::invalid_argument("weighted_fit: degenerate sample grid");
  ChebCoeffMatrix out;
  out.domain = domain;
  for (int n = 0; n < 3; ++n)
    for (int m = 0; m < 3; ++m) out.c[n][m] = rhs[3 * n + m];
  return out;
}

}  // namespace

ChebCoeffMatrix fit_distance_surface_relative(const FitDomain& domain, int n,
                                              double guard_frac) {
  auto grid = chebyshev_gauss_grid(domain, n,
                                   [](double x, double y) { return std::hypot(x, y); });
  const double guard = guard_frac * domain.diagonal();
  std::vector<double> w(grid.size());
  for (size_t s = 0; s < grid.size(); ++s)
    w[s] = grid[s].f < guard ? 0.0 : 1.0 / std::max(grid[s].f, guard);

  ChebCoeffMatrix fit;
  for (int iter = 0; iter < 100; ++iter) {
    fit = weighted_fit(grid, w, domain);
    double wmax = 0.0;
    for (size_t s = 0; s < grid.size(); ++s) {
      if (w[s] == 0.0) continue;
      double rel = std::abs(eval_surface(fit, grid[s].x, grid[s].y) - grid[s].f) / grid[s].f;
      w[s] *= std::sqrt(std::max(rel, 1e-12));
      wmax = std::max(wmax, w[s]);
    }
    for (double& v : w) v /= wmax;
  }
  return fit;
}

namespace {

double max_abs_deviation(const ChebCoeffMatrix& a, const ChebCoeffMatrix& b) {
  double d = 0.0;
  for (int n = 0; n < 3; ++n)
    for (int m = 0; m < 3; ++m) d = std::max(d, std::abs(a.c[n][m] - b.c[n][m]));
  return d;
}

std::vector<FitDomain> default_candidates() {
  // Squares at assorted scales plus their mirrored negative-quadrant twins.
  // The published table has nonzero odd coefficients, which rules out any
  // domain symmetric about the origin (there sqrt, an even function, would
  // have exactly zero odd-order coefficients), but [-1,1]^2 stays in the list
  // as the documented baseline.
  std::vector<FitDomain> cands;
  cands.push_back({-1.0, 1.0, -1.0, 1.0});
  const double scales[] = {0.5,  1.0,  1.5,  2.0,  2.5,  3.0,  4.0,  5.0,
                           8.0,  10.0, 16.0, 20.0, 32.0, 40.0, 50.0, 64.0,
                           80.0, 100.0, 128.0, 160.0, 200.0};
  for (double s : scales) {
    cands.push_back({0.0, s, 0.0, s});
    cands.push_back({-s, 0.0, -s, 0.0});
  }
  return cands;
}

}  // namespace

DomainSearchResult identify_domain(const ChebCoeffMatrix& target,
                                   std::span<const FitDomain> candidates) {
  if (candidates.empty())
    throw std::invalid_argument("identify_domain: empty candidate list");
  DomainSearchResult best;
  best.max_abs_deviation = std::numeric_limits<double>::infinity();
  for (const auto& dom : candidates) {
    ChebCoeffMatrix fit = fit_distance_surface(dom);
    double dev = max_abs_deviation(fit, target);
    if (dev < best.max_abs_deviation) {
      best.domain = dom;
      best.fitted = fit;
      best.max_abs_deviation = dev;
    }
  }
  best.reproduced = best.max_abs_deviation <= 0.05;
  return best;
}

DomainSearchResult identify_domain(const ChebCoeffMatrix& target) {
  auto cands = default_candidates();
  return identify_domain(target, std::span<const FitDomain>(cands));
}

const ChebCoeffMatrix& reference_coeffs() {
  static const ChebCoeffMatrix ref = [] {
    ChebCoeffMatrix m;
    m.c = {{{1.12, -0.45, 0.20}, {-0.45, -0.14, 0.06}, {0.20, 0.06, -0.02}}};
    m.domain = {-1.0, 1.0, -1.0, 1.0};  // placeholder; true domain unpublished
    return m;
  }();
  return ref;
}

std::string to_json(const ChebCoeffMatrix& m, double deviation_from_reference) {
  nlohmann::ordered_json j;
  j["domain"] = {{"x_lo", m.domain.x_lo},
                 {"x_hi", m.domain.x_hi},
                 {"y_lo", m.domain.y_lo},
                 {"y_hi", m.domain.y_hi}};
  j["c"] = m.c;
  j["deviation_from_paper"] = deviation_from_reference;
  return j.dump(2);
}

ChebCoeffMatrix from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  ChebCoeffMatrix m;
  m.domain.x_lo = j.at("domain").at("x_lo").get<double>();
  m.domain.x_hi = j.at("domain").at("x_hi").get<double>();
  m.domain.y_lo = j.at("domain").at("y_lo").get<double>();
  m.domain.y_hi = j.at("domain").at("y_hi").get<double>();
  auto c = j.at("c");
  for (int n = 0; n < 3; ++n)
    for (int mm = 0; mm < 3; ++mm) m.c[n][mm] = c.at(n).at(mm).get<double>();
  return m;
}

}  // namespace fcpmp::cheb
