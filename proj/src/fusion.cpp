#include "fcpmp/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fcpmp::fuse {

QuadraticForm combine(const msg::MessageParams& temporal,
                      std::span<const msg::MessageParams> spatial) {
  QuadraticForm q{temporal.w1, temporal.w2, temporal.w3, temporal.w4, temporal.w5};
  for (const auto& m : spatial) {
    q.A += m.w1;
    q.B += m.w2;
    q.C += m.w3;
    q.D += m.w4;
    q.E += m.w5;
  }
  return q;
}

QuadraticForm combine(std::span<const msg::MessageParams> all) {
  QuadraticForm q;
  for (const auto& m : all) {
    q.A += m.w1;
    q.B += m.w2;
    q.C += m.w3;
    q.D += m.w4;
    q.E += m.w5;
  }
  return q;
}

namespace {

GaussianBelief exact_quadratic(const QuadraticForm& q) {
  GaussianBelief b;
  double j11 = 2.0 * q.A, j22 = 2.0 * q.B, j12 = -q.E;

  if (j12 == 0.0) {
    // Decoupled axes: clamp the diagonal directly so the E=0 case agrees
    // bitwise with the printed closed form.
    double c11 = std::clamp(j11, kPrecisionEigMin, kPrecisionEigMax);
    double c22 = std::clamp(j22, kPrecisionEigMin, kPrecisionEigMax);
    b.clamped = (c11 != j11) || (c22 != j22);
    b.mean = {q.C / c11, q.D / c22};
    b.cov_xx = 1.0 / c11;
    b.cov_yy = 1.0 / c22;
    b.cov_xy = 0.0;
    return b;
  }

  // Symmetric 2x2 eigen-decomposition of J.
  double half_tr = 0.5 * (j11 + j22);
  double half_diff = 0.5 * (j11 - j22);
  double disc = std::hypot(half_diff, j12);
  double l1 = half_tr + disc, l2 = half_tr - disc;
  double c1 = std::clamp(l1, kPrecisionEigMin, kPrecisionEigMax);
  double c2 = std::clamp(l2, kPrecisionEigMin, kPrecisionEigMax);
  b.clamped = (c1 != l1) || (c2 != l2);
  if (b.clamped) {
    // Eigenvector for l1: (j12, l1 - j11), normalized; rebuild J from the
    // clamped spectrum.
    double vx = j12, vy = l1 - j11;
    double n = std::hypot(vx, vy);
    if (n < 1e-300) {
      vx = 1.0;
      vy = 0.0;
    } else {
      vx /= n;
      vy /= n;
    }
    j11 = c1 * vx * vx + c2 * vy * vy;
    j22 = c1 * vy * vy + c2 * vx * vx;
    j12 = (c1 - c2) * vx * vy;
  }

  double det = j11 * j22 - j12 * j12;
  b.cov_xx = j22 / det;
  b.cov_yy = j11 / det;
  b.cov_xy = -j12 / det;
  b.mean = {b.cov_xx * q.C + b.cov_xy * q.D, b.cov_xy * q.C + b.cov_yy * q.D};
  return b;
}

GaussianBelief paper_faithful(const QuadraticForm& q) {
  if (q.A <= 0.0 || q.B <= 0.0)
    throw std::domain_error("degenerate belief: non-positive quadratic coefficients");
  GaussianBelief b;
  b.mean = {q.C / (2.0 * q.A), q.D / (2.0 * q.B)};
  b.cov_xx = 1.0 / q.A;
  b.cov_yy = 1.0 / q.B;
  b.cov_xy = q.E / 2.0;
  return b;
}

}  // namespace

GaussianBelief to_gaussian(const QuadraticForm& q, FusionMode mode) {
  return mode == FusionMode::ExactQuadratic ? exact_quadratic(q) : paper_faithful(q);
}

msg::MessageParams to_params(const GaussianBelief& b) {
  const double det = b.cov_xx * b.cov_yy - b.cov_xy * b.cov_xy;
  if (!(det > 0.0) || !(b.cov_xx > 0.0))
    throw std::invalid_argument("to_params: covariance is not positive definite");
  const double j11 = b.cov_yy / det;
  const double j22 = b.cov_xx / det;
  const double j12 = -b.cov_xy / det;
  msg::MessageParams p;
  p.w1 = 0.5 * j11;
  p.w2 = 0.5 * j22;
  p.w3 = j11 * b.mean.x + j12 * b.mean.y;
  p.w4 = j12 * b.mean.x + j22 * b.mean.y;
  p.w5 = -j12;
  p.kind = msg::MessageKind::Temporal;
  return p;
}

}  // namespace fcpmp::fuse
