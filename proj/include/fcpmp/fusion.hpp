#pragma once

#include <optional>
#include <span>
#include <vector>

#include "fcpmp/geometry.hpp"
#include "fcpmp/messages.hpp"

namespace fcpmp::fuse {

// Summed exponent coefficients over the basis [-x^2, -y^2, x, y, xy].
struct QuadraticForm {
  double A = 0, B = 0, C = 0, D = 0, E = 0;
};

enum class FusionMode { PaperFaithful, ExactQuadratic };
enum class Modality { Unimodal, Bimodal };

struct GaussianBelief {
  Vec2 mean{};
  double cov_xx = 0, cov_xy = 0, cov_yy = 0;
  Modality modality = Modality::Unimodal;
  std::optional<msg::ModeCenters> centers{};  // set when modality == Bimodal
  int iteration = 0;
  bool clamped = false;  // precision eigenvalues were repaired during fusion
};

// Component-wise sum of the temporal message and any number of spatial ones.
QuadraticForm combine(const msg::MessageParams& temporal,
                      std::span<const msg::MessageParams> spatial);
QuadraticForm combine(std::span<const msg::MessageParams> all);

// Closes the exponent into a Gaussian. ExactQuadratic (default) completes the
// square on the full form: precision J = [[2A, -E], [-E, 2B]], eigenvalues
// clamped into [1e-6, 1e6] when the form is degenerate or indefinite, then
// mean = J^-1 [C, D], cov = J^-1. PaperFaithful reproduces the printed
// closed form verbatim: mean = [C/(2A), D/(2B)], cov = [[1/A, E/2],[E/2, 1/B]],
// and rejects A <= 0 or B <= 0. The printed covariance drops the cross
// coupling from the mean and mixes inverse and raw entries; kept as a
// fidelity mode, not silently corrected.
GaussianBelief to_gaussian(const QuadraticForm& q, FusionMode mode = FusionMode::ExactQuadratic);

inline Vec2 mmse_estimate(const GaussianBelief& b) { return b.mean; }

// Inverse of to_gaussian: exponent coefficients of the Gaussian density.
// Requires a positive-definite covariance.
msg::MessageParams to_params(const GaussianBelief& b);

// Eigenvalue clamp bounds for the precision matrix.
inline constexpr double kPrecisionEigMin = 1e-6;
inline constexpr double kPrecisionEigMax = 1e6;

}  // namespace fcpmp::fuse
