#pragma once

#include <array>
#include <optional>
#include <string>

#include "fcpmp/chebyshev.hpp"
#include "fcpmp/geometry.hpp"

namespace fcpmp::msg {

enum class MessageKind { Temporal, AnchorSpatial, AgentUnimodal, AgentBimodal, Refined };

std::string to_string(MessageKind k);
MessageKind message_kind_from_string(const std::string& s);

// Exponent coefficients over the basis [-x^2, -y^2, x, y, xy]. Every
// parametric message on the factor graph is one of these; multiplying
// messages adds the vectors.
struct MessageParams {
  double w1 = 0, w2 = 0, w3 = 0, w4 = 0, w5 = 0;
  MessageKind kind = MessageKind::Temporal;

  std::array<double, 5> as_array() const { return {w1, w2, w3, w4, w5}; }
  static MessageParams from_array(const std::array<double, 5>& a, MessageKind k) {
    return {a[0], a[1], a[2], a[3], a[4], k};
  }

  MessageParams& operator+=(const MessageParams& o) {
    w1 += o.w1;
    w2 += o.w2;
    w3 += o.w3;
    w4 += o.w4;
    w5 += o.w5;
    return *this;
  }
  friend MessageParams operator+(MessageParams a, const MessageParams& b) { return a += b; }
};

std::string to_json(const MessageParams& p);
MessageParams message_params_from_json(const std::string& text);

enum class ObsKind { Internal, External };

struct RangeObservation {
  double z = 0;    // measured range, meters
  double var = 1;  // noise variance, m^2
  int source = -1;
  ObsKind kind = ObsKind::External;
};

// One or two position hypotheses a message is centered on. Two centers mark
// a bimodal neighbor whose modes sit at the circle-intersection midpoints.
struct ModeCenters {
  Vec2 primary{};
  std::optional<Vec2> secondary{};
  bool bimodal() const { return secondary.has_value(); }
};

// The three closed-form message constructions. The Chebyshev arguments are
// taken directly in the coordinates of C's canonical frame; callers that work
// in world coordinates map into that frame first (see engine).
MessageParams temporal_message(const RangeObservation& obs, const ModeCenters& prev,
                               const cheb::ChebCoeffMatrix& C);
MessageParams anchor_spatial_message(const RangeObservation& obs, Vec2 anchor_pos,
                                     const cheb::ChebCoeffMatrix& C);
MessageParams agent_spatial_message(const RangeObservation& obs, const ModeCenters& neighbor,
                                    const cheb::ChebCoeffMatrix& C);

// Independent re-derivation used to check the closed forms: expands
// 2z*S(x,y) - ((x-cx)^2 + (y-cy)^2), all over 2*var, as a full bivariate
// polynomial with S the tensor Chebyshev surface, truncates monomials of
// total degree > 2, drops the constant, and reads off the five coefficients.
// Bimodal centers produce the component-wise sum of the per-mode vectors.
MessageParams truncation_oracle(double z, double var, const ModeCenters& centers,
                                const cheb::ChebCoeffMatrix& C);

}  // namespace fcpmp::msg
