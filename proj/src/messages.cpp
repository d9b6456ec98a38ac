#include "fcpmp/messages.hpp"

#include <stdexcept>

#include "json.hpp"

namespace fcpmp::msg {

std::string to_string(MessageKind k) {
  switch (k) {
    case MessageKind::Temporal: return "temporal";
    case MessageKind::AnchorSpatial: return "anchor_spatial";
    case MessageKind::AgentUnimodal: return "agent_unimodal";
    case MessageKind::AgentBimodal: return "agent_bimodal";
    case MessageKind::Refined: return "refined";
  }
  return "unknown";
}

MessageKind message_kind_from_string(const std::string& s) {
  if (s == "temporal") return MessageKind::Temporal;
  if (s == "anchor_spatial") return MessageKind::AnchorSpatial;
  if (s == "agent_unimodal") return MessageKind::AgentUnimodal;
  if (s == "agent_bimodal") return MessageKind::AgentBimodal;
  if (s == "refined") return MessageKind::Refined;
  throw std::invalid_argument("unknown message kind: " + s);
}

std::string to_json(const MessageParams& p) {
  nlohmann::ordered_json j;
  j["w"] = p.as_array();
  j["kind"] = to_string(p.kind);
  return j.dump();
}

MessageParams message_params_from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  auto a = j.at("w").get<std::array<double, 5>>();
  return MessageParams::from_array(a, message_kind_from_string(j.at("kind").get<std::string>()));
}

namespace {

void require_positive_var(double var) {
  if (!(var > 0)) throw std::invalid_argument("range observation variance must be positive");
}

// Shared closed form for a range factor centered at (cx, cy): the exponent of
// exp{(2z*S - xi^2) / (2 var)} truncated to total degree 2, with S the tensor
// Chebyshev surface and xi^2 the exact squared distance to the center.
MessageParams unimodal_form(double z, double var, double cx, double cy,
                            const cheb::ChebCoeffMatrix& C, MessageKind kind) {
  const auto& c = C.c;
  MessageParams p;
  p.w1 = (-4.0 * z * c[2][0] + 4.0 * z * c[2][2] + 1.0) / (2.0 * var);
  p.w2 = (-4.0 * z * c[0][2] + 4.0 * z * c[2][2] + 1.0) / (2.0 * var);
  p.w3 = (z * (c[1][0] - c[1][2]) + cx) / var;
  p.w4 = (z * (c[0][1] - c[2][1]) + cy) / var;
  p.w5 = z * c[1][1] / var;
  p.kind = kind;
  return p;
}

}  // namespace

MessageParams temporal_message(const RangeObservation& obs, const ModeCenters& prev,
                               const cheb::ChebCoeffMatrix& C) {
  require_positive_var(obs.var);
  if (obs.kind != ObsKind::Internal)
    throw std::invalid_argument("temporal_message expects an internal displacement range");
  if (prev.bimodal())
    throw std::invalid_argument("temporal_message expects a unimodal previous estimate");
  return unimodal_form(obs.z, obs.var, prev.primary.x, prev.primary.y, C,
                       MessageKind::Temporal);
}

MessageParams anchor_spatial_message(const RangeObservation& obs, Vec2 anchor_pos,
                                     const cheb::ChebCoeffMatrix& C) {
  require_positive_var(obs.var);
  if (obs.kind != ObsKind::External)
    throw std::invalid_argument("anchor_spatial_message expects an external range");
  return unimodal_form(obs.z, obs.var, anchor_pos.x, anchor_pos.y, C,
                       MessageKind::AnchorSpatial);
}

MessageParams agent_spatial_message(const RangeObservation& obs, const ModeCenters& neighbor,
                                    const cheb::ChebCoeffMatrix& C) {
  require_positive_var(obs.var);
  if (obs.kind != ObsKind::External)
    throw std::invalid_argument("agent_spatial_message expects an external range");
  if (!neighbor.bimodal()) {
    return unimodal_form(obs.z, obs.var, neighbor.primary.x, neighbor.primary.y, C,
                         MessageKind::AgentUnimodal);
  }
  // Two-mode form: the product of the per-mode factors, so every coefficient
  // is the sum of the two unimodal vectors sharing (z, var).
  const auto& c = C.c;
  const double z = obs.z, var = obs.var;
  const Vec2 m1 = neighbor.primary, m2 = *neighbor.secondary;
  MessageParams p;
  p.w1 = (-4.0 * z * c[2][0] + 4.0 * z * c[2][2] + 1.0) / var;
  p.w2 = (-4.0 * z * c[0][2] + 4.0 * z * c[2][2] + 1.0) / var;
  p.w3 = (2.0 * z * (c[1][0] - c[1][2]) + m1.x + m2.x) / var;
  p.w4 = (2.0 * z * (c[0][1] - c[2][1]) + m1.y + m2.y) / var;
  p.w5 = 2.0 * z * c[1][1] / var;
  p.kind = MessageKind::AgentBimodal;
  return p;
}

namespace {

// Bivariate polynomial with per-axis degree <= 2, coefficient of x^i y^j at
// p[i][j]. Large enough for the tensor Chebyshev surface and the exact
// squared distance.
struct Poly33 {
  double p[3][3] = {};
};

MessageParams oracle_single(double z, double var, double cx, double cy,
                            const cheb::ChebCoeffMatrix& C) {
  // Power-basis coefficients of T_0, T_1, T_2.
  const double T[3][3] = {{1, 0, 0}, {0, 1, 0}, {-1, 0, 2}};

  Poly33 surf;
  for (int n = 0; n < 3; ++n)
    for (int m = 0; m < 3; ++m)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) surf.p[i][j] += C.c[n][m] * T[n][i] * T[m][j];

  Poly33 expo;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) expo.p[i][j] = 2.0 * z * surf.p[i][j];
  expo.p[0][0] -= cx * cx + cy * cy;
  expo.p[1][0] += 2.0 * cx;
  expo.p[0][1] += 2.0 * cy;
  expo.p[2][0] -= 1.0;
  expo.p[0][2] -= 1.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) expo.p[i][j] /= 2.0 * var;

  // Keep total degree <= 2, drop the constant, read off the basis
  // [-x^2, -y^2, x, y, xy].
  MessageParams out;
  out.w1 = -expo.p[2][0];
  out.w2 = -expo.p[0][2];
  out.w3 = expo.p[1][0];
  out.w4 = expo.p[0][1];
  out.w5 = expo.p[1][1];
  return out;
}

}  // namespace

MessageParams truncation_oracle(double z, double var, const ModeCenters& centers,
                                const cheb::ChebCoeffMatrix& C) {
  MessageParams out = oracle_single(z, var, centers.primary.x, centers.primary.y, C);
  out.kind = MessageKind::AgentUnimodal;
  if (centers.bimodal()) {
    out += oracle_single(z, var, centers.secondary->x, centers.secondary->y, C);
    out.kind = MessageKind::AgentBimodal;
  }
  return out;
}

}  // namespace fcpmp::msg
