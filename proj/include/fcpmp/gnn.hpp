#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fcpmp/messages.hpp"

namespace fcpmp::gnn {

struct Layer {
  std::vector<std::vector<double>> w;  // [out][in]
  std::vector<double> b;
  bool relu = true;
  int out_dim() const { return static_cast<int>(b.size()); }
  int in_dim() const { return w.empty() ? 0 : static_cast<int>(w[0].size()); }
};

struct Mlp {
  std::vector<Layer> layers;
  int input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  int output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }
};

struct MlpSpec {
  std::string name;
  std::vector<int> widths;       // input plus every layer output
  std::vector<bool> relu;        // one entry per layer
};

const std::array<MlpSpec, 5>& table_specs();

struct WeightStore {
  Mlp g1, g2, g3, g4, g5;
  int trained_epochs = 0;
  Mlp& mlp(int idx);
  const Mlp& mlp(int idx) const;
};

// Glorot-uniform weights, zero biases except the final g4/g5 biases which
// start the refiner near the identity map (scale 1, offset near 0).
WeightStore init_weights(std::uint64_t seed);

// init_weights with the g4/g5 output layers zeroed so that scale is exactly
// 1 and the offset is softplus(-30): refinement becomes a no-op.
WeightStore identity_refiner(std::uint64_t seed);

std::vector<double> mlp_forward(const Mlp& m, std::span<const double> in);

struct MlpTape {
  std::vector<std::vector<double>> inputs;  // activation entering each layer
  std::vector<std::vector<double>> pre;     // preactivation of each layer
};

std::vector<double> mlp_forward_tape(const Mlp& m, std::span<const double> in,
                                     MlpTape& tape);

struct MlpGrads {
  std::vector<std::vector<std::vector<double>>> w;
  std::vector<std::vector<double>> b;
};

MlpGrads zero_grads_like(const Mlp& m);

// Accumulates parameter gradients into `grads` and returns dL/d(input).
std::vector<double> mlp_backward(const Mlp& m, const MlpTape& tape,
                                 std::span<const double> dout, MlpGrads& grads);

struct NodeAttr {
  double x = 0, y = 0, var_x = 0, var_y = 0;
};

struct Refinement {
  double scale = 1.0;
  std::array<double, 5> offset{};
};

double softplus(double x);
double softplus_inverse(double y);

// Refines a spatial message: phi = omega * softplus(g4(m)) + softplus(g5(m))
// with m = g3(g2(asinh omega) o g1(asinh attr)). Inputs pass through asinh
// so that raw coefficients of any magnitude stay in a trainable range.
std::pair<Refinement, msg::MessageParams> enhance(const msg::MessageParams& omega,
                                                  const NodeAttr& sender_attr,
                                                  const WeightStore& ws);

struct EnhanceTape {
  MlpTape t1, t2, t3, t4, t5;
  std::vector<double> h_node, h_edge, h_prod, m;
  double g4_pre = 0;
  std::array<double, 5> g5_pre{};
  Refinement refinement;
};

msg::MessageParams enhance_tape(const msg::MessageParams& omega,
                                const NodeAttr& sender_attr,
                                const WeightStore& ws, EnhanceTape& tape);

struct WeightGrads {
  MlpGrads g1, g2, g3, g4, g5;
  MlpGrads& mlp(int idx);
  const MlpGrads& mlp(int idx) const;
};

WeightGrads zero_grads_like(const WeightStore& ws);
void accumulate(WeightGrads& into, const WeightGrads& from);

// Backpropagates dL/dphi into the five MLPs. The incoming omega and attr are
// treated as constants (no gradient flows back across iterations). d_offset,
// when given, adds loss gradient that lands on the additive offsets directly
// (used by regularizers that act on the refinement rather than the message).
void enhance_backward(const msg::MessageParams& omega, const WeightStore& ws,
                      const EnhanceTape& tape, const std::array<double, 5>& dphi,
                      WeightGrads& grads,
                      const std::array<double, 5>* d_offset = nullptr);

void save_weights(const WeightStore& ws, const std::string& path);
WeightStore load_weights(const std::string& path);

}  // namespace fcpmp::gnn
