#include "fcpmp/gnn.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "fcpmp/rng.hpp"
#include "json.hpp"

namespace fcpmp::gnn {

namespace {

using ordered_json = nlohmann::ordered_json;

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<double> asinh_all(std::span<const double> v) {
  std::vector<double> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = std::asinh(v[i]);
  return out;
}

void check_spatial(const msg::MessageParams& omega) {
  switch (omega.kind) {
    case msg::MessageKind::AnchorSpatial:
    case msg::MessageKind::AgentUnimodal:
    case msg::MessageKind::AgentBimodal:
      return;
    default:
      throw std::invalid_argument("enhance: message kind " +
                                  msg::to_string(omega.kind) + " is not spatial");
  }
}

}  // namespace

double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double softplus_inverse(double y) {
  if (y <= 0) throw std::invalid_argument("softplus_inverse: input must be positive");
  return y + std::log1p(-std::exp(-y));
}

const std::array<MlpSpec, 5>& table_specs() {
  static const std::array<MlpSpec, 5> specs = {{
      {"g1", {4, 32, 16, 8}, {true, true, true}},
      {"g2", {5, 32, 16, 8}, {true, true, true}},
      {"g3", {8, 32, 16, 8}, {true, true, true}},
      {"g4", {8, 8, 1}, {true, false}},
      {"g5", {8, 8, 5}, {true, false}},
  }};
  return specs;
}

Mlp& WeightStore::mlp(int idx) {
  switch (idx) {
    case 0: return g1;
    case 1: return g2;
    case 2: return g3;
    case 3: return g4;
    default: return g5;
  }
}

const Mlp& WeightStore::mlp(int idx) const {
  return const_cast<WeightStore*>(this)->mlp(idx);
}

WeightStore init_weights(std::uint64_t seed) {
  Rng rng(derive_stream(seed, "gnn-init"));
  WeightStore ws;
  for (int g = 0; g < 5; ++g) {
    const MlpSpec& spec = table_specs()[g];
    Mlp& m = ws.mlp(g);
    for (size_t l = 0; l + 1 < spec.widths.size(); ++l) {
      Layer layer;
      const int in = spec.widths[l], out = spec.widths[l + 1];
      const double a = std::sqrt(6.0 / (in + out));
      layer.relu = spec.relu[l];
      layer.w.assign(out, std::vector<double>(in));
      layer.b.assign(out, 0.0);
      for (int r = 0; r < out; ++r)
        for (int c = 0; c < in; ++c) layer.w[r][c] = rng.uniform(-a, a);
      m.layers.push_back(std::move(layer));
    }
  }
  // Start as a near-identity refiner: scale softplus^-1(1) -> 1 and a small
  // positive offset, so untrained enhancement barely perturbs the engine.
  ws.g4.layers.back().b[0] = softplus_inverse(1.0);
  for (double& b : ws.g5.layers.back().b) b = -4.0;
  return ws;
}

WeightStore identity_refiner(std::uint64_t seed) {
  WeightStore ws = init_weights(seed);
  for (auto& row : ws.g4.layers.back().w)
    for (double& v : row) v = 0.0;
  for (auto& row : ws.g5.layers.back().w)
    for (double& v : row) v = 0.0;
  for (double& b : ws.g5.layers.back().b) b = -30.0;
  return ws;
}

std::vector<double> mlp_forward(const Mlp& m, std::span<const double> in) {
  MlpTape tape;
  return mlp_forward_tape(m, in, tape);
}

std::vector<double> mlp_forward_tape(const Mlp& m, std::span<const double> in,
                                     MlpTape& tape) {
  if (static_cast<int>(in.size()) != m.input_dim())
    throw std::invalid_argument("mlp_forward: input size " + std::to_string(in.size()) +
                                " does not match layer width " +
                                std::to_string(m.input_dim()));
  tape.inputs.clear();
  tape.pre.clear();
  std::vector<double> x(in.begin(), in.end());
  for (const Layer& layer : m.layers) {
    tape.inputs.push_back(x);
    std::vector<double> z(layer.b);
    for (int r = 0; r < layer.out_dim(); ++r) {
      double acc = z[r];
      const auto& row = layer.w[r];
      for (size_t c = 0; c < row.size(); ++c) acc += row[c] * x[c];
      z[r] = acc;
    }
    tape.pre.push_back(z);
    if (layer.relu)
      for (double& v : z) v = std::max(v, 0.0);
    x = std::move(z);
  }
  return x;
}

MlpGrads zero_grads_like(const Mlp& m) {
  MlpGrads g;
  for (const Layer& layer : m.layers) {
    g.w.emplace_back(layer.out_dim(), std::vector<double>(layer.in_dim(), 0.0));
    g.b.emplace_back(layer.out_dim(), 0.0);
  }
  return g;
}

std::vector<double> mlp_backward(const Mlp& m, const MlpTape& tape,
                                 std::span<const double> dout, MlpGrads& grads) {
  std::vector<double> d(dout.begin(), dout.end());
  for (int l = static_cast<int>(m.layers.size()) - 1; l >= 0; --l) {
    const Layer& layer = m.layers[l];
    if (layer.relu)
      for (int r = 0; r < layer.out_dim(); ++r)
        if (tape.pre[l][r] <= 0) d[r] = 0.0;
    const std::vector<double>& x = tape.inputs[l];
    std::vector<double> dx(x.size(), 0.0);
    for (int r = 0; r < layer.out_dim(); ++r) {
      grads.b[l][r] += d[r];
      for (size_t c = 0; c < x.size(); ++c) {
        grads.w[l][r][c] += d[r] * x[c];
        dx[c] += layer.w[r][c] * d[r];
      }
    }
    d = std::move(dx);
  }
  return d;
}

msg::MessageParams enhance_tape(const msg::MessageParams& omega,
                                const NodeAttr& sender_attr,
                                const WeightStore& ws, EnhanceTape& tape) {
  check_spatial(omega);
  const std::array<double, 4> attr = {sender_attr.x, sender_attr.y,
                                      sender_attr.var_x, sender_attr.var_y};
  tape.h_node = mlp_forward_tape(ws.g1, asinh_all(attr), tape.t1);
  tape.h_edge = mlp_forward_tape(ws.g2, asinh_all(omega.as_array()), tape.t2);
  tape.h_prod.resize(tape.h_node.size());
  for (size_t i = 0; i < tape.h_prod.size(); ++i)
    tape.h_prod[i] = tape.h_edge[i] * tape.h_node[i];
  tape.m = mlp_forward_tape(ws.g3, tape.h_prod, tape.t3);
  tape.g4_pre = mlp_forward_tape(ws.g4, tape.m, tape.t4)[0];
  auto g5_out = mlp_forward_tape(ws.g5, tape.m, tape.t5);
  tape.refinement.scale = softplus(tape.g4_pre);
  for (int k = 0; k < 5; ++k) {
    tape.g5_pre[k] = g5_out[k];
    tape.refinement.offset[k] = softplus(g5_out[k]);
  }
  const auto w = omega.as_array();
  msg::MessageParams phi;
  std::array<double, 5> out{};
  for (int k = 0; k < 5; ++k)
    out[k] = w[k] * tape.refinement.scale + tape.refinement.offset[k];
  phi = msg::MessageParams::from_array(out, msg::MessageKind::Refined);
  return phi;
}

std::pair<Refinement, msg::MessageParams> enhance(const msg::MessageParams& omega,
                                                  const NodeAttr& sender_attr,
                                                  const WeightStore& ws) {
  EnhanceTape tape;
  msg::MessageParams phi = enhance_tape(omega, sender_attr, ws, tape);
  return {tape.refinement, phi};
}

WeightGrads zero_grads_like(const WeightStore& ws) {
  return {zero_grads_like(ws.g1), zero_grads_like(ws.g2), zero_grads_like(ws.g3),
          zero_grads_like(ws.g4), zero_grads_like(ws.g5)};
}

MlpGrads& WeightGrads::mlp(int idx) {
  switch (idx) {
    case 0: return g1;
    case 1: return g2;
    case 2: return g3;
    case 3: return g4;
    default: return g5;
  }
}

const MlpGrads& WeightGrads::mlp(int idx) const {
  return const_cast<WeightGrads*>(this)->mlp(idx);
}

void accumulate(WeightGrads& into, const WeightGrads& from) {
  for (int g = 0; g < 5; ++g) {
    MlpGrads& a = into.mlp(g);
    const MlpGrads& b = const_cast<WeightGrads&>(from).mlp(g);
    for (size_t l = 0; l < a.w.size(); ++l) {
      for (size_t r = 0; r < a.w[l].size(); ++r)
        for (size_t c = 0; c < a.w[l][r].size(); ++c) a.w[l][r][c] += b.w[l][r][c];
      for (size_t r = 0; r < a.b[l].size(); ++r) a.b[l][r] += b.b[l][r];
    }
  }
}

void enhance_backward(const msg::MessageParams& omega, const WeightStore& ws,
                      const EnhanceTape& tape, const std::array<double, 5>& dphi,
                      WeightGrads& grads,
                      const std::array<double, 5>* d_offset) {
  const auto w = omega.as_array();
  double dscale = 0;
  for (int k = 0; k < 5; ++k) dscale += dphi[k] * w[k];

  const std::array<double, 1> dg4 = {dscale * sigmoid(tape.g4_pre)};
  std::vector<double> dm = mlp_backward(ws.g4, tape.t4, dg4, grads.g4);

  std::array<double, 5> dg5{};
  for (int k = 0; k < 5; ++k) {
    double dk = dphi[k];
    if (d_offset) dk += (*d_offset)[k];
    dg5[k] = dk * sigmoid(tape.g5_pre[k]);
  }
  std::vector<double> dm5 = mlp_backward(ws.g5, tape.t5, dg5, grads.g5);
  for (size_t i = 0; i < dm.size(); ++i) dm[i] += dm5[i];

  std::vector<double> dprod = mlp_backward(ws.g3, tape.t3, dm, grads.g3);
  std::vector<double> dedge(dprod.size()), dnode(dprod.size());
  for (size_t i = 0; i < dprod.size(); ++i) {
    dedge[i] = dprod[i] * tape.h_node[i];
    dnode[i] = dprod[i] * tape.h_edge[i];
  }
  mlp_backward(ws.g2, tape.t2, dedge, grads.g2);
  mlp_backward(ws.g1, tape.t1, dnode, grads.g1);
}

void save_weights(const WeightStore& ws, const std::string& path) {
  ordered_json doc;
  doc["format_version"] = 1;
  ordered_json mlps;
  for (int g = 0; g < 5; ++g) {
    ordered_json layers = ordered_json::array();
    for (const Layer& layer : ws.mlp(g).layers) {
      ordered_json jl;
      jl["w"] = layer.w;
      jl["b"] = layer.b;
      layers.push_back(std::move(jl));
    }
    mlps[table_specs()[g].name] = {{"layers", std::move(layers)}};
  }
  doc["mlps"] = std::move(mlps);
  doc["trained_epochs"] = ws.trained_epochs;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_weights: cannot open " + path);
  out << doc.dump(2) << '\n';
}

WeightStore load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_weights: cannot open " + path);
  ordered_json doc;
  try {
    in >> doc;
  } catch (const std::exception& e) {
    throw std::runtime_error("load_weights: " + path + ": " + e.what());
  }
  if (!doc.contains("mlps")) throw std::runtime_error("load_weights: missing \"mlps\"");
  WeightStore ws;
  for (int g = 0; g < 5; ++g) {
    const MlpSpec& spec = table_specs()[g];
    if (!doc["mlps"].contains(spec.name))
      throw std::runtime_error("load_weights: missing MLP \"" + spec.name + "\"");
    const auto& layers = doc["mlps"][spec.name]["layers"];
    const size_t want_layers = spec.widths.size() - 1;
    if (layers.size() != want_layers)
      throw std::runtime_error("load_weights: " + spec.name + ": expected " +
                               std::to_string(want_layers) + " layers, got " +
                               std::to_string(layers.size()));
    Mlp& m = ws.mlp(g);
    for (size_t l = 0; l < want_layers; ++l) {
      Layer layer;
      layer.relu = spec.relu[l];
      const int in_dim = spec.widths[l], out_dim = spec.widths[l + 1];
      layer.w = layers[l].at("w").get<std::vector<std::vector<double>>>();
      layer.b = layers[l].at("b").get<std::vector<double>>();
      if (static_cast<int>(layer.w.size()) != out_dim ||
          static_cast<int>(layer.b.size()) != out_dim)
        throw std::runtime_error("load_weights: " + spec.name + ": layer " +
                                 std::to_string(l) + " output width " +
                                 std::to_string(layer.w.size()) + " does not match " +
                                 std::to_string(out_dim));
      for (const auto& row : layer.w) {
        if (static_cast<int>(row.size()) != in_dim)
          throw std::runtime_error("load_weights: " + spec.name + ": layer " +
                                   std::to_string(l) + " input width " +
                                   std::to_string(row.size()) + " does not match " +
                                   std::to_string(in_dim));
        for (double v : row)
          if (!std::isfinite(v))
            throw std::runtime_error("load_weights: " + spec.name + ": non-finite weight");
      }
      for (double v : layer.b)
        if (!std::isfinite(v))
          throw std::runtime_error("load_weights: " + spec.name + ": non-finite bias");
      m.layers.push_back(std::move(layer));
    }
  }
  ws.trained_epochs = doc.value("trained_epochs", 0);
  return ws;
}

}  // namespace fcpmp::gnn
