#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "fcpmp/gnn.hpp"
#include "fcpmp/rng.hpp"
#include "json.hpp"

using namespace fcpmp;
using namespace fcpmp::gnn;

namespace {

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-8);
}

msg::MessageParams random_omega(Rng& rng) {
  std::array<double, 5> w{};
  for (double& v : w) v = rng.uniform(-50.0, 50.0);
  return msg::MessageParams::from_array(w, msg::MessageKind::AgentUnimodal);
}

NodeAttr random_attr(Rng& rng) {
  return {rng.uniform(-200.0, 200.0), rng.uniform(-200.0, 200.0),
          rng.uniform(0.0, 1000.0), rng.uniform(0.0, 1000.0)};
}

// Collects every (mlp, layer, row, col-or-bias) coordinate for sampling.
struct ParamRef {
  int mlp, layer, row, col;  // col == -1 means bias
};

double& param_at(WeightStore& ws, const ParamRef& p) {
  Layer& l = ws.mlp(p.mlp).layers[p.layer];
  return p.col < 0 ? l.b[p.row] : l.w[p.row][p.col];
}

double grad_at(WeightGrads& g, const ParamRef& p) {
  MlpGrads& m = g.mlp(p.mlp);
  return p.col < 0 ? m.b[p.layer][p.row] : m.w[p.layer][p.row][p.col];
}

ParamRef random_param(Rng& rng, const WeightStore& ws, int mlp) {
  const Mlp& m = ws.mlp(mlp);
  const int layer = static_cast<int>(rng.below(m.layers.size()));
  const Layer& l = m.layers[layer];
  const int row = static_cast<int>(rng.below(l.out_dim()));
  const bool bias = rng.uniform01() < 0.2;
  const int col = bias ? -1 : static_cast<int>(rng.below(l.in_dim()));
  return {mlp, layer, row, col};
}

}  // namespace

TEST_CASE("layer table matches the published structure") {
  const auto& specs = table_specs();
  CHECK(specs[0].widths == std::vector<int>{4, 32, 16, 8});
  CHECK(specs[1].widths == std::vector<int>{5, 32, 16, 8});
  CHECK(specs[2].widths == std::vector<int>{8, 32, 16, 8});
  CHECK(specs[3].widths == std::vector<int>{8, 8, 1});
  CHECK(specs[4].widths == std::vector<int>{8, 8, 5});
  CHECK_FALSE(specs[3].relu.back());
  CHECK_FALSE(specs[4].relu.back());
  WeightStore ws = init_weights(1);
  for (int g = 0; g < 5; ++g) {
    CHECK(ws.mlp(g).input_dim() == specs[g].widths.front());
    CHECK(ws.mlp(g).output_dim() == specs[g].widths.back());
  }
}

TEST_CASE("mlp_forward basics") {
  SUBCASE("all-zero weights give all-zero output") {
    Mlp m;
    m.layers.push_back({{{0, 0}, {0, 0}, {0, 0}}, {0, 0, 0}, true});
    auto out = mlp_forward(m, std::array<double, 2>{3.0, -4.0});
    CHECK(out == std::vector<double>{0, 0, 0});
  }
  SUBCASE("identity linear layer passes input through") {
    Mlp m;
    m.layers.push_back({{{1, 0}, {0, 1}}, {0, 0}, false});
    auto out = mlp_forward(m, std::array<double, 2>{3.0, -4.0});
    CHECK(out[0] == 3.0);
    CHECK(out[1] == -4.0);
  }
  SUBCASE("input size mismatch throws") {
    WeightStore ws = init_weights(1);
    CHECK_THROWS_AS(mlp_forward(ws.g1, std::array<double, 3>{1, 2, 3}),
                    std::invalid_argument);
  }
}

TEST_CASE("per-MLP gradients match central finite differences") {
  Rng rng(derive_stream(2024, "mlp-fd"));
  WeightStore ws = init_weights(5);
  for (int g = 0; g < 5; ++g) {
    const int in_dim = ws.mlp(g).input_dim();
    const int out_dim = ws.mlp(g).output_dim();
    for (int trial = 0; trial < 6; ++trial) {
      std::vector<double> x(in_dim), v(out_dim);
      for (double& t : x) t = rng.uniform(-2.0, 2.0);
      for (double& t : v) t = rng.uniform(-1.0, 1.0);

      MlpTape tape;
      mlp_forward_tape(ws.mlp(g), x, tape);
      MlpGrads grads = zero_grads_like(ws.mlp(g));
      mlp_backward(ws.mlp(g), tape, v, grads);

      for (int k = 0; k < 8; ++k) {
        WeightGrads all = zero_grads_like(ws);
        all.mlp(g) = grads;
        const ParamRef p = random_param(rng, ws, g);
        double& w = param_at(ws, p);
        const double keep = w;
        const double h = 1e-6 * std::max(1.0, std::abs(keep));
        auto loss = [&] {
          auto out = mlp_forward(ws.mlp(g), x);
          double L = 0;
          for (int j = 0; j < out_dim; ++j) L += v[j] * out[j];
          return L;
        };
        w = keep + h;
        const double lp = loss();
        w = keep - h;
        const double lm = loss();
        w = keep;
        const double fd = (lp - lm) / (2.0 * h);
        const double an = grad_at(all, p);
        if (std::abs(fd) + std::abs(an) < 1e-10) continue;
        CHECK(rel_err(fd, an) < 1e-4);
      }
    }
  }
}

TEST_CASE("enhance output stays positive") {
  Rng rng(derive_stream(7, "positivity"));
  WeightStore ws = init_weights(3);
  for (int i = 0; i < 1000; ++i) {
    auto [ref, phi] = enhance(random_omega(rng), random_attr(rng), ws);
    CHECK(ref.scale > 0.0);
    for (double o : ref.offset) CHECK(o > 0.0);
    CHECK(phi.kind == msg::MessageKind::Refined);
  }
}

TEST_CASE("enhance rejects non-spatial messages") {
  WeightStore ws = init_weights(1);
  msg::MessageParams temporal;
  temporal.kind = msg::MessageKind::Temporal;
  CHECK_THROWS_AS(enhance(temporal, {}, ws), std::invalid_argument);
}

TEST_CASE("identity refiner leaves messages unchanged to 1e-6") {
  Rng rng(derive_stream(7, "identity"));
  WeightStore ws = identity_refiner(11);
  for (int i = 0; i < 200; ++i) {
    const msg::MessageParams omega = random_omega(rng);
    auto [ref, phi] = enhance(omega, random_attr(rng), ws);
    CHECK(std::abs(ref.scale - 1.0) < 1e-12);
    const auto a = omega.as_array(), b = phi.as_array();
    for (int k = 0; k < 5; ++k) CHECK(std::abs(a[k] - b[k]) < 1e-6);
  }
}

TEST_CASE("zero g3 weights make the refinement affine in omega") {
  WeightStore ws = init_weights(9);
  for (Layer& l : ws.g3.layers) {
    for (auto& row : l.w)
      for (double& v : row) v = 0.0;
    for (double& b : l.b) b = 0.0;
  }
  Rng rng(derive_stream(9, "affine"));
  const NodeAttr attr = random_attr(rng);
  const auto phi0 = enhance(msg::MessageParams::from_array(
                                {0, 0, 0, 0, 0}, msg::MessageKind::AgentUnimodal),
                            attr, ws)
                        .second.as_array();
  for (int i = 0; i < 50; ++i) {
    const msg::MessageParams omega = random_omega(rng);
    const auto w = omega.as_array();
    const auto phi = enhance(omega, attr, ws).second.as_array();
    // phi = s*omega + offset with the same s, offset for every input
    const auto half = enhance(msg::MessageParams::from_array(
                                  {w[0] / 2, w[1] / 2, w[2] / 2, w[3] / 2, w[4] / 2},
                                  msg::MessageKind::AgentUnimodal),
                              attr, ws)
                          .second.as_array();
    for (int k = 0; k < 5; ++k)
      CHECK(std::abs((phi[k] - phi0[k]) - 2.0 * (half[k] - phi0[k])) <
            1e-9 * (1.0 + std::abs(phi[k])));
  }
}

TEST_CASE("enhance gradients match finite differences for every MLP") {
  Rng rng(derive_stream(31, "enhance-fd"));
  WeightStore ws = init_weights(13);
  std::array<int, 5> checked{};
  for (int trial = 0; trial < 12; ++trial) {
    const msg::MessageParams omega = random_omega(rng);
    const NodeAttr attr = random_attr(rng);
    std::array<double, 5> v{};
    for (double& t : v) t = rng.uniform(-1.0, 1.0);

    EnhanceTape tape;
    enhance_tape(omega, attr, ws, tape);
    WeightGrads grads = zero_grads_like(ws);
    enhance_backward(omega, ws, tape, v, grads);

    auto loss = [&] {
      auto phi = enhance(omega, attr, ws).second.as_array();
      double L = 0;
      for (int k = 0; k < 5; ++k) L += v[k] * phi[k];
      return L;
    };
    const double scale = 1.0 + std::abs(loss());

    for (int g = 0; g < 5; ++g) {
      for (int k = 0; k < 10; ++k) {
        const ParamRef p = random_param(rng, ws, g);
        double& w = param_at(ws, p);
        const double keep = w;
        const double h = 1e-6 * std::max(1.0, std::abs(keep));
        w = keep + h;
        const double lp = loss();
        w = keep - h;
        const double lm = loss();
        w = keep;
        const double fd = (lp - lm) / (2.0 * h);
        const double an = grad_at(grads, p);
        // Parameters on dead ReLU paths have exactly zero gradient both
        // ways; gradients below the cancellation noise of the central
        // difference are unverifiable by it.
        if (std::abs(fd) + std::abs(an) < 1e-6 * scale) continue;
        CHECK(std::abs(fd - an) <= 1e-3 * (std::abs(fd) + std::abs(an)) + 1e-6 * scale);
        ++checked[g];
      }
    }
  }
  int total = 0;
  for (int g = 0; g < 5; ++g) {
    CHECK(checked[g] >= 5);
    total += checked[g];
  }
  CHECK(total > 60);
}

TEST_CASE("weight initialization is deterministic") {
  WeightStore a = init_weights(77), b = init_weights(77), c = init_weights(78);
  CHECK(a.g3.layers[1].w == b.g3.layers[1].w);
  CHECK(a.g1.layers[0].w != c.g1.layers[0].w);
  CHECK(a.g4.layers.back().b[0] == doctest::Approx(softplus_inverse(1.0)));
  CHECK(softplus(a.g4.layers.back().b[0]) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("weights survive a save/load round trip bit-exactly") {
  const std::string path = "test_weights.json";
  WeightStore ws = init_weights(5);
  ws.trained_epochs = 17;
  save_weights(ws, path);
  WeightStore back = load_weights(path);
  CHECK(back.trained_epochs == 17);
  for (int g = 0; g < 5; ++g) {
    REQUIRE(back.mlp(g).layers.size() == ws.mlp(g).layers.size());
    for (size_t l = 0; l < ws.mlp(g).layers.size(); ++l) {
      CHECK(back.mlp(g).layers[l].w == ws.mlp(g).layers[l].w);
      CHECK(back.mlp(g).layers[l].b == ws.mlp(g).layers[l].b);
      CHECK(back.mlp(g).layers[l].relu == ws.mlp(g).layers[l].relu);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("malformed weight files are rejected") {
  const std::string path = "test_weights_bad.json";
  SUBCASE("truncated file") {
    std::ofstream(path) << "{\"format_version\":1,\"mlps\":{\"g1\":";
    CHECK_THROWS_AS(load_weights(path), std::runtime_error);
  }
  SUBCASE("wrong g4 output width names g4") {
    WeightStore ws = init_weights(5);
    save_weights(ws, path);
    nlohmann::json doc;
    std::ifstream(path) >> doc;
    doc["mlps"]["g4"]["layers"][1]["w"].push_back(
        std::vector<double>(8, 0.0));
    doc["mlps"]["g4"]["layers"][1]["b"].push_back(0.0);
    std::ofstream(path) << doc.dump();
    CHECK_THROWS_WITH_AS(load_weights(path), doctest::Contains("g4"),
                         std::runtime_error);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_weights("no_such_weights.json"), std::runtime_error);
  }
  std::remove(path.c_str());
}
