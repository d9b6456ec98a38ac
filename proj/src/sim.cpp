#include "fcpmp/sim.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace fcpmp::sim {

void Scenario::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("scenario." + field + ": " + why);
  };
  if (!(area.x_hi > area.x_lo) || !(area.y_hi > area.y_lo)) fail("area", "must be non-empty");
  if (deploy_zone.x_lo < area.x_lo || deploy_zone.x_hi > area.x_hi ||
      deploy_zone.y_lo < area.y_lo || deploy_zone.y_hi > area.y_hi ||
      !(deploy_zone.x_hi > deploy_zone.x_lo) || !(deploy_zone.y_hi > deploy_zone.y_lo))
    fail("deploy_zone", "must be a non-empty rectangle inside area");
  if (n_agents < 0) fail("n_agents", "must be >= 0");
  if (n_anchors < 0) fail("n_anchors", "must be >= 0");
  if (!(comm_radius > 0)) fail("comm_radius", "must be > 0");
  if (!(range_var > 0)) fail("range_var", "must be > 0");
  if (!(internal_var > 0)) fail("internal_var", "must be > 0");
  if (mobility.d_var < 0) fail("mobility.d_var", "must be >= 0");
  if (mobility.d_var == 0 && mobility.d_mean < 0)
    fail("mobility.d_mean", "must be >= 0 when d_var is 0");
  if (l_max < 1 || l_max > 100) fail("l_max", "must be in [1, 100]");
}

Scenario train_scenario() { return Scenario{}; }

Scenario wide_scenario(int n_agents) {
  Scenario s;
  s.area = {0, 500, 0, 500};
  s.deploy_zone = {50, 450, 50, 450};
  s.n_agents = n_agents;
  s.n_anchors = 41;
  s.comm_radius = 50.0;
  return s;
}

std::string to_json(const Scenario& s) {
  nlohmann::ordered_json j;
  j["area"] = {s.area.x_lo, s.area.x_hi, s.area.y_lo, s.area.y_hi};
  j["deploy_zone"] = {s.deploy_zone.x_lo, s.deploy_zone.x_hi, s.deploy_zone.y_lo,
                      s.deploy_zone.y_hi};
  j["n_agents"] = s.n_agents;
  j["n_anchors"] = s.n_anchors;
  j["comm_radius"] = s.comm_radius;
  j["range_var"] = s.range_var;
  j["internal_var"] = s.internal_var;
  j["mobility"] = {{"d_mean", s.mobility.d_mean}, {"d_var", s.mobility.d_var}};
  j["l_max"] = s.l_max;
  j["seed"] = s.seed;
  return j.dump();
}

Scenario scenario_from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  Scenario s;
  auto rect = [&](const char* key) {
    auto a = j.at(key);
    return Rect{a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>(),
                a.at(3).get<double>()};
  };
  s.area = rect("area");
  s.deploy_zone = rect("deploy_zone");
  s.n_agents = j.at("n_agents").get<int>();
  s.n_anchors = j.at("n_anchors").get<int>();
  s.comm_radius = j.at("comm_radius").get<double>();
  s.range_var = j.at("range_var").get<double>();
  s.internal_var = j.at("internal_var").get<double>();
  s.mobility.d_mean = j.at("mobility").at("d_mean").get<double>();
  s.mobility.d_var = j.at("mobility").at("d_var").get<double>();
  s.l_max = j.at("l_max").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.validate();
  return s;
}

void rebuild_adjacency(NetworkState& state, double comm_radius) {
  const size_t n = state.agents.size();
  const double r2 = comm_radius * comm_radius;
  state.agent_neighbors.assign(n, {});
  state.anchor_neighbors.assign(n, {});
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      Vec2 d = state.agents[i].pos - state.agents[j].pos;
      if (d.dot(d) <= r2) {
        state.agent_neighbors[i].push_back(static_cast<int>(j));
        state.agent_neighbors[j].push_back(static_cast<int>(i));
      }
    }
    for (size_t a = 0; a < state.anchors.size(); ++a) {
      Vec2 d = state.agents[i].pos - state.anchors[a];
      if (d.dot(d) <= r2) state.anchor_neighbors[i].push_back(static_cast<int>(a));
    }
  }
}

NetworkState generate_scenario(const Scenario& cfg) {
  Rng rng(derive_stream(cfg.seed, "placement"));
  return generate_scenario(cfg, rng);
}

NetworkState generate_scenario(const Scenario& cfg, Rng& rng) {
  cfg.validate();
  NetworkState st;
  st.t = 0;
  st.agents.reserve(cfg.n_agents);
  for (int i = 0; i < cfg.n_agents; ++i) {
    Agent a;
    a.id = i;
    a.pos = {rng.uniform(cfg.deploy_zone.x_lo, cfg.deploy_zone.x_hi),
             rng.uniform(cfg.deploy_zone.y_lo, cfg.deploy_zone.y_hi)};
    a.fresh = true;
    st.agents.push_back(a);
  }
  st.next_id = cfg.n_agents;

  if (cfg.n_anchors > 0) {
    int k = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(cfg.n_anchors))));
    double cw = cfg.area.width() / k, ch = cfg.area.height() / k;
    for (int row = 0; row < k && static_cast<int>(st.anchors.size()) < cfg.n_anchors; ++row)
      for (int col = 0; col < k && static_cast<int>(st.anchors.size()) < cfg.n_anchors; ++col)
        st.anchors.push_back({cfg.area.x_lo + (col + 0.5) * cw,
                              cfg.area.y_lo + (row + 0.5) * ch});
  }

  rebuild_adjacency(st, cfg.comm_radius);
  return st;
}

void step_mobility(NetworkState& state, const Scenario& cfg, Rng& rng) {
  for (auto& agent : state.agents) {
    double d;
    if (cfg.mobility.d_var == 0.0) {
      d = cfg.mobility.d_mean;
    } else {
      const double sd = std::sqrt(cfg.mobility.d_var);
      do {
        d = rng.normal(cfg.mobility.d_mean, sd);
      } while (d < 0.0);
    }
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const Vec2 disp{d * std::cos(theta), d * std::sin(theta)};
    const Vec2 candidate = agent.pos + disp;
    if (cfg.area.contains(candidate)) {
      agent.pos = candidate;
      agent.displacement = disp;
      agent.fresh = false;
    } else {
      agent.id = state.next_id++;
      agent.pos = {rng.uniform(cfg.deploy_zone.x_lo, cfg.deploy_zone.x_hi),
                   rng.uniform(cfg.deploy_zone.y_lo, cfg.deploy_zone.y_hi)};
      agent.displacement = {0.0, 0.0};
      agent.fresh = true;
    }
  }
  state.t += 1;
  rebuild_adjacency(state, cfg.comm_radius);
}

MeasurementSet sense(const NetworkState& state, const Scenario& cfg, Rng& rng) {
  MeasurementSet ms;
  const double range_sd = std::sqrt(cfg.range_var);
  const double internal_sd = std::sqrt(cfg.internal_var);
  for (size_t i = 0; i < state.agents.size(); ++i) {
    for (int j : state.agent_neighbors[i]) {
      const double d = distance(state.agents[i].pos, state.agents[j].pos);
      const double z = std::max(0.0, d + rng.normal(0.0, range_sd));
      ms.externals.push_back({static_cast<int>(i), j, false, z, cfg.range_var});
    }
    for (int a : state.anchor_neighbors[i]) {
      const double d = distance(state.agents[i].pos, state.anchors[a]);
      const double z = std::max(0.0, d + rng.normal(0.0, range_sd));
      ms.externals.push_back({static_cast<int>(i), a, true, z, cfg.range_var});
    }
  }
  for (size_t i = 0; i < state.agents.size(); ++i) {
    if (state.agents[i].fresh) continue;
    const double d = state.agents[i].displacement.norm();
    const double z = std::max(0.0, d + rng.normal(0.0, internal_sd));
    ms.internals.push_back({static_cast<int>(i), z, cfg.internal_var});
  }
  return ms;
}

long long count_triangles(const NetworkState& state) {
  const size_t n = state.agents.size();
  if (n < 3) return 0;
  const size_t blocks = (n + 63) / 64;
  std::vector<std::uint64_t> rows(n * blocks, 0);
  for (size_t i = 0; i < n; ++i)
    for (int j : state.agent_neighbors[i])
      rows[i * blocks + static_cast<size_t>(j) / 64] |= std::uint64_t{1} << (j % 64);

  long long count = 0;
  for (size_t i = 0; i < n; ++i) {
    for (int j : state.agent_neighbors[i]) {
      if (static_cast<size_t>(j) <= i) continue;
      // Common neighbors k with k > j close a triangle i < j < k exactly once.
      const size_t jb = static_cast<size_t>(j) / 64;
      const std::uint64_t jmask = ~((std::uint64_t{2} << (j % 64)) - 1);
      std::uint64_t head = rows[i * blocks + jb] & rows[static_cast<size_t>(j) * blocks + jb] & jmask;
      count += std::popcount(head);
      for (size_t b = jb + 1; b < blocks; ++b)
        count += std::popcount(rows[i * blocks + b] & rows[static_cast<size_t>(j) * blocks + b]);
    }
  }
  return count;
}

LoopCensus monte_carlo_loops(const Scenario& cfg, int trials) {
  if (trials < 1) throw std::invalid_argument("monte_carlo_loops: trials must be >= 1");
  std::vector<long long> counts(trials);
#pragma omp parallel for schedule(static)
  for (int trial = 0; trial < trials; ++trial) {
    Rng rng(derive_stream(cfg.seed, "census", static_cast<std::uint64_t>(trial)));
    NetworkState st = generate_scenario(cfg, rng);
    counts[trial] = count_triangles(st);
  }
  // Serial reduction in fixed order keeps results thread-count independent.
  double mean = 0;
  for (long long c : counts) mean += static_cast<double>(c);
  mean /= trials;
  double var = 0;
  for (long long c : counts) {
    double d = static_cast<double>(c) - mean;
    var += d * d;
  }
  var = trials > 1 ? var / (trials - 1) : 0.0;
  return {mean, std::sqrt(var), trials};
}

namespace {

nlohmann::ordered_json slot_to_json(const SlotRecord& rec) {
  nlohmann::ordered_json j;
  j["kind"] = "slot";
  j["realization"] = rec.realization;
  j["t"] = rec.state.t;
  auto agents = nlohmann::ordered_json::array();
  for (const auto& a : rec.state.agents)
    agents.push_back({a.id, a.pos.x, a.pos.y, a.displacement.x, a.displacement.y, a.fresh});
  j["agents"] = std::move(agents);
  j["agent_adj"] = rec.state.agent_neighbors;
  j["anchor_adj"] = rec.state.anchor_neighbors;
  auto ext = nlohmann::ordered_json::array();
  for (const auto& e : rec.meas.externals)
    ext.push_back({e.receiver, e.source, e.source_is_anchor, e.z});
  j["ext"] = std::move(ext);
  auto internal = nlohmann::ordered_json::array();
  for (const auto& m : rec.meas.internals) internal.push_back({m.agent, m.z});
  j["int"] = std::move(internal);
  j["next_id"] = rec.state.next_id;
  return j;
}

SlotRecord slot_from_json(const nlohmann::json& j, const Scenario& cfg,
                          const std::vector<Vec2>& anchors) {
  SlotRecord rec;
  rec.realization = j.at("realization").get<int>();
  rec.state.t = j.at("t").get<int>();
  for (const auto& a : j.at("agents")) {
    Agent ag;
    ag.id = a.at(0).get<int>();
    ag.pos = {a.at(1).get<double>(), a.at(2).get<double>()};
    ag.displacement = {a.at(3).get<double>(), a.at(4).get<double>()};
    ag.fresh = a.at(5).get<bool>();
    rec.state.agents.push_back(ag);
  }
  rec.state.anchors = anchors;
  rec.state.agent_neighbors = j.at("agent_adj").get<std::vector<std::vector<int>>>();
  rec.state.anchor_neighbors = j.at("anchor_adj").get<std::vector<std::vector<int>>>();
  rec.state.next_id = j.at("next_id").get<int>();
  for (const auto& e : j.at("ext"))
    rec.meas.externals.push_back({e.at(0).get<int>(), e.at(1).get<int>(), e.at(2).get<bool>(),
                                  e.at(3).get<double>(), cfg.range_var});
  for (const auto& m : j.at("int"))
    rec.meas.internals.push_back({m.at(0).get<int>(), m.at(1).get<double>(), cfg.internal_var});
  return rec;
}

}  // namespace

std::vector<SlotRecord> roll_realization(const Scenario& cfg, int realization, int n_slots) {
  std::vector<SlotRecord> out;
  out.reserve(n_slots);
  Rng place(derive_stream(cfg.seed, "placement", static_cast<std::uint64_t>(realization)));
  NetworkState st = generate_scenario(cfg, place);
  for (int t = 0; t < n_slots; ++t) {
    if (t > 0) {
      Rng mob(derive_stream(cfg.seed, "mobility", static_cast<std::uint64_t>(realization),
                            static_cast<std::uint64_t>(t)));
      step_mobility(st, cfg, mob);
    }
    Rng noise(derive_stream(cfg.seed, "noise", static_cast<std::uint64_t>(realization),
                            static_cast<std::uint64_t>(t)));
    SlotRecord rec;
    rec.realization = realization;
    rec.state = st;
    rec.meas = sense(st, cfg, noise);
    out.push_back(std::move(rec));
  }
  return out;
}

void build_dataset(const Scenario& cfg, int n_realizations, int n_slots,
                   const std::string& path) {
  cfg.validate();
  if (n_realizations < 1 || n_slots < 1)
    throw std::invalid_argument("build_dataset: need at least one realization and slot");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("build_dataset: cannot open " + path);

  {
    NetworkState probe = generate_scenario(cfg);
    nlohmann::ordered_json h;
    h["kind"] = "header";
    h["format_version"] = 1;
    h["scenario"] = nlohmann::ordered_json::parse(to_json(cfg));
    h["n_realizations"] = n_realizations;
    h["n_slots"] = n_slots;
    auto anchors = nlohmann::ordered_json::array();
    for (const auto& a : probe.anchors) anchors.push_back({a.x, a.y});
    h["anchors"] = std::move(anchors);
    out << h.dump() << '\n';
  }

  // Render realizations in parallel a chunk at a time, write in order.
  const int chunk = 8;
  for (int base = 0; base < n_realizations; base += chunk) {
    const int hi = std::min(base + chunk, n_realizations);
    std::vector<std::string> rendered(hi - base);
#pragma omp parallel for schedule(static)
    for (int r = base; r < hi; ++r) {
      auto records = roll_realization(cfg, r, n_slots);
      std::string text;
      for (const auto& rec : records) {
        text += slot_to_json(rec).dump();
        text += '\n';
      }
      rendered[r - base] = std::move(text);
    }
    for (const auto& text : rendered) out << text;
  }
  if (!out) throw std::runtime_error("build_dataset: write failure on " + path);
}

TrajectoryDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_dataset: empty file " + path);
  auto header = nlohmann::json::parse(line);
  if (header.value("kind", "") != "header")
    throw std::runtime_error("load_dataset: missing header line");

  TrajectoryDataset ds;
  ds.scenario = scenario_from_json(header.at("scenario").dump());
  ds.n_realizations = header.at("n_realizations").get<int>();
  ds.n_slots = header.at("n_slots").get<int>();
  std::vector<Vec2> anchors;
  for (const auto& a : header.at("anchors"))
    anchors.push_back({a.at(0).get<double>(), a.at(1).get<double>()});

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ds.records.push_back(slot_from_json(nlohmann::json::parse(line), ds.scenario, anchors));
  }
  if (ds.records.size() != static_cast<size_t>(ds.n_realizations) * ds.n_slots)
    throw std::runtime_error("load_dataset: record count does not match header");
  return ds;
}

}  // namespace fcpmp::sim
