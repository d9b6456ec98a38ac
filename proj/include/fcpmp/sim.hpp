#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fcpmp/geometry.hpp"
#include "fcpmp/rng.hpp"

namespace fcpmp::sim {

struct MobilityModel {
  double d_mean = 2.0;
  double d_var = 1.0;
};

struct Scenario {
  Rect area{0, 200, 0, 200};
  Rect deploy_zone{20, 180, 20, 180};
  int n_agents = 50;
  int n_anchors = 13;
  double comm_radius = 20.0;
  double range_var = 0.1;
  double internal_var = 0.1;
  MobilityModel mobility{};
  int l_max = 20;
  std::uint64_t seed = 1;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

// The small dense training network and the wide evaluation network.
Scenario train_scenario();
Scenario wide_scenario(int n_agents);

std::string to_json(const Scenario& s);
Scenario scenario_from_json(const std::string& text);

struct Agent {
  int id = 0;
  Vec2 pos{};
  Vec2 displacement{};  // true movement into this slot; zero for fresh agents
  bool fresh = true;    // placed this slot (or at t=0): no prior estimate
};

struct NetworkState {
  int t = 0;
  std::vector<Agent> agents;
  std::vector<Vec2> anchors;
  // Adjacency by index, boundary-inclusive comm radius. agent_neighbors is
  // symmetric; anchor_neighbors lists anchors heard by each agent.
  std::vector<std::vector<int>> agent_neighbors;
  std::vector<std::vector<int>> anchor_neighbors;
  int next_id = 0;
};

void rebuild_adjacency(NetworkState& state, double comm_radius);

// Uniform agent placement in the deploy zone plus anchors on a deterministic
// cell-centered lattice over the area (row-major, first n_anchors cells of
// the smallest square grid that fits them).
NetworkState generate_scenario(const Scenario& cfg);
NetworkState generate_scenario(const Scenario& cfg, Rng& rng);

// Each agent steps d ~ N(d_mean, d_var) (negative draws redrawn) along
// theta ~ U(0, 2pi). Agents leaving the area are replaced by fresh agents
// with new ids placed uniformly in the deploy zone.
void step_mobility(NetworkState& state, const Scenario& cfg, Rng& rng);

struct ExternalObs {
  int receiver = 0;  // agent index
  int source = 0;    // agent index or anchor index
  bool source_is_anchor = false;
  double z = 0;
  double var = 0;
};

struct InternalObs {
  int agent = 0;  // agent index
  double z = 0;
  double var = 0;
};

struct MeasurementSet {
  std::vector<ExternalObs> externals;
  std::vector<InternalObs> internals;
};

// One noisy range per directed link toward an agent plus one displacement
// magnitude per non-fresh agent. Ranges are floored at zero.
MeasurementSet sense(const NetworkState& state, const Scenario& cfg, Rng& rng);

// Exact triangle count on the agent-agent adjacency.
long long count_triangles(const NetworkState& state);

struct LoopCensus {
  double mean = 0;
  double stddev = 0;
  int trials = 0;
};

// Monte-Carlo triangle mean over fresh placements of the same scenario.
LoopCensus monte_carlo_loops(const Scenario& cfg, int trials);

struct SlotRecord {
  int realization = 0;
  NetworkState state;
  MeasurementSet meas;
};

struct TrajectoryDataset {
  Scenario scenario;
  int n_realizations = 0;
  int n_slots = 0;
  std::vector<SlotRecord> records;  // realization-major, slot order within
};

// Streams realizations to a JSON-lines file: one header line, then one line
// per (realization, slot). Byte-identical for identical configs.
void build_dataset(const Scenario& cfg, int n_realizations, int n_slots,
                   const std::string& path);
TrajectoryDataset load_dataset(const std::string& path);

// In-memory equivalent used by training and the engine tests.
std::vector<SlotRecord> roll_realization(const Scenario& cfg, int realization, int n_slots);

}  // namespace fcpmp::sim
