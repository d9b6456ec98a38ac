#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fcpmp/chebyshev.hpp"
#include "fcpmp/fusion.hpp"
#include "fcpmp/gnn.hpp"
#include "fcpmp/messages.hpp"
#include "fcpmp/sim.hpp"

namespace fcpmp::eng {

// How the distance surface is chosen per message. RangeScaled picks, from a
// small table of unit-range sqrt fits on narrow band domains, the band
// containing the receiver's folded offset from the sender, rescaled by the
// measured range (exact homogeneity). Bands keep the quadratic truncation
// accurate at the receiver and always fold. Fixed evaluates one
// user-supplied surface everywhere; fold applies to Fixed only.
// range_factor scales the temporal (step length) surface domain.
struct ChebPolicy {
  enum class Mode { RangeScaled, Fixed };
  Mode mode = Mode::RangeScaled;
  double range_factor = 2.0;
  bool fold = true;
  cheb::ChebCoeffMatrix fixed_spatial;
  cheb::ChebCoeffMatrix fixed_temporal;
};

// The published coefficient table on its best-matching domain, applied
// everywhere, for fidelity experiments.
ChebPolicy published_surface_policy();

enum class RecordInputs { None, Final, All };

struct IterationSchedule {
  int l_max = 20;
  fuse::FusionMode fusion_mode = fuse::FusionMode::ExactQuadratic;
  const gnn::WeightStore* enhancer = nullptr;
  RecordInputs record_inputs = RecordInputs::None;
};

struct AgentSlotInput {
  int id = 0;
  fuse::GaussianBelief prior;
  bool informative = false;
  std::optional<double> internal_z;
  double internal_var = 0;
};

struct EdgeSnapshot {
  msg::MessageParams omega;  // raw coefficients before enhancement
  gnn::NodeAttr attr;        // sender attributes alongside
};

struct AgentInputs {
  msg::MessageParams temporal;
  std::vector<EdgeSnapshot> edges;
  Vec2 frame{};      // receiver-frame origin the messages are expressed in
  double trust = 0;  // step cap that applied to this fusion
  // The fused form was indefinite or the step hit the trust cap; such
  // fusions are not differentiable targets and are excluded from training.
  bool clamped = false;
};

struct SlotResult {
  // trace[l][i] is agent i's belief after iteration l+1.
  std::vector<std::vector<fuse::GaussianBelief>> trace;
  std::vector<fuse::QuadraticForm> final_forms;  // world coordinates
  std::vector<char> informative;
  std::vector<char> fused_spatial;  // agent saw at least one spatial message
  // inputs[l][i] filled according to IterationSchedule.record_inputs.
  std::vector<std::vector<AgentInputs>> inputs;
  long long messages_built = 0;
  long long enhancer_calls = 0;
};

SlotResult run_slot(const sim::NetworkState& net,
                    std::span<const AgentSlotInput> agents,
                    const sim::MeasurementSet& meas,
                    const IterationSchedule& sched, const ChebPolicy& policy);

// Single-threaded twin of run_slot; produces bit-identical results.
SlotResult run_slot_reference(const sim::NetworkState& net,
                              std::span<const AgentSlotInput> agents,
                              const sim::MeasurementSet& meas,
                              const IterationSchedule& sched,
                              const ChebPolicy& policy);

// Message construction used by the slot engine, exposed for testing and for
// the trainer. Every message is expressed in receiver-centered coordinates
// xi = x - frame, where frame is the receiver's current estimate: the
// quadratic truncation of the exponent is only accurate near its expansion
// point, so the expansion must track the receiver, not the world origin.
// frame also drives the per-axis folding (toward the receiver's side of the
// sender). Fused means must be shifted back by frame.
msg::MessageParams make_anchor_message(double z, double var, Vec2 anchor,
                                       Vec2 frame, const ChebPolicy& policy);
msg::MessageParams make_agent_message(double z, double var,
                                      const msg::ModeCenters& sender,
                                      Vec2 frame, const ChebPolicy& policy);
msg::MessageParams make_temporal_message(double z, double var, Vec2 prev_est,
                                         Vec2 frame, const ChebPolicy& policy);

// Rewrites a fitted surface evaluated at folded difference coordinates
// sign*(p - center) as coefficients over Chebyshev basis functions of the
// raw world coordinates (exact; enables the closed-form message reads).
cheb::ChebCoeffMatrix pull_back(const cheb::ChebCoeffMatrix& fit, Vec2 signs,
                                Vec2 center);

const cheb::ChebCoeffMatrix& unit_quarter_fit();    // sqrt on [0,1]^2
const cheb::ChebCoeffMatrix& unit_symmetric_fit();  // sqrt on [-1,1]^2
cheb::ChebCoeffMatrix scaled_fit(const cheb::ChebCoeffMatrix& unit, double s);

fuse::GaussianBelief uninformative_prior(const Rect& deploy_zone);

// Intersection of circles |p-c1|=z1, |p-c2|=z2; empty when they do not
// cross transversally.
std::optional<msg::ModeCenters> circle_intersection(Vec2 c1, double z1, Vec2 c2,
                                                    double z2);

struct SlotOutcome {
  SlotResult result;
  std::vector<int> agent_ids;
  std::vector<Vec2> truth;
  int t = 0;
};

struct RealizationResult {
  std::vector<SlotOutcome> slots;
};

// Runs the engine over a rolled realization, carrying final beliefs across
// slots as priors keyed by agent id; replaced agents restart uninformative.
RealizationResult run_realization(const sim::Scenario& cfg,
                                  std::span<const sim::SlotRecord> slots,
                                  const IterationSchedule& sched,
                                  const ChebPolicy& policy);

void write_trace_header(std::ostream& out);
void append_slot_trace(std::ostream& out, const std::string& run_id,
                       const std::string& method, const SlotOutcome& slot);

}  // namespace fcpmp::eng
