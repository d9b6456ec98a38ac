#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "fcpmp/engine.hpp"
#include "fcpmp/gnn.hpp"
#include "fcpmp/sim.hpp"

namespace fcpmp::train {

// One recorded fusion: the message snapshot an agent fused at a recorded
// iteration, plus that agent's true position for the slot.
struct ReplayItem {
  eng::AgentInputs inputs;
  Vec2 truth{};
};

// Rolls the engine over every realization in the dataset with `ws` as the
// enhancer and collects a ReplayItem for each agent/slot/recorded-iteration
// that fused at least one spatial message. sched.record_inputs selects the
// iterations (None is promoted to Final). Requires ExactQuadratic fusion.
std::vector<ReplayItem> collect_replay(const sim::TrajectoryDataset& data,
                                       const gnn::WeightStore& ws,
                                       const eng::IterationSchedule& sched,
                                       const eng::ChebPolicy& policy);

struct ReplayLoss {
  double rmse = 0;    // position RMSE over the included items
  int included = 0;   // items whose replayed fusion was clean under `ws`
};

// Re-runs enhancement and fusion for each item under `ws` and evaluates the
// RMSE of the resulting estimates against the recorded truths. Items whose
// fused precision needed eigenvalue repair or whose step exceeds the recorded
// trust cap are excluded: those repairs are not differentiable. Incoming
// message coefficients and node attributes are snapshots, so no gradient
// crosses iterations or slots.
ReplayLoss replay_loss(std::span<const ReplayItem> items,
                       const gnn::WeightStore& ws);

// replay_loss plus dL/d(weights) accumulated into `grads` in item order.
// offset_penalty > 0 adds lambda * mean over refined edges of |offset|^2 to
// the objective the gradients describe (the returned rmse stays the plain
// positioning loss so histories remain comparable across penalty settings).
ReplayLoss replay_loss_and_grads(std::span<const ReplayItem> items,
                                 const gnn::WeightStore& ws,
                                 gnn::WeightGrads& grads,
                                 double offset_penalty = 0.0);

struct TrainConfig {
  int epochs = 50;
  double lr_start = 2e-3;
  double lr_end = 1e-5;
  int batch = 0;  // items per Adam step; 0 takes the whole replay set at once
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool all_iterations = false;  // loss over every iteration, not just the last
  // Snapshot refresh cadence: the epochs are split evenly into this many
  // rounds, and each round re-collects the replay set under the weights it
  // starts from. One round trains entirely on snapshots of the untrained
  // engine; more rounds keep the training distribution near the live one.
  int rounds = 1;
  // Weight on the mean squared additive offset across refined edges. The
  // offsets are softplus outputs and so strictly positive; left unchecked
  // the refiner happily buys a small average-error win by pushing every
  // estimate in one direction, which wrecks the already-tight fusions.
  double offset_penalty = 0.0;
  std::uint64_t init_seed = 1;
};

// Adam moment estimates, shaped like the weight store they update.
struct AdamState {
  gnn::WeightGrads m, v;
  int t = 0;
};

AdamState make_adam_state(const gnn::WeightStore& ws);

// One bias-corrected Adam update. Zero gradients on a fresh state leave the
// weights bit-identical.
void adam_step(gnn::WeightStore& ws, const gnn::WeightGrads& grads,
               AdamState& st, double lr, const TrainConfig& cfg);

struct EpochStat {
  int epoch = 0;
  double lr = 0;
  double train_rmse = 0;
};

struct TrainResult {
  gnn::WeightStore weights;
  std::vector<EpochStat> history;
};

// Full loop: per epoch, re-rolls the dataset with the current weights,
// replays the recorded fusions, and applies Adam with the learning rate
// decaying exponentially from lr_start to lr_end across epochs. The logged
// train_rmse is the replay loss before that epoch's update. Throws
// std::runtime_error when training diverges: the loss turns non-finite, every
// recorded fusion replays unusable, or a weight leaves the finite range.
TrainResult train(const sim::TrajectoryDataset& data,
                  const eng::IterationSchedule& sched,
                  const eng::ChebPolicy& policy, const TrainConfig& cfg);

// CSV with columns epoch,lr,train_rmse.
void write_train_log(std::ostream& out, std::span<const EpochStat> history);

}  // namespace fcpmp::train
