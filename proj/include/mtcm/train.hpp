// SPDX-License-Identifier: Apache-2.0
//
// Module-wise training: stage 1 fits the proxy encoder and the head with
// the consistency stack bypassed, stage 2 freezes them and trains the
// aligner, stage 3 freezes all prior work and trains the enhancer. A
// joint mode trains every enabled module at once for the ablation grid.
// Frozen parameters are bound off the autodiff tape, so no gradient
// storage ever exists for them.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mtcm/model.hpp"

namespace mtcm {

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int step_count = 0;
  std::vector<std::vector<double>> m, v;

  explicit AdamState(double learning_rate = 1e-3) : lr(learning_rate) {}
  void init(const std::vector<int>& sizes);
};

struct StageSpec {
  std::string name;  // proxy | aligner | mce | joint
  int epochs = 30;
  double lr = 1e-3;
};

struct StagePlan {
  std::vector<StageSpec> stages;
  int batch_size = 2;
};

/// proxy[, aligner][, mce] in freeze order, 30 epochs at 1e-3 each.
StagePlan default_stage_plan(bool aligner_on, bool mce_on, int epochs_per_stage = 30,
                             double lr = 1e-3);

/// One stage training every enabled module, epoch-matched to the staged
/// plan it replaces.
StagePlan joint_plan(bool aligner_on, bool mce_on, int total_epochs = 30, double lr = 1e-3);

/// Rejects unknown stage names, duplicates, joint mixed with staged,
/// orderings that would train a module before its prerequisites are
/// frozen, and stages for disabled modules.
void validate_plan(const StagePlan& plan, const ModelConfig& cfg);

/// Stage-bound view of the model: handles parallel the master registry,
/// tracked exactly for the stage's trainable parameters.
struct StageBinding {
  Model bound;
  ParamRefs master;             // names + update targets in the live model
  std::vector<Tensor> handles;  // same order; tracked() marks trainable
  std::vector<int> trainable;   // indices into the registry
  bool use_aligner = false;
  bool use_mce = false;
};

StageBinding bind_for_stage(Model& model, Graph& g, const std::string& stage);

/// Bias-corrected Adam update; a null gradient slot counts as zero.
/// Throws on non-finite gradients, naming the parameter.
void adam_apply(AdamState& state, const std::vector<Tensor*>& params,
                const std::vector<const std::vector<double>*>& grads,
                const std::vector<std::string>& names);

/// adam_apply over the binding's trainable set, with gradients looked up
/// from the graph.
void adam_step(AdamState& state, Graph& g, StageBinding& binding);

struct EpochLog {
  std::string stage;
  int epoch = 0;  // within the stage
  double loss = 0.0, ce = 0.0, bce = 0.0, dice = 0.0;
};

/// Runs the plan over the training scenes. Scene order reshuffles each
/// epoch and token noise redraws per (epoch, scene), both derived from
/// `seed`. When `log` is given, one JSON object per epoch is written.
std::vector<EpochLog> train_stagewise(Model& model, const std::vector<SyntheticScene>& scenes,
                                      const StagePlan& plan, std::uint64_t seed,
                                      std::ostream* log = nullptr);

/// Stable mix of a seed with stream indices, for per-epoch reshuffles
/// and per-scene noise draws.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace mtcm
