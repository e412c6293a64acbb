// SPDX-License-Identifier: Apache-2.0

#include "mtcm/train.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace mtcm {

void AdamState::init(const std::vector<int>& sizes) {
  m.clear();
  v.clear();
  for (int n : sizes) {
    m.emplace_back(static_cast<std::size_t>(n), 0.0);
    v.emplace_back(static_cast<std::size_t>(n), 0.0);
  }
  step_count = 0;
}

StagePlan default_stage_plan(bool aligner_on, bool mce_on, int epochs_per_stage, double lr) {
  StagePlan plan;
  plan.stages.push_back({"proxy", epochs_per_stage, lr});
  if (aligner_on) plan.stages.push_back({"aligner", epochs_per_stage, lr});
  if (mce_on) plan.stages.push_back({"mce", epochs_per_stage, lr});
  return plan;
}

StagePlan joint_plan(bool aligner_on, bool mce_on, int total_epochs, double lr) {
  (void)aligner_on;
  (void)mce_on;
  StagePlan plan;
  plan.stages.push_back({"joint", total_epochs, lr});
  return plan;
}

void validate_plan(const StagePlan& plan, const ModelConfig& cfg) {
  if (plan.stages.empty()) throw std::invalid_argument("validate_plan: empty plan");
  if (plan.batch_size <= 0) throw std::invalid_argument("validate_plan: batch size must be positive");

  static const std::vector<std::string> order{"proxy", "aligner", "mce"};
  bool joint = false;
  std::set<std::string> seen;
  int last_rank = -1;
  for (const StageSpec& s : plan.stages) {
    if (s.epochs < 0 || s.lr <= 0.0) {
      throw std::invalid_argument("validate_plan: bad epochs or lr in stage " + s.name);
    }
    if (s.name == "joint") {
      joint = true;
      continue;
    }
    auto it = std::find(order.begin(), order.end(), s.name);
    if (it == order.end()) throw std::invalid_argument("validate_plan: unknown stage " + s.name);
    if (!seen.insert(s.name).second) {
      throw std::invalid_argument("validate_plan: duplicate stage " + s.name);
    }
    const int rank = static_cast<int>(it - order.begin());
    if (rank <= last_rank) {
      throw std::invalid_argument("validate_plan: stage " + s.name +
                                  " would train before its prerequisites are frozen");
    }
    last_rank = rank;
  }
  if (joint && plan.stages.size() != 1) {
    throw std::invalid_argument("validate_plan: joint mode must be the only stage");
  }
  if (!joint && plan.stages.front().name != "proxy") {
    throw std::invalid_argument("validate_plan: staged training must start with the proxy stage");
  }
  if (seen.count("aligner") && !cfg.aligner_on) {
    throw std::invalid_argument("validate_plan: aligner stage with the aligner disabled");
  }
  if (seen.count("mce") && !cfg.mce_on) {
    throw std::invalid_argument("validate_plan: mce stage with the enhancer disabled");
  }
}

StageBinding bind_for_stage(Model& model, Graph& g, const std::string& stage) {
  StageBinding b;
  b.bound.cfg = model.cfg;

  auto mtcm_with = [&](bool track_aligner, bool track_mce) {
    MtcmState s;
    s.channels = model.mtcm.channels;
    s.heads = model.mtcm.heads;
    for (const auto& blk : model.mtcm.aligner) s.aligner.push_back(track_aligner ? blk.tracked(g) : blk);
    for (const auto& blk : model.mtcm.mce) s.mce.push_back(track_mce ? blk.tracked(g) : blk);
    return s;
  };

  if (stage == "proxy") {
    b.bound.proxy = model.proxy.tracked(g);
    b.bound.head = model.head.tracked(g);
    b.bound.mtcm = mtcm_with(false, false);
    b.use_aligner = false;
    b.use_mce = false;
  } else if (stage == "aligner") {
    b.bound.proxy = model.proxy;
    b.bound.head = model.head;
    b.bound.mtcm = mtcm_with(true, false);
    b.use_aligner = true;
    b.use_mce = false;
  } else if (stage == "mce") {
    b.bound.proxy = model.proxy;
    b.bound.head = model.head;
    b.bound.mtcm = mtcm_with(false, true);
    b.use_aligner = model.cfg.aligner_on;
    b.use_mce = true;
  } else if (stage == "joint") {
    b.bound.proxy = model.proxy.tracked(g);
    b.bound.head = model.head.tracked(g);
    b.bound.mtcm = mtcm_with(model.cfg.aligner_on, model.cfg.mce_on);
    b.use_aligner = model.cfg.aligner_on;
    b.use_mce = model.cfg.mce_on;
  } else {
    throw std::invalid_argument("bind_for_stage: unknown stage " + stage);
  }

  model.collect(b.master);
  ParamRefs bound_refs;
  b.bound.collect(bound_refs);
  if (bound_refs.size() != b.master.size()) {
    throw std::logic_error("bind_for_stage: registry size mismatch");
  }
  b.handles.reserve(bound_refs.size());
  for (std::size_t i = 0; i < bound_refs.size(); ++i) {
    b.handles.push_back(*bound_refs[i].second);
    if (b.handles.back().tracked()) b.trainable.push_back(static_cast<int>(i));
  }
  return b;
}

void adam_apply(AdamState& state, const std::vector<Tensor*>& params,
                const std::vector<const std::vector<double>*>& grads,
                const std::vector<std::string>& names) {
  if (params.size() != grads.size() || params.size() != names.size() ||
      state.m.size() != params.size()) {
    throw std::invalid_argument("adam_apply: state does not match the parameter set");
  }
  ++state.step_count;
  const double bc1 = 1.0 - std::pow(state.beta1, state.step_count);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step_count);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor* param = params[i];
    const int n = param->size();
    if (static_cast<int>(state.m[i].size()) != n) {
      throw std::invalid_argument("adam_apply: moment shape mismatch for " + names[i]);
    }
    const std::vector<double>* grad = grads[i];
    for (int j = 0; j < n; ++j) {
      const double gj = grad ? (*grad)[static_cast<std::size_t>(j)] : 0.0;
      if (!std::isfinite(gj)) {
        throw std::runtime_error("adam_apply: non-finite gradient in " + names[i]);
      }
      double& mj = state.m[i][static_cast<std::size_t>(j)];
      double& vj = state.v[i][static_cast<std::size_t>(j)];
      mj = state.beta1 * mj + (1.0 - state.beta1) * gj;
      vj = state.beta2 * vj + (1.0 - state.beta2) * gj * gj;
      param->data()[j] -= state.lr * (mj / bc1) / (std::sqrt(vj / bc2) + state.eps);
    }
  }
}

void adam_step(AdamState& state, Graph& g, StageBinding& binding) {
  std::vector<Tensor*> params;
  std::vector<const std::vector<double>*> grads;
  std::vector<std::string> names;
  for (int idx : binding.trainable) {
    params.push_back(binding.master[static_cast<std::size_t>(idx)].second);
    grads.push_back(g.grad(binding.handles[static_cast<std::size_t>(idx)]));
    names.push_back(binding.master[static_cast<std::size_t>(idx)].first);
  }
  adam_apply(state, params, grads, names);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xc2b2ae3d27d4eb4fULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<EpochLog> train_stagewise(Model& model, const std::vector<SyntheticScene>& scenes,
                                      const StagePlan& plan, std::uint64_t seed,
                                      std::ostream* log) {
  validate_plan(plan, model.cfg);
  if (scenes.empty()) throw std::invalid_argument("train_stagewise: no training scenes");

  std::vector<EpochLog> history;
  const int S = static_cast<int>(scenes.size());
  int global_epoch = 0;

  for (const StageSpec& spec : plan.stages) {
    AdamState opt(spec.lr);
    bool opt_ready = false;

    for (int epoch = 0; epoch < spec.epochs; ++epoch, ++global_epoch) {
      std::vector<int> order(static_cast<std::size_t>(S));
      for (int i = 0; i < S; ++i) order[static_cast<std::size_t>(i)] = i;
      Rng shuffle_rng(mix_seed(seed, static_cast<std::uint64_t>(global_epoch)));
      shuffle_rng.shuffle(order);

      EpochLog entry;
      entry.stage = spec.name;
      entry.epoch = epoch;

      for (int start = 0; start < S; start += plan.batch_size) {
        const int count = std::min(plan.batch_size, S - start);
        Graph g;
        StageBinding binding = bind_for_stage(model, g, spec.name);
        if (!opt_ready) {
          std::vector<int> sizes;
          for (int idx : binding.trainable) {
            sizes.push_back(binding.master[static_cast<std::size_t>(idx)].second->size());
          }
          opt.init(sizes);
          opt_ready = true;
        }

        Tensor batch_loss = Tensor::scalar_of(0.0);
        for (int bi = 0; bi < count; ++bi) {
          const int sidx = order[static_cast<std::size_t>(start + bi)];
          const SyntheticScene& scene = scenes[static_cast<std::size_t>(sidx)];
          const std::uint64_t noise =
              mix_seed(seed, static_cast<std::uint64_t>(global_epoch) + 1,
                       static_cast<std::uint64_t>(sidx) + 1);
          SceneForward fwd =
              forward_scene(binding.bound, scene, noise, binding.use_aligner, binding.use_mce);
          Supervision sup =
              build_supervision(scene, binding.use_aligner ? &fwd.perms : nullptr);
          LossBreakdown parts = total_loss(fwd.logits, fwd.mask_logits, sup);
          batch_loss = add(batch_loss, parts.total);
          entry.loss += parts.total.scalar_value();
          entry.ce += parts.ce.scalar_value();
          entry.bce += parts.bce.scalar_value();
          entry.dice += parts.dice.scalar_value();
        }
        g.backward(scale(batch_loss, 1.0 / static_cast<double>(count)));
        adam_step(opt, g, binding);
      }

      entry.loss /= S;
      entry.ce /= S;
      entry.bce /= S;
      entry.dice /= S;
      history.push_back(entry);
      if (log != nullptr) {
        nlohmann::json j{{"stage", entry.stage}, {"epoch", entry.epoch},
                         {"loss", entry.loss},  {"ce", entry.ce},
                         {"bce", entry.bce},    {"dice", entry.dice}};
        (*log) << j.dump() << "\n";
      }
    }
  }
  return history;
}

}  // namespace mtcm
