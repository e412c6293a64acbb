// SPDX-License-Identifier: Apache-2.0
//
// Full model wiring: proxy encoder -> optional aligner -> optional
// enhancer -> prediction head, with a named parameter registry shared by
// the optimizer and the checkpoint format.

#pragma once

#include <cstdint>
#include <string>

#include "mtcm/head.hpp"
#include "mtcm/mtcm.hpp"
#include "mtcm/synth.hpp"

namespace mtcm {

struct ModelConfig {
  SceneConfig scene;
  int code_dim = 64;
  int channels = 64;
  int heads = 4;
  int l1 = 2;            // aligner depth
  int l2 = 2;            // enhancer depth
  int kernel_size = 3;   // temporal convolution
  double sigma = 0.05;   // token noise std
  bool aligner_on = true;
  bool mce_on = true;

  bool operator==(const ModelConfig&) const = default;
};

struct Model {
  ModelConfig cfg;
  ProxyEncoderParams proxy;
  MtcmState mtcm;
  HeadParams head;

  void collect(ParamRefs& out);  // names under proxy. / mtcm. / head.
};

Model make_model(const ModelConfig& cfg, std::uint64_t seed);

/// One scene pass. Which modules run is decided by the caller, so the
/// training stages and the ablation grid share this code path.
struct SceneForward {
  Tensor q_hat;                    // [T x N x C] tokens entering the head
  Tensor logits;                   // [T x N]
  Tensor mask_logits;              // [T x N x P]
  std::vector<Permutation> perms;  // empty when the aligner is off
};

/// `bound` holds the parameter set to evaluate with; tracked fields make
/// the pass differentiable, untracked fields stay off the tape.
SceneForward forward_scene(const Model& bound, const SyntheticScene& scene,
                           std::uint64_t noise_seed, bool use_aligner, bool use_mce);

}  // namespace mtcm
