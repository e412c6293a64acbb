// SPDX-License-Identifier: Apache-2.0
//
// Prediction head: picks the target among instance tokens by scoring
// them against pooled language features, and decodes per-slot masks by
// dotting mask embeddings with pixel features. Loss = cross-entropy on
// the target slot + weighted BCE and Dice on the supervised mask.

#pragma once

#include <cstdint>
#include <vector>

#include "mtcm/assignment.hpp"
#include "mtcm/rng.hpp"
#include "mtcm/synth.hpp"
#include "mtcm/tensor.hpp"

namespace mtcm {

struct HeadParams {
  Tensor mask_w1, mask_b1;  // C -> C
  Tensor mask_w2, mask_b2;  // C -> C
  Tensor score_w;           // C -> C target-scoring projection

  int channels() const { return score_w.empty() ? 0 : score_w.dim(0); }
  HeadParams tracked(Graph& g) const;
  void collect(const std::string& prefix, ParamRefs& out);
};

HeadParams make_head_params(int channels, Rng& rng);

/// [T x N] logits: scaled dot of the projected token with mean-pooled
/// language rows, scale 1/sqrt(C).
Tensor target_scores(const Tensor& q_hat, const Tensor& s_e, const HeadParams& p);

/// [T x N x P] mask logits: two-layer mask embedding of each token dotted
/// with every pixel feature of its frame.
Tensor predict_mask_logits(const Tensor& q_hat, const Tensor& pixel_features,
                           const HeadParams& p);

/// Sigmoid of predict_mask_logits; values in (0,1).
Tensor predict_mask(const Tensor& q_hat, const Tensor& pixel_features, const HeadParams& p);

/// Per-frame supervision: which slot carries the target for
/// classification and for the mask loss, and the ground-truth mask bits
/// for that slot. -1 disables the respective term on that frame.
struct Supervision {
  std::vector<int> ce_slot;                          // [T]
  std::vector<int> mask_slot;                        // [T]
  std::vector<std::vector<std::uint8_t>> mask_bits;  // [T][G*G]
};

/// Locate the target's slot per frame through the identity map, composed
/// with the aligner's permutations when given. With permutations, frames
/// where the target is invisible supervise an empty mask at its modal
/// slot; without them such frames are skipped entirely.
Supervision build_supervision(const SyntheticScene& scene,
                              const std::vector<Permutation>* perms);

inline constexpr double kBceWeight = 2.0;
inline constexpr double kDiceWeight = 5.0;

struct LossBreakdown {
  Tensor total;  // ce + kBceWeight*bce + kDiceWeight*dice
  Tensor ce;     // mean over classified frames
  Tensor bce;    // mean over supervised pixels
  Tensor dice;   // mean over supervised frames
};

/// Stable binary cross-entropy from logits, mean over all entries.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

LossBreakdown total_loss(const Tensor& logits, const Tensor& mask_logits,
                         const Supervision& sup);

}  // namespace mtcm
