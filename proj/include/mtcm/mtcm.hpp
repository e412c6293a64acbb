// SPDX-License-Identifier: Apache-2.0
//
// The temporal-consistency stack: an aligner that matches instance tokens
// across frames and denoises them with cross-frame attention, followed by
// a multi-context enhancer mixing temporal, inter-instance and language
// context.

#pragma once

#include <vector>

#include "mtcm/assignment.hpp"
#include "mtcm/nn.hpp"
#include "mtcm/rng.hpp"
#include "mtcm/tensor.hpp"

namespace mtcm {

struct AlignerBlockParams {
  MhaParams rca;  // cross-frame denoising attention
  MhaParams ca;   // language cross-attention
  FfnParams ffn;

  AlignerBlockParams tracked(Graph& g) const;
  void collect(const std::string& prefix, ParamRefs& out);
};

struct MceBlockParams {
  MhaParams tsa;    // attention along time, per instance
  ConvParams conv;  // temporal convolution, per instance
  MhaParams isa;    // attention across instances, per frame
  MhaParams ca;     // language cross-attention, per frame

  MceBlockParams tracked(Graph& g) const;
  void collect(const std::string& prefix, ParamRefs& out);
};

struct MtcmState {
  int channels = 0;
  int heads = 0;
  std::vector<AlignerBlockParams> aligner;  // L1 blocks
  std::vector<MceBlockParams> mce;          // L2 blocks

  MtcmState tracked(Graph& g) const;
  void collect(const std::string& prefix, ParamRefs& out);
};

MtcmState make_mtcm_state(int channels, int heads, int l1, int l2, int kernel_size, Rng& rng);

/// One aligner block: carry the previous layer's tokens, query with the
/// previous frame's output, attend into the current frame's aligned
/// tokens, then language cross-attention and FFN.
Tensor aligner_block(const Tensor& i_prev_layer, const Tensor& i_prev_frame,
                     const Tensor& o_aligned, const Tensor& s_e, const AlignerBlockParams& p);

struct AlignerForwardResult {
  Tensor outputs;                  // [T x N x C] final-layer tokens per frame
  Tensor aligned;                  // [T x N x C] matched tokens before denoising
  std::vector<Permutation> perms;  // from align_sequence
};

/// Align the sequence, then run the aligner blocks frame by frame. The
/// first frame stands in for its own predecessor; each later frame
/// queries with the previous frame's final-layer output.
AlignerForwardResult aligner_forward(const Tensor& tokens, const Tensor& s_e,
                                     const MtcmState& state);

/// One enhancer block: time attention, temporal convolution, instance
/// attention, language cross-attention.
Tensor mce_block(const Tensor& q_in, const Tensor& s_e, const MceBlockParams& p);

/// Sequential enhancer blocks.
Tensor mce_forward(const Tensor& i_cube, const Tensor& s_e, const MtcmState& state);

struct MtcmForwardResult {
  Tensor enhanced;         // [T x N x C] enhancer output
  Tensor aligner_outputs;  // [T x N x C]
  Tensor aligned;          // [T x N x C]
  std::vector<Permutation> perms;
};

/// Full stack: aligner then enhancer.
MtcmForwardResult mtcm_forward(const Tensor& tokens, const Tensor& s_e, const MtcmState& state);

}  // namespace mtcm
