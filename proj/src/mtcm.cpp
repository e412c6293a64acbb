// SPDX-License-Identifier: Apache-2.0

#include "mtcm/mtcm.hpp"

#include <stdexcept>

namespace mtcm {

AlignerBlockParams AlignerBlockParams::tracked(Graph& g) const {
  return {rca.tracked(g), ca.tracked(g), ffn.tracked(g)};
}

void AlignerBlockParams::collect(const std::string& prefix, ParamRefs& out) {
  rca.collect(prefix + ".rca", out);
  ca.collect(prefix + ".ca", out);
  ffn.collect(prefix + ".ffn", out);
}

MceBlockParams MceBlockParams::tracked(Graph& g) const {
  return {tsa.tracked(g), conv.tracked(g), isa.tracked(g), ca.tracked(g)};
}

void MceBlockParams::collect(const std::string& prefix, ParamRefs& out) {
  tsa.collect(prefix + ".tsa", out);
  conv.collect(prefix + ".conv", out);
  isa.collect(prefix + ".isa", out);
  ca.collect(prefix + ".ca", out);
}

MtcmState MtcmState::tracked(Graph& g) const {
  MtcmState s;
  s.channels = channels;
  s.heads = heads;
  for (const AlignerBlockParams& b : aligner) s.aligner.push_back(b.tracked(g));
  for (const MceBlockParams& b : mce) s.mce.push_back(b.tracked(g));
  return s;
}

void MtcmState::collect(const std::string& prefix, ParamRefs& out) {
  for (std::size_t i = 0; i < aligner.size(); ++i) {
    aligner[i].collect(prefix + ".aligner" + std::to_string(i), out);
  }
  for (std::size_t i = 0; i < mce.size(); ++i) {
    mce[i].collect(prefix + ".mce" + std::to_string(i), out);
  }
}

MtcmState make_mtcm_state(int channels, int heads, int l1, int l2, int kernel_size, Rng& rng) {
  if (l1 < 1 || l2 < 1) {
    throw std::invalid_argument("mtcm state: block counts must be >= 1, got L1=" +
                                std::to_string(l1) + " L2=" + std::to_string(l2));
  }
  MtcmState s;
  s.channels = channels;
  s.heads = heads;
  for (int i = 0; i < l1; ++i) {
    s.aligner.push_back({make_mha_params(channels, heads, rng), make_mha_params(channels, heads, rng),
                         make_ffn_params(channels, rng)});
  }
  for (int i = 0; i < l2; ++i) {
    s.mce.push_back({make_mha_params(channels, heads, rng),
                     make_conv_params(kernel_size, channels, channels, rng),
                     make_mha_params(channels, heads, rng), make_mha_params(channels, heads, rng)});
  }
  return s;
}

Tensor aligner_block(const Tensor& i_prev_layer, const Tensor& i_prev_frame,
                     const Tensor& o_aligned, const Tensor& s_e, const AlignerBlockParams& p) {
  Tensor denoised = rca(i_prev_layer, i_prev_frame, o_aligned, o_aligned, p.rca);
  return ffn(cross_attn(denoised, s_e, p.ca), p.ffn);
}

AlignerForwardResult aligner_forward(const Tensor& tokens, const Tensor& s_e,
                                     const MtcmState& state) {
  if (state.aligner.empty()) throw std::invalid_argument("aligner_forward: no aligner blocks");
  AlignResult ar = align_sequence(tokens);
  const int T = tokens.dim(0);

  std::vector<Tensor> frame_outputs;
  frame_outputs.reserve(static_cast<std::size_t>(T));
  Tensor prev_frame = select_axis0(ar.aligned, 0);
  for (int t = 0; t < T; ++t) {
    Tensor o_aligned = select_axis0(ar.aligned, t);
    Tensor layer_in = o_aligned;
    for (const AlignerBlockParams& block : state.aligner) {
      layer_in = aligner_block(layer_in, prev_frame, o_aligned, s_e, block);
    }
    frame_outputs.push_back(layer_in);
    prev_frame = layer_in;
  }

  AlignerForwardResult res;
  res.outputs = stack_axis0(frame_outputs);
  res.aligned = ar.aligned;
  res.perms = std::move(ar.perms);
  return res;
}

Tensor mce_block(const Tensor& q_in, const Tensor& s_e, const MceBlockParams& p) {
  if (q_in.rank() != 3) throw std::invalid_argument("mce_block: [T x N x C] cube required");
  const int T = q_in.dim(0), N = q_in.dim(1);

  Tensor time_mixed = self_attn_axis(q_in, AttnAxis::time, p.tsa);
  std::vector<Tensor> convolved;
  convolved.reserve(static_cast<std::size_t>(N));
  for (int n = 0; n < N; ++n) {
    convolved.push_back(conv1d_time(select_axis1(time_mixed, n), p.conv));
  }
  Tensor q_dot = stack_axis1(convolved);

  Tensor inst_mixed = self_attn_axis(q_dot, AttnAxis::instance, p.isa);
  std::vector<Tensor> frames;
  frames.reserve(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    frames.push_back(cross_attn(select_axis0(inst_mixed, t), s_e, p.ca));
  }
  return stack_axis0(frames);
}

Tensor mce_forward(const Tensor& i_cube, const Tensor& s_e, const MtcmState& state) {
  if (state.mce.empty()) throw std::invalid_argument("mce_forward: no enhancer blocks");
  Tensor x = i_cube;
  for (const MceBlockParams& block : state.mce) x = mce_block(x, s_e, block);
  return x;
}

MtcmForwardResult mtcm_forward(const Tensor& tokens, const Tensor& s_e, const MtcmState& state) {
  AlignerForwardResult a = aligner_forward(tokens, s_e, state);
  MtcmForwardResult res;
  res.enhanced = mce_forward(a.outputs, s_e, state);
  res.aligner_outputs = a.outputs;
  res.aligned = a.aligned;
  res.perms = std::move(a.perms);
  return res;
}

}  // namespace mtcm
