// SPDX-License-Identifier: Apache-2.0
//
// Attention and feed-forward building blocks: multi-head attention, the
// residual attention used for cross-frame denoising, pre-norm cross
// attention, FFN, temporal 1D convolution and axis-wise self-attention.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mtcm/rng.hpp"
#include "mtcm/tensor.hpp"

namespace mtcm {


struct MhaParams {
  int heads = 0;
  std::vector<Tensor> wq;  // per head [C x C/H]
  std::vector<Tensor> wk;
  std::vector<Tensor> wv;
  Tensor wo;               // [C x C]

  int channels() const { return wo.empty() ? 0 : wo.dim(0); }
  MhaParams tracked(Graph& g) const;
  void collect(const std::string& prefix, ParamRefs& out);
};

struct FfnParams {
  Tensor w1;  // [C x 4C]
  Tensor b1;  // [4C]
  Tensor w2;  // [4C x C]
  Tensor b2;  // [C]

  FfnParams tracked(Graph& g) const;
  void collect(const std::string& prefix, ParamRefs& out);
};

struct ConvParams {
  Tensor kernel;  // [ks x C_in x C_out], ks odd
  Tensor bias;    // [C_out]

  int kernel_size() const { return kernel.dim(0); }
  ConvParams tracked(Graph& g) const;
  void collect(const std::string& prefix, ParamRefs& out);
};

MhaParams make_mha_params(int channels, int heads, Rng& rng);
FfnParams make_ffn_params(int channels, Rng& rng);
ConvParams make_conv_params(int kernel_size, int c_in, int c_out, Rng& rng);

/// Normalize the last axis to zero mean / unit variance, then scale and
/// shift. Slices whose variance falls below 1e-5 are mapped through a
/// floored denominator, so constant slices come out exactly zero.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

/// layer_norm with unit gain and zero bias.
Tensor layer_norm_unit(const Tensor& x);

/// Scaled dot-product multi-head attention; scale is 1/sqrt(C/H).
Tensor mha(const Tensor& q, const Tensor& k, const Tensor& v, const MhaParams& p);

/// Residual attention, literally d + mha(q, k, v): no normalization.
Tensor rca(const Tensor& d, const Tensor& q, const Tensor& k, const Tensor& v,
           const MhaParams& p);

/// x + mha(layer_norm(x), ctx, ctx).
Tensor cross_attn(const Tensor& x, const Tensor& ctx, const MhaParams& p);

/// x + affine(relu(affine(layer_norm(x)))).
Tensor ffn(const Tensor& x, const FfnParams& p);

/// Length-preserving temporal convolution of [T x C_in] with zero padding.
Tensor conv1d_time(const Tensor& x, const ConvParams& p);

enum class AttnAxis { time, instance };

/// Residual pre-norm self-attention over one axis of a [T x N x C] cube;
/// the other axis is treated as batch.
Tensor self_attn_axis(const Tensor& cube, AttnAxis axis, const MhaParams& p);

}  // namespace mtcm
