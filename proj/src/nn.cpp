// SPDX-License-Identifier: Apache-2.0

#include "mtcm/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace mtcm {

namespace {

constexpr double kLayerNormVarFloor = 1e-5;

Tensor tracked_copy(Graph& g, const Tensor& t) { return g.leaf(t); }

}  // namespace

MhaParams MhaParams::tracked(Graph& g) const {
  MhaParams out;
  out.heads = heads;
  for (const Tensor& t : wq) out.wq.push_back(tracked_copy(g, t));
  for (const Tensor& t : wk) out.wk.push_back(tracked_copy(g, t));
  for (const Tensor& t : wv) out.wv.push_back(tracked_copy(g, t));
  out.wo = tracked_copy(g, wo);
  return out;
}

void MhaParams::collect(const std::string& prefix, ParamRefs& out) {
  for (int h = 0; h < heads; ++h) {
    out.emplace_back(prefix + ".wq" + std::to_string(h), &wq[static_cast<std::size_t>(h)]);
    out.emplace_back(prefix + ".wk" + std::to_string(h), &wk[static_cast<std::size_t>(h)]);
    out.emplace_back(prefix + ".wv" + std::to_string(h), &wv[static_cast<std::size_t>(h)]);
  }
  out.emplace_back(prefix + ".wo", &wo);
}

FfnParams FfnParams::tracked(Graph& g) const {
  return {tracked_copy(g, w1), tracked_copy(g, b1), tracked_copy(g, w2), tracked_copy(g, b2)};
}

void FfnParams::collect(const std::string& prefix, ParamRefs& out) {
  out.emplace_back(prefix + ".w1", &w1);
  out.emplace_back(prefix + ".b1", &b1);
  out.emplace_back(prefix + ".w2", &w2);
  out.emplace_back(prefix + ".b2", &b2);
}

ConvParams ConvParams::tracked(Graph& g) const {
  return {tracked_copy(g, kernel), tracked_copy(g, bias)};
}

void ConvParams::collect(const std::string& prefix, ParamRefs& out) {
  out.emplace_back(prefix + ".kernel", &kernel);
  out.emplace_back(prefix + ".bias", &bias);
}

MhaParams make_mha_params(int channels, int heads, Rng& rng) {
  if (heads < 1 || channels % heads != 0) {
    throw std::invalid_argument("mha params: channels " + std::to_string(channels) +
                                " not divisible by heads " + std::to_string(heads));
  }
  const int d = channels / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(channels));
  MhaParams p;
  p.heads = heads;
  for (int h = 0; h < heads; ++h) {
    p.wq.emplace_back(Shape{channels, d}, rng.normal_vec(channels * d, s));
    p.wk.emplace_back(Shape{channels, d}, rng.normal_vec(channels * d, s));
    p.wv.emplace_back(Shape{channels, d}, rng.normal_vec(channels * d, s));
  }
  p.wo = Tensor(Shape{channels, channels}, rng.normal_vec(channels * channels, s));
  return p;
}

FfnParams make_ffn_params(int channels, Rng& rng) {
  const int hidden = 4 * channels;
  FfnParams p;
  p.w1 = Tensor(Shape{channels, hidden},
                rng.normal_vec(channels * hidden, 1.0 / std::sqrt(static_cast<double>(channels))));
  p.b1 = Tensor::zeros({hidden});
  p.w2 = Tensor(Shape{hidden, channels},
                rng.normal_vec(hidden * channels, 1.0 / std::sqrt(static_cast<double>(hidden))));
  p.b2 = Tensor::zeros({channels});
  return p;
}

ConvParams make_conv_params(int kernel_size, int c_in, int c_out, Rng& rng) {
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw std::invalid_argument("conv params: kernel_size must be odd, got " +
                                std::to_string(kernel_size));
  }
  ConvParams p;
  const double s = 1.0 / std::sqrt(static_cast<double>(kernel_size * c_in));
  p.kernel = Tensor(Shape{kernel_size, c_in, c_out}, rng.normal_vec(kernel_size * c_in * c_out, s));
  p.bias = Tensor::zeros({c_out});
  return p;
}

// ---------------------------------------------------------------------------
// layer_norm
// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank >= 1 required");
  const int C = x.dim(x.rank() - 1);
  if (C < 2) throw std::invalid_argument("layer_norm: last axis must have >= 2 channels");
  if (gain.rank() != 1 || gain.dim(0) != C || bias.rank() != 1 || bias.dim(0) != C) {
    throw std::invalid_argument("layer_norm: gain/bias must be [C] with C=" + std::to_string(C));
  }
  const int rows = x.size() / C;

  std::vector<double> out(static_cast<std::size_t>(x.size()));
  auto norm = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.size()));
  auto inv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  auto floored = std::make_shared<std::vector<char>>(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * C;
    double mean = 0.0;
    for (int c = 0; c < C; ++c) mean += xr[c];
    mean /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) {
      const double d = xr[c] - mean;
      var += d * d;
    }
    var /= C;
    const bool low = var <= kLayerNormVarFloor;
    const double iv = 1.0 / std::sqrt(low ? kLayerNormVarFloor : var);
    (*inv)[static_cast<std::size_t>(r)] = iv;
    (*floored)[static_cast<std::size_t>(r)] = low ? 1 : 0;
    for (int c = 0; c < C; ++c) {
      const double y = (xr[c] - mean) * iv;
      (*norm)[static_cast<std::size_t>(r * C + c)] = y;
      out[static_cast<std::size_t>(r * C + c)] = y * gain[c] + bias[c];
    }
  }

  Graph* g = nullptr;
  for (const Tensor* t : {&x, &gain, &bias}) {
    if (t->tracked()) {
      if (g && g != t->graph()) throw std::invalid_argument("layer_norm: mixed graphs");
      g = t->graph();
    }
  }
  if (g == nullptr) return Tensor(x.shape(), std::move(out));

  const int nx = x.node(), ng = gain.node(), nb = bias.node();
  auto gain_data = gain.shared_data();
  auto back = [nx, ng, nb, gain_data, norm, inv, floored, rows, C](
                  Graph& gr, const std::vector<double>& og) {
    if (nb >= 0) {
      std::vector<double> gb(static_cast<std::size_t>(C), 0.0);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < C; ++c) gb[static_cast<std::size_t>(c)] += og[static_cast<std::size_t>(r * C + c)];
      gr.accum_grad(nb, gb.data(), C);
    }
    if (ng >= 0) {
      std::vector<double> gg(static_cast<std::size_t>(C), 0.0);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < C; ++c)
          gg[static_cast<std::size_t>(c)] +=
              og[static_cast<std::size_t>(r * C + c)] * (*norm)[static_cast<std::size_t>(r * C + c)];
      gr.accum_grad(ng, gg.data(), C);
    }
    if (nx >= 0) {
      std::vector<double> gx(static_cast<std::size_t>(rows * C));
      for (int r = 0; r < rows; ++r) {
        const double iv = (*inv)[static_cast<std::size_t>(r)];
        double sum_gy = 0.0, sum_gyy = 0.0;
        for (int c = 0; c < C; ++c) {
          const std::size_t idx = static_cast<std::size_t>(r * C + c);
          const double gy = og[idx] * (*gain_data)[static_cast<std::size_t>(c)];
          sum_gy += gy;
          sum_gyy += gy * (*norm)[idx];
        }
        const double mean_gy = sum_gy / C;
        const double mean_gyy = sum_gyy / C;
        for (int c = 0; c < C; ++c) {
          const std::size_t idx = static_cast<std::size_t>(r * C + c);
          const double gy = og[idx] * (*gain_data)[static_cast<std::size_t>(c)];
          // Variance floor freezes the denominator, so its gradient term drops.
          const double centered = (*floored)[static_cast<std::size_t>(r)]
                                      ? gy - mean_gy
                                      : gy - mean_gy - (*norm)[idx] * mean_gyy;
          gx[idx] = iv * centered;
        }
      }
      gr.accum_grad(nx, gx.data(), rows * C);
    }
  };
  return g->record(x.shape(), std::move(out), {&x, &gain, &bias}, std::move(back));
}

Tensor layer_norm_unit(const Tensor& x) {
  const int C = x.dim(x.rank() - 1);
  return layer_norm(x, Tensor::full({C}, 1.0), Tensor::zeros({C}));
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

Tensor mha(const Tensor& q, const Tensor& k, const Tensor& v, const MhaParams& p) {
  const int C = p.channels();
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw std::invalid_argument("mha: rank-2 inputs required");
  }
  if (q.dim(1) != C || k.dim(1) != C || v.dim(1) != C) {
    throw std::invalid_argument("mha: channel mismatch, params expect C=" + std::to_string(C) +
                                " got q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) +
                                " v" + shape_str(v.shape()));
  }
  if (k.dim(0) != v.dim(0)) {
    throw std::invalid_argument("mha: key/value row mismatch " + shape_str(k.shape()) + " vs " +
                                shape_str(v.shape()));
  }
  const int d = C / p.heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(p.heads));
  for (int h = 0; h < p.heads; ++h) {
    Tensor qh = matmul(q, p.wq[static_cast<std::size_t>(h)]);
    Tensor kh = matmul(k, p.wk[static_cast<std::size_t>(h)]);
    Tensor vh = matmul(v, p.wv[static_cast<std::size_t>(h)]);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_d);
    Tensor weights = softmax_axis(scores, 1);
    heads.push_back(matmul(weights, vh));
  }
  return matmul(concat_cols(heads), p.wo);
}

Tensor rca(const Tensor& d, const Tensor& q, const Tensor& k, const Tensor& v,
           const MhaParams& p) {
  if (d.shape() != q.shape() || d.shape() != k.shape() || d.shape() != v.shape()) {
    throw std::invalid_argument("rca: all inputs must share shape, got d" + shape_str(d.shape()) +
                                " q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) + " v" +
                                shape_str(v.shape()));
  }
  return add(d, mha(q, k, v, p));
}

Tensor cross_attn(const Tensor& x, const Tensor& ctx, const MhaParams& p) {
  return add(x, mha(layer_norm_unit(x), ctx, ctx, p));
}

Tensor ffn(const Tensor& x, const FfnParams& p) {
  Tensor h = relu(add(matmul(layer_norm_unit(x), p.w1), p.b1));
  return add(x, add(matmul(h, p.w2), p.b2));
}

// ---------------------------------------------------------------------------
// temporal convolution
// ---------------------------------------------------------------------------

Tensor conv1d_time(const Tensor& x, const ConvParams& p) {
  if (x.rank() != 2) throw std::invalid_argument("conv1d_time: rank-2 input required");
  const int ks = p.kernel.dim(0);
  if (ks % 2 == 0) throw std::invalid_argument("conv1d_time: even kernel_size rejected");
  const int T = x.dim(0), ci = x.dim(1);
  if (p.kernel.dim(1) != ci) {
    throw std::invalid_argument("conv1d_time: input channels " + std::to_string(ci) +
                                " do not match kernel " + shape_str(p.kernel.shape()));
  }
  const int co = p.kernel.dim(2);
  const int half = (ks - 1) / 2;

  std::vector<double> out(static_cast<std::size_t>(T * co));
  for (int t = 0; t < T; ++t) {
    double* orow = out.data() + t * co;
    for (int c = 0; c < co; ++c) orow[c] = p.bias[c];
    for (int dt = -half; dt <= half; ++dt) {
      const int src = t + dt;
      if (src < 0 || src >= T) continue;
      const double* xrow = x.data() + src * ci;
      const double* krow = p.kernel.data() + (dt + half) * ci * co;
      for (int a = 0; a < ci; ++a) {
        const double xv = xrow[a];
        if (xv == 0.0) continue;
        const double* kk = krow + a * co;
        for (int c = 0; c < co; ++c) orow[c] += xv * kk[c];
      }
    }
  }

  Graph* g = nullptr;
  for (const Tensor* t : {&x, &p.kernel, &p.bias}) {
    if (t->tracked()) {
      if (g && g != t->graph()) throw std::invalid_argument("conv1d_time: mixed graphs");
      g = t->graph();
    }
  }
  if (g == nullptr) return Tensor({T, co}, std::move(out));

  const int nx = x.node(), nk = p.kernel.node(), nb = p.bias.node();
  auto xd = x.shared_data();
  auto kd = p.kernel.shared_data();
  auto back = [nx, nk, nb, xd, kd, T, ci, co, half](Graph& gr, const std::vector<double>& og) {
    if (nb >= 0) {
      std::vector<double> gb(static_cast<std::size_t>(co), 0.0);
      for (int t = 0; t < T; ++t)
        for (int c = 0; c < co; ++c) gb[static_cast<std::size_t>(c)] += og[static_cast<std::size_t>(t * co + c)];
      gr.accum_grad(nb, gb.data(), co);
    }
    if (nx >= 0) {
      std::vector<double> gx(static_cast<std::size_t>(T * ci), 0.0);
      for (int t = 0; t < T; ++t) {
        const double* orow = og.data() + t * co;
        for (int dt = -half; dt <= half; ++dt) {
          const int src = t + dt;
          if (src < 0 || src >= T) continue;
          const double* krow = kd->data() + (dt + half) * ci * co;
          for (int a = 0; a < ci; ++a) {
            const double* kk = krow + a * co;
            double s = 0.0;
            for (int c = 0; c < co; ++c) s += orow[c] * kk[c];
            gx[static_cast<std::size_t>(src * ci + a)] += s;
          }
        }
      }
      gr.accum_grad(nx, gx.data(), T * ci);
    }
    if (nk >= 0) {
      const int ks2 = 2 * half + 1;
      std::vector<double> gk(static_cast<std::size_t>(ks2 * ci * co), 0.0);
      for (int t = 0; t < T; ++t) {
        const double* orow = og.data() + t * co;
        for (int dt = -half; dt <= half; ++dt) {
          const int src = t + dt;
          if (src < 0 || src >= T) continue;
          const double* xrow = xd->data() + src * ci;
          double* krow = gk.data() + (dt + half) * ci * co;
          for (int a = 0; a < ci; ++a) {
            const double xv = xrow[a];
            if (xv == 0.0) continue;
            double* kk = krow + a * co;
            for (int c = 0; c < co; ++c) kk[c] += xv * orow[c];
          }
        }
      }
      gr.accum_grad(nk, gk.data(), static_cast<int>(gk.size()));
    }
  };
  return g->record({T, co}, std::move(out), {&x, &p.kernel, &p.bias}, std::move(back));
}

// ---------------------------------------------------------------------------
// axis-wise self-attention
// ---------------------------------------------------------------------------

Tensor self_attn_axis(const Tensor& cube, AttnAxis axis, const MhaParams& p) {
  if (cube.rank() != 3) throw std::invalid_argument("self_attn_axis: [T x N x C] cube required");
  const int N = cube.dim(1);
  const int T = cube.dim(0);
  auto attend = [&p](const Tensor& slice) {
    Tensor n = layer_norm_unit(slice);
    return add(slice, mha(n, n, n, p));
  };
  if (axis == AttnAxis::time) {
    std::vector<Tensor> seqs;
    seqs.reserve(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) seqs.push_back(attend(select_axis1(cube, n)));
    return stack_axis1(seqs);
  }
  if (axis == AttnAxis::instance) {
    std::vector<Tensor> frames;
    frames.reserve(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) frames.push_back(attend(select_axis0(cube, t)));
    return stack_axis0(frames);
  }
  throw std::invalid_argument("self_attn_axis: unknown axis");
}

}  // namespace mtcm
