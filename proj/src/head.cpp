// SPDX-License-Identifier: Apache-2.0

#include "mtcm/head.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>

namespace mtcm {

HeadParams HeadParams::tracked(Graph& g) const {
  HeadParams t;
  t.mask_w1 = g.leaf(mask_w1);
  t.mask_b1 = g.leaf(mask_b1);
  t.mask_w2 = g.leaf(mask_w2);
  t.mask_b2 = g.leaf(mask_b2);
  t.score_w = g.leaf(score_w);
  return t;
}

void HeadParams::collect(const std::string& prefix, ParamRefs& out) {
  out.emplace_back(prefix + ".mask_w1", &mask_w1);
  out.emplace_back(prefix + ".mask_b1", &mask_b1);
  out.emplace_back(prefix + ".mask_w2", &mask_w2);
  out.emplace_back(prefix + ".mask_b2", &mask_b2);
  out.emplace_back(prefix + ".score_w", &score_w);
}

HeadParams make_head_params(int channels, Rng& rng) {
  if (channels <= 0) throw std::invalid_argument("make_head_params: channels must be positive");
  const double s = 1.0 / std::sqrt(static_cast<double>(channels));
  HeadParams p;
  p.mask_w1 = Tensor({channels, channels}, rng.normal_vec(channels * channels, s));
  p.mask_b1 = Tensor::zeros({channels});
  p.mask_w2 = Tensor({channels, channels}, rng.normal_vec(channels * channels, s));
  p.mask_b2 = Tensor::zeros({channels});
  p.score_w = Tensor({channels, channels}, rng.normal_vec(channels * channels, s));
  return p;
}

Tensor target_scores(const Tensor& q_hat, const Tensor& s_e, const HeadParams& p) {
  if (q_hat.rank() != 3 || s_e.rank() != 2) {
    throw std::invalid_argument("target_scores: expected [T,N,C] tokens and [R,C] language");
  }
  const int C = p.channels();
  if (q_hat.dim(2) != C || s_e.dim(1) != C) {
    throw std::invalid_argument("target_scores: channel mismatch");
  }
  const int T = q_hat.dim(0);
  Tensor pooled = reshape(mean_axis0(s_e), {C, 1});
  std::vector<Tensor> frames;
  frames.reserve(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    Tensor st = matmul(matmul(select_axis0(q_hat, t), p.score_w), pooled);  // [N,1]
    frames.push_back(reshape(st, {q_hat.dim(1)}));
  }
  return scale(stack_axis0(frames), 1.0 / std::sqrt(static_cast<double>(C)));
}

Tensor predict_mask_logits(const Tensor& q_hat, const Tensor& pixel_features,
                           const HeadParams& p) {
  if (q_hat.rank() != 3 || pixel_features.rank() != 3) {
    throw std::invalid_argument("predict_mask_logits: expected rank-3 inputs");
  }
  const int C = p.channels();
  if (q_hat.dim(2) != C || pixel_features.dim(2) != C || q_hat.dim(0) != pixel_features.dim(0)) {
    throw std::invalid_argument("predict_mask_logits: shape mismatch between tokens and pixels");
  }
  const int T = q_hat.dim(0);
  std::vector<Tensor> frames;
  frames.reserve(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    Tensor h = relu(add(matmul(select_axis0(q_hat, t), p.mask_w1), p.mask_b1));
    Tensor emb = add(matmul(h, p.mask_w2), p.mask_b2);                    // [N,C]
    frames.push_back(matmul(emb, transpose(select_axis0(pixel_features, t))));  // [N,P]
  }
  return stack_axis0(frames);
}

Tensor predict_mask(const Tensor& q_hat, const Tensor& pixel_features, const HeadParams& p) {
  return sigmoid(predict_mask_logits(q_hat, pixel_features, p));
}

Supervision build_supervision(const SyntheticScene& scene,
                              const std::vector<Permutation>* perms) {
  const int T = scene.cfg.frames, N = scene.cfg.slots;
  const int P = scene.cfg.grid * scene.cfg.grid;
  Supervision sup;
  sup.ce_slot.assign(static_cast<std::size_t>(T), -1);
  sup.mask_slot.assign(static_cast<std::size_t>(T), -1);
  sup.mask_bits.assign(static_cast<std::size_t>(T), {});

  auto slot_of = [&](int t) {
    for (int j = 0; j < N; ++j) {
      const int raw = perms ? (*perms)[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] : j;
      if (scene.identity_at(t, raw) == scene.target) return j;
    }
    return -1;
  };

  std::map<int, int> slot_count;
  for (int t = 0; t < T; ++t) {
    if (!scene.visible(scene.target, t)) continue;
    const int j = slot_of(t);
    if (j < 0) throw std::logic_error("build_supervision: visible target missing from slots");
    ++slot_count[j];
    sup.ce_slot[static_cast<std::size_t>(t)] = j;
    sup.mask_slot[static_cast<std::size_t>(t)] = j;
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(P));
    const std::size_t base =
        static_cast<std::size_t>((t * scene.cfg.objects + scene.target) * P);
    for (int i = 0; i < P; ++i) bits[static_cast<std::size_t>(i)] = scene.masks[base + i];
    sup.mask_bits[static_cast<std::size_t>(t)] = std::move(bits);
  }

  if (perms) {
    int modal = 0, best = -1;
    for (auto [slot, n] : slot_count) {
      if (n > best) {
        best = n;
        modal = slot;
      }
    }
    for (int t = 0; t < T; ++t) {
      if (scene.visible(scene.target, t)) continue;
      sup.mask_slot[static_cast<std::size_t>(t)] = modal;
      sup.mask_bits[static_cast<std::size_t>(t)].assign(static_cast<std::size_t>(P), 0);
    }
  }
  return sup;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) {
    throw std::invalid_argument("bce_with_logits: shape mismatch");
  }
  const int n = logits.size();
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = logits.data()[i], y = targets.data()[i];
    acc += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  const double inv = 1.0 / static_cast<double>(n);
  std::vector<double> out{acc * inv};

  Graph* g = logits.tracked() ? logits.graph() : (targets.tracked() ? targets.graph() : nullptr);
  if (g == nullptr) return Tensor({1}, std::move(out));
  const int nx = logits.node();
  auto lx = logits.shared_data();
  auto ty = targets.shared_data();
  std::vector<const Tensor*> parents{&logits, &targets};
  return g->record({1}, std::move(out), parents,
                   [nx, lx, ty, n, inv](Graph& gr, const std::vector<double>& og) {
                     if (nx < 0) return;
                     std::vector<double> gx(static_cast<std::size_t>(n));
                     for (int i = 0; i < n; ++i) {
                       const double x = (*lx)[static_cast<std::size_t>(i)];
                       const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                                 : std::exp(x) / (1.0 + std::exp(x));
                       gx[static_cast<std::size_t>(i)] =
                           og[0] * inv * (s - (*ty)[static_cast<std::size_t>(i)]);
                     }
                     gr.accum_grad(nx, gx.data(), n);
                   });
}

LossBreakdown total_loss(const Tensor& logits, const Tensor& mask_logits,
                         const Supervision& sup) {
  if (logits.rank() != 2 || mask_logits.rank() != 3) {
    throw std::invalid_argument("total_loss: expected [T,N] logits and [T,N,P] mask logits");
  }
  const int T = logits.dim(0), N = logits.dim(1), P = mask_logits.dim(2);
  if (static_cast<int>(sup.ce_slot.size()) != T || mask_logits.dim(0) != T ||
      mask_logits.dim(1) != N) {
    throw std::invalid_argument("total_loss: supervision length mismatch");
  }

  LossBreakdown parts;

  // Classification over slots, averaged over classified frames.
  Tensor ce = Tensor::scalar_of(0.0);
  int classified = 0;
  for (int t = 0; t < T; ++t) {
    const int j = sup.ce_slot[static_cast<std::size_t>(t)];
    if (j < 0) continue;
    std::vector<double> onehot(static_cast<std::size_t>(N), 0.0);
    onehot[static_cast<std::size_t>(j)] = 1.0;
    Tensor lp = elem_log(softmax_axis(row(logits, t), 0));
    ce = add(ce, scale(sum_all(mul(lp, Tensor({N}, std::move(onehot)))), -1.0));
    ++classified;
  }
  if (classified > 0) ce = scale(ce, 1.0 / static_cast<double>(classified));
  parts.ce = ce;

  // Mask terms on the supervised slot's logits.
  std::vector<Tensor> rows;
  std::vector<double> bits;
  for (int t = 0; t < T; ++t) {
    const int j = sup.mask_slot[static_cast<std::size_t>(t)];
    if (j < 0) continue;
    const auto& gt = sup.mask_bits[static_cast<std::size_t>(t)];
    if (static_cast<int>(gt.size()) != P) {
      throw std::invalid_argument("total_loss: mask bits do not match the pixel count");
    }
    rows.push_back(row(select_axis0(mask_logits, t), j));
    for (std::uint8_t b : gt) bits.push_back(b ? 1.0 : 0.0);
  }

  if (rows.empty()) {
    parts.bce = Tensor::scalar_of(0.0);
    parts.dice = Tensor::scalar_of(0.0);
  } else {
    const int S = static_cast<int>(rows.size());
    Tensor m = stack_axis0(rows);          // [S,P]
    Tensor y({S, P}, std::move(bits));     // constants
    parts.bce = bce_with_logits(m, y);

    Tensor dice = Tensor::scalar_of(0.0);
    Tensor one = Tensor::scalar_of(1.0);
    Tensor probs = sigmoid(m);
    for (int f = 0; f < S; ++f) {
      Tensor pf = row(probs, f);
      Tensor yf = row(y, f);
      Tensor num = add(scale(sum_all(mul(pf, yf)), 2.0), one);
      Tensor den = add(add(sum_all(pf), sum_all(yf)), one);
      dice = add(dice, sub(one, mul(num, reciprocal(den))));
    }
    parts.dice = scale(dice, 1.0 / static_cast<double>(S));
  }

  parts.total = add(parts.ce, add(scale(parts.bce, kBceWeight), scale(parts.dice, kDiceWeight)));
  return parts;
}

}  // namespace mtcm
