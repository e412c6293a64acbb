// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include "doctest.h"
#include "mtcm/assignment.hpp"
#include "mtcm/head.hpp"

using namespace mtcm;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double s = 1.0) {
  return Tensor(shape, rng.normal_vec(shape_size(shape), s));
}

Tensor identity_matrix(int n) {
  std::vector<double> v(static_cast<std::size_t>(n * n), 0.0);
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i * n + i)] = 1.0;
  return Tensor({n, n}, std::move(v));
}

HeadParams random_head(int channels, Rng& rng) { return make_head_params(channels, rng); }

}  // namespace

TEST_CASE("target_scores peaks on the token matching pooled language") {
  const int C = 4;
  HeadParams p;
  p.score_w = identity_matrix(C);
  p.mask_w1 = Tensor::zeros({C, C});
  p.mask_b1 = Tensor::zeros({C});
  p.mask_w2 = Tensor::zeros({C, C});
  p.mask_b2 = Tensor::zeros({C});

  Tensor s_e({2, C}, {0.0, 2.0, 0.0, 0.0,
                      0.0, 2.0, 0.0, 0.0});  // pooled = 2*e1
  // Slot 1 carries e1; the others are orthogonal to it.
  std::vector<double> q(2 * 3 * C, 0.0);
  for (int t = 0; t < 2; ++t) {
    q[static_cast<std::size_t>((t * 3 + 0) * C + 2)] = 1.0;
    q[static_cast<std::size_t>((t * 3 + 1) * C + 1)] = 1.0;
    q[static_cast<std::size_t>((t * 3 + 2) * C + 3)] = 1.0;
  }
  Tensor scores = target_scores(Tensor({2, 3, C}, std::move(q)), s_e, p);
  REQUIRE(scores.shape() == Shape{2, 3});
  for (int t = 0; t < 2; ++t) {
    CHECK(scores.at2(t, 1) > scores.at2(t, 0));
    CHECK(scores.at2(t, 1) > scores.at2(t, 2));
    CHECK(scores.at2(t, 1) == doctest::Approx(2.0 / std::sqrt(4.0)).epsilon(1e-12));
  }
}

TEST_CASE("target_scores is uniform over identical queries") {
  Rng rng(31);
  const int C = 6;
  HeadParams p = random_head(C, rng);
  Tensor one_row = random_tensor({1, 1, C}, rng);
  std::vector<double> q;
  for (int t = 0; t < 3; ++t)
    for (int n = 0; n < 4; ++n)
      for (int c = 0; c < C; ++c) q.push_back(one_row.data()[c]);
  Tensor scores = target_scores(Tensor({3, 4, C}, std::move(q)), random_tensor({2, C}, rng), p);
  for (int t = 0; t < 3; ++t)
    for (int n = 1; n < 4; ++n) CHECK(scores.at2(t, n) == doctest::Approx(scores.at2(t, 0)).epsilon(1e-12));
}

TEST_CASE("target_scores matches the explicit dot-product oracle") {
  Rng rng(32);
  const int T = 3, N = 4, C = 5, R = 3;
  HeadParams p = random_head(C, rng);
  Tensor q_hat = random_tensor({T, N, C}, rng);
  Tensor s_e = random_tensor({R, C}, rng);
  Tensor scores = target_scores(q_hat, s_e, p);

  std::vector<double> pooled(static_cast<std::size_t>(C), 0.0);
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) pooled[static_cast<std::size_t>(c)] += s_e.at2(r, c) / R;
  for (int t = 0; t < T; ++t) {
    for (int n = 0; n < N; ++n) {
      double want = 0.0;
      for (int c = 0; c < C; ++c) {
        double proj = 0.0;
        for (int d = 0; d < C; ++d) proj += q_hat.at3(t, n, d) * p.score_w.at2(d, c);
        want += proj * pooled[static_cast<std::size_t>(c)];
      }
      want /= std::sqrt(static_cast<double>(C));
      CHECK(scores.at2(t, n) == doctest::Approx(want).epsilon(1e-11));
    }
  }
}

TEST_CASE("target_scores argmax survives positive rescaling of the language rows") {
  Rng rng(33);
  const int T = 2, N = 5, C = 8;
  HeadParams p = random_head(C, rng);
  Tensor q_hat = random_tensor({T, N, C}, rng);
  Tensor s_e = random_tensor({4, C}, rng);
  Tensor a = target_scores(q_hat, s_e, p);
  std::vector<double> scaled(s_e.vec());
  for (double& v : scaled) v *= 37.5;
  Tensor b = target_scores(q_hat, Tensor({4, C}, std::move(scaled)), p);
  for (int t = 0; t < T; ++t) {
    int arg_a = 0, arg_b = 0;
    for (int n = 1; n < N; ++n) {
      if (a.at2(t, n) > a.at2(t, arg_a)) arg_a = n;
      if (b.at2(t, n) > b.at2(t, arg_b)) arg_b = n;
    }
    CHECK(arg_a == arg_b);
  }
}

TEST_CASE("target_scores gradients match finite differences") {
  Rng rng(34);
  const int C = 5;
  HeadParams p = random_head(C, rng);
  Tensor q_hat = random_tensor({2, 3, C}, rng);
  Tensor s_e = random_tensor({2, C}, rng);
  auto f = [&](Graph& g, const std::vector<Tensor>& in) {
    HeadParams hp = p;
    hp.score_w = in[1];
    Tensor s = target_scores(in[0], g.leaf(s_e), hp);
    return sum_all(mul(s, s));
  };
  CHECK(finite_diff_check_multi(f, {q_hat, p.score_w}) < 1e-4);
}

TEST_CASE("predict_mask gives 0.5 everywhere for a zero mask embedding") {
  Rng rng(35);
  const int C = 4;
  HeadParams p = random_head(C, rng);
  p.mask_w1 = Tensor::zeros({C, C});
  p.mask_b1 = Tensor::zeros({C});
  p.mask_w2 = Tensor::zeros({C, C});
  p.mask_b2 = Tensor::zeros({C});
  Tensor probs = predict_mask(random_tensor({2, 3, C}, rng), random_tensor({2, 7, C}, rng), p);
  REQUIRE(probs.shape() == Shape{2, 3, 7});
  for (int i = 0; i < probs.size(); ++i) CHECK(probs.data()[i] == 0.5);
}

TEST_CASE("predict_mask matches a dense loop oracle and stays in (0,1)") {
  Rng rng(36);
  const int T = 2, N = 3, C = 4, P = 5;
  HeadParams p = random_head(C, rng);
  Tensor q_hat = random_tensor({T, N, C}, rng);
  Tensor pix = random_tensor({T, P, C}, rng);
  Tensor probs = predict_mask(q_hat, pix, p);

  for (int t = 0; t < T; ++t) {
    for (int n = 0; n < N; ++n) {
      std::vector<double> h(static_cast<std::size_t>(C)), e(static_cast<std::size_t>(C));
      for (int c = 0; c < C; ++c) {
        double acc = p.mask_b1[c];
        for (int d = 0; d < C; ++d) acc += q_hat.at3(t, n, d) * p.mask_w1.at2(d, c);
        h[static_cast<std::size_t>(c)] = std::max(acc, 0.0);
      }
      for (int c = 0; c < C; ++c) {
        double acc = p.mask_b2[c];
        for (int d = 0; d < C; ++d) acc += h[static_cast<std::size_t>(d)] * p.mask_w2.at2(d, c);
        e[static_cast<std::size_t>(c)] = acc;
      }
      for (int pi = 0; pi < P; ++pi) {
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += e[static_cast<std::size_t>(c)] * pix.at3(t, pi, c);
        const double want = 1.0 / (1.0 + std::exp(-dot));
        CHECK(probs.at3(t, n, pi) == doctest::Approx(want).epsilon(1e-11));
        CHECK(probs.at3(t, n, pi) > 0.0);
        CHECK(probs.at3(t, n, pi) < 1.0);
      }
    }
  }
}

TEST_CASE("predict_mask separates in-object from background pixels at sigma zero") {
  SceneConfig cfg;
  cfg.grid = 16;
  cfg.frames = 4;
  cfg.objects = 2;
  cfg.slots = 3;
  cfg.appearances = 4;
  Rng rng(37);
  const int C = 32;
  ProxyEncoderParams enc = make_proxy_params(cfg.appearances, C, C, 0.0, rng);
  SyntheticScene s = generate_scene(cfg, 38);
  Tensor tokens = encode_tokens(s, enc, 1);
  Tensor pix = render_pixel_features(s, enc);

  // Pass tokens straight through as mask embeddings: relu(x + c) - c = x
  // for |x| < c, so the two-layer head reduces to the identity.
  const double shift = 1000.0;
  HeadParams p;
  p.score_w = identity_matrix(C);
  p.mask_w1 = identity_matrix(C);
  p.mask_b1 = Tensor::full({C}, shift);
  p.mask_w2 = identity_matrix(C);
  p.mask_b2 = Tensor::full({C}, -shift);
  Tensor probs = predict_mask(tokens, pix, p);

  const int P = cfg.grid * cfg.grid;
  double inside = 0.0, outside = 0.0;
  int n_in = 0, n_out = 0;
  for (int t = 0; t < cfg.frames; ++t) {
    for (int j = 0; j < cfg.slots; ++j) {
      const int k = s.identity_at(t, j);
      if (k < 0) continue;
      for (int pi = 0; pi < P; ++pi) {
        const bool in = s.masks[static_cast<std::size_t>((t * cfg.objects + k) * P + pi)] != 0;
        if (in) {
          inside += probs.at3(t, j, pi);
          ++n_in;
        } else {
          outside += probs.at3(t, j, pi);
          ++n_out;
        }
      }
    }
  }
  REQUIRE(n_in > 0);
  CHECK(inside / n_in > outside / n_out + 0.2);
}

TEST_CASE("build_supervision in raw mode follows the per-frame shuffle") {
  SceneConfig cfg;
  SyntheticScene s = generate_scene(cfg, 41);
  Supervision sup = build_supervision(s, nullptr);
  const int P = cfg.grid * cfg.grid;
  for (int t = 0; t < cfg.frames; ++t) {
    if (!s.visible(s.target, t)) {
      CHECK(sup.ce_slot[static_cast<std::size_t>(t)] == -1);
      CHECK(sup.mask_slot[static_cast<std::size_t>(t)] == -1);
      continue;
    }
    const int j = sup.ce_slot[static_cast<std::size_t>(t)];
    REQUIRE(j >= 0);
    CHECK(s.identity_at(t, j) == s.target);
    CHECK(sup.mask_slot[static_cast<std::size_t>(t)] == j);
    const auto& bits = sup.mask_bits[static_cast<std::size_t>(t)];
    REQUIRE(static_cast<int>(bits.size()) == P);
    for (int i = 0; i < P; ++i) {
      CHECK((bits[static_cast<std::size_t>(i)] != 0) ==
            (s.masks[static_cast<std::size_t>((t * cfg.objects + s.target) * P + i)] != 0));
    }
  }
}

TEST_CASE("build_supervision in aligned mode fills invisible frames with the modal slot") {
  SceneConfig cfg;
  Rng rng(42);
  ProxyEncoderParams enc = make_proxy_params(cfg.appearances, 16, 12, 0.0, rng);
  // Pick a scene whose target appears midway so both branches execute.
  for (int i = 0; i < 50; ++i) {
    SyntheticScene s = generate_scene(cfg, 4200 + static_cast<std::uint64_t>(i));
    if (s.target != 1) continue;
    AlignResult res = align_sequence(encode_tokens(s, enc, 1));
    Supervision sup = build_supervision(s, &res.perms);
    const int entry = s.objects[1].entry_frame;
    REQUIRE(entry > 0);

    int modal = sup.mask_slot[static_cast<std::size_t>(entry)];
    for (int t = 0; t < cfg.frames; ++t) {
      const int j = sup.mask_slot[static_cast<std::size_t>(t)];
      REQUIRE(j >= 0);
      if (t < entry) {
        CHECK(sup.ce_slot[static_cast<std::size_t>(t)] == -1);
        CHECK(j == modal);
        for (std::uint8_t b : sup.mask_bits[static_cast<std::size_t>(t)]) CHECK(b == 0);
      } else {
        CHECK(sup.ce_slot[static_cast<std::size_t>(t)] == j);
        const int raw = res.perms[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
        CHECK(s.identity_at(t, raw) == s.target);
      }
    }
    return;
  }
  FAIL("no appears-target scene found in the seed range");
}

TEST_CASE("total_loss is near zero at perfect predictions") {
  SceneConfig cfg;
  cfg.grid = 12;
  cfg.frames = 4;
  cfg.objects = 2;
  cfg.slots = 3;
  cfg.appearances = 4;
  cfg.radius_min = 1;
  cfg.radius_max = 2;
  SyntheticScene s = generate_scene(cfg, 43);
  Supervision sup = build_supervision(s, nullptr);
  const int T = cfg.frames, N = cfg.slots, P = cfg.grid * cfg.grid;

  std::vector<double> logits(static_cast<std::size_t>(T * N), 0.0);
  std::vector<double> mask_logits(static_cast<std::size_t>(T * N * P), -40.0);
  for (int t = 0; t < T; ++t) {
    const int j = sup.ce_slot[static_cast<std::size_t>(t)];
    if (j < 0) continue;
    logits[static_cast<std::size_t>(t * N + j)] = 40.0;
    for (int i = 0; i < P; ++i) {
      if (sup.mask_bits[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)]) {
        mask_logits[static_cast<std::size_t>((t * N + j) * P + i)] = 40.0;
      }
    }
  }
  LossBreakdown parts =
      total_loss(Tensor({T, N}, std::move(logits)), Tensor({T, N, P}, std::move(mask_logits)), sup);
  CHECK(parts.total.scalar_value() < 1e-3);
  CHECK(parts.total.scalar_value() >= 0.0);
}

TEST_CASE("uniform logits cost ln N per classified frame") {
  SceneConfig cfg;  // N = 8
  SyntheticScene s = generate_scene(cfg, 44);
  Supervision sup = build_supervision(s, nullptr);
  const int T = cfg.frames, N = cfg.slots, P = cfg.grid * cfg.grid;
  LossBreakdown parts = total_loss(Tensor::zeros({T, N}), Tensor::zeros({T, N, P}), sup);
  CHECK(parts.ce.scalar_value() == doctest::Approx(std::log(8.0)).epsilon(1e-12));
}

TEST_CASE("total_loss components are non-negative on random inputs") {
  SceneConfig cfg;
  cfg.grid = 12;
  cfg.frames = 4;
  cfg.objects = 2;
  cfg.slots = 3;
  cfg.appearances = 4;
  cfg.radius_min = 1;
  cfg.radius_max = 2;
  Rng rng(45);
  for (int trial = 0; trial < 20; ++trial) {
    SyntheticScene s = generate_scene(cfg, 4500 + static_cast<std::uint64_t>(trial));
    Supervision sup = build_supervision(s, nullptr);
    const int T = cfg.frames, N = cfg.slots, P = cfg.grid * cfg.grid;
    Tensor logits({T, N}, rng.normal_vec(T * N, 3.0));
    Tensor mask_logits({T, N, P}, rng.normal_vec(T * N * P, 3.0));
    LossBreakdown parts = total_loss(logits, mask_logits, sup);
    CHECK(parts.ce.scalar_value() >= 0.0);
    CHECK(parts.bce.scalar_value() >= 0.0);
    CHECK(parts.dice.scalar_value() >= 0.0);
    const double want = parts.ce.scalar_value() + kBceWeight * parts.bce.scalar_value() +
                        kDiceWeight * parts.dice.scalar_value();
    CHECK(parts.total.scalar_value() == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("bce_with_logits matches the naive formula and survives extreme logits") {
  Rng rng(46);
  Tensor x({3, 4}, rng.normal_vec(12, 2.0));
  std::vector<double> yv(12);
  for (double& v : yv) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  Tensor y({3, 4}, yv);

  double want = 0.0;
  for (int i = 0; i < 12; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-x.data()[i]));
    want += -(yv[static_cast<std::size_t>(i)] * std::log(p) +
              (1.0 - yv[static_cast<std::size_t>(i)]) * std::log(1.0 - p));
  }
  want /= 12.0;
  CHECK(bce_with_logits(x, y).scalar_value() == doctest::Approx(want).epsilon(1e-12));

  // Correct saturated predictions: loss collapses to log1p(exp(-500)),
  // finite and vanishing instead of the naive formula's 0 * inf.
  Tensor extreme({2}, {500.0, -500.0});
  Tensor ty({2}, {1.0, 0.0});
  const double sat = bce_with_logits(extreme, ty).scalar_value();
  CHECK(std::isfinite(sat));
  CHECK(sat < 1e-200);
  CHECK(sat >= 0.0);
  Tensor wrong({2}, {500.0, -500.0});
  Tensor wy({2}, {0.0, 1.0});
  CHECK(bce_with_logits(wrong, wy).scalar_value() == doctest::Approx(500.0).epsilon(1e-12));

  auto f = [&](Graph& g, const Tensor& t) { return bce_with_logits(t, g.leaf(y)); };
  CHECK(finite_diff_check(f, x) < 1e-6);
}

TEST_CASE("total_loss gradients match finite differences") {
  SceneConfig cfg;
  cfg.grid = 8;
  cfg.frames = 3;
  cfg.objects = 2;
  cfg.slots = 3;
  cfg.appearances = 4;
  cfg.radius_min = 1;
  cfg.radius_max = 1;
  cfg.all_static = true;
  SyntheticScene s = generate_scene(cfg, 47);
  Supervision sup = build_supervision(s, nullptr);
  Rng rng(48);
  const int T = cfg.frames, N = cfg.slots, P = cfg.grid * cfg.grid;
  Tensor logits({T, N}, rng.normal_vec(T * N));
  Tensor mask_logits({T, N, P}, rng.normal_vec(T * N * P));
  auto f = [&](Graph&, const std::vector<Tensor>& in) {
    return total_loss(in[0], in[1], sup).total;
  };
  CHECK(finite_diff_check_multi(f, {logits, mask_logits}, 1e-5) < 1e-4);
}
