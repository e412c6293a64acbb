// SPDX-License-Identifier: Apache-2.0

#include "mtcm/assignment.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace mtcm {

CostMatrix cosine_cost(const Tensor& prev, const Tensor& curr) {
  if (prev.rank() != 2 || curr.rank() != 2 || prev.shape() != curr.shape()) {
    throw std::invalid_argument("cosine_cost: matching [N x C] inputs required, got " +
                                shape_str(prev.shape()) + " and " + shape_str(curr.shape()));
  }
  const int N = prev.dim(0), C = prev.dim(1);
  std::vector<double> norm_p(static_cast<std::size_t>(N)), norm_c(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) {
    double sp = 0.0, sc = 0.0;
    for (int c = 0; c < C; ++c) {
      sp += prev.at2(i, c) * prev.at2(i, c);
      sc += curr.at2(i, c) * curr.at2(i, c);
    }
    norm_p[static_cast<std::size_t>(i)] = std::sqrt(sp);
    norm_c[static_cast<std::size_t>(i)] = std::sqrt(sc);
  }
  CostMatrix m;
  m.n = N;
  m.entries.resize(static_cast<std::size_t>(N * N));
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < N; ++j) {
      double cos = 0.0;
      const double denom = norm_p[static_cast<std::size_t>(i)] * norm_c[static_cast<std::size_t>(j)];
      if (denom > 0.0) {
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += prev.at2(i, c) * curr.at2(j, c);
        cos = dot / denom;
      }
      m.entries[static_cast<std::size_t>(i * N + j)] = 1.0 - cos;
    }
  }
  return m;
}

Permutation hungarian_min(const CostMatrix& cost) {
  const int n = cost.n;
  if (n < 1 || static_cast<int>(cost.entries.size()) != n * n) {
    throw std::invalid_argument("hungarian_min: malformed cost matrix");
  }
  for (double v : cost.entries) {
    if (std::isnan(v)) throw std::invalid_argument("hungarian_min: NaN cost entry");
    if (!std::isfinite(v)) throw std::invalid_argument("hungarian_min: non-finite cost entry");
  }

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<double> v(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<int> p(static_cast<std::size_t>(n + 1), 0);
  std::vector<int> way(static_cast<std::size_t>(n + 1), 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(n + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost.at(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }

  Permutation perm(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j) {
    if (p[static_cast<std::size_t>(j)]) perm[static_cast<std::size_t>(p[static_cast<std::size_t>(j)]) - 1] = j - 1;
  }
  return perm;
}

AlignResult align_sequence(const Tensor& tokens) {
  if (tokens.rank() != 3) {
    throw std::invalid_argument("align_sequence: [T x N x C] cube required, got " +
                                shape_str(tokens.shape()));
  }
  const int T = tokens.dim(0), N = tokens.dim(1);

  AlignResult res;
  res.perms.reserve(static_cast<std::size_t>(T));
  std::vector<Tensor> frames;
  frames.reserve(static_cast<std::size_t>(T));

  Permutation identity(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) identity[static_cast<std::size_t>(i)] = i;

  Tensor prev_aligned = select_axis0(tokens, 0);
  frames.push_back(prev_aligned);
  res.perms.push_back(identity);

  for (int t = 1; t < T; ++t) {
    Tensor frame = select_axis0(tokens, t);
    Permutation perm = hungarian_min(cosine_cost(prev_aligned, frame));
    Tensor aligned = permute_rows(frame, perm);
    frames.push_back(aligned);
    res.perms.push_back(std::move(perm));
    prev_aligned = aligned;
  }
  res.aligned = stack_axis0(frames);
  return res;
}

}  // namespace mtcm
