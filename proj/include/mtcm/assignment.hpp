// SPDX-License-Identifier: Apache-2.0
//
// Cosine-similarity assignment costs, a Kuhn-Munkres solver, and the
// frame-chained alignment of instance-token sequences.

#pragma once

#include <vector>

#include "mtcm/tensor.hpp"

namespace mtcm {

/// Square assignment cost, lower is better.
struct CostMatrix {
  int n = 0;
  std::vector<double> entries;  // row-major [n x n]

  double at(int i, int j) const { return entries[static_cast<std::size_t>(i * n + j)]; }
};

/// mapping[i] = source index assigned to destination slot i.
using Permutation = std::vector<int>;

/// entry (i, j) = 1 - cos(prev_i, curr_j). Zero-norm rows use cos = 0.
CostMatrix cosine_cost(const Tensor& prev, const Tensor& curr);

/// Minimize sum cost(i, perm[i]) over permutations. Kuhn-Munkres with
/// deterministic scan order; NaN entries rejected.
Permutation hungarian_min(const CostMatrix& cost);

struct AlignResult {
  Tensor aligned;                  // [T x N x C], tracked iff input was
  std::vector<Permutation> perms;  // aligned[t][i] == tokens[t][perms[t][i]]
};

/// Frame 1 passes through unpermuted; each later frame is reordered by the
/// minimum-cost match against the previous *aligned* frame. Permutations
/// are chosen outside the gradient graph; token values stay differentiable.
AlignResult align_sequence(const Tensor& tokens);

}  // namespace mtcm
