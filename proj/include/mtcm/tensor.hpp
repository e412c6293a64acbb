// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major f64 tensors plus a tape-style reverse-mode autodiff
// graph. The tape is append-only and rebuilt on every forward pass;
// nodes are recorded in topological order by construction.

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace mtcm {

using Shape = std::vector<int>;

int shape_size(const Shape& s);
std::string shape_str(const Shape& s);

class Graph;
class Tensor;

/// Named references into a parameter struct, for optimizers and
/// checkpointing.
using ParamRefs = std::vector<std::pair<std::string, Tensor*>>;

/// Immutable value once recorded in a graph. Untracked tensors
/// (graph() == nullptr) are plain constants, safe to share.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar_of(double value);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int size() const { return size_; }
  bool empty() const { return data_ == nullptr; }

  const double* data() const { return data_->data(); }
  double* data() { return data_->data(); }
  const std::vector<double>& vec() const { return *data_; }
  std::shared_ptr<const std::vector<double>> shared_data() const { return data_; }

  double operator[](int i) const { return (*data_)[static_cast<std::size_t>(i)]; }
  double at2(int i, int j) const;             // rank-2 accessor
  double at3(int i, int j, int k) const;      // rank-3 accessor
  double scalar_value() const;                // requires size() == 1

  bool tracked() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  int node() const { return node_; }

  bool all_finite() const;

 private:
  Shape shape_;
  int size_ = 0;
  std::shared_ptr<std::vector<double>> data_;
  Graph* graph_ = nullptr;
  int node_ = -1;
  friend class Graph;
};

/// Receives the output gradient of a node and pushes contributions into
/// parent gradients via Graph::accum_grad.
using BackwardFn = std::function<void(Graph&, const std::vector<double>&)>;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Register a tracked leaf (parameter or input). Shares the value buffer.
  Tensor leaf(const Tensor& value);

  /// Append an operation result. Parents may be untracked (ignored in
  /// backward). Any tracked parent must belong to this graph.
  Tensor record(Shape shape, std::vector<double> value,
                const std::vector<const Tensor*>& parents, BackwardFn back);

  /// Reverse pass from a scalar loss recorded in this graph. Each node is
  /// visited at most once, in reverse recording order.
  void backward(const Tensor& loss);

  /// Gradient of the last backward() wrt a tracked tensor; nullptr if the
  /// tensor is untracked or received no gradient.
  const std::vector<double>* grad(const Tensor& t) const;

  void accum_grad(int node, const double* g, int n);
  void accum_grad_at(int node, int index, double v);

  int node_count() const { return static_cast<int>(nodes_.size()); }

  /// Drop all nodes and gradients; tensors recorded earlier keep their
  /// values but lose gradient access.
  void reset();

 private:
  struct NodeRec {
    int size;
    BackwardFn back;  // empty for leaves
  };
  std::vector<NodeRec> nodes_;
  std::vector<std::vector<double>> grads_;
  bool ran_backward_ = false;
};

// ---------------------------------------------------------------------------
// Operations. Each records itself when any input is tracked.
// ---------------------------------------------------------------------------

/// Elementwise a + b. b may have lower rank; its shape must equal the
/// trailing dims of a and is broadcast over the leading (batch) dims.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

/// Batched matrix product a[...,m,k] @ b[...,k,n]; leading dims must agree.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Swap the last two axes.
Tensor transpose(const Tensor& a);

/// Stable softmax along `axis`; slices sum to 1.
Tensor softmax_axis(const Tensor& x, int axis);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// Elementwise natural log; inputs must be positive.
Tensor elem_log(const Tensor& x);

/// Elementwise 1/x; inputs must be nonzero.
Tensor reciprocal(const Tensor& x);

/// Same data, new shape (must preserve size).
Tensor reshape(const Tensor& x, Shape shape);

/// Select index i along axis 0: rank R -> rank R-1.
Tensor select_axis0(const Tensor& x, int i);
/// Select index j along axis 1 of a rank-3 tensor: [A,B,C] -> [A,C].
Tensor select_axis1(const Tensor& x, int j);
/// Row r of a rank-2 tensor: [R,C] -> [C].
Tensor row(const Tensor& x, int r);

/// Stack equal-shape tensors along a new leading axis.
Tensor stack_axis0(const std::vector<Tensor>& parts);
/// Inverse of select_axis1 over all j: N tensors [T,C] -> [T,N,C].
Tensor stack_axis1(const std::vector<Tensor>& parts);

/// Concatenate rank-2 tensors along columns.
Tensor concat_cols(const std::vector<Tensor>& parts);

/// Column mean of a rank-2 tensor: [R,C] -> [C].
Tensor mean_axis0(const Tensor& x);

Tensor sum_all(const Tensor& x);

/// Reorder rows of a rank-2 tensor: out[i] = x[perm[i]].
Tensor permute_rows(const Tensor& x, const std::vector<int>& perm);

// ---------------------------------------------------------------------------
// Gradient verification harness.
// ---------------------------------------------------------------------------

/// f builds a scalar loss from tracked copies of `leaves` inside the given
/// graph. Returns max over all leaf coordinates of
///   |analytic - central_difference| / max(1, |central_difference|).
double finite_diff_check_multi(
    const std::function<Tensor(Graph&, const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& leaves, double h = 1e-6);

/// Single-input convenience wrapper.
double finite_diff_check(const std::function<Tensor(Graph&, const Tensor&)>& f,
                         const Tensor& x, double h = 1e-6);

}  // namespace mtcm
