// SPDX-License-Identifier: Apache-2.0

#include "mtcm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mtcm {

int shape_size(const Shape& s) {
  if (s.empty()) throw std::invalid_argument("tensor: empty shape");
  int n = 1;
  for (int d : s) {
    if (d < 1) throw std::invalid_argument("tensor: non-positive dimension in " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), size_(shape_size(shape_)),
      data_(std::make_shared<std::vector<double>>(std::move(data))) {
  if (static_cast<int>(data_->size()) != size_) {
    throw std::invalid_argument("tensor: data length " + std::to_string(data_->size()) +
                                " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::zeros(const Shape& shape) {
  return Tensor(shape, std::vector<double>(static_cast<std::size_t>(shape_size(shape)), 0.0));
}

Tensor Tensor::full(const Shape& shape, double value) {
  return Tensor(shape, std::vector<double>(static_cast<std::size_t>(shape_size(shape)), value));
}

Tensor Tensor::scalar_of(double value) { return Tensor({1}, {value}); }

double Tensor::at2(int i, int j) const {
  return (*data_)[static_cast<std::size_t>(i * shape_[1] + j)];
}

double Tensor::at3(int i, int j, int k) const {
  return (*data_)[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
}

double Tensor::scalar_value() const {
  if (size_ != 1) throw std::invalid_argument("tensor: scalar_value on shape " + shape_str(shape_));
  return (*data_)[0];
}

bool Tensor::all_finite() const {
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

Tensor Graph::leaf(const Tensor& value) {
  Tensor t;
  t.shape_ = value.shape_;
  t.size_ = value.size_;
  t.data_ = value.data_;
  t.graph_ = this;
  t.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back({t.size_, BackwardFn{}});
  return t;
}

Tensor Graph::record(Shape shape, std::vector<double> value,
                     const std::vector<const Tensor*>& parents, BackwardFn back) {
  for (const Tensor* p : parents) {
    if (p->tracked() && p->graph() != this) {
      throw std::invalid_argument("graph: parent belongs to a different graph");
    }
  }
  Tensor t(std::move(shape), std::move(value));
  t.graph_ = this;
  t.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back({t.size_, std::move(back)});
  return t;
}

void Graph::backward(const Tensor& loss) {
  if (!loss.tracked() || loss.graph() != this) {
    throw std::invalid_argument("backward: loss does not belong to this graph");
  }
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  grads_.assign(nodes_.size(), {});
  grads_[static_cast<std::size_t>(loss.node())] = {1.0};
  for (int i = loss.node(); i >= 0; --i) {
    auto& g = grads_[static_cast<std::size_t>(i)];
    if (g.empty()) continue;
    const auto& back = nodes_[static_cast<std::size_t>(i)].back;
    if (back) back(*this, g);
  }
  ran_backward_ = true;
}

const std::vector<double>* Graph::grad(const Tensor& t) const {
  if (!ran_backward_ || !t.tracked() || t.graph() != this) return nullptr;
  const auto& g = grads_[static_cast<std::size_t>(t.node())];
  return g.empty() ? nullptr : &g;
}

void Graph::accum_grad(int node, const double* g, int n) {
  if (node < 0) return;
  auto& dst = grads_[static_cast<std::size_t>(node)];
  if (dst.empty()) dst.assign(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) dst[static_cast<std::size_t>(i)] += g[i];
}

void Graph::accum_grad_at(int node, int index, double v) {
  if (node < 0) return;
  auto& dst = grads_[static_cast<std::size_t>(node)];
  if (dst.empty()) dst.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(node)].size), 0.0);
  dst[static_cast<std::size_t>(index)] += v;
}

void Graph::reset() {
  nodes_.clear();
  grads_.clear();
  ran_backward_ = false;
}

// ---------------------------------------------------------------------------
// Op helpers
// ---------------------------------------------------------------------------

namespace {

Graph* common_graph(std::initializer_list<const Tensor*> ts) {
  Graph* g = nullptr;
  for (const Tensor* t : ts) {
    if (!t->tracked()) continue;
    if (g == nullptr) g = t->graph();
    else if (g != t->graph()) throw std::invalid_argument("op: inputs from different graphs");
  }
  return g;
}

Tensor finish(Graph* g, Shape shape, std::vector<double> value,
              std::initializer_list<const Tensor*> parents, BackwardFn back) {
  if (g == nullptr) return Tensor(std::move(shape), std::move(value));
  std::vector<const Tensor*> ps(parents);
  return g->record(std::move(shape), std::move(value), ps, std::move(back));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

// b's shape must equal the trailing dims of a. Returns broadcast repeat count.
int broadcast_reps(const Tensor& a, const Tensor& b, const char* op) {
  if (b.rank() > a.rank()) {
    throw std::invalid_argument(std::string(op) + ": rank of second operand exceeds first, " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const int off = a.rank() - b.rank();
  for (int i = 0; i < b.rank(); ++i) {
    if (a.dim(off + i) != b.dim(i)) {
      throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                  " vs " + shape_str(b.shape()));
    }
  }
  return a.size() / b.size();
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const int reps = broadcast_reps(a, b, "add");
  const int bn = b.size();
  std::vector<double> out(static_cast<std::size_t>(a.size()));
  const double* pa = a.data();
  const double* pb = b.data();
  for (int r = 0; r < reps; ++r) {
    for (int i = 0; i < bn; ++i) out[static_cast<std::size_t>(r * bn + i)] = pa[r * bn + i] + pb[i];
  }
  Graph* g = common_graph({&a, &b});
  const int na = a.node(), nb = b.node();
  return finish(g, a.shape(), std::move(out), {&a, &b},
                [na, nb, reps, bn](Graph& gr, const std::vector<double>& og) {
                  gr.accum_grad(na, og.data(), reps * bn);
                  if (nb >= 0) {
                    std::vector<double> gb(static_cast<std::size_t>(bn), 0.0);
                    for (int r = 0; r < reps; ++r)
                      for (int i = 0; i < bn; ++i) gb[static_cast<std::size_t>(i)] += og[static_cast<std::size_t>(r * bn + i)];
                    gr.accum_grad(nb, gb.data(), bn);
                  }
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const int n = a.size();
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = a.data()[i] - b.data()[i];
  Graph* g = common_graph({&a, &b});
  const int na = a.node(), nb = b.node();
  return finish(g, a.shape(), std::move(out), {&a, &b},
                [na, nb, n](Graph& gr, const std::vector<double>& og) {
                  gr.accum_grad(na, og.data(), n);
                  if (nb >= 0) {
                    std::vector<double> gb(og.size());
                    for (int i = 0; i < n; ++i) gb[static_cast<std::size_t>(i)] = -og[static_cast<std::size_t>(i)];
                    gr.accum_grad(nb, gb.data(), n);
                  }
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const int n = a.size();
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = a.data()[i] * b.data()[i];
  Graph* g = common_graph({&a, &b});
  const int na = a.node(), nb = b.node();
  auto da = a.shared_data();
  auto db = b.shared_data();
  return finish(g, a.shape(), std::move(out), {&a, &b},
                [na, nb, n, da, db](Graph& gr, const std::vector<double>& og) {
                  if (na >= 0) {
                    std::vector<double> ga(static_cast<std::size_t>(n));
                    for (int i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] = og[static_cast<std::size_t>(i)] * (*db)[static_cast<std::size_t>(i)];
                    gr.accum_grad(na, ga.data(), n);
                  }
                  if (nb >= 0) {
                    std::vector<double> gb(static_cast<std::size_t>(n));
                    for (int i = 0; i < n; ++i) gb[static_cast<std::size_t>(i)] = og[static_cast<std::size_t>(i)] * (*da)[static_cast<std::size_t>(i)];
                    gr.accum_grad(nb, gb.data(), n);
                  }
                });
}

Tensor scale(const Tensor& a, double c) {
  const int n = a.size();
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = c * a.data()[i];
  Graph* g = common_graph({&a});
  const int na = a.node();
  return finish(g, a.shape(), std::move(out), {&a},
                [na, n, c](Graph& gr, const std::vector<double>& og) {
                  if (na < 0) return;
                  std::vector<double> ga(static_cast<std::size_t>(n));
                  for (int i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] = c * og[static_cast<std::size_t>(i)];
                  gr.accum_grad(na, ga.data(), n);
                });
}

// ---------------------------------------------------------------------------
// matmul / transpose
// ---------------------------------------------------------------------------

namespace {

// C[m,n] += A[m,k] @ B[k,n]
void gemm_acc(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* a_row = A + i * k;
    double* c_row = C + i * n;
    for (int p = 0; p < k; ++p) {
      const double av = a_row[p];
      if (av == 0.0) continue;
      const double* b_row = B + p * n;
      for (int j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
  }
}

// C[m,n] += A[m,k] @ B^T where B is [n,k]
void gemm_nt_acc(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* a_row = A + i * k;
    double* c_row = C + i * n;
    for (int j = 0; j < n; ++j) {
      const double* b_row = B + j * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += a_row[p] * b_row[p];
      c_row[j] += s;
    }
  }
}

// C[k,n] += A^T @ B where A is [m,k], B is [m,n]
void gemm_tn_acc(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* a_row = A + i * k;
    const double* b_row = B + i * n;
    for (int p = 0; p < k; ++p) {
      const double av = a_row[p];
      if (av == 0.0) continue;
      double* c_row = C + p * n;
      for (int j = 0; j < n; ++j) c_row[j] += av * b_row[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw std::invalid_argument("matmul: operands must have rank >= 2, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  if (a.rank() != b.rank()) {
    throw std::invalid_argument("matmul: rank mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const int r = a.rank();
  for (int i = 0; i < r - 2; ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw std::invalid_argument("matmul: batch dims disagree " + shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
    }
  }
  const int m = a.dim(r - 2), k = a.dim(r - 1);
  const int kb = b.dim(r - 2), n = b.dim(r - 1);
  if (k != kb) {
    throw std::invalid_argument("matmul: inner dims disagree " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  int batch = 1;
  for (int i = 0; i < r - 2; ++i) batch *= a.dim(i);

  Shape out_shape(a.shape());
  out_shape[static_cast<std::size_t>(r - 1)] = n;
  std::vector<double> out(static_cast<std::size_t>(batch * m * n), 0.0);
  for (int s = 0; s < batch; ++s) {
    gemm_acc(a.data() + s * m * k, b.data() + s * k * n, out.data() + s * m * n, m, k, n);
  }

  Graph* g = common_graph({&a, &b});
  const int na = a.node(), nb = b.node();
  auto da = a.shared_data();
  auto db = b.shared_data();
  return finish(g, std::move(out_shape), std::move(out), {&a, &b},
                [na, nb, da, db, batch, m, k, n](Graph& gr, const std::vector<double>& og) {
                  if (na >= 0) {
                    std::vector<double> ga(static_cast<std::size_t>(batch * m * k), 0.0);
                    for (int s = 0; s < batch; ++s)
                      gemm_nt_acc(og.data() + s * m * n, db->data() + s * k * n,
                                  ga.data() + s * m * k, m, n, k);
                    gr.accum_grad(na, ga.data(), batch * m * k);
                  }
                  if (nb >= 0) {
                    std::vector<double> gb(static_cast<std::size_t>(batch * k * n), 0.0);
                    for (int s = 0; s < batch; ++s)
                      gemm_tn_acc(da->data() + s * m * k, og.data() + s * m * n,
                                  gb.data() + s * k * n, m, k, n);
                    gr.accum_grad(nb, gb.data(), batch * k * n);
                  }
                });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw std::invalid_argument("transpose: rank must be >= 2");
  const int r = a.rank();
  const int m = a.dim(r - 2), n = a.dim(r - 1);
  int batch = a.size() / (m * n);
  Shape out_shape(a.shape());
  std::swap(out_shape[static_cast<std::size_t>(r - 2)], out_shape[static_cast<std::size_t>(r - 1)]);
  std::vector<double> out(static_cast<std::size_t>(a.size()));
  for (int s = 0; s < batch; ++s) {
    const double* src = a.data() + s * m * n;
    double* dst = out.data() + s * m * n;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  Graph* g = common_graph({&a});
  const int na = a.node();
  return finish(g, std::move(out_shape), std::move(out), {&a},
                [na, batch, m, n](Graph& gr, const std::vector<double>& og) {
                  if (na < 0) return;
                  std::vector<double> ga(og.size());
                  for (int s = 0; s < batch; ++s) {
                    const double* src = og.data() + s * m * n;
                    double* dst = ga.data() + s * m * n;
                    for (int j = 0; j < n; ++j)
                      for (int i = 0; i < m; ++i) dst[i * n + j] = src[j * m + i];
                  }
                  gr.accum_grad(na, ga.data(), static_cast<int>(ga.size()));
                });
}

// ---------------------------------------------------------------------------
// softmax / activations
// ---------------------------------------------------------------------------

Tensor softmax_axis(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank()) {
    throw std::invalid_argument("softmax_axis: axis " + std::to_string(axis) +
                                " out of range for " + shape_str(x.shape()));
  }
  const int len = x.dim(axis);
  int inner = 1;
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const int outer = x.size() / (len * inner);

  std::vector<double> out(static_cast<std::size_t>(x.size()));
  for (int o = 0; o < outer; ++o) {
    for (int in = 0; in < inner; ++in) {
      const int base = o * len * inner + in;
      double mx = x.data()[base];
      for (int i = 1; i < len; ++i) mx = std::max(mx, x.data()[base + i * inner]);
      double sum = 0.0;
      for (int i = 0; i < len; ++i) {
        const double e = std::exp(x.data()[base + i * inner] - mx);
        out[static_cast<std::size_t>(base + i * inner)] = e;
        sum += e;
      }
      for (int i = 0; i < len; ++i) out[static_cast<std::size_t>(base + i * inner)] /= sum;
    }
  }

  Graph* g = common_graph({&x});
  const int nx = x.node();
  auto yv = std::make_shared<std::vector<double>>(out);
  return finish(g, x.shape(), std::move(out), {&x},
                [nx, yv, len, inner, outer](Graph& gr, const std::vector<double>& og) {
                  if (nx < 0) return;
                  std::vector<double> gx(og.size());
                  for (int o = 0; o < outer; ++o) {
                    for (int in = 0; in < inner; ++in) {
                      const int base = o * len * inner + in;
                      double dot = 0.0;
                      for (int i = 0; i < len; ++i)
                        dot += og[static_cast<std::size_t>(base + i * inner)] *
                               (*yv)[static_cast<std::size_t>(base + i * inner)];
                      for (int i = 0; i < len; ++i) {
                        const std::size_t idx = static_cast<std::size_t>(base + i * inner);
                        gx[idx] = (*yv)[idx] * (og[idx] - dot);
                      }
                    }
                  }
                  gr.accum_grad(nx, gx.data(), static_cast<int>(gx.size()));
                });
}

Tensor relu(const Tensor& x) {
  const int n = x.size();
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  Graph* g = common_graph({&x});
  const int nx = x.node();
  auto dx = x.shared_data();
  return finish(g, x.shape(), std::move(out), {&x},
                [nx, dx, n](Graph& gr, const std::vector<double>& og) {
                  if (nx < 0) return;
                  std::vector<double> gx(static_cast<std::size_t>(n));
                  for (int i = 0; i < n; ++i)
                    gx[static_cast<std::size_t>(i)] = (*dx)[static_cast<std::size_t>(i)] > 0.0 ? og[static_cast<std::size_t>(i)] : 0.0;
                  gr.accum_grad(nx, gx.data(), n);
                });
}

Tensor sigmoid(const Tensor& x) {
  const int n = x.size();
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double v = x.data()[i];
    out[static_cast<std::size_t>(i)] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                                : std::exp(v) / (1.0 + std::exp(v));
  }
  Graph* g = common_graph({&x});
  const int nx = x.node();
  auto yv = std::make_shared<std::vector<double>>(out);
  return finish(g, x.shape(), std::move(out), {&x},
                [nx, yv, n](Graph& gr, const std::vector<double>& og) {
                  if (nx < 0) return;
                  std::vector<double> gx(static_cast<std::size_t>(n));
                  for (int i = 0; i < n; ++i) {
                    const double y = (*yv)[static_cast<std::size_t>(i)];
                    gx[static_cast<std::size_t>(i)] = og[static_cast<std::size_t>(i)] * y * (1.0 - y);
                  }
                  gr.accum_grad(nx, gx.data(), n);
                });
}

Tensor reciprocal(const Tensor& x) {
  const int n = x.size();
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (x.data()[i] == 0.0) throw std::invalid_argument("reciprocal: zero input");
    out[static_cast<std::size_t>(i)] = 1.0 / x.data()[i];
  }
  Graph* g = common_graph({&x});
  const int nx = x.node();
  auto yv = std::make_shared<std::vector<double>>(out);
  return finish(g, x.shape(), std::move(out), {&x},
                [nx, yv, n](Graph& gr, const std::vector<double>& og) {
                  if (nx < 0) return;
                  std::vector<double> gx(static_cast<std::size_t>(n));
                  for (int i = 0; i < n; ++i) {
                    const double y = (*yv)[static_cast<std::size_t>(i)];
                    gx[static_cast<std::size_t>(i)] = -og[static_cast<std::size_t>(i)] * y * y;
                  }
                  gr.accum_grad(nx, gx.data(), n);
                });
}

Tensor elem_log(const Tensor& x) {
  const int n = x.size();
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (x.data()[i] <= 0.0) throw std::invalid_argument("elem_log: non-positive input");
    out[static_cast<std::size_t>(i)] = std::log(x.data()[i]);
  }
  Graph* g = common_graph({&x});
  const int nx = x.node();
  auto dx = x.shared_data();
  return finish(g, x.shape(), std::move(out), {&x},
                [nx, dx, n](Graph& gr, const std::vector<double>& og) {
                  if (nx < 0) return;
                  std::vector<double> gx(static_cast<std::size_t>(n));
                  for (int i = 0; i < n; ++i)
                    gx[static_cast<std::size_t>(i)] = og[static_cast<std::size_t>(i)] / (*dx)[static_cast<std::size_t>(i)];
                  gr.accum_grad(nx, gx.data(), n);
                });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw std::invalid_argument("reshape: size mismatch " + shape_str(x.shape()) + " -> " +
                                shape_str(shape));
  }
  Graph* g = common_graph({&x});
  const int nx = x.node();
  const int n = x.size();
  std::vector<double> out(x.vec());
  return finish(g, std::move(shape), std::move(out), {&x},
                [nx, n](Graph& gr, const std::vector<double>& og) {
                  gr.accum_grad(nx, og.data(), n);
                });
}

Tensor select_axis0(const Tensor& x, int i) {
  if (x.rank() < 2) throw std::invalid_argument("select_axis0: rank must be >= 2");
  if (i < 0 || i >= x.dim(0)) throw std::invalid_argument("select_axis0: index out of range");
  const int sub = x.size() / x.dim(0);
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  std::vector<double> out(x.data() + i * sub, x.data() + (i + 1) * sub);
  Graph* g = common_graph({&x});
  const int nx = x.node();
  const int total = x.size();
  return finish(g, std::move(out_shape), std::move(out), {&x},
                [nx, i, sub, total](Graph& gr, const std::vector<double>& og) {
                  if (nx < 0) return;
                  std::vector<double> gx(static_cast<std::size_t>(total), 0.0);
                  std::copy(og.begin(), og.end(), gx.begin() + i * sub);
                  gr.accum_grad(nx, gx.data(), total);
                });
}

Tensor select_axis1(const Tensor& x, int j) {
  if (x.rank() != 3) throw std::invalid_argument("select_axis1: rank-3 tensor required");
  if (j < 0 || j >= x.dim(1)) throw std::invalid_argument("select_axis1: index out of range");
  const int A = x.dim(0), B = x.dim(1), C = x.dim(2);
  std::vector<double> out(static_cast<std::size_t>(A * C));
  for (int a = 0; a < A; ++a)
    std::copy(x.data() + (a * B + j) * C, x.data() + (a * B + j + 1) * C, out.begin() + a * C);
  Graph* g = common_graph({&x});
  const int nx = x.node();
  return finish(g, {A, C}, std::move(out), {&x},
                [nx, j, A, B, C](Graph& gr, const std::vector<double>& og) {
                  if (nx < 0) return;
                  std::vector<double> gx(static_cast<std::size_t>(A * B * C), 0.0);
                  for (int a = 0; a < A; ++a)
                    std::copy(og.begin() + a * C, og.begin() + (a + 1) * C,
                              gx.begin() + (a * B + j) * C);
                  gr.accum_grad(nx, gx.data(), A * B * C);
                });
}

Tensor row(const Tensor& x, int r) {
  if (x.rank() != 2) throw std::invalid_argument("row: rank-2 tensor required");
  return select_axis0(x, r);
}

Tensor stack_axis0(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_axis0: no parts");
  const Shape& s0 = parts[0].shape();
  const int sub = parts[0].size();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(sub) * parts.size());
  std::vector<const Tensor*> ps;
  Graph* g = nullptr;
  std::vector<int> nodes;
  for (const Tensor& p : parts) {
    if (p.shape() != s0) {
      throw std::invalid_argument("stack_axis0: shape mismatch " + shape_str(s0) + " vs " +
                                  shape_str(p.shape()));
    }
    out.insert(out.end(), p.vec().begin(), p.vec().end());
    ps.push_back(&p);
    nodes.push_back(p.node());
    if (p.tracked()) g = p.graph();
  }
  Shape out_shape;
  out_shape.push_back(static_cast<int>(parts.size()));
  out_shape.insert(out_shape.end(), s0.begin(), s0.end());
  auto back = [nodes, sub](Graph& gr, const std::vector<double>& og) {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      gr.accum_grad(nodes[i], og.data() + static_cast<int>(i) * sub, sub);
  };
  if (g == nullptr) return Tensor(std::move(out_shape), std::move(out));
  return g->record(std::move(out_shape), std::move(out), ps, std::move(back));
}

Tensor stack_axis1(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("stack_axis1: no parts");
  const int N = static_cast<int>(parts.size());
  if (parts[0].rank() != 2) throw std::invalid_argument("stack_axis1: rank-2 parts required");
  const int T = parts[0].dim(0), C = parts[0].dim(1);
  std::vector<double> out(static_cast<std::size_t>(T * N * C));
  std::vector<const Tensor*> ps;
  std::vector<int> nodes;
  Graph* g = nullptr;
  for (int n = 0; n < N; ++n) {
    const Tensor& p = parts[static_cast<std::size_t>(n)];
    if (p.shape() != parts[0].shape()) {
      throw std::invalid_argument("stack_axis1: shape mismatch among parts");
    }
    for (int t = 0; t < T; ++t)
      std::copy(p.data() + t * C, p.data() + (t + 1) * C, out.begin() + (t * N + n) * C);
    ps.push_back(&p);
    nodes.push_back(p.node());
    if (p.tracked()) g = p.graph();
  }
  auto back = [nodes, T, N, C](Graph& gr, const std::vector<double>& og) {
    for (int n = 0; n < N; ++n) {
      if (nodes[static_cast<std::size_t>(n)] < 0) continue;
      std::vector<double> gp(static_cast<std::size_t>(T * C));
      for (int t = 0; t < T; ++t)
        std::copy(og.begin() + (t * N + n) * C, og.begin() + (t * N + n + 1) * C, gp.begin() + t * C);
      gr.accum_grad(nodes[static_cast<std::size_t>(n)], gp.data(), T * C);
    }
  };
  if (g == nullptr) return Tensor({T, N, C}, std::move(out));
  return g->record({T, N, C}, std::move(out), ps, std::move(back));
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const int R = parts[0].dim(0);
  int Ctot = 0;
  Graph* g = nullptr;
  std::vector<const Tensor*> ps;
  std::vector<int> nodes, widths;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.dim(0) != R) {
      throw std::invalid_argument("concat_cols: incompatible part shape " + shape_str(p.shape()));
    }
    Ctot += p.dim(1);
    ps.push_back(&p);
    nodes.push_back(p.node());
    widths.push_back(p.dim(1));
    if (p.tracked()) g = p.graph();
  }
  std::vector<double> out(static_cast<std::size_t>(R * Ctot));
  int off = 0;
  for (const Tensor& p : parts) {
    const int c = p.dim(1);
    for (int r = 0; r < R; ++r)
      std::copy(p.data() + r * c, p.data() + (r + 1) * c, out.begin() + r * Ctot + off);
    off += c;
  }
  auto back = [nodes, widths, R, Ctot](Graph& gr, const std::vector<double>& og) {
    int o = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const int c = widths[i];
      if (nodes[i] >= 0) {
        std::vector<double> gp(static_cast<std::size_t>(R * c));
        for (int r = 0; r < R; ++r)
          std::copy(og.begin() + r * Ctot + o, og.begin() + r * Ctot + o + c, gp.begin() + r * c);
        gr.accum_grad(nodes[i], gp.data(), R * c);
      }
      o += c;
    }
  };
  if (g == nullptr) return Tensor({R, Ctot}, std::move(out));
  return g->record({R, Ctot}, std::move(out), ps, std::move(back));
}

Tensor mean_axis0(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("mean_axis0: rank-2 tensor required");
  const int R = x.dim(0), C = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(C), 0.0);
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(c)] += x.at2(r, c);
  for (double& v : out) v /= R;
  Graph* g = common_graph({&x});
  const int nx = x.node();
  return finish(g, {C}, std::move(out), {&x},
                [nx, R, C](Graph& gr, const std::vector<double>& og) {
                  if (nx < 0) return;
                  std::vector<double> gx(static_cast<std::size_t>(R * C));
                  for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) gx[static_cast<std::size_t>(r * C + c)] = og[static_cast<std::size_t>(c)] / R;
                  gr.accum_grad(nx, gx.data(), R * C);
                });
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (int i = 0; i < x.size(); ++i) s += x.data()[i];
  Graph* g = common_graph({&x});
  const int nx = x.node();
  const int n = x.size();
  return finish(g, {1}, {s}, {&x},
                [nx, n](Graph& gr, const std::vector<double>& og) {
                  if (nx < 0) return;
                  std::vector<double> gx(static_cast<std::size_t>(n), og[0]);
                  gr.accum_grad(nx, gx.data(), n);
                });
}

Tensor permute_rows(const Tensor& x, const std::vector<int>& perm) {
  if (x.rank() != 2) throw std::invalid_argument("permute_rows: rank-2 tensor required");
  const int R = x.dim(0), C = x.dim(1);
  if (static_cast<int>(perm.size()) != R) {
    throw std::invalid_argument("permute_rows: permutation length mismatch");
  }
  std::vector<double> out(static_cast<std::size_t>(R * C));
  for (int r = 0; r < R; ++r) {
    const int src = perm[static_cast<std::size_t>(r)];
    if (src < 0 || src >= R) throw std::invalid_argument("permute_rows: index out of range");
    std::copy(x.data() + src * C, x.data() + (src + 1) * C, out.begin() + r * C);
  }
  Graph* g = common_graph({&x});
  const int nx = x.node();
  return finish(g, x.shape(), std::move(out), {&x},
                [nx, perm, R, C](Graph& gr, const std::vector<double>& og) {
                  if (nx < 0) return;
                  std::vector<double> gx(static_cast<std::size_t>(R * C), 0.0);
                  for (int r = 0; r < R; ++r) {
                    const int src = perm[static_cast<std::size_t>(r)];
                    for (int c = 0; c < C; ++c) gx[static_cast<std::size_t>(src * C + c)] += og[static_cast<std::size_t>(r * C + c)];
                  }
                  gr.accum_grad(nx, gx.data(), R * C);
                });
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

double finite_diff_check_multi(
    const std::function<Tensor(Graph&, const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& leaves, double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be positive");

  Graph g;
  std::vector<Tensor> tracked;
  tracked.reserve(leaves.size());
  for (const Tensor& x : leaves) tracked.push_back(g.leaf(x));
  Tensor loss = f(g, tracked);
  g.backward(loss);

  std::vector<std::vector<double>> analytic;
  for (const Tensor& t : tracked) {
    const std::vector<double>* gr = g.grad(t);
    analytic.push_back(gr ? *gr : std::vector<double>(static_cast<std::size_t>(t.size()), 0.0));
  }

  auto eval_at = [&](const std::vector<Tensor>& xs) {
    Graph g2;
    std::vector<Tensor> ts;
    ts.reserve(xs.size());
    for (const Tensor& x : xs) ts.push_back(g2.leaf(x));
    return f(g2, ts).scalar_value();
  };

  double max_rel = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    for (int i = 0; i < leaves[li].size(); ++i) {
      std::vector<Tensor> xs;
      xs.reserve(leaves.size());
      for (std::size_t lj = 0; lj < leaves.size(); ++lj) {
        if (lj == li) {
          xs.emplace_back(leaves[lj].shape(), leaves[lj].vec());
        } else {
          xs.push_back(leaves[lj]);
        }
      }
      double* slot = xs[li].data() + i;
      const double x0 = *slot;
      *slot = x0 + h;
      const double fp = eval_at(xs);
      *slot = x0 - h;
      const double fm = eval_at(xs);
      const double central = (fp - fm) / (2.0 * h);
      const double a = analytic[li][static_cast<std::size_t>(i)];
      const double rel = std::abs(a - central) / std::max(1.0, std::abs(central));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

double finite_diff_check(const std::function<Tensor(Graph&, const Tensor&)>& f,
                         const Tensor& x, double h) {
  return finite_diff_check_multi(
      [&f](Graph& g, const std::vector<Tensor>& xs) { return f(g, xs[0]); }, {x}, h);
}

}  // namespace mtcm
