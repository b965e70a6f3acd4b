#include "mmtl/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace mmtl {

namespace {

thread_local bool g_grad_enabled = true;

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension");
    n *= static_cast<size_t>(d);
  }
  return n;
}

// Matmul microkernels. GCC's generic vectorizer keeps the accumulator tiles
// in stack slots, so the 8-lane vectors are spelled out with the vector_size
// extension instead: two output rows x 32 columns stay in registers across
// the whole reduction, enough parallel chains to hide FMA latency. Column
// tiles form the outer loop so one k x 32 slab of b stays L1-resident while
// every row pair consumes it.
typedef double v8d __attribute__((vector_size(64)));

inline v8d vload(const double* p) {
  v8d v;
  __builtin_memcpy(&v, p, sizeof v);
  return v;
}

inline void vstore(double* p, v8d v) { __builtin_memcpy(p, &v, sizeof v); }

inline v8d vbcast(double x) { return v8d{x, x, x, x, x, x, x, x}; }

inline double vsum(v8d v) {
  return ((v[0] + v[4]) + (v[1] + v[5])) + ((v[2] + v[6]) + (v[3] + v[7]));
}

// c += a (m×k) · b (k×n), all row-major.
void mm_acc(double* __restrict c, const double* __restrict a, const double* __restrict b,
            int m, int k, int n) {
  const int n32 = n - n % 32;
  const int n8 = n - n % 8;
  for (int j0 = 0; j0 < n32; j0 += 32) {
    int i = 0;
    for (; i + 2 <= m; i += 2) {
      const double* a0 = a + static_cast<size_t>(i) * k;
      const double* a1 = a0 + k;
      double* c0 = c + static_cast<size_t>(i) * n + j0;
      double* c1 = c0 + n;
      v8d p00 = vload(c0), p01 = vload(c0 + 8), p02 = vload(c0 + 16), p03 = vload(c0 + 24);
      v8d p10 = vload(c1), p11 = vload(c1 + 8), p12 = vload(c1 + 16), p13 = vload(c1 + 24);
      const double* bp = b + j0;
      for (int kk = 0; kk < k; ++kk, bp += n) {
        const v8d b0 = vload(bp), b1 = vload(bp + 8), b2 = vload(bp + 16), b3 = vload(bp + 24);
        const v8d x0 = vbcast(a0[kk]), x1 = vbcast(a1[kk]);
        p00 += x0 * b0; p01 += x0 * b1; p02 += x0 * b2; p03 += x0 * b3;
        p10 += x1 * b0; p11 += x1 * b1; p12 += x1 * b2; p13 += x1 * b3;
      }
      vstore(c0, p00); vstore(c0 + 8, p01); vstore(c0 + 16, p02); vstore(c0 + 24, p03);
      vstore(c1, p10); vstore(c1 + 8, p11); vstore(c1 + 16, p12); vstore(c1 + 24, p13);
    }
    if (i < m) {
      const double* a0 = a + static_cast<size_t>(i) * k;
      double* c0 = c + static_cast<size_t>(i) * n + j0;
      v8d p00 = vload(c0), p01 = vload(c0 + 8), p02 = vload(c0 + 16), p03 = vload(c0 + 24);
      const double* bp = b + j0;
      for (int kk = 0; kk < k; ++kk, bp += n) {
        const v8d x0 = vbcast(a0[kk]);
        p00 += x0 * vload(bp);
        p01 += x0 * vload(bp + 8);
        p02 += x0 * vload(bp + 16);
        p03 += x0 * vload(bp + 24);
      }
      vstore(c0, p00); vstore(c0 + 8, p01); vstore(c0 + 16, p02); vstore(c0 + 24, p03);
    }
  }
  for (int j0 = n32; j0 < n8; j0 += 8) {  // 8-wide middle tier
    int i = 0;
    for (; i + 2 <= m; i += 2) {
      const double* a0 = a + static_cast<size_t>(i) * k;
      const double* a1 = a0 + k;
      double* c0 = c + static_cast<size_t>(i) * n + j0;
      double* c1 = c0 + n;
      v8d p0 = vload(c0), p1 = vload(c1);
      const double* bp = b + j0;
      for (int kk = 0; kk < k; ++kk, bp += n) {
        const v8d bv = vload(bp);
        p0 += vbcast(a0[kk]) * bv;
        p1 += vbcast(a1[kk]) * bv;
      }
      vstore(c0, p0); vstore(c1, p1);
    }
    if (i < m) {
      const double* a0 = a + static_cast<size_t>(i) * k;
      double* c0 = c + static_cast<size_t>(i) * n + j0;
      v8d p0 = vload(c0);
      const double* bp = b + j0;
      for (int kk = 0; kk < k; ++kk, bp += n) p0 += vbcast(a0[kk]) * vload(bp);
      vstore(c0, p0);
    }
  }
  if (n8 < n) {  // scalar tail, < 8 columns
    for (int i = 0; i < m; ++i) {
      const double* arow = a + static_cast<size_t>(i) * k;
      double* __restrict crow = c + static_cast<size_t>(i) * n;
      for (int kk = 0; kk < k; ++kk) {
        const double x = arow[kk];
        const double* __restrict brow = b + static_cast<size_t>(kk) * n;
        for (int j = n8; j < n; ++j) crow[j] += x * brow[j];
      }
    }
  }
}

// c (m×k) += a (m×n) · bᵀ with b stored k×n: each output entry is a dot
// product of two contiguous rows; four vector partials keep independent
// chains. No transposed copy is materialized.
void mm_acc_nt(double* __restrict c, const double* __restrict a, const double* __restrict b,
               int m, int n, int k) {
  const int n32 = n - n % 32;
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * n;
    double* __restrict crow = c + static_cast<size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double* brow = b + static_cast<size_t>(kk) * n;
      v8d s0 = {}, s1 = {}, s2 = {}, s3 = {};
      int j = 0;
      for (; j < n32; j += 32) {
        s0 += vload(arow + j) * vload(brow + j);
        s1 += vload(arow + j + 8) * vload(brow + j + 8);
        s2 += vload(arow + j + 16) * vload(brow + j + 16);
        s3 += vload(arow + j + 24) * vload(brow + j + 24);
      }
      double s = vsum((s0 + s1) + (s2 + s3));
      for (; j < n; ++j) s += arow[j] * brow[j];
      crow[kk] += s;
    }
  }
}

// c (k×n) += aᵀ · g with a m×k, g m×n: same tiling as mm_acc; the reduction
// runs over a's rows (strided scalar loads of a, g tile L1-resident).
void mm_acc_tn(double* __restrict c, const double* __restrict a, const double* __restrict g,
               int m, int k, int n) {
  const int n32 = n - n % 32;
  const int n8 = n - n % 8;
  for (int j0 = 0; j0 < n32; j0 += 32) {
    int kk = 0;
    for (; kk + 2 <= k; kk += 2) {
      double* c0 = c + static_cast<size_t>(kk) * n + j0;
      double* c1 = c0 + n;
      v8d p00 = vload(c0), p01 = vload(c0 + 8), p02 = vload(c0 + 16), p03 = vload(c0 + 24);
      v8d p10 = vload(c1), p11 = vload(c1 + 8), p12 = vload(c1 + 16), p13 = vload(c1 + 24);
      const double* gp = g + j0;
      const double* ap = a + kk;
      for (int i = 0; i < m; ++i, gp += n, ap += k) {
        const v8d g0 = vload(gp), g1 = vload(gp + 8), g2 = vload(gp + 16), g3 = vload(gp + 24);
        const v8d x0 = vbcast(ap[0]), x1 = vbcast(ap[1]);
        p00 += x0 * g0; p01 += x0 * g1; p02 += x0 * g2; p03 += x0 * g3;
        p10 += x1 * g0; p11 += x1 * g1; p12 += x1 * g2; p13 += x1 * g3;
      }
      vstore(c0, p00); vstore(c0 + 8, p01); vstore(c0 + 16, p02); vstore(c0 + 24, p03);
      vstore(c1, p10); vstore(c1 + 8, p11); vstore(c1 + 16, p12); vstore(c1 + 24, p13);
    }
    if (kk < k) {
      double* c0 = c + static_cast<size_t>(kk) * n + j0;
      v8d p00 = vload(c0), p01 = vload(c0 + 8), p02 = vload(c0 + 16), p03 = vload(c0 + 24);
      const double* gp = g + j0;
      const double* ap = a + kk;
      for (int i = 0; i < m; ++i, gp += n, ap += k) {
        const v8d x0 = vbcast(ap[0]);
        p00 += x0 * vload(gp);
        p01 += x0 * vload(gp + 8);
        p02 += x0 * vload(gp + 16);
        p03 += x0 * vload(gp + 24);
      }
      vstore(c0, p00); vstore(c0 + 8, p01); vstore(c0 + 16, p02); vstore(c0 + 24, p03);
    }
  }
  for (int j0 = n32; j0 < n8; j0 += 8) {
    int kk = 0;
    for (; kk + 2 <= k; kk += 2) {
      double* c0 = c + static_cast<size_t>(kk) * n + j0;
      double* c1 = c0 + n;
      v8d p0 = vload(c0), p1 = vload(c1);
      const double* gp = g + j0;
      const double* ap = a + kk;
      for (int i = 0; i < m; ++i, gp += n, ap += k) {
        const v8d gv = vload(gp);
        p0 += vbcast(ap[0]) * gv;
        p1 += vbcast(ap[1]) * gv;
      }
      vstore(c0, p0); vstore(c1, p1);
    }
    if (kk < k) {
      double* c0 = c + static_cast<size_t>(kk) * n + j0;
      v8d p0 = vload(c0);
      const double* gp = g + j0;
      const double* ap = a + kk;
      for (int i = 0; i < m; ++i, gp += n, ap += k) p0 += vbcast(ap[0]) * vload(gp);
      vstore(c0, p0);
    }
  }
  if (n8 < n) {
    for (int kk = 0; kk < k; ++kk) {
      double* __restrict crow = c + static_cast<size_t>(kk) * n;
      for (int i = 0; i < m; ++i) {
        const double x = a[static_cast<size_t>(i) * k + kk];
        const double* __restrict grow = g + static_cast<size_t>(i) * n;
        for (int j = n8; j < n; ++j) crow[j] += x * grow[j];
      }
    }
  }
}
std::vector<double> transpose_raw(const double* a, int r, int c) {
  std::vector<double> out(static_cast<size_t>(r) * c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(j) * r + i] = a[static_cast<size_t>(i) * c + j];
  return out;
}

}  // namespace

struct TensorOps {
  using Impl = Tensor::Impl;

  static const std::shared_ptr<Impl>& impl(const Tensor& t) {
    if (!t.impl_) throw std::invalid_argument("tensor: undefined operand");
    return t.impl_;
  }

  static Tensor wrap(std::shared_ptr<Impl> i) { return Tensor(std::move(i)); }

  static std::shared_ptr<Impl> fresh(std::vector<int> shape, std::vector<double> data) {
    auto n = std::make_shared<Impl>();
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("tensor: shape/data mismatch");
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
  }

  // Finalize an op output: record parents + backward closure when the tape
  // is live and any input requires grad.
  static Tensor finish(std::vector<int> shape, std::vector<double> data,
                       std::vector<std::shared_ptr<Impl>> parents,
                       std::function<void(Impl&)> back) {
    auto node = fresh(std::move(shape), std::move(data));
    bool record = false;
    if (g_grad_enabled) {
      for (const auto& p : parents)
        if (p->requires_grad) record = true;
    }
    if (record) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward_fn = std::move(back);
    }
    return wrap(node);
  }

  static std::vector<double>& grad_buf(Impl& n) {
    if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
    return n.grad;
  }

  static void acc_grad(const std::shared_ptr<Impl>& p, const double* g, size_t n) {
    if (!p->requires_grad) return;
    auto& buf = grad_buf(*p);
    assert(buf.size() == n);
    for (size_t i = 0; i < n; ++i) buf[i] += g[i];
  }
};

using Impl = TensorOps::Impl;
using Ops = TensorOps;

// ---- Tensor basics --------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  size_t n = shape_numel(shape);
  auto impl = Ops::fresh(std::move(shape), std::vector<double>(n, 0.0));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  size_t n = shape_numel(shape);
  return Tensor(Ops::fresh(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::scalar(double value) { return Tensor(Ops::fresh({}, {value})); }

Tensor Tensor::vec(std::vector<double> values, bool requires_grad) {
  int n = static_cast<int>(values.size());
  auto impl = Ops::fresh({n}, std::move(values));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::mat(int rows, int cols, std::vector<double> values, bool requires_grad) {
  auto impl = Ops::fresh({rows, cols}, std::move(values));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::randn(std::vector<int> shape, double stddev, Rng& rng, bool requires_grad) {
  size_t n = shape_numel(shape);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  auto impl = Ops::fresh(std::move(shape), std::move(v));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::identity(int n) {
  std::vector<double> v(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[static_cast<size_t>(i) * n + i] = 1.0;
  return Tensor(Ops::fresh({n, n}, std::move(v)));
}

const std::vector<int>& Tensor::shape() const { return Ops::impl(*this)->shape; }
int Tensor::ndim() const { return static_cast<int>(shape().size()); }
size_t Tensor::numel() const { return Ops::impl(*this)->data.size(); }

int Tensor::rows() const {
  const auto& s = shape();
  if (s.size() != 2) throw std::invalid_argument("tensor: rows() on non-matrix");
  return s[0];
}

int Tensor::cols() const {
  const auto& s = shape();
  if (s.size() != 2) throw std::invalid_argument("tensor: cols() on non-matrix");
  return s[1];
}

std::span<const double> Tensor::data() const { return Ops::impl(*this)->data; }
std::span<double> Tensor::mutable_data() { return Ops::impl(*this)->data; }

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("tensor: item() on non-scalar");
  return Ops::impl(*this)->data[0];
}

double Tensor::at(int i) const { return Ops::impl(*this)->data.at(i); }

double Tensor::at(int i, int j) const {
  const auto& im = Ops::impl(*this);
  return im->data.at(static_cast<size_t>(i) * cols() + j);
}

void Tensor::set(int i, double v) { Ops::impl(*this)->data.at(i) = v; }

void Tensor::set(int i, int j, double v) {
  Ops::impl(*this)->data.at(static_cast<size_t>(i) * cols() + j) = v;
}

bool Tensor::requires_grad() const { return Ops::impl(*this)->requires_grad; }

void Tensor::set_requires_grad(bool v) {
  auto& im = Ops::impl(*this);
  if (!im->parents.empty() && !v)
    throw std::invalid_argument("tensor: cannot clear requires_grad on a recorded node");
  im->requires_grad = v;
}

bool Tensor::is_leaf() const { return Ops::impl(*this)->parents.empty(); }

std::span<const double> Tensor::grad() const { return Ops::impl(*this)->grad; }

std::span<double> Tensor::mutable_grad() {
  return Ops::grad_buf(*Ops::impl(*this));
}

void Tensor::zero_grad() {
  auto& g = Ops::impl(*this)->grad;
  std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::detach() const {
  const auto& im = Ops::impl(*this);
  return Tensor(Ops::fresh(im->shape, im->data));
}

Tensor Tensor::clone() const {
  const auto& im = Ops::impl(*this);
  auto copy = Ops::fresh(im->shape, im->data);
  copy->requires_grad = im->requires_grad;
  return Tensor(std::move(copy));
}

bool Tensor::all_finite() const {
  for (double v : data())
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::check_finite(const std::string& what) const {
  if (!all_finite()) throw NumericError("non-finite values in " + what);
}

// ---- grad mode ------------------------------------------------------------

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& ia = Ops::impl(a);
  const auto& ib = Ops::impl(b);
  if (ia->shape.size() != 2 || ib->shape.size() != 2)
    throw std::invalid_argument("matmul: operands must be matrices");
  int m = ia->shape[0], k = ia->shape[1], k2 = ib->shape[0], n = ib->shape[1];
  if (k != k2) throw std::invalid_argument("matmul: inner dimensions disagree");

  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  mm_acc(out.data(), ia->data.data(), ib->data.data(), m, k, n);

  auto back = [ia, ib, m, k, n](Impl& self) {
    const double* g = self.grad.data();
    if (ia->requires_grad)
      mm_acc_nt(Ops::grad_buf(*ia).data(), g, ib->data.data(), m, n, k);  // dA = dC·Bᵀ
    if (ib->requires_grad)
      mm_acc_tn(Ops::grad_buf(*ib).data(), ia->data.data(), g, m, k, n);  // dB = Aᵀ·dC
  };
  return Ops::finish({m, n}, std::move(out), {ia, ib}, back);
}

Tensor transpose(const Tensor& a) {
  const auto& ia = Ops::impl(a);
  if (ia->shape.size() != 2) throw std::invalid_argument("transpose: matrix required");
  int r = ia->shape[0], c = ia->shape[1];
  auto out = transpose_raw(ia->data.data(), r, c);
  auto back = [ia, r, c](Impl& self) {
    auto gt = transpose_raw(self.grad.data(), c, r);
    Ops::acc_grad(ia, gt.data(), gt.size());
  };
  return Ops::finish({c, r}, std::move(out), {ia}, back);
}

namespace {

void require_same_shape(const std::shared_ptr<Impl>& a, const std::shared_ptr<Impl>& b,
                        const char* op) {
  if (a->shape != b->shape) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const auto& ia = Ops::impl(a);
  const auto& ib = Ops::impl(b);
  require_same_shape(ia, ib, "add");
  std::vector<double> out(ia->data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = ia->data[i] + ib->data[i];
  auto back = [ia, ib](Impl& self) {
    Ops::acc_grad(ia, self.grad.data(), self.grad.size());
    Ops::acc_grad(ib, self.grad.data(), self.grad.size());
  };
  return Ops::finish(ia->shape, std::move(out), {ia, ib}, back);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto& ia = Ops::impl(a);
  const auto& ib = Ops::impl(b);
  require_same_shape(ia, ib, "sub");
  std::vector<double> out(ia->data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = ia->data[i] - ib->data[i];
  auto back = [ia, ib](Impl& self) {
    Ops::acc_grad(ia, self.grad.data(), self.grad.size());
    if (ib->requires_grad) {
      auto& gb = Ops::grad_buf(*ib);
      for (size_t i = 0; i < self.grad.size(); ++i) gb[i] -= self.grad[i];
    }
  };
  return Ops::finish(ia->shape, std::move(out), {ia, ib}, back);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto& ia = Ops::impl(a);
  const auto& ib = Ops::impl(b);
  require_same_shape(ia, ib, "mul");
  std::vector<double> out(ia->data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = ia->data[i] * ib->data[i];
  auto back = [ia, ib](Impl& self) {
    if (ia->requires_grad) {
      auto& ga = Ops::grad_buf(*ia);
      for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * ib->data[i];
    }
    if (ib->requires_grad) {
      auto& gb = Ops::grad_buf(*ib);
      for (size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * ia->data[i];
    }
  };
  return Ops::finish(ia->shape, std::move(out), {ia, ib}, back);
}

Tensor scale(const Tensor& a, double s) {
  const auto& ia = Ops::impl(a);
  std::vector<double> out(ia->data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = ia->data[i] * s;
  auto back = [ia, s](Impl& self) {
    if (!ia->requires_grad) return;
    auto& ga = Ops::grad_buf(*ia);
    for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * s;
  };
  return Ops::finish(ia->shape, std::move(out), {ia}, back);
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  const auto& im = Ops::impl(m);
  const auto& iv = Ops::impl(v);
  if (im->shape.size() != 2 || iv->shape.size() != 1 || im->shape[1] != iv->shape[0])
    throw std::invalid_argument("add_rowvec: need r×c matrix and length-c vector");
  int r = im->shape[0], c = im->shape[1];
  std::vector<double> out(im->data.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<size_t>(i) * c + j] = im->data[static_cast<size_t>(i) * c + j] + iv->data[j];
  auto back = [im, iv, r, c](Impl& self) {
    Ops::acc_grad(im, self.grad.data(), self.grad.size());
    if (iv->requires_grad) {
      auto& gv = Ops::grad_buf(*iv);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) gv[j] += self.grad[static_cast<size_t>(i) * c + j];
    }
  };
  return Ops::finish(im->shape, std::move(out), {im, iv}, back);
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

Tensor gelu(const Tensor& a) {
  const auto& ia = Ops::impl(a);
  std::vector<double> out(ia->data.size());
  for (size_t i = 0; i < out.size(); ++i) {
    double x = ia->data[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  auto back = [ia](Impl& self) {
    if (!ia->requires_grad) return;
    auto& ga = Ops::grad_buf(*ia);
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double x = ia->data[i];
      double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      ga[i] += self.grad[i] * (cdf + x * pdf);
    }
  };
  return Ops::finish(ia->shape, std::move(out), {ia}, back);
}

Tensor softmax_rows(const Tensor& a, bool causal) {
  const auto& ia = Ops::impl(a);
  if (ia->shape.size() != 2) throw std::invalid_argument("softmax_rows: matrix required");
  int r = ia->shape[0], c = ia->shape[1];
  if (causal && r != c)
    throw std::invalid_argument("softmax_rows: causal mask needs a square matrix");
  std::vector<double> out(ia->data.size(), 0.0);
  for (int i = 0; i < r; ++i) {
    const double* x = ia->data.data() + static_cast<size_t>(i) * c;
    double* y = out.data() + static_cast<size_t>(i) * c;
    int lim = causal ? i + 1 : c;
    double mx = x[0];
    for (int j = 1; j < lim; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < lim; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < lim; ++j) y[j] /= z;
  }
  auto saved = out;  // softmax output needed by the backward
  auto back = [ia, r, c, causal, saved = std::move(saved)](Impl& self) {
    if (!ia->requires_grad) return;
    auto& ga = Ops::grad_buf(*ia);
    for (int i = 0; i < r; ++i) {
      const double* s = saved.data() + static_cast<size_t>(i) * c;
      const double* gy = self.grad.data() + static_cast<size_t>(i) * c;
      double* gx = ga.data() + static_cast<size_t>(i) * c;
      int lim = causal ? i + 1 : c;
      double dot = 0.0;
      for (int j = 0; j < lim; ++j) dot += gy[j] * s[j];
      for (int j = 0; j < lim; ++j) gx[j] += s[j] * (gy[j] - dot);
    }
  };
  return Ops::finish(ia->shape, std::move(out), {ia}, back);
}

Tensor log_softmax_rows(const Tensor& a) {
  const auto& ia = Ops::impl(a);
  if (ia->shape.size() != 2) throw std::invalid_argument("log_softmax_rows: matrix required");
  int r = ia->shape[0], c = ia->shape[1];
  std::vector<double> out(ia->data.size());
  for (int i = 0; i < r; ++i) {
    const double* x = ia->data.data() + static_cast<size_t>(i) * c;
    double* y = out.data() + static_cast<size_t>(i) * c;
    double mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    double lse = mx + std::log(z);
    for (int j = 0; j < c; ++j) y[j] = x[j] - lse;
  }
  auto saved = out;
  auto back = [ia, r, c, saved = std::move(saved)](Impl& self) {
    if (!ia->requires_grad) return;
    auto& ga = Ops::grad_buf(*ia);
    for (int i = 0; i < r; ++i) {
      const double* y = saved.data() + static_cast<size_t>(i) * c;
      const double* gy = self.grad.data() + static_cast<size_t>(i) * c;
      double* gx = ga.data() + static_cast<size_t>(i) * c;
      double gsum = 0.0;
      for (int j = 0; j < c; ++j) gsum += gy[j];
      for (int j = 0; j < c; ++j) gx[j] += gy[j] - std::exp(y[j]) * gsum;
    }
  };
  return Ops::finish(ia->shape, std::move(out), {ia}, back);
}

Tensor layernorm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  const auto& ia = Ops::impl(a);
  const auto& ig = Ops::impl(gain);
  const auto& ib = Ops::impl(bias);
  if (ia->shape.size() != 2) throw std::invalid_argument("layernorm_rows: matrix required");
  int r = ia->shape[0], c = ia->shape[1];
  if (ig->shape != std::vector<int>{c} || ib->shape != std::vector<int>{c})
    throw std::invalid_argument("layernorm_rows: gain/bias must be length-cols vectors");

  std::vector<double> out(ia->data.size());
  std::vector<double> xhat(ia->data.size());
  std::vector<double> rstd(r);
  for (int i = 0; i < r; ++i) {
    const double* x = ia->data.data() + static_cast<size_t>(i) * c;
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += x[j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      double d = x[j] - mean;
      var += d * d;
    }
    var /= c;
    double rs = 1.0 / std::sqrt(var + eps);
    rstd[i] = rs;
    for (int j = 0; j < c; ++j) {
      double xh = (x[j] - mean) * rs;
      xhat[static_cast<size_t>(i) * c + j] = xh;
      out[static_cast<size_t>(i) * c + j] = xh * ig->data[j] + ib->data[j];
    }
  }
  auto back = [ia, ig, ib, r, c, xhat = std::move(xhat), rstd = std::move(rstd)](Impl& self) {
    for (int i = 0; i < r; ++i) {
      const double* gy = self.grad.data() + static_cast<size_t>(i) * c;
      const double* xh = xhat.data() + static_cast<size_t>(i) * c;
      if (ig->requires_grad) {
        auto& gg = Ops::grad_buf(*ig);
        for (int j = 0; j < c; ++j) gg[j] += gy[j] * xh[j];
      }
      if (ib->requires_grad) {
        auto& gb = Ops::grad_buf(*ib);
        for (int j = 0; j < c; ++j) gb[j] += gy[j];
      }
      if (ia->requires_grad) {
        auto& ga = Ops::grad_buf(*ia);
        double* gx = ga.data() + static_cast<size_t>(i) * c;
        double mean_g = 0.0, mean_gx = 0.0;
        for (int j = 0; j < c; ++j) {
          double t = gy[j] * ig->data[j];
          mean_g += t;
          mean_gx += t * xh[j];
        }
        mean_g /= c;
        mean_gx /= c;
        for (int j = 0; j < c; ++j) {
          double t = gy[j] * ig->data[j];
          gx[j] += (t - mean_g - xh[j] * mean_gx) * rstd[i];
        }
      }
    }
  };
  return Ops::finish(ia->shape, std::move(out), {ia, ig, ib}, back);
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
  const auto& it = Ops::impl(table);
  if (it->shape.size() != 2) throw std::invalid_argument("embedding_rows: matrix required");
  int v = it->shape[0], d = it->shape[1];
  int n = static_cast<int>(ids.size());
  std::vector<double> out(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    int id = ids[i];
    if (id < 0 || id >= v) throw std::invalid_argument("embedding_rows: id out of range");
    std::copy_n(it->data.data() + static_cast<size_t>(id) * d, d,
                out.data() + static_cast<size_t>(i) * d);
  }
  auto back = [it, ids, d](Impl& self) {
    if (!it->requires_grad) return;
    auto& gt = Ops::grad_buf(*it);
    for (size_t i = 0; i < ids.size(); ++i) {
      const double* g = self.grad.data() + i * d;
      double* dst = gt.data() + static_cast<size_t>(ids[i]) * d;
      for (int j = 0; j < d; ++j) dst[j] += g[j];
    }
  };
  return Ops::finish({n, d}, std::move(out), {it}, back);
}

Tensor vstack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("vstack: no parts");
  std::vector<std::shared_ptr<Impl>> impls;
  int c = -1, rows = 0;
  for (const auto& p : parts) {
    const auto& ip = Ops::impl(p);
    if (ip->shape.size() != 2) throw std::invalid_argument("vstack: matrix parts required");
    if (c < 0) c = ip->shape[1];
    if (ip->shape[1] != c) throw std::invalid_argument("vstack: column mismatch");
    rows += ip->shape[0];
    impls.push_back(ip);
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(rows) * c);
  for (const auto& ip : impls) out.insert(out.end(), ip->data.begin(), ip->data.end());
  auto back = [impls](Impl& self) {
    size_t off = 0;
    for (const auto& ip : impls) {
      Ops::acc_grad(ip, self.grad.data() + off, ip->data.size());
      off += ip->data.size();
    }
  };
  return Ops::finish({rows, c}, std::move(out), std::move(impls), back);
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
  const auto& ia = Ops::impl(a);
  if (ia->shape.size() != 2) throw std::invalid_argument("slice_rows: matrix required");
  int r = ia->shape[0], c = ia->shape[1];
  if (r0 < 0 || r1 > r || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
  std::vector<double> out(ia->data.begin() + static_cast<size_t>(r0) * c,
                          ia->data.begin() + static_cast<size_t>(r1) * c);
  auto back = [ia, r0, c](Impl& self) {
    if (!ia->requires_grad) return;
    auto& ga = Ops::grad_buf(*ia);
    for (size_t i = 0; i < self.grad.size(); ++i)
      ga[static_cast<size_t>(r0) * c + i] += self.grad[i];
  };
  return Ops::finish({r1 - r0, c}, std::move(out), {ia}, back);
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  const auto& ia = Ops::impl(a);
  if (ia->shape.size() != 2) throw std::invalid_argument("slice_cols: matrix required");
  int r = ia->shape[0], c = ia->shape[1];
  if (c0 < 0 || c1 > c || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
  int w = c1 - c0;
  std::vector<double> out(static_cast<size_t>(r) * w);
  for (int i = 0; i < r; ++i)
    std::copy_n(ia->data.data() + static_cast<size_t>(i) * c + c0, w,
                out.data() + static_cast<size_t>(i) * w);
  auto back = [ia, r, c, c0, w](Impl& self) {
    if (!ia->requires_grad) return;
    auto& ga = Ops::grad_buf(*ia);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        ga[static_cast<size_t>(i) * c + c0 + j] += self.grad[static_cast<size_t>(i) * w + j];
  };
  return Ops::finish({r, w}, std::move(out), {ia}, back);
}

Tensor hstack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("hstack: no parts");
  std::vector<std::shared_ptr<Impl>> impls;
  int r = -1, cols = 0;
  for (const auto& p : parts) {
    const auto& ip = Ops::impl(p);
    if (ip->shape.size() != 2) throw std::invalid_argument("hstack: matrix parts required");
    if (r < 0) r = ip->shape[0];
    if (ip->shape[0] != r) throw std::invalid_argument("hstack: row mismatch");
    cols += ip->shape[1];
    impls.push_back(ip);
  }
  std::vector<double> out(static_cast<size_t>(r) * cols);
  int off = 0;
  for (const auto& ip : impls) {
    int w = ip->shape[1];
    for (int i = 0; i < r; ++i)
      std::copy_n(ip->data.data() + static_cast<size_t>(i) * w, w,
                  out.data() + static_cast<size_t>(i) * cols + off);
    off += w;
  }
  auto back = [impls, r, cols](Impl& self) {
    int off = 0;
    for (const auto& ip : impls) {
      int w = ip->shape[1];
      if (ip->requires_grad) {
        auto& g = Ops::grad_buf(*ip);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < w; ++j)
            g[static_cast<size_t>(i) * w + j] += self.grad[static_cast<size_t>(i) * cols + off + j];
      }
      off += w;
    }
  };
  return Ops::finish({r, cols}, std::move(out), std::move(impls), back);
}

Tensor row_overwrite(const Tensor& m, int r, const Tensor& v) {
  const auto& im = Ops::impl(m);
  const auto& iv = Ops::impl(v);
  if (im->shape.size() != 2 || iv->shape.size() != 1 || iv->shape[0] != im->shape[1])
    throw std::invalid_argument("row_overwrite: need r×c matrix and length-c vector");
  int rows = im->shape[0], c = im->shape[1];
  if (r < 0 || r >= rows) throw std::invalid_argument("row_overwrite: row out of range");
  std::vector<double> out = im->data;
  std::copy_n(iv->data.data(), c, out.data() + static_cast<size_t>(r) * c);
  auto back = [im, iv, r, c](Impl& self) {
    if (im->requires_grad) {
      auto& gm = Ops::grad_buf(*im);
      for (size_t i = 0; i < self.grad.size(); ++i) {
        size_t row = i / c;
        if (static_cast<int>(row) != r) gm[i] += self.grad[i];
      }
    }
    if (iv->requires_grad) {
      auto& gv = Ops::grad_buf(*iv);
      for (int j = 0; j < c; ++j) gv[j] += self.grad[static_cast<size_t>(r) * c + j];
    }
  };
  return Ops::finish(im->shape, std::move(out), {im, iv}, back);
}

Tensor row_add(const Tensor& m, int r, const Tensor& v) {
  const auto& im = Ops::impl(m);
  const auto& iv = Ops::impl(v);
  if (im->shape.size() != 2 || iv->shape.size() != 1 || iv->shape[0] != im->shape[1])
    throw std::invalid_argument("row_add: need r×c matrix and length-c vector");
  int rows = im->shape[0], c = im->shape[1];
  if (r < 0 || r >= rows) throw std::invalid_argument("row_add: row out of range");
  std::vector<double> out = im->data;
  for (int j = 0; j < c; ++j) out[static_cast<size_t>(r) * c + j] += iv->data[j];
  auto back = [im, iv, r, c](Impl& self) {
    Ops::acc_grad(im, self.grad.data(), self.grad.size());
    if (iv->requires_grad) {
      auto& gv = Ops::grad_buf(*iv);
      for (int j = 0; j < c; ++j) gv[j] += self.grad[static_cast<size_t>(r) * c + j];
    }
  };
  return Ops::finish(im->shape, std::move(out), {im, iv}, back);
}

Tensor neg_pick_sum(const Tensor& a, const std::vector<std::pair<int, int>>& idx) {
  const auto& ia = Ops::impl(a);
  if (ia->shape.size() != 2) throw std::invalid_argument("neg_pick_sum: matrix required");
  int r = ia->shape[0], c = ia->shape[1];
  double total = 0.0;
  for (auto [i, j] : idx) {
    if (i < 0 || i >= r || j < 0 || j >= c)
      throw std::invalid_argument("neg_pick_sum: index out of range");
    total -= ia->data[static_cast<size_t>(i) * c + j];
  }
  auto back = [ia, idx, c](Impl& self) {
    if (!ia->requires_grad) return;
    auto& ga = Ops::grad_buf(*ia);
    double g = self.grad[0];
    for (auto [i, j] : idx) ga[static_cast<size_t>(i) * c + j] -= g;
  };
  return Ops::finish({}, {total}, {ia}, back);
}

Tensor sum(const Tensor& a) {
  const auto& ia = Ops::impl(a);
  double total = 0.0;
  for (double x : ia->data) total += x;
  auto back = [ia](Impl& self) {
    if (!ia->requires_grad) return;
    auto& ga = Ops::grad_buf(*ia);
    double g = self.grad[0];
    for (auto& x : ga) x += g;
  };
  return Ops::finish({}, {total}, {ia}, back);
}

// ---- backward -------------------------------------------------------------

void backward(const Tensor& loss) {
  const auto& root = Ops::impl(loss);
  if (root->data.size() != 1)
    throw std::invalid_argument("backward: loss must be a scalar");

  // Iterative post-order DFS; order is fixed by construction order of parents.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Impl* p = node->parents[next++].get();
      if (!visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Ops::grad_buf(*root)[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---- plain linear algebra -------------------------------------------------

Tensor solve_regularized_rank1(double lambda, const Tensor& k) {
  if (lambda <= 0.0) throw std::invalid_argument("solve_regularized_rank1: lambda must be > 0");
  const auto& ik = Ops::impl(k);
  if (ik->shape.size() != 1) throw std::invalid_argument("solve_regularized_rank1: k must be a vector");
  int d = ik->shape[0];
  double ktk = 0.0;
  for (double x : ik->data) ktk += x * x;
  double denom = lambda + ktk;
  std::vector<double> out(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) {
    double* row = out.data() + static_cast<size_t>(i) * d;
    double ki = ik->data[i];
    for (int j = 0; j < d; ++j) row[j] = -ki * ik->data[j] / denom;
    row[i] += 1.0;
    for (int j = 0; j < d; ++j) row[j] /= lambda;
  }
  return Tensor::mat(d, d, std::move(out));
}

}  // namespace mmtl
