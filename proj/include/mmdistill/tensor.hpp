#pragma once
// Dense f64 tensors with reverse-mode automatic differentiation.
//
// Every backward rule is itself expressed through the primitive ops below, so
// gradients produced with create_graph=true are ordinary graph nodes and can
// be differentiated again (grad-of-grad). All kernels are single-threaded and
// accumulate in a fixed order: identical inputs give bitwise-identical
// outputs and gradients.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mmdistill/common.hpp"

namespace mmd {

class Tensor;

namespace detail {

inline thread_local bool grad_mode = true;

struct Node;
using Vjp = std::function<std::vector<Tensor>(const Tensor& self, const Tensor& grad)>;

inline std::int64_t next_node_id() {
  static thread_local std::int64_t hi = 0;
  // ids only need to be unique within a thread; graphs never cross threads
  static thread_local std::uint64_t base = 0;
  if (base == 0) {
    static std::atomic<std::uint64_t> thread_counter{1};
    base = thread_counter.fetch_add(1) << 40;
  }
  return static_cast<std::int64_t>(base) + (++hi);
}

}  // namespace detail

// RAII guard that disables graph recording (forward-only evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

class GradModeGuard {
 public:
  explicit GradModeGuard(bool on) : prev_(grad_mode) { grad_mode = on; }
  ~GradModeGuard() { grad_mode = prev_; }

 private:
  bool prev_;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad);
  static Tensor constant(Shape shape, std::vector<double> data);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  bool requires_grad() const;
  bool is_leaf() const;
  std::int64_t id() const;
  const char* op_name() const;

  std::span<const double> data() const;
  double* data_mut();  // only meaningful on leaves; callers own graph validity
  double item() const;

  Tensor detach() const;                       // value copy, no graph, no grad
  Tensor clone_leaf(bool requires_grad) const; // value copy as a fresh leaf
  void set_requires_grad(bool rg);             // leaves only

  const Tensor& input(std::size_t i) const;
  std::size_t num_inputs() const;

  detail::Node* node() const { return n_.get(); }

 private:
  friend Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                        std::vector<Tensor> inputs, detail::Vjp vjp);
  std::shared_ptr<detail::Node> n_;
};

namespace detail {

struct Node {
  std::int64_t id = 0;
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  const char* op = nullptr;  // nullptr => leaf
  std::vector<Tensor> inputs;
  Vjp vjp;
};

}  // namespace detail

inline Tensor Tensor::leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  check(mmd::numel(shape) == data.size(),
        "tensor: shape " + shape_str(shape) + " does not match data length " +
            std::to_string(data.size()));
  Tensor t;
  t.n_ = std::make_shared<detail::Node>();
  t.n_->id = detail::next_node_id();
  t.n_->shape = std::move(shape);
  t.n_->value = std::move(data);
  t.n_->requires_grad = requires_grad;
  return t;
}

inline Tensor Tensor::constant(Shape shape, std::vector<double> data) {
  return leaf(std::move(shape), std::move(data), false);
}

inline Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(mmd::numel(shape), 0.0);
  return leaf(std::move(shape), std::move(d), requires_grad);
}

inline Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  std::vector<double> d(mmd::numel(shape), v);
  return leaf(std::move(shape), std::move(d), requires_grad);
}

inline Tensor Tensor::scalar(double v, bool requires_grad) {
  return leaf(Shape{}, std::vector<double>{v}, requires_grad);
}

inline const Shape& Tensor::shape() const { return n_->shape; }
inline std::size_t Tensor::numel() const { return n_->value.size(); }
inline bool Tensor::requires_grad() const { return n_->requires_grad; }
inline bool Tensor::is_leaf() const { return n_->op == nullptr; }
inline std::int64_t Tensor::id() const { return n_->id; }
inline const char* Tensor::op_name() const { return n_->op ? n_->op : "leaf"; }
inline std::span<const double> Tensor::data() const { return n_->value; }
inline double* Tensor::data_mut() { return n_->value.data(); }

inline double Tensor::item() const {
  check(numel() == 1, "item: tensor is not scalar, shape " + shape_str(shape()));
  return n_->value[0];
}

inline Tensor Tensor::detach() const {
  return constant(n_->shape, n_->value);
}

inline Tensor Tensor::clone_leaf(bool requires_grad) const {
  return leaf(n_->shape, n_->value, requires_grad);
}

inline void Tensor::set_requires_grad(bool rg) {
  check(is_leaf(), "set_requires_grad: only valid on leaves");
  n_->requires_grad = rg;
}

inline const Tensor& Tensor::input(std::size_t i) const { return n_->inputs[i]; }
inline std::size_t Tensor::num_inputs() const { return n_->inputs.size(); }

// Central op factory. Records the node (inputs + backward rule) only when
// grad mode is on and some input requires grad; otherwise the result is a
// detached constant and the inputs are released.
inline Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                      std::vector<Tensor> inputs, detail::Vjp vjp) {
  bool rg = false;
  if (detail::grad_mode) {
    for (const Tensor& t : inputs) rg = rg || t.requires_grad();
  }
  Tensor t;
  t.n_ = std::make_shared<detail::Node>();
  t.n_->id = detail::next_node_id();
  t.n_->shape = std::move(shape);
  t.n_->value = std::move(value);
  t.n_->requires_grad = rg;
  if (rg) {
    t.n_->op = op;
    t.n_->inputs = std::move(inputs);
    t.n_->vjp = std::move(vjp);
  }
  return t;
}

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

namespace detail {

inline void kmatmul(const double* a, const double* b, double* c, int m, int k, int n) {
  std::memset(c, 0, sizeof(double) * static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      double av = arow[l];
      const double* brow = b + static_cast<std::size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct ConvDims {
  int N, Ci, H, W, Co, KH, KW, stride, pad, OH, OW;
};

inline void kconv2d(const double* x, const double* w, double* y, const ConvDims& d) {
  std::memset(y, 0,
              sizeof(double) * static_cast<std::size_t>(d.N) * d.Co * d.OH * d.OW);
  for (int n = 0; n < d.N; ++n) {
    for (int co = 0; co < d.Co; ++co) {
      double* yb = y + (static_cast<std::size_t>(n) * d.Co + co) * d.OH * d.OW;
      for (int ci = 0; ci < d.Ci; ++ci) {
        const double* xb = x + (static_cast<std::size_t>(n) * d.Ci + ci) * d.H * d.W;
        const double* wb = w + (static_cast<std::size_t>(co) * d.Ci + ci) * d.KH * d.KW;
        for (int kh = 0; kh < d.KH; ++kh) {
          for (int kw = 0; kw < d.KW; ++kw) {
            double wv = wb[kh * d.KW + kw];
            if (d.stride == 1) {
              int lo = std::max(0, d.pad - kw);
              int hi = std::min(d.OW, d.W + d.pad - kw);
              for (int oh = 0; oh < d.OH; ++oh) {
                int ih = oh - d.pad + kh;
                if (ih < 0 || ih >= d.H) continue;
                const double* xrow = xb + static_cast<std::size_t>(ih) * d.W + (lo - d.pad + kw);
                double* yrow = yb + static_cast<std::size_t>(oh) * d.OW;
                for (int ow = lo; ow < hi; ++ow) yrow[ow] += wv * xrow[ow - lo];
              }
            } else {
              for (int oh = 0; oh < d.OH; ++oh) {
                int ih = oh * d.stride - d.pad + kh;
                if (ih < 0 || ih >= d.H) continue;
                const double* xrow = xb + static_cast<std::size_t>(ih) * d.W;
                double* yrow = yb + static_cast<std::size_t>(oh) * d.OW;
                for (int ow = 0; ow < d.OW; ++ow) {
                  int iw = ow * d.stride - d.pad + kw;
                  if (iw < 0 || iw >= d.W) continue;
                  yrow[ow] += wv * xrow[iw];
                }
              }
            }
          }
        }
      }
    }
  }
}

inline void kconv2d_input_grad(const double* g, const double* w, double* dx, const ConvDims& d) {
  std::memset(dx, 0,
              sizeof(double) * static_cast<std::size_t>(d.N) * d.Ci * d.H * d.W);
  for (int n = 0; n < d.N; ++n) {
    for (int co = 0; co < d.Co; ++co) {
      const double* gb = g + (static_cast<std::size_t>(n) * d.Co + co) * d.OH * d.OW;
      for (int ci = 0; ci < d.Ci; ++ci) {
        double* dxb = dx + (static_cast<std::size_t>(n) * d.Ci + ci) * d.H * d.W;
        const double* wb = w + (static_cast<std::size_t>(co) * d.Ci + ci) * d.KH * d.KW;
        for (int kh = 0; kh < d.KH; ++kh) {
          for (int kw = 0; kw < d.KW; ++kw) {
            double wv = wb[kh * d.KW + kw];
            if (d.stride == 1) {
              int lo = std::max(0, d.pad - kw);
              int hi = std::min(d.OW, d.W + d.pad - kw);
              for (int oh = 0; oh < d.OH; ++oh) {
                int ih = oh - d.pad + kh;
                if (ih < 0 || ih >= d.H) continue;
                double* dxrow = dxb + static_cast<std::size_t>(ih) * d.W + (lo - d.pad + kw);
                const double* grow = gb + static_cast<std::size_t>(oh) * d.OW;
                for (int ow = lo; ow < hi; ++ow) dxrow[ow - lo] += wv * grow[ow];
              }
            } else {
              for (int oh = 0; oh < d.OH; ++oh) {
                int ih = oh * d.stride - d.pad + kh;
                if (ih < 0 || ih >= d.H) continue;
                double* dxrow = dxb + static_cast<std::size_t>(ih) * d.W;
                const double* grow = gb + static_cast<std::size_t>(oh) * d.OW;
                for (int ow = 0; ow < d.OW; ++ow) {
                  int iw = ow * d.stride - d.pad + kw;
                  if (iw < 0 || iw >= d.W) continue;
                  dxrow[iw] += wv * grow[ow];
                }
              }
            }
          }
        }
      }
    }
  }
}

inline void kconv2d_weight_grad(const double* x, const double* g, double* dw, const ConvDims& d) {
  std::memset(dw, 0,
              sizeof(double) * static_cast<std::size_t>(d.Co) * d.Ci * d.KH * d.KW);
  if (d.stride == 1 && d.pad == 1 && d.KH == 3 && d.KW == 3 && d.OH == d.H && d.OW == d.W &&
      d.W >= 3) {
    // fused-kw fast path: one pass per (kh), three accumulators per row
    for (int n = 0; n < d.N; ++n) {
      for (int co = 0; co < d.Co; ++co) {
        const double* gb = g + (static_cast<std::size_t>(n) * d.Co + co) * d.OH * d.OW;
        for (int ci = 0; ci < d.Ci; ++ci) {
          const double* xb = x + (static_cast<std::size_t>(n) * d.Ci + ci) * d.H * d.W;
          double* dwb = dw + (static_cast<std::size_t>(co) * d.Ci + ci) * 9;
          for (int kh = 0; kh < 3; ++kh) {
            double a0 = 0.0, a1 = 0.0, a2 = 0.0;
            for (int oh = 0; oh < d.OH; ++oh) {
              int ih = oh - 1 + kh;
              if (ih < 0 || ih >= d.H) continue;
              const double* xr = xb + static_cast<std::size_t>(ih) * d.W;
              const double* gr = gb + static_cast<std::size_t>(oh) * d.OW;
              double g0 = gr[0];
              a1 += g0 * xr[0];
              a2 += g0 * xr[1];
              for (int ow = 1; ow < d.OW - 1; ++ow) {
                double gv = gr[ow];
                a0 += gv * xr[ow - 1];
                a1 += gv * xr[ow];
                a2 += gv * xr[ow + 1];
              }
              double gl = gr[d.OW - 1];
              a0 += gl * xr[d.W - 2];
              a1 += gl * xr[d.W - 1];
            }
            dwb[kh * 3 + 0] += a0;
            dwb[kh * 3 + 1] += a1;
            dwb[kh * 3 + 2] += a2;
          }
        }
      }
    }
    return;
  }
  for (int n = 0; n < d.N; ++n) {
    for (int co = 0; co < d.Co; ++co) {
      const double* gb = g + (static_cast<std::size_t>(n) * d.Co + co) * d.OH * d.OW;
      for (int ci = 0; ci < d.Ci; ++ci) {
        const double* xb = x + (static_cast<std::size_t>(n) * d.Ci + ci) * d.H * d.W;
        double* dwb = dw + (static_cast<std::size_t>(co) * d.Ci + ci) * d.KH * d.KW;
        for (int kh = 0; kh < d.KH; ++kh) {
          for (int kw = 0; kw < d.KW; ++kw) {
            double acc = 0.0;
            if (d.stride == 1) {
              int lo = std::max(0, d.pad - kw);
              int hi = std::min(d.OW, d.W + d.pad - kw);
              for (int oh = 0; oh < d.OH; ++oh) {
                int ih = oh - d.pad + kh;
                if (ih < 0 || ih >= d.H) continue;
                const double* xrow = xb + static_cast<std::size_t>(ih) * d.W + (lo - d.pad + kw);
                const double* grow = gb + static_cast<std::size_t>(oh) * d.OW;
                for (int ow = lo; ow < hi; ++ow) acc += xrow[ow - lo] * grow[ow];
              }
            } else {
              for (int oh = 0; oh < d.OH; ++oh) {
                int ih = oh * d.stride - d.pad + kh;
                if (ih < 0 || ih >= d.H) continue;
                const double* xrow = xb + static_cast<std::size_t>(ih) * d.W;
                const double* grow = gb + static_cast<std::size_t>(oh) * d.OW;
                for (int ow = 0; ow < d.OW; ++ow) {
                  int iw = ow * d.stride - d.pad + kw;
                  if (iw < 0 || iw >= d.W) continue;
                  acc += xrow[iw] * grow[ow];
                }
              }
            }
            dwb[kh * d.KW + kw] += acc;
          }
        }
      }
    }
  }
}

inline void binary_shape_check(const char* op, const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// primitive ops (closed under differentiation)
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_const(const Tensor& x, std::vector<double> blob);
Tensor add_const(const Tensor& x, std::vector<double> blob);
Tensor scale(const Tensor& s, const Tensor& x);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor embed_rows(const Tensor& x, int r0, int total_rows);
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor embed_cols(const Tensor& x, int c0, int total_cols);
Tensor concat_cols(const std::vector<Tensor>& xs);
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, int stride, int pad, int H, int W);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, int stride, int pad, int KH, int KW);
Tensor avgpool2d(const Tensor& x, int k);
Tensor avgunpool2d(const Tensor& x, int k);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor recip(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mask_mul(const Tensor& x, const Tensor& m);

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::binary_shape_check("add", a, b);
  std::vector<double> v(a.numel());
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = pa[i] + pb[i];
  return make_op("add", a.shape(), std::move(v), {a, b},
                 [](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{g, g};
                 });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::binary_shape_check("sub", a, b);
  std::vector<double> v(a.numel());
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = pa[i] - pb[i];
  return make_op("sub", a.shape(), std::move(v), {a, b},
                 [](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{g, neg(g)};
                 });
}

// identity whose node collects its consumers' gradient contributions before
// passing them upstream as a single tensor (a fan-out barrier)
inline Tensor barrier(const Tensor& x) {
  std::vector<double> v(x.data().begin(), x.data().end());
  return make_op("barrier", x.shape(), std::move(v), {x},
                 [](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{g};
                 });
}

inline Tensor neg(const Tensor& x) {
  std::vector<double> v(x.numel());
  const double* p = x.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = -p[i];
  return make_op("neg", x.shape(), std::move(v), {x},
                 [](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{neg(g)};
                 });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::binary_shape_check("mul", a, b);
  std::vector<double> v(a.numel());
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = pa[i] * pb[i];
  return make_op("mul", a.shape(), std::move(v), {a, b},
                 [](const Tensor& self, const Tensor& g) {
                   return std::vector<Tensor>{mul(g, self.input(1)),
                                              mul(g, self.input(0))};
                 });
}

inline Tensor mul_scalar(const Tensor& x, double c) {
  std::vector<double> v(x.numel());
  const double* p = x.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = p[i] * c;
  return make_op("mul_scalar", x.shape(), std::move(v), {x},
                 [c](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{mul_scalar(g, c)};
                 });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> v(x.numel());
  const double* p = x.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = p[i] + c;
  return make_op("add_scalar", x.shape(), std::move(v), {x},
                 [](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{g};
                 });
}

inline Tensor div_scalar(const Tensor& x, double c) {
  std::vector<double> v(x.numel());
  const double* p = x.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = p[i] / c;
  return make_op("div_scalar", x.shape(), std::move(v), {x},
                 [c](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{div_scalar(g, c)};
                 });
}

// elementwise multiply by a fixed array (linear in x, self-adjoint)
inline Tensor mul_const(const Tensor& x, std::vector<double> blob) {
  check(blob.size() == x.numel(), "mul_const: blob length " + std::to_string(blob.size()) +
                                      " vs tensor shape " + shape_str(x.shape()));
  std::vector<double> v(x.numel());
  const double* p = x.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = p[i] * blob[i];
  auto shared = std::make_shared<std::vector<double>>(std::move(blob));
  return make_op("mul_const", x.shape(), std::move(v), {x},
                 [shared](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{mul_const(g, *shared)};
                 });
}

inline Tensor add_const(const Tensor& x, std::vector<double> blob) {
  check(blob.size() == x.numel(), "add_const: blob length " + std::to_string(blob.size()) +
                                      " vs tensor shape " + shape_str(x.shape()));
  std::vector<double> v(x.numel());
  const double* p = x.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = p[i] + blob[i];
  return make_op("add_const", x.shape(), std::move(v), {x},
                 [](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{g};
                 });
}

// out = s * x with s a scalar tensor
inline Tensor scale(const Tensor& s, const Tensor& x) {
  check(s.numel() == 1, "scale: scale factor must be scalar, got " + shape_str(s.shape()));
  double sv = s.data()[0];
  std::vector<double> v(x.numel());
  const double* p = x.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = sv * p[i];
  return make_op("scale", x.shape(), std::move(v), {s, x},
                 [](const Tensor& self, const Tensor& g) {
                   Tensor ds = sum(mul(g, self.input(1)));
                   Tensor dx = scale(self.input(0), g);
                   return std::vector<Tensor>{ds, dx};
                 });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.shape().size() == 2 && b.shape().size() == 2,
        "matmul: expected 2-d operands, got " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()));
  check(a.shape()[1] == b.shape()[0], "matmul: inner dimension mismatch " +
                                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> v(static_cast<std::size_t>(m) * n);
  detail::kmatmul(a.data().data(), b.data().data(), v.data(), m, k, n);
  return make_op("matmul", Shape{m, n}, std::move(v), {a, b},
                 [](const Tensor& self, const Tensor& g) {
                   const Tensor& a = self.input(0);
                   const Tensor& b = self.input(1);
                   return std::vector<Tensor>{matmul(g, transpose2d(b)),
                                              matmul(transpose2d(a), g)};
                 });
}

inline Tensor transpose2d(const Tensor& x) {
  check(x.shape().size() == 2, "transpose2d: expected 2-d, got " + shape_str(x.shape()));
  int r = x.shape()[0], c = x.shape()[1];
  std::vector<double> v(x.numel());
  const double* p = x.data().data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) v[static_cast<std::size_t>(j) * r + i] = p[static_cast<std::size_t>(i) * c + j];
  return make_op("transpose2d", Shape{c, r}, std::move(v), {x},
                 [](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{transpose2d(g)};
                 });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  check(numel(shape) == x.numel(), "reshape: cannot view " + shape_str(x.shape()) +
                                       " as " + shape_str(shape));
  std::vector<double> v(x.data().begin(), x.data().end());
  Shape orig = x.shape();
  return make_op("reshape", std::move(shape), std::move(v), {x},
                 [orig](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{reshape(g, orig)};
                 });
}

inline Tensor flatten(const Tensor& x) {
  check(!x.shape().empty(), "flatten: scalar input");
  int n = x.shape()[0];
  int rest = static_cast<int>(x.numel()) / std::max(1, n);
  return reshape(x, Shape{n, rest});
}

inline Tensor slice_rows(const Tensor& x, int r0, int r1) {
  check(x.shape().size() == 2, "slice_rows: expected 2-d, got " + shape_str(x.shape()));
  int rows = x.shape()[0], cols = x.shape()[1];
  check(0 <= r0 && r0 < r1 && r1 <= rows,
        "slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
            ") out of bounds for " + shape_str(x.shape()));
  std::vector<double> v(static_cast<std::size_t>(r1 - r0) * cols);
  std::memcpy(v.data(), x.data().data() + static_cast<std::size_t>(r0) * cols,
              v.size() * sizeof(double));
  return make_op("slice_rows", Shape{r1 - r0, cols}, std::move(v), {x},
                 [r0, rows](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{embed_rows(g, r0, rows)};
                 });
}

inline Tensor embed_rows(const Tensor& x, int r0, int total_rows) {
  check(x.shape().size() == 2, "embed_rows: expected 2-d, got " + shape_str(x.shape()));
  int rows = x.shape()[0], cols = x.shape()[1];
  check(r0 >= 0 && r0 + rows <= total_rows, "embed_rows: slice does not fit");
  std::vector<double> v(static_cast<std::size_t>(total_rows) * cols, 0.0);
  std::memcpy(v.data() + static_cast<std::size_t>(r0) * cols, x.data().data(),
              x.numel() * sizeof(double));
  int r1 = r0 + rows;
  return make_op("embed_rows", Shape{total_rows, cols}, std::move(v), {x},
                 [r0, r1](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{slice_rows(g, r0, r1)};
                 });
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
  check(x.shape().size() == 2, "slice_cols: expected 2-d, got " + shape_str(x.shape()));
  int rows = x.shape()[0], cols = x.shape()[1];
  check(0 <= c0 && c0 < c1 && c1 <= cols,
        "slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
            ") out of bounds for " + shape_str(x.shape()));
  int w = c1 - c0;
  std::vector<double> v(static_cast<std::size_t>(rows) * w);
  const double* p = x.data().data();
  for (int i = 0; i < rows; ++i)
    std::memcpy(v.data() + static_cast<std::size_t>(i) * w,
                p + static_cast<std::size_t>(i) * cols + c0, sizeof(double) * w);
  return make_op("slice_cols", Shape{rows, w}, std::move(v), {x},
                 [c0, cols](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{embed_cols(g, c0, cols)};
                 });
}

inline Tensor embed_cols(const Tensor& x, int c0, int total_cols) {
  check(x.shape().size() == 2, "embed_cols: expected 2-d, got " + shape_str(x.shape()));
  int rows = x.shape()[0], w = x.shape()[1];
  check(c0 >= 0 && c0 + w <= total_cols, "embed_cols: slice does not fit");
  std::vector<double> v(static_cast<std::size_t>(rows) * total_cols, 0.0);
  const double* p = x.data().data();
  for (int i = 0; i < rows; ++i)
    std::memcpy(v.data() + static_cast<std::size_t>(i) * total_cols + c0,
                p + static_cast<std::size_t>(i) * w, sizeof(double) * w);
  int c1 = c0 + w;
  return make_op("embed_cols", Shape{rows, total_cols}, std::move(v), {x},
                 [c0, c1](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{slice_cols(g, c0, c1)};
                 });
}

inline Tensor concat_cols(const std::vector<Tensor>& xs) {
  check(!xs.empty(), "concat_cols: no inputs");
  int rows = xs[0].shape()[0];
  int total = 0;
  for (const Tensor& t : xs) {
    check(t.shape().size() == 2 && t.shape()[0] == rows,
          "concat_cols: incompatible shape " + shape_str(t.shape()));
    total += t.shape()[1];
  }
  std::vector<double> v(static_cast<std::size_t>(rows) * total);
  int off = 0;
  std::vector<int> offsets;
  for (const Tensor& t : xs) {
    int w = t.shape()[1];
    offsets.push_back(off);
    const double* p = t.data().data();
    for (int i = 0; i < rows; ++i)
      std::memcpy(v.data() + static_cast<std::size_t>(i) * total + off,
                  p + static_cast<std::size_t>(i) * w, sizeof(double) * w);
    off += w;
  }
  return make_op("concat_cols", Shape{rows, total}, std::move(v), xs,
                 [offsets, total](const Tensor& self, const Tensor& g) {
                   std::vector<Tensor> gs;
                   for (std::size_t i = 0; i < self.num_inputs(); ++i) {
                     int c0 = offsets[i];
                     int c1 = (i + 1 < offsets.size()) ? offsets[i + 1] : total;
                     gs.push_back(slice_cols(g, c0, c1));
                   }
                   return gs;
                 });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  check(x.shape().size() == 4 && w.shape().size() == 4,
        "conv2d: expected 4-d input and kernel, got " + shape_str(x.shape()) + " and " +
            shape_str(w.shape()));
  check(x.shape()[1] == w.shape()[1], "conv2d: channel mismatch " + shape_str(x.shape()) +
                                          " vs kernel " + shape_str(w.shape()));
  check(stride >= 1, "conv2d: stride must be >= 1");
  detail::ConvDims d{x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3],
                     w.shape()[0], w.shape()[2], w.shape()[3], stride, pad, 0, 0};
  d.OH = (d.H + 2 * pad - d.KH) / stride + 1;
  d.OW = (d.W + 2 * pad - d.KW) / stride + 1;
  check(d.OH > 0 && d.OW > 0, "conv2d: kernel " + shape_str(w.shape()) +
                                  " too large for input " + shape_str(x.shape()));
  std::vector<double> v(static_cast<std::size_t>(d.N) * d.Co * d.OH * d.OW);
  detail::kconv2d(x.data().data(), w.data().data(), v.data(), d);
  int H = d.H, W = d.W, KH = d.KH, KW = d.KW;
  return make_op("conv2d", Shape{d.N, d.Co, d.OH, d.OW}, std::move(v), {x, w},
                 [stride, pad, H, W, KH, KW](const Tensor& self, const Tensor& g) {
                   const Tensor& x = self.input(0);
                   const Tensor& w = self.input(1);
                   return std::vector<Tensor>{
                       conv2d_input_grad(g, w, stride, pad, H, W),
                       conv2d_weight_grad(x, g, stride, pad, KH, KW)};
                 });
}

// adjoint of conv2d with respect to its input; g has conv-output shape
inline Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, int stride, int pad,
                                int H, int W) {
  check(g.shape().size() == 4 && w.shape().size() == 4,
        "conv2d_input_grad: expected 4-d operands, got " + shape_str(g.shape()) + " and " +
            shape_str(w.shape()));
  check(g.shape()[1] == w.shape()[0], "conv2d_input_grad: channel mismatch " +
                                          shape_str(g.shape()) + " vs " + shape_str(w.shape()));
  detail::ConvDims d{g.shape()[0], w.shape()[1], H, W,
                     w.shape()[0], w.shape()[2], w.shape()[3],
                     stride, pad, g.shape()[2], g.shape()[3]};
  std::vector<double> v(static_cast<std::size_t>(d.N) * d.Ci * H * W);
  detail::kconv2d_input_grad(g.data().data(), w.data().data(), v.data(), d);
  return make_op("conv2d_input_grad", Shape{d.N, d.Ci, H, W}, std::move(v), {g, w},
                 [stride, pad](const Tensor& self, const Tensor& u) {
                   const Tensor& g = self.input(0);
                   const Tensor& w = self.input(1);
                   int KH = w.shape()[2], KW = w.shape()[3];
                   return std::vector<Tensor>{
                       conv2d(u, w, stride, pad),
                       conv2d_weight_grad(u, g, stride, pad, KH, KW)};
                 });
}

// adjoint of conv2d with respect to its kernel; result has kernel shape
inline Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, int stride, int pad,
                                 int KH, int KW) {
  check(x.shape().size() == 4 && g.shape().size() == 4,
        "conv2d_weight_grad: expected 4-d operands, got " + shape_str(x.shape()) + " and " +
            shape_str(g.shape()));
  check(x.shape()[0] == g.shape()[0], "conv2d_weight_grad: batch mismatch " +
                                          shape_str(x.shape()) + " vs " + shape_str(g.shape()));
  detail::ConvDims d{x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3],
                     g.shape()[1], KH, KW, stride, pad, g.shape()[2], g.shape()[3]};
  std::vector<double> v(static_cast<std::size_t>(d.Co) * d.Ci * KH * KW);
  detail::kconv2d_weight_grad(x.data().data(), g.data().data(), v.data(), d);
  int H = d.H, W = d.W;
  return make_op("conv2d_weight_grad", Shape{d.Co, d.Ci, KH, KW}, std::move(v), {x, g},
                 [stride, pad, H, W](const Tensor& self, const Tensor& u) {
                   const Tensor& x = self.input(0);
                   const Tensor& g = self.input(1);
                   return std::vector<Tensor>{
                       conv2d_input_grad(g, u, stride, pad, H, W),
                       conv2d(x, u, stride, pad)};
                 });
}

inline Tensor avgpool2d(const Tensor& x, int k) {
  check(x.shape().size() == 4, "avgpool2d: expected 4-d, got " + shape_str(x.shape()));
  int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  check(k >= 1 && H % k == 0 && W % k == 0,
        "avgpool2d: spatial dims of " + shape_str(x.shape()) + " not divisible by k=" +
            std::to_string(k));
  int OH = H / k, OW = W / k;
  double inv = 1.0 / (k * k);
  std::vector<double> v(static_cast<std::size_t>(N) * C * OH * OW);
  const double* p = x.data().data();
  for (int nc = 0; nc < N * C; ++nc) {
    const double* xb = p + static_cast<std::size_t>(nc) * H * W;
    double* yb = v.data() + static_cast<std::size_t>(nc) * OH * OW;
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        double acc = 0.0;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j)
            acc += xb[static_cast<std::size_t>(oh * k + i) * W + ow * k + j];
        yb[static_cast<std::size_t>(oh) * OW + ow] = acc * inv;
      }
  }
  return make_op("avgpool2d", Shape{N, C, OH, OW}, std::move(v), {x},
                 [k](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{avgunpool2d(g, k)};
                 });
}

// adjoint of avgpool2d: spreads each cell over its k*k window, scaled by 1/k^2
inline Tensor avgunpool2d(const Tensor& x, int k) {
  check(x.shape().size() == 4, "avgunpool2d: expected 4-d, got " + shape_str(x.shape()));
  int N = x.shape()[0], C = x.shape()[1], OH = x.shape()[2], OW = x.shape()[3];
  int H = OH * k, W = OW * k;
  double inv = 1.0 / (k * k);
  std::vector<double> v(static_cast<std::size_t>(N) * C * H * W);
  const double* p = x.data().data();
  for (int nc = 0; nc < N * C; ++nc) {
    const double* xb = p + static_cast<std::size_t>(nc) * OH * OW;
    double* yb = v.data() + static_cast<std::size_t>(nc) * H * W;
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        double g = xb[static_cast<std::size_t>(oh) * OW + ow] * inv;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j)
            yb[static_cast<std::size_t>(oh * k + i) * W + ow * k + j] = g;
      }
  }
  return make_op("avgunpool2d", Shape{N, C, H, W}, std::move(v), {x},
                 [k](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{avgpool2d(g, k)};
                 });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> v(x.numel());
  const double* p = x.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = p[i] > 0.0 ? p[i] : 0.0;
  return make_op("relu", x.shape(), std::move(v), {x},
                 [](const Tensor& self, const Tensor& g) {
                   const Tensor& x = self.input(0);
                   std::vector<double> mask(x.numel());
                   const double* p = x.data().data();
                   for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = p[i] > 0.0 ? 1.0 : 0.0;
                   return std::vector<Tensor>{mul_const(g, std::move(mask))};
                 });
}

inline Tensor exp(const Tensor& x) {
  std::vector<double> v(x.numel());
  const double* p = x.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(p[i]);
  return make_op("exp", x.shape(), std::move(v), {x},
                 [](const Tensor& self, const Tensor& g) {
                   return std::vector<Tensor>{mul(g, self)};
                 });
}

inline Tensor log(const Tensor& x) {
  std::vector<double> v(x.numel());
  const double* p = x.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(p[i]);
  return make_op("log", x.shape(), std::move(v), {x},
                 [](const Tensor& self, const Tensor& g) {
                   return std::vector<Tensor>{mul(g, recip(self.input(0)))};
                 });
}

inline Tensor sqrt(const Tensor& x) {
  std::vector<double> v(x.numel());
  const double* p = x.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sqrt(p[i]);
  return make_op("sqrt", x.shape(), std::move(v), {x},
                 [](const Tensor& self, const Tensor& g) {
                   return std::vector<Tensor>{mul_scalar(mul(g, recip(self)), 0.5)};
                 });
}

inline Tensor recip(const Tensor& x) {
  std::vector<double> v(x.numel());
  const double* p = x.data().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 / p[i];
  return make_op("recip", x.shape(), std::move(v), {x},
                 [](const Tensor& self, const Tensor& g) {
                   return std::vector<Tensor>{neg(mul(g, mul(self, self)))};
                 });
}

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Shape orig = x.shape();
  return make_op("sum", Shape{}, std::vector<double>{acc}, {x},
                 [orig](const Tensor&, const Tensor& g) {
                   return std::vector<Tensor>{scale(g, Tensor::full(orig, 1.0))};
                 });
}

inline Tensor mean(const Tensor& x) {
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// images [N,C,H,W] * masks [N,H,W], mask broadcast over channels.
// Masks are annotations, never optimization targets.
inline Tensor mask_mul(const Tensor& x, const Tensor& m) {
  check(x.shape().size() == 4, "mask_mul: expected 4-d images, got " + shape_str(x.shape()));
  check(m.shape().size() == 3, "mask_mul: expected 3-d masks, got " + shape_str(m.shape()));
  check(x.shape()[0] == m.shape()[0] && x.shape()[2] == m.shape()[1] &&
            x.shape()[3] == m.shape()[2],
        "mask_mul: images " + shape_str(x.shape()) + " vs masks " + shape_str(m.shape()));
  check(!m.requires_grad(), "mask_mul: masks must not require grad");
  int N = x.shape()[0], C = x.shape()[1];
  std::size_t hw = static_cast<std::size_t>(x.shape()[2]) * x.shape()[3];
  std::vector<double> v(x.numel());
  const double* px = x.data().data();
  const double* pm = m.data().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* mb = pm + static_cast<std::size_t>(n) * hw;
      const double* xb = px + (static_cast<std::size_t>(n) * C + c) * hw;
      double* vb = v.data() + (static_cast<std::size_t>(n) * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) vb[i] = xb[i] * mb[i];
    }
  return make_op("mask_mul", x.shape(), std::move(v), {x, m},
                 [](const Tensor& self, const Tensor& g) {
                   return std::vector<Tensor>{mask_mul(g, self.input(1)), Tensor{}};
                 });
}

// ---------------------------------------------------------------------------
// composites
// ---------------------------------------------------------------------------

// y = x * W^T + b with x [N,in], W [out,in], b [out]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check(x.shape().size() == 2 && w.shape().size() == 2,
        "linear: expected 2-d input and weight, got " + shape_str(x.shape()) + " and " +
            shape_str(w.shape()));
  check(x.shape()[1] == w.shape()[1], "linear: input width " + shape_str(x.shape()) +
                                          " vs weight " + shape_str(w.shape()));
  int n = x.shape()[0], out = w.shape()[0];
  check(b.shape() == Shape{out}, "linear: bias " + shape_str(b.shape()) +
                                     " vs weight " + shape_str(w.shape()));
  Tensor y = matmul(x, transpose2d(w));
  Tensor brow = reshape(b, Shape{1, out});
  Tensor btile = matmul(Tensor::full(Shape{n, 1}, 1.0), brow);
  return add(y, btile);
}

// mean cross-entropy between logits [N,C] and integer labels
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  check(logits.shape().size() == 2,
        "softmax_cross_entropy: expected 2-d logits, got " + shape_str(logits.shape()));
  int n = logits.shape()[0], c = logits.shape()[1];
  check(static_cast<int>(labels.size()) == n,
        "softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
            shape_str(logits.shape()));
  const double* p = logits.data().data();
  std::vector<double> rowmax(static_cast<std::size_t>(n));
  std::vector<double> negmax_full(logits.numel());
  std::vector<double> onehot(logits.numel(), 0.0);
  for (int i = 0; i < n; ++i) {
    check(labels[i] >= 0 && labels[i] < c,
          "softmax_cross_entropy: label " + std::to_string(labels[i]) + " out of range [0," +
              std::to_string(c) + ")");
    double m = p[static_cast<std::size_t>(i) * c];
    for (int j = 1; j < c; ++j) m = std::max(m, p[static_cast<std::size_t>(i) * c + j]);
    rowmax[i] = m;
    for (int j = 0; j < c; ++j) negmax_full[static_cast<std::size_t>(i) * c + j] = -m;
    onehot[static_cast<std::size_t>(i) * c + labels[i]] = 1.0;
  }
  // logsumexp with a detached per-row shift; the shift's contribution to the
  // derivative is identically zero, so treating it as constant is exact
  Tensor shifted = add_const(logits, std::move(negmax_full));
  Tensor se = matmul(exp(shifted), Tensor::full(Shape{c, 1}, 1.0));  // [N,1]
  Tensor lse = add_const(log(se), rowmax);
  Tensor picked = matmul(mul_const(logits, std::move(onehot)), Tensor::full(Shape{c, 1}, 1.0));
  Tensor per_sample = sub(lse, picked);
  return mul_scalar(sum(per_sample), 1.0 / static_cast<double>(n));
}

inline Tensor l2_norm(const Tensor& x) { return sqrt(sum(mul(x, x))); }

inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  detail::binary_shape_check("cosine_similarity", a, b);
  Tensor dot = sum(mul(a, b));
  Tensor ssa = sum(mul(a, a));
  Tensor ssb = sum(mul(b, b));
  return mul(dot, recip(sqrt(mul(ssa, ssb))));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// leaf id -> gradient tensor, in requested-leaf order
class GradMap {
 public:
  void insert(const Tensor& leaf, Tensor grad) {
    index_[leaf.id()] = items_.size();
    items_.emplace_back(leaf.id(), std::move(grad));
  }
  bool contains(const Tensor& leaf) const { return index_.count(leaf.id()) > 0; }
  const Tensor& at(const Tensor& leaf) const {
    auto it = index_.find(leaf.id());
    check(it != index_.end(), "GradMap: no gradient recorded for leaf id " +
                                  std::to_string(leaf.id()));
    return items_[it->second].second;
  }
  std::size_t size() const { return items_.size(); }
  const std::vector<std::pair<std::int64_t, Tensor>>& items() const { return items_; }

 private:
  std::vector<std::pair<std::int64_t, Tensor>> items_;
  std::unordered_map<std::int64_t, std::size_t> index_;
};

namespace detail {

inline std::vector<Tensor> topo_order(const Tensor& target) {
  std::vector<Tensor> order;
  std::unordered_map<Node*, int> state;  // 0 unseen, 1 open, 2 done
  std::vector<std::pair<Tensor, std::size_t>> stack;
  stack.emplace_back(target, 0);
  state[target.node()] = 1;
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (next < t.num_inputs()) {
      const Tensor& in = t.input(next++);
      if (in.defined() && in.requires_grad() && state[in.node()] == 0) {
        state[in.node()] = 1;
        stack.emplace_back(in, 0);
      }
    } else {
      state[t.node()] = 2;
      order.push_back(t);
      stack.pop_back();
    }
  }
  return order;  // inputs before consumers
}

}  // namespace detail

// Reverse-mode sweep from a scalar target to the requested leaves. With
// create_graph=true the returned gradients are graph nodes and can be
// differentiated again. Leaves unreachable from the target get zeros.
inline GradMap backward(const Tensor& target, const std::vector<Tensor>& leaves,
                        bool create_graph = false) {
  check(target.defined(), "backward: undefined target");
  check(target.numel() == 1,
        "backward: target must be scalar, got shape " + shape_str(target.shape()));
  check(target.requires_grad(), "backward: target does not require grad");
  for (const Tensor& l : leaves) {
    check(l.defined(), "backward: undefined leaf");
    check(l.is_leaf(), "backward: tensor id " + std::to_string(l.id()) +
                           " (op " + l.op_name() + ") is not a graph leaf");
    check(l.requires_grad(), "backward: leaf id " + std::to_string(l.id()) +
                                 " does not require grad");
  }

  std::vector<Tensor> order = detail::topo_order(target);
  std::unordered_map<detail::Node*, Tensor> grads;
  {
    detail::GradModeGuard guard(create_graph);
    grads[target.node()] = Tensor::full(target.shape(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const Tensor& t = *it;
      if (t.is_leaf()) continue;
      auto git = grads.find(t.node());
      if (git == grads.end()) continue;
      Tensor g = git->second;
      std::vector<Tensor> gins = t.node()->vjp(t, g);
      check(gins.size() == t.num_inputs(),
            std::string("backward: vjp arity mismatch in op ") + t.op_name());
      for (std::size_t i = 0; i < gins.size(); ++i) {
        const Tensor& in = t.input(i);
        if (!in.defined() || !in.requires_grad()) continue;
        if (!gins[i].defined()) continue;
        auto ait = grads.find(in.node());
        if (ait == grads.end())
          grads[in.node()] = gins[i];
        else
          ait->second = add(ait->second, gins[i]);
      }
      grads.erase(t.node());
    }
  }

  GradMap out;
  for (const Tensor& l : leaves) {
    auto it = grads.find(l.node());
    if (it != grads.end())
      out.insert(l, it->second);
    else
      out.insert(l, Tensor::zeros(l.shape()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// SGD with momentum: v <- momentum*v + g ; p <- p - lr*v
// ---------------------------------------------------------------------------

struct SgdState {
  std::vector<std::vector<double>> velocity;  // aligned with the param list
};

inline void sgd_step(std::vector<Tensor>& params, const GradMap& grads, SgdState& state,
                     double lr, double momentum,
                     const std::vector<std::string>* names = nullptr) {
  check(lr > 0.0, "sgd_step: lr must be positive");
  check(momentum >= 0.0 && momentum < 1.0, "sgd_step: momentum must be in [0,1)");
  if (state.velocity.empty()) state.velocity.resize(params.size());
  check(state.velocity.size() == params.size(), "sgd_step: state/param count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    const Tensor& g = grads.at(p);
    check(g.shape() == p.shape(), "sgd_step: gradient shape " + shape_str(g.shape()) +
                                      " vs param " + shape_str(p.shape()));
    auto& v = state.velocity[i];
    if (v.empty()) v.assign(p.numel(), 0.0);
    double* pd = p.data_mut();
    const double* gd = g.data().data();
    for (std::size_t j = 0; j < p.numel(); ++j) {
      if (!std::isfinite(gd[j])) {
        std::string who = names ? (*names)[i] : ("param[" + std::to_string(i) + "]");
        fail("sgd_step: non-finite gradient in " + who);
      }
      v[j] = momentum * v[j] + gd[j];
      pd[j] -= lr * v[j];
    }
  }
}

}  // namespace mmd
