#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "stam/errors.hpp"
#include "stam/tensor.hpp"

namespace stam {

namespace detail {

// C += A(m×k) · B(k×n)
template <typename S>
void gemm_acc(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* ar = a + i * k;
    S* cr = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      S av = ar[p];
      const S* br = b + p * n;
      for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// C(m×k) += A(m×n) · B(k×n)ᵀ
template <typename S>
void gemm_acc_nt(const S* a, const S* b, S* c, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const S* ar = a + i * n;
    S* cr = c + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const S* br = b + p * n;
      S acc = S(0);
      for (int64_t j = 0; j < n; ++j) acc += ar[j] * br[j];
      cr[p] += acc;
    }
  }
}

// C(k×n) += A(m×k)ᵀ · B(m×n)
template <typename S>
void gemm_acc_tn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* ar = a + i * k;
    const S* br = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      S av = ar[p];
      S* cr = c + p * n;
      for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// Polynomial exp for the float path; softmax feeds it values <= 0 after the
// row-max shift. Double keeps libm accuracy for gradient checks.
inline float fast_exp(float x) {
  if (x < -87.0f) return 0.0f;
  if (x > 88.0f) x = 88.0f;
  float zf = std::floor(1.44269504f * x + 0.5f);
  float r = x - zf * 0.693359375f - zf * -2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  uint32_t bits = static_cast<uint32_t>(static_cast<int>(zf) + 127) << 23;
  return p * std::bit_cast<float>(bits);
}
inline double fast_exp(double x) { return std::exp(x); }

}  // namespace detail

template <typename S>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int32_t id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<S>& value() const;
  /// Accumulated gradient after backward(); zeros if this node was never
  /// reached (or does not require gradients).
  Tensor<S> grad() const;
};

/// Single-use reverse-mode tape. The graph is rebuilt every step; nodes are
/// appended in topological order so backward is one reverse sweep.
/// Not thread-safe; use one tape per worker.
template <typename S>
class Tape {
 public:
  Var<S> leaf(Tensor<S> v, bool trainable = false) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = trainable;
    nodes_.push_back(std::move(n));
    return Var<S>{this, static_cast<int32_t>(nodes_.size() - 1)};
  }

  Var<S> constant(Tensor<S> v) { return leaf(std::move(v), false); }

  const Tensor<S>& value(int32_t id) const { return nodes_[static_cast<size_t>(id)].value; }

  bool needs_grad(int32_t id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

  /// Gradient buffer, allocated (zero-filled) on first touch.
  Tensor<S>& grad_buf(int32_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.numel() == 0 && n.value.numel() > 0) n.grad = Tensor<S>(n.value.shape());
    return n.grad;
  }

  bool grad_allocated(int32_t id) const { return nodes_[static_cast<size_t>(id)].grad.numel() > 0; }

  Tensor<S> grad_of(Var<S> v) const {
    const Node& n = nodes_[static_cast<size_t>(v.id)];
    if (n.grad.numel() > 0) return n.grad;
    return Tensor<S>(n.value.shape());
  }

  /// Reverse sweep from a scalar loss. Populates gradients of every node on a
  /// path from a trainable leaf to the loss.
  void backward(Var<S> loss) {
    if (loss.tape != this) throw ContractError("backward: loss from another tape");
    const Tensor<S>& lv = value(loss.id);
    if (lv.numel() != 1) {
      throw ContractError("backward requires a scalar loss, got " + lv.shape_str());
    }
    grad_buf(loss.id)[0] = S(1);
    for (int32_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.grad.numel() > 0 && n.backprop) n.backprop(*this, i);
    }
  }

  size_t size() const { return nodes_.size(); }

  Var<S> emplace(Tensor<S> value, bool needs_grad,
                 std::function<void(Tape&, int32_t)> backprop) {
#ifdef STAM_FINITE_CHECKS
    if (!value.all_finite()) throw ContractError("non-finite values produced by tape op");
#endif
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var<S>{this, static_cast<int32_t>(nodes_.size() - 1)};
  }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool needs_grad = false;
    std::function<void(Tape&, int32_t)> backprop;
  };

  std::vector<Node> nodes_;
};

template <typename S>
const Tensor<S>& Var<S>::value() const {
  return tape->value(id);
}

template <typename S>
Tensor<S> Var<S>::grad() const {
  return tape->grad_of(*this);
}

namespace detail {

template <typename S>
void require_same_tape(Var<S> a, Var<S> b, const char* op) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands on different tapes");
}

template <typename S>
void require_matrix(const Tensor<S>& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + t.shape_str());
  }
}

}  // namespace detail

// ---- Operations -----------------------------------------------------------

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::require_same_tape(a, b, "matmul");
  const Tensor<S>& av = a.value();
  const Tensor<S>& bv = b.value();
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions disagree, " + av.shape_str() + " vs " +
                     bv.shape_str());
  }
  int64_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor<S> out({m, n});
  detail::gemm_acc(av.data(), bv.data(), out.data(), m, k, n);
  bool ng = a.tape->needs_grad(a.id) || b.tape->needs_grad(b.id);
  int32_t ai = a.id, bi = b.id;
  return a.tape->emplace(std::move(out), ng, [ai, bi, m, k, n](Tape<S>& t, int32_t self) {
    const Tensor<S>& g = t.grad_buf(self);
    if (t.needs_grad(ai)) {
      detail::gemm_acc_nt(g.data(), t.value(bi).data(), t.grad_buf(ai).data(), m, n, k);
    }
    if (t.needs_grad(bi)) {
      detail::gemm_acc_tn(t.value(ai).data(), g.data(), t.grad_buf(bi).data(), m, k, n);
    }
  });
}

template <typename S>
Var<S> transpose(Var<S> a) {
  const Tensor<S>& av = a.value();
  detail::require_matrix(av, "transpose");
  int64_t m = av.rows(), n = av.cols();
  Tensor<S> out({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out(j, i) = av(i, j);
  int32_t ai = a.id;
  return a.tape->emplace(std::move(out), a.tape->needs_grad(ai),
                         [ai, m, n](Tape<S>& t, int32_t self) {
                           if (!t.needs_grad(ai)) return;
                           const Tensor<S>& g = t.grad_buf(self);
                           Tensor<S>& da = t.grad_buf(ai);
                           for (int64_t i = 0; i < m; ++i)
                             for (int64_t j = 0; j < n; ++j) da(i, j) += g(j, i);
                         });
}

/// Row-wise softmax, stabilized by subtracting each row's max.
template <typename S>
Var<S> softmax_rows(Var<S> x) {
  const Tensor<S>& xv = x.value();
  detail::require_matrix(xv, "softmax_rows");
  int64_t m = xv.rows(), n = xv.cols();
  Tensor<S> out({m, n});
  for (int64_t i = 0; i < m; ++i) {
    const S* r = xv.data() + i * n;
    S* o = out.data() + i * n;
    S mx = r[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, r[j]);
    S sum = S(0);
    for (int64_t j = 0; j < n; ++j) {
      o[j] = detail::fast_exp(r[j] - mx);
      sum += o[j];
    }
    S inv = S(1) / sum;
    for (int64_t j = 0; j < n; ++j) o[j] *= inv;
  }
  int32_t xi = x.id;
  return x.tape->emplace(std::move(out), x.tape->needs_grad(xi),
                         [xi, m, n](Tape<S>& t, int32_t self) {
                           if (!t.needs_grad(xi)) return;
                           const Tensor<S>& g = t.grad_buf(self);
                           const Tensor<S>& y = t.value(self);
                           Tensor<S>& dx = t.grad_buf(xi);
                           for (int64_t i = 0; i < m; ++i) {
                             const S* gr = g.data() + i * n;
                             const S* yr = y.data() + i * n;
                             S* dr = dx.data() + i * n;
                             S dot = S(0);
                             for (int64_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                             for (int64_t j = 0; j < n; ++j) dr[j] += yr[j] * (gr[j] - dot);
                           }
                         });
}

/// Row-wise layer normalization with affine; epsilon added to the variance.
template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta) {
  detail::require_same_tape(x, gamma, "layer_norm");
  detail::require_same_tape(x, beta, "layer_norm");
  const Tensor<S>& xv = x.value();
  detail::require_matrix(xv, "layer_norm");
  int64_t m = xv.rows(), d = xv.cols();
  if (d < 2) throw ContractError("layer_norm requires feature width >= 2, got " + xv.shape_str());
  const Tensor<S>& gv = gamma.value();
  const Tensor<S>& bv = beta.value();
  if (gv.numel() != d || bv.numel() != d) {
    throw ShapeError("layer_norm: affine params " + gv.shape_str() + "/" + bv.shape_str() +
                     " do not match width of " + xv.shape_str());
  }
  const S eps = S(1e-5);
  Tensor<S> out({m, d});
  std::vector<S> inv_std(static_cast<size_t>(m));
  std::vector<S> mean(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) {
    const S* r = xv.data() + i * d;
    S mu = S(0);
    for (int64_t j = 0; j < d; ++j) mu += r[j];
    mu /= static_cast<S>(d);
    S var = S(0);
    for (int64_t j = 0; j < d; ++j) {
      S c = r[j] - mu;
      var += c * c;
    }
    var /= static_cast<S>(d);
    S is = S(1) / std::sqrt(var + eps);
    mean[static_cast<size_t>(i)] = mu;
    inv_std[static_cast<size_t>(i)] = is;
    S* o = out.data() + i * d;
    for (int64_t j = 0; j < d; ++j) o[j] = (r[j] - mu) * is * gv[j] + bv[j];
  }
  bool ng = x.tape->needs_grad(x.id) || x.tape->needs_grad(gamma.id) ||
            x.tape->needs_grad(beta.id);
  int32_t xi = x.id, gi = gamma.id, bi = beta.id;
  return x.tape->emplace(
      std::move(out), ng,
      [xi, gi, bi, m, d, mean = std::move(mean),
       inv_std = std::move(inv_std)](Tape<S>& t, int32_t self) {
        const Tensor<S>& g = t.grad_buf(self);
        const Tensor<S>& xval = t.value(xi);
        const Tensor<S>& gam = t.value(gi);
        for (int64_t i = 0; i < m; ++i) {
          const S* gr = g.data() + i * d;
          const S* xr = xval.data() + i * d;
          S mu = mean[static_cast<size_t>(i)];
          S is = inv_std[static_cast<size_t>(i)];
          if (t.needs_grad(gi)) {
            S* dg = t.grad_buf(gi).data();
            for (int64_t j = 0; j < d; ++j) dg[j] += gr[j] * (xr[j] - mu) * is;
          }
          if (t.needs_grad(bi)) {
            S* db = t.grad_buf(bi).data();
            for (int64_t j = 0; j < d; ++j) db[j] += gr[j];
          }
          if (t.needs_grad(xi)) {
            S* dx = t.grad_buf(xi).data() + i * d;
            S mean_dxh = S(0), mean_dxh_xh = S(0);
            for (int64_t j = 0; j < d; ++j) {
              S dxh = gr[j] * gam[j];
              S xh = (xr[j] - mu) * is;
              mean_dxh += dxh;
              mean_dxh_xh += dxh * xh;
            }
            mean_dxh /= static_cast<S>(d);
            mean_dxh_xh /= static_cast<S>(d);
            for (int64_t j = 0; j < d; ++j) {
              S dxh = gr[j] * gam[j];
              S xh = (xr[j] - mu) * is;
              dx[j] += is * (dxh - mean_dxh - xh * mean_dxh_xh);
            }
          }
        }
      });
}

namespace detail {

template <typename S, typename FwdFn, typename BwdA, typename BwdB>
Var<S> binary_same_shape(Var<S> a, Var<S> b, const char* op, FwdFn fwd, BwdA bwd_a, BwdB bwd_b) {
  require_same_tape(a, b, op);
  const Tensor<S>& av = a.value();
  const Tensor<S>& bv = b.value();
  if (!av.same_shape(bv)) {
    throw ShapeError(std::string(op) + ": shape mismatch, " + av.shape_str() + " vs " +
                     bv.shape_str());
  }
  int64_t n = av.numel();
  Tensor<S> out(av.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
  bool ng = a.tape->needs_grad(a.id) || b.tape->needs_grad(b.id);
  int32_t ai = a.id, bi = b.id;
  return a.tape->emplace(std::move(out), ng,
                         [ai, bi, n, bwd_a, bwd_b](Tape<S>& t, int32_t self) {
                           const Tensor<S>& g = t.grad_buf(self);
                           const Tensor<S>& av2 = t.value(ai);
                           const Tensor<S>& bv2 = t.value(bi);
                           if (t.needs_grad(ai)) {
                             Tensor<S>& da = t.grad_buf(ai);
                             for (int64_t i = 0; i < n; ++i) da[i] += bwd_a(g[i], av2[i], bv2[i]);
                           }
                           if (t.needs_grad(bi)) {
                             Tensor<S>& db = t.grad_buf(bi);
                             for (int64_t i = 0; i < n; ++i) db[i] += bwd_b(g[i], av2[i], bv2[i]);
                           }
                         });
}

}  // namespace detail

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  return detail::binary_same_shape(
      a, b, "add", [](S x, S y) { return x + y; }, [](S g, S, S) { return g; },
      [](S g, S, S) { return g; });
}

template <typename S>
Var<S> subtract(Var<S> a, Var<S> b) {
  return detail::binary_same_shape(
      a, b, "subtract", [](S x, S y) { return x - y; }, [](S g, S, S) { return g; },
      [](S g, S, S) { return -g; });
}

template <typename S>
Var<S> multiply(Var<S> a, Var<S> b) {
  return detail::binary_same_shape(
      a, b, "multiply", [](S x, S y) { return x * y; }, [](S g, S, S y) { return g * y; },
      [](S g, S x, S) { return g * x; });
}

/// X + b with b broadcast across rows (bias add).
template <typename S>
Var<S> add_rowvec(Var<S> x, Var<S> b) {
  detail::require_same_tape(x, b, "add_rowvec");
  const Tensor<S>& xv = x.value();
  const Tensor<S>& bv = b.value();
  detail::require_matrix(xv, "add_rowvec");
  int64_t m = xv.rows(), n = xv.cols();
  if (bv.numel() != n) {
    throw ShapeError("add_rowvec: bias " + bv.shape_str() + " does not match " + xv.shape_str());
  }
  Tensor<S> out({m, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out(i, j) = xv(i, j) + bv[j];
  bool ng = x.tape->needs_grad(x.id) || x.tape->needs_grad(b.id);
  int32_t xi = x.id, bi = b.id;
  return x.tape->emplace(std::move(out), ng, [xi, bi, m, n](Tape<S>& t, int32_t self) {
    const Tensor<S>& g = t.grad_buf(self);
    if (t.needs_grad(xi)) {
      Tensor<S>& dx = t.grad_buf(xi);
      for (int64_t i = 0; i < m * n; ++i) dx[i] += g[i];
    }
    if (t.needs_grad(bi)) {
      Tensor<S>& db = t.grad_buf(bi);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) db[j] += g(i, j);
    }
  });
}

template <typename S>
Var<S> relu(Var<S> x) {
  const Tensor<S>& xv = x.value();
  int64_t n = xv.numel();
  Tensor<S> out(xv.shape());
  for (int64_t i = 0; i < n; ++i) out[i] = xv[i] > S(0) ? xv[i] : S(0);
  int32_t xi = x.id;
  return x.tape->emplace(std::move(out), x.tape->needs_grad(xi),
                         [xi, n](Tape<S>& t, int32_t self) {
                           if (!t.needs_grad(xi)) return;
                           const Tensor<S>& g = t.grad_buf(self);
                           const Tensor<S>& xval = t.value(xi);
                           Tensor<S>& dx = t.grad_buf(xi);
                           for (int64_t i = 0; i < n; ++i)
                             if (xval[i] > S(0)) dx[i] += g[i];
                         });
}

template <typename S>
Var<S> scale(Var<S> x, double c) {
  const Tensor<S>& xv = x.value();
  int64_t n = xv.numel();
  Tensor<S> out(xv.shape());
  S cs = static_cast<S>(c);
  for (int64_t i = 0; i < n; ++i) out[i] = xv[i] * cs;
  int32_t xi = x.id;
  return x.tape->emplace(std::move(out), x.tape->needs_grad(xi),
                         [xi, n, cs](Tape<S>& t, int32_t self) {
                           if (!t.needs_grad(xi)) return;
                           const Tensor<S>& g = t.grad_buf(self);
                           Tensor<S>& dx = t.grad_buf(xi);
                           for (int64_t i = 0; i < n; ++i) dx[i] += cs * g[i];
                         });
}

/// Mean over axis 0: [m×n] -> [1×n].
template <typename S>
Var<S> mean_rows(Var<S> x) {
  const Tensor<S>& xv = x.value();
  detail::require_matrix(xv, "mean_rows");
  int64_t m = xv.rows(), n = xv.cols();
  Tensor<S> out({1, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[j] += xv(i, j);
  S inv = S(1) / static_cast<S>(m);
  for (int64_t j = 0; j < n; ++j) out[j] *= inv;
  int32_t xi = x.id;
  return x.tape->emplace(std::move(out), x.tape->needs_grad(xi),
                         [xi, m, n, inv](Tape<S>& t, int32_t self) {
                           if (!t.needs_grad(xi)) return;
                           const Tensor<S>& g = t.grad_buf(self);
                           Tensor<S>& dx = t.grad_buf(xi);
                           for (int64_t i = 0; i < m; ++i)
                             for (int64_t j = 0; j < n; ++j) dx(i, j) += g[j] * inv;
                         });
}

template <typename S>
Var<S> sum_all(Var<S> x) {
  const Tensor<S>& xv = x.value();
  int64_t n = xv.numel();
  S s = S(0);
  for (int64_t i = 0; i < n; ++i) s += xv[i];
  int32_t xi = x.id;
  return x.tape->emplace(Tensor<S>::scalar(s), x.tape->needs_grad(xi),
                         [xi, n](Tape<S>& t, int32_t self) {
                           if (!t.needs_grad(xi)) return;
                           S g = t.grad_buf(self)[0];
                           Tensor<S>& dx = t.grad_buf(xi);
                           for (int64_t i = 0; i < n; ++i) dx[i] += g;
                         });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no operands");
  Tape<S>* tape = parts[0].tape;
  int64_t n = parts[0].value().cols();
  int64_t m = 0;
  bool ng = false;
  for (const Var<S>& p : parts) {
    detail::require_matrix(p.value(), "concat_rows");
    if (p.tape != tape) throw ContractError("concat_rows: operands on different tapes");
    if (p.value().cols() != n) {
      throw ShapeError("concat_rows: column mismatch, " + p.value().shape_str() + " vs width " +
                       std::to_string(n));
    }
    m += p.value().rows();
    ng = ng || tape->needs_grad(p.id);
  }
  Tensor<S> out({m, n});
  std::vector<int32_t> ids;
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const Var<S>& p : parts) {
    const Tensor<S>& pv = p.value();
    std::copy(pv.data(), pv.data() + pv.numel(), out.data() + off * n);
    ids.push_back(p.id);
    offsets.push_back(off);
    off += pv.rows();
  }
  return tape->emplace(std::move(out), ng,
                       [ids, offsets, n](Tape<S>& t, int32_t self) {
                         const Tensor<S>& g = t.grad_buf(self);
                         for (size_t k = 0; k < ids.size(); ++k) {
                           if (!t.needs_grad(ids[k])) continue;
                           Tensor<S>& dp = t.grad_buf(ids[k]);
                           int64_t rows = dp.rows();
                           const S* src = g.data() + offsets[k] * n;
                           for (int64_t i = 0; i < rows * n; ++i) dp[i] += src[i];
                         }
                       });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no operands");
  Tape<S>* tape = parts[0].tape;
  int64_t m = parts[0].value().rows();
  int64_t n = 0;
  bool ng = false;
  for (const Var<S>& p : parts) {
    detail::require_matrix(p.value(), "concat_cols");
    if (p.tape != tape) throw ContractError("concat_cols: operands on different tapes");
    if (p.value().rows() != m) {
      throw ShapeError("concat_cols: row mismatch, " + p.value().shape_str() + " vs height " +
                       std::to_string(m));
    }
    n += p.value().cols();
    ng = ng || tape->needs_grad(p.id);
  }
  Tensor<S> out({m, n});
  std::vector<int32_t> ids;
  std::vector<int64_t> offsets;
  std::vector<int64_t> widths;
  int64_t off = 0;
  for (const Var<S>& p : parts) {
    const Tensor<S>& pv = p.value();
    int64_t w = pv.cols();
    for (int64_t i = 0; i < m; ++i)
      std::copy(pv.data() + i * w, pv.data() + (i + 1) * w, out.data() + i * n + off);
    ids.push_back(p.id);
    offsets.push_back(off);
    widths.push_back(w);
    off += w;
  }
  return tape->emplace(std::move(out), ng,
                       [ids, offsets, widths, m, n](Tape<S>& t, int32_t self) {
                         const Tensor<S>& g = t.grad_buf(self);
                         for (size_t k = 0; k < ids.size(); ++k) {
                           if (!t.needs_grad(ids[k])) continue;
                           Tensor<S>& dp = t.grad_buf(ids[k]);
                           int64_t w = widths[k];
                           for (int64_t i = 0; i < m; ++i) {
                             const S* src = g.data() + i * n + offsets[k];
                             S* dst = dp.data() + i * w;
                             for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
                           }
                         }
                       });
}

template <typename S>
Var<S> slice_rows(Var<S> x, int64_t r0, int64_t r1) {
  const Tensor<S>& xv = x.value();
  detail::require_matrix(xv, "slice_rows");
  int64_t m = xv.rows(), n = xv.cols();
  if (r0 < 0 || r1 > m || r0 >= r1) {
    throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ") invalid for " + xv.shape_str());
  }
  Tensor<S> out({r1 - r0, n});
  std::copy(xv.data() + r0 * n, xv.data() + r1 * n, out.data());
  int32_t xi = x.id;
  return x.tape->emplace(std::move(out), x.tape->needs_grad(xi),
                         [xi, r0, r1, n](Tape<S>& t, int32_t self) {
                           if (!t.needs_grad(xi)) return;
                           const Tensor<S>& g = t.grad_buf(self);
                           Tensor<S>& dx = t.grad_buf(xi);
                           S* dst = dx.data() + r0 * n;
                           for (int64_t i = 0; i < (r1 - r0) * n; ++i) dst[i] += g[i];
                         });
}

template <typename S>
Var<S> slice_cols(Var<S> x, int64_t c0, int64_t c1) {
  const Tensor<S>& xv = x.value();
  detail::require_matrix(xv, "slice_cols");
  int64_t m = xv.rows(), n = xv.cols();
  if (c0 < 0 || c1 > n || c0 >= c1) {
    throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") invalid for " + xv.shape_str());
  }
  int64_t w = c1 - c0;
  Tensor<S> out({m, w});
  for (int64_t i = 0; i < m; ++i)
    std::copy(xv.data() + i * n + c0, xv.data() + i * n + c1, out.data() + i * w);
  int32_t xi = x.id;
  return x.tape->emplace(std::move(out), x.tape->needs_grad(xi),
                         [xi, c0, m, n, w](Tape<S>& t, int32_t self) {
                           if (!t.needs_grad(xi)) return;
                           const Tensor<S>& g = t.grad_buf(self);
                           Tensor<S>& dx = t.grad_buf(xi);
                           for (int64_t i = 0; i < m; ++i) {
                             const S* src = g.data() + i * w;
                             S* dst = dx.data() + i * n + c0;
                             for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
                           }
                         });
}

/// Reinterpret the (row-major) data under a new shape; no data movement.
template <typename S>
Var<S> reshape(Var<S> x, std::vector<int64_t> shape) {
  const Tensor<S>& xv = x.value();
  Tensor<S> out(std::move(shape));
  if (out.numel() != xv.numel()) {
    throw ShapeError("reshape: " + xv.shape_str() + " has wrong element count for " +
                     out.shape_str());
  }
  std::copy(xv.data(), xv.data() + xv.numel(), out.data());
  int32_t xi = x.id;
  int64_t n = xv.numel();
  return x.tape->emplace(std::move(out), x.tape->needs_grad(xi),
                         [xi, n](Tape<S>& t, int32_t self) {
                           if (!t.needs_grad(xi)) return;
                           const Tensor<S>& g = t.grad_buf(self);
                           Tensor<S>& dx = t.grad_buf(xi);
                           for (int64_t i = 0; i < n; ++i) dx[i] += g[i];
                         });
}

/// Stack t copies of x on top of each other: [m×n] -> [(t·m)×n].
template <typename S>
Var<S> tile_rows(Var<S> x, int64_t t_copies) {
  const Tensor<S>& xv = x.value();
  detail::require_matrix(xv, "tile_rows");
  if (t_copies < 1) throw ContractError("tile_rows: need at least one copy");
  int64_t m = xv.rows(), n = xv.cols();
  Tensor<S> out({t_copies * m, n});
  for (int64_t c = 0; c < t_copies; ++c)
    std::copy(xv.data(), xv.data() + m * n, out.data() + c * m * n);
  int32_t xi = x.id;
  return x.tape->emplace(std::move(out), x.tape->needs_grad(xi),
                         [xi, t_copies, m, n](Tape<S>& t, int32_t self) {
                           if (!t.needs_grad(xi)) return;
                           const Tensor<S>& g = t.grad_buf(self);
                           Tensor<S>& dx = t.grad_buf(xi);
                           for (int64_t c = 0; c < t_copies; ++c) {
                             const S* src = g.data() + c * m * n;
                             for (int64_t i = 0; i < m * n; ++i) dx[i] += src[i];
                           }
                         });
}

/// Repeat each row t times consecutively: row i lands at rows [i·t, (i+1)·t).
template <typename S>
Var<S> repeat_rows_each(Var<S> x, int64_t t_copies) {
  const Tensor<S>& xv = x.value();
  detail::require_matrix(xv, "repeat_rows_each");
  if (t_copies < 1) throw ContractError("repeat_rows_each: need at least one copy");
  int64_t m = xv.rows(), n = xv.cols();
  Tensor<S> out({m * t_copies, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t c = 0; c < t_copies; ++c)
      std::copy(xv.data() + i * n, xv.data() + (i + 1) * n,
                out.data() + (i * t_copies + c) * n);
  int32_t xi = x.id;
  return x.tape->emplace(std::move(out), x.tape->needs_grad(xi),
                         [xi, t_copies, m, n](Tape<S>& t, int32_t self) {
                           if (!t.needs_grad(xi)) return;
                           const Tensor<S>& g = t.grad_buf(self);
                           Tensor<S>& dx = t.grad_buf(xi);
                           for (int64_t i = 0; i < m; ++i)
                             for (int64_t c = 0; c < t_copies; ++c) {
                               const S* src = g.data() + (i * t_copies + c) * n;
                               S* dst = dx.data() + i * n;
                               for (int64_t j = 0; j < n; ++j) dst[j] += src[j];
                             }
                         });
}

/// Mean binary cross-entropy over the unmasked entries of a probability
/// matrix. `target` and `mask` are fixed (not differentiated); probabilities
/// are clamped to [eps, 1-eps] before the logs.
template <typename S>
Var<S> bce_masked(Var<S> probs, const Tensor<S>& target, const Tensor<uint8_t>& mask) {
  const Tensor<S>& pv = probs.value();
  if (!pv.same_shape(target) || pv.shape() != mask.shape()) {
    throw ShapeError("bce_masked: probs " + pv.shape_str() + ", target " + target.shape_str() +
                     " and mask must share one shape");
  }
  const S eps = S(1e-7);
  int64_t n = pv.numel();
  int64_t count = 0;
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    ++count;
    S a = std::min(std::max(pv[i], eps), S(1) - eps);
    S g = target[i];
    loss += -(double(g) * std::log(double(a)) + (1.0 - double(g)) * std::log(1.0 - double(a)));
  }
  if (count == 0) throw ContractError("bce_masked: empty mask");
  loss /= static_cast<double>(count);
  int32_t pi = probs.id;
  Tensor<S> tgt = target;
  Tensor<uint8_t> msk = mask;
  return probs.tape->emplace(
      Tensor<S>::scalar(static_cast<S>(loss)), probs.tape->needs_grad(pi),
      [pi, n, count, eps, tgt = std::move(tgt), msk = std::move(msk)](Tape<S>& t, int32_t self) {
        if (!t.needs_grad(pi)) return;
        S g = t.grad_buf(self)[0];
        const Tensor<S>& p = t.value(pi);
        Tensor<S>& dp = t.grad_buf(pi);
        S inv = g / static_cast<S>(count);
        for (int64_t i = 0; i < n; ++i) {
          if (!msk[i]) continue;
          if (p[i] < eps || p[i] > S(1) - eps) continue;  // flat clamp region
          dp[i] += inv * (p[i] - tgt[i]) / (p[i] * (S(1) - p[i]));
        }
      });
}

// Operator sugar for elementwise composition in tests and model code.
template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) {
  return add(a, b);
}
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) {
  return subtract(a, b);
}
template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) {
  return multiply(a, b);
}

}  // namespace stam
