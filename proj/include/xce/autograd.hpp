#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "xce/common.hpp"
#include "xce/numerics.hpp"

namespace xce::autograd {

using Shape = std::vector<int>;

inline size_t numel_of(const Shape& s) {
  size_t n = 1;
  for (int d : s) n *= static_cast<size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches this tensor
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void()> backward_fn;  // reads this->grad, accumulates into parents

  size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void accumulate(const double* g, size_t n) {
    ensure_grad();
    for (size_t i = 0; i < n; ++i) grad[i] += g[i];
  }
};

/// Value-semantics handle onto a shared graph node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    validate_shape(shape);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data.assign(numel_of(shape), 0.0);
    impl->requires_grad = requires_grad;
    return Tensor(impl);
  }

  static Tensor full(const Shape& shape, double value, bool requires_grad = false) {
    Tensor t = zeros(shape, requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
  }

  static Tensor from_data(const Shape& shape, std::vector<double> data,
                          bool requires_grad = false) {
    validate_shape(shape);
    if (data.size() != numel_of(shape))
      throw ShapeError("Tensor: data length " + std::to_string(data.size()) +
                       " does not fill shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(impl);
  }

  static Tensor randn(const Shape& shape, Rng& rng, double stddev,
                      bool requires_grad = false) {
    Tensor t = zeros(shape, requires_grad);
    for (auto& x : t.data()) x = stddev * rng.normal();
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[i < 0 ? impl_->shape.size() + i : i]; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  size_t numel() const { return impl_->numel(); }
  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& grad() { return impl_->grad; }
  const std::vector<double>& grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  void zero_grad() { impl_->grad.clear(); }
  TensorImpl* get() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& ptr() const { return impl_; }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("Tensor: empty shape");
    for (int d : shape)
      if (d <= 0) throw ShapeError("Tensor: non-positive dim in " + shape_str(shape));
  }
  std::shared_ptr<TensorImpl> impl_;
};

/// Named weight with a freeze flag; frozen parameters never receive gradient
/// and the optimizer never touches them.
struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

namespace detail {

inline Tensor make_result(Shape shape, const std::vector<Tensor>& parents) {
  bool rg = false;
  for (const auto& p : parents) rg |= p.requires_grad();
  Tensor out = Tensor::zeros(shape, rg);
  if (rg)
    for (const auto& p : parents) out.get()->parents.push_back(p.ptr());
  return out;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline MapMat map2(std::vector<double>& v, long r, long c, long off = 0) {
  return MapMat(v.data() + off, r, c);
}
inline CMapMat cmap2(const std::vector<double>& v, long r, long c, long off = 0) {
  return CMapMat(v.data() + off, r, c);
}

/// True when b's shape is a trailing suffix of a's (equal shapes included),
/// the broadcast rule used by add/sub for biases and positional tables.
inline bool suffix_broadcastable(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  for (size_t i = 0; i < b.size(); ++i)
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) return false;
  return true;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss: reverse topological order, each
/// node's backward_fn pushes into its parents' grads (summing over fan-out).
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, size_t>> stack{{loss.get(), 0}};
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.get()->ensure_grad();
  loss.get()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn();
  }
}

inline void zero_grad(std::vector<Tensor>& tensors) {
  for (auto& t : tensors) t.zero_grad();
}

// ---- elementwise and shape ops ----

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!detail::suffix_broadcastable(a.shape(), b.shape()))
    throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = detail::make_result(a.shape(), {a, b});
  const size_t nb = b.numel();
  for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i % nb];
  if (out.requires_grad()) {
    auto ai = a.ptr(), bi = b.ptr();
    TensorImpl* o = out.get();
    out.get()->backward_fn = [ai, bi, o, nb]() {
      if (ai->requires_grad) ai->accumulate(o->grad.data(), o->grad.size());
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (size_t i = 0; i < o->grad.size(); ++i) bi->grad[i % nb] += o->grad[i];
      }
    };
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (!detail::suffix_broadcastable(a.shape(), b.shape()))
    throw ShapeError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = detail::make_result(a.shape(), {a, b});
  const size_t nb = b.numel();
  for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i % nb];
  if (out.requires_grad()) {
    auto ai = a.ptr(), bi = b.ptr();
    TensorImpl* o = out.get();
    out.get()->backward_fn = [ai, bi, o, nb]() {
      if (ai->requires_grad) ai->accumulate(o->grad.data(), o->grad.size());
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (size_t i = 0; i < o->grad.size(); ++i) bi->grad[i % nb] -= o->grad[i];
      }
    };
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = detail::make_result(a.shape(), {a, b});
  for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (out.requires_grad()) {
    auto ai = a.ptr(), bi = b.ptr();
    TensorImpl* o = out.get();
    out.get()->backward_fn = [ai, bi, o]() {
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (size_t i = 0; i < o->grad.size(); ++i) ai->grad[i] += o->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (size_t i = 0; i < o->grad.size(); ++i) bi->grad[i] += o->grad[i] * ai->data[i];
      }
    };
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = detail::make_result(a.shape(), {a});
  for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = c * a.data()[i];
  if (out.requires_grad()) {
    auto ai = a.ptr();
    TensorImpl* o = out.get();
    out.get()->backward_fn = [ai, o, c]() {
      ai->ensure_grad();
      for (size_t i = 0; i < o->grad.size(); ++i) ai->grad[i] += c * o->grad[i];
    };
  }
  return out;
}

inline Tensor reshape(const Tensor& a, const Shape& shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  Tensor out = detail::make_result(shape, {a});
  out.data() = a.data();
  if (out.requires_grad()) {
    auto ai = a.ptr();
    TensorImpl* o = out.get();
    out.get()->backward_fn = [ai, o]() { ai->accumulate(o->grad.data(), o->grad.size()); };
  }
  return out;
}

inline Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2)
    throw ShapeError("transpose_last2: rank >= 2 required, got " + shape_str(a.shape()));
  Shape shape = a.shape();
  const int r = shape[shape.size() - 2], c = shape[shape.size() - 1];
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  Tensor out = detail::make_result(shape, {a});
  const size_t batches = a.numel() / (static_cast<size_t>(r) * c);
  for (size_t b = 0; b < batches; ++b) {
    const double* src = a.data().data() + b * r * c;
    double* dst = out.data().data() + b * r * c;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) dst[static_cast<size_t>(j) * r + i] = src[static_cast<size_t>(i) * c + j];
  }
  if (out.requires_grad()) {
    auto ai = a.ptr();
    TensorImpl* o = out.get();
    out.get()->backward_fn = [ai, o, r, c, batches]() {
      ai->ensure_grad();
      for (size_t b = 0; b < batches; ++b) {
        const double* g = o->grad.data() + b * r * c;
        double* dst = ai->grad.data() + b * r * c;
        for (int j = 0; j < c; ++j)
          for (int i = 0; i < r; ++i) dst[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(j) * r + i];
      }
    };
  }
  return out;
}

/// Concatenation along the last axis; every input must agree on the rest.
inline Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  int total = 0;
  for (const auto& p : parts) {
    Shape pl = p.shape();
    int last = pl.back();
    pl.pop_back();
    if (pl != lead)
      throw ShapeError("concat_last: " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    total += last;
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out = detail::make_result(out_shape, parts);
  const size_t rows = numel_of(lead);
  size_t off = 0;
  for (const auto& p : parts) {
    const size_t w = p.dim(-1);
    for (size_t i = 0; i < rows; ++i)
      std::copy_n(p.data().data() + i * w, w, out.data().data() + i * total + off);
    off += w;
  }
  if (out.requires_grad()) {
    std::vector<std::shared_ptr<TensorImpl>> ps;
    for (const auto& p : parts) ps.push_back(p.ptr());
    TensorImpl* o = out.get();
    out.get()->backward_fn = [ps, o, rows, total]() {
      size_t off = 0;
      for (auto& p : ps) {
        const size_t w = p->shape.back();
        if (p->requires_grad) {
          p->ensure_grad();
          for (size_t i = 0; i < rows; ++i)
            for (size_t j = 0; j < w; ++j) p->grad[i * w + j] += o->grad[i * total + off + j];
        }
        off += w;
      }
    };
  }
  return out;
}

/// Contiguous slice [start, start+len) of the last axis.
inline Tensor slice_last(const Tensor& a, int start, int len) {
  const int w = a.dim(-1);
  if (start < 0 || len <= 0 || start + len > w)
    throw ShapeError("slice_last: [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of " + shape_str(a.shape()));
  Shape shape = a.shape();
  shape.back() = len;
  Tensor out = detail::make_result(shape, {a});
  const size_t rows = a.numel() / w;
  for (size_t i = 0; i < rows; ++i)
    std::copy_n(a.data().data() + i * w + start, len, out.data().data() + i * len);
  if (out.requires_grad()) {
    auto ai = a.ptr();
    TensorImpl* o = out.get();
    out.get()->backward_fn = [ai, o, w, start, len, rows]() {
      ai->ensure_grad();
      for (size_t i = 0; i < rows; ++i)
        for (int j = 0; j < len; ++j) ai->grad[i * w + start + j] += o->grad[i * len + j];
    };
  }
  return out;
}

inline Tensor sum_all(const Tensor& a) {
  Tensor out = detail::make_result({1}, {a});
  double s = 0;
  for (double x : a.data()) s += x;
  out.data()[0] = s;
  if (out.requires_grad()) {
    auto ai = a.ptr();
    TensorImpl* o = out.get();
    out.get()->backward_fn = [ai, o]() {
      ai->ensure_grad();
      const double g = o->grad[0];
      for (auto& x : ai->grad) x += g;
    };
  }
  return out;
}

// ---- dense algebra ----

/// A[..., n, k] x B[k, m], or A[..., n, k] x B[..., k, m] with identical
/// leading dims. The weight case collapses to a single GEMM.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: need rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const int n = a.dim(-2), k = a.dim(-1);
  const int bk = b.dim(-2), m = b.dim(-1);
  const bool batched_b = b.rank() > 2;
  if (k != bk || (batched_b && (b.rank() != a.rank() ||
                                !std::equal(a.shape().begin(), a.shape().end() - 2,
                                            b.shape().begin()))))
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(m);
  Tensor out = detail::make_result(out_shape, {a, b});
  const size_t batches = a.numel() / (static_cast<size_t>(n) * k);

  if (!batched_b) {
    detail::map2(out.data(), batches * n, m).noalias() =
        detail::cmap2(a.data(), batches * n, k) * detail::cmap2(b.data(), k, m);
  } else {
    for (size_t t = 0; t < batches; ++t)
      detail::map2(out.data(), n, m, t * n * m).noalias() =
          detail::cmap2(a.data(), n, k, t * n * k) * detail::cmap2(b.data(), k, m, t * k * m);
  }

  if (out.requires_grad()) {
    auto ai = a.ptr(), bi = b.ptr();
    TensorImpl* o = out.get();
    out.get()->backward_fn = [ai, bi, o, n, k, m, batches, batched_b]() {
      if (ai->requires_grad) {
        ai->ensure_grad();
        if (!batched_b) {
          detail::map2(ai->grad, batches * n, k).noalias() +=
              detail::cmap2(o->grad, batches * n, m) * detail::cmap2(bi->data, k, m).transpose();
        } else {
          for (size_t t = 0; t < batches; ++t)
            detail::map2(ai->grad, n, k, t * n * k).noalias() +=
                detail::cmap2(o->grad, n, m, t * n * m) *
                detail::cmap2(bi->data, k, m, t * k * m).transpose();
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        if (!batched_b) {
          detail::map2(bi->grad, k, m).noalias() +=
              detail::cmap2(ai->data, batches * n, k).transpose() *
              detail::cmap2(o->grad, batches * n, m);
        } else {
          for (size_t t = 0; t < batches; ++t)
            detail::map2(bi->grad, k, m, t * k * m).noalias() +=
                detail::cmap2(ai->data, n, k, t * n * k).transpose() *
                detail::cmap2(o->grad, n, m, t * n * m);
        }
      }
    };
  }
  return out;
}

/// Row softmax of X/scale over the last axis, stabilized by row-max
/// subtraction, so a -1e30 additive mask yields exactly zero weight.
inline Tensor softmax_rows(const Tensor& a, double scale_div) {
  if (a.rank() < 2) throw ShapeError("softmax_rows: rank >= 2 required");
  if (!(scale_div > 0)) throw std::invalid_argument("softmax_rows: scale must be > 0");
  Tensor out = detail::make_result(a.shape(), {a});
  const int w = a.dim(-1);
  const size_t rows = a.numel() / w;
  for (size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * w;
    double* y = out.data().data() + r * w;
    double mx = x[0];
    for (int j = 1; j < w; ++j) mx = std::max(mx, x[j]);
    double denom = 0;
    for (int j = 0; j < w; ++j) {
      y[j] = std::exp((x[j] - mx) / scale_div);
      denom += y[j];
    }
    for (int j = 0; j < w; ++j) y[j] /= denom;
  }
  if (out.requires_grad()) {
    auto ai = a.ptr();
    TensorImpl* o = out.get();
    out.get()->backward_fn = [ai, o, w, rows, scale_div]() {
      ai->ensure_grad();
      for (size_t r = 0; r < rows; ++r) {
        const double* y = o->data.data() + r * w;
        const double* g = o->grad.data() + r * w;
        double* gx = ai->grad.data() + r * w;
        double dot = 0;
        for (int j = 0; j < w; ++j) dot += g[j] * y[j];
        for (int j = 0; j < w; ++j) gx[j] += y[j] * (g[j] - dot) / scale_div;
      }
    };
  }
  return out;
}

/// Standardize over the last axis, then scale/shift by gamma/beta.
inline Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  const int w = a.dim(-1);
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != w || beta.dim(0) != w)
    throw ShapeError("layer_norm: gamma " + shape_str(gamma.shape()) + ", beta " +
                     shape_str(beta.shape()) + " must be [" + std::to_string(w) + "]");
  if (!(eps > 0)) throw std::invalid_argument("layer_norm: eps must be > 0");
  Tensor out = detail::make_result(a.shape(), {a, gamma, beta});
  const size_t rows = a.numel() / w;
  std::vector<double> xhat(a.numel()), inv_std(rows);
  for (size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * w;
    double mean = 0;
    for (int j = 0; j < w; ++j) mean += x[j];
    mean /= w;
    double var = 0;
    for (int j = 0; j < w; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= w;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    double* y = out.data().data() + r * w;
    for (int j = 0; j < w; ++j) {
      xhat[r * w + j] = (x[j] - mean) * is;
      y[j] = gamma.data()[j] * xhat[r * w + j] + beta.data()[j];
    }
  }
  if (out.requires_grad()) {
    auto ai = a.ptr(), gi = gamma.ptr(), bi = beta.ptr();
    TensorImpl* o = out.get();
    out.get()->backward_fn = [ai, gi, bi, o, w, rows, xhat = std::move(xhat),
                              inv_std = std::move(inv_std)]() {
      if (gi->requires_grad) gi->ensure_grad();
      if (bi->requires_grad) bi->ensure_grad();
      if (ai->requires_grad) ai->ensure_grad();
      for (size_t r = 0; r < rows; ++r) {
        const double* g = o->grad.data() + r * w;
        const double* xh = xhat.data() + r * w;
        if (gi->requires_grad)
          for (int j = 0; j < w; ++j) gi->grad[j] += g[j] * xh[j];
        if (bi->requires_grad)
          for (int j = 0; j < w; ++j) bi->grad[j] += g[j];
        if (ai->requires_grad) {
          double mean_gg = 0, mean_ggx = 0;
          for (int j = 0; j < w; ++j) {
            const double gg = g[j] * gi->data[j];
            mean_gg += gg;
            mean_ggx += gg * xh[j];
          }
          mean_gg /= w;
          mean_ggx /= w;
          double* gx = ai->grad.data() + r * w;
          for (int j = 0; j < w; ++j) {
            const double gg = g[j] * gi->data[j];
            gx[j] += (gg - mean_gg - xh[j] * mean_ggx) * inv_std[r];
          }
        }
      }
    };
  }
  return out;
}

/// Exact GELU x * Phi(x) with the erf-based CDF.
inline Tensor gelu(const Tensor& a) {
  Tensor out = detail::make_result(a.shape(), {a});
  constexpr double inv_sqrt2 = std::numbers::sqrt2 / 2.0;
  for (size_t i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i];
    out.data()[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  if (out.requires_grad()) {
    auto ai = a.ptr();
    TensorImpl* o = out.get();
    out.get()->backward_fn = [ai, o, inv_sqrt2]() {
      ai->ensure_grad();
      constexpr double inv_sqrt2pi = 0.3989422804014327;
      for (size_t i = 0; i < o->grad.size(); ++i) {
        const double x = ai->data[i];
        const double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        ai->grad[i] += o->grad[i] * (phi + x * pdf);
      }
    };
  }
  return out;
}

/// 3x3 same-padded cross-correlation, NHWC layout; accepts [H,W,C] or
/// [B,H,W,C]. Lowered to one GEMM through im2col.
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  const bool batched = x.rank() == 4;
  if (x.rank() != 3 && x.rank() != 4)
    throw ShapeError("conv2d: input must be [H,W,C] or [B,H,W,C], got " +
                     shape_str(x.shape()));
  if (kernel.rank() != 4 || kernel.dim(0) != 3 || kernel.dim(1) != 3)
    throw ShapeError("conv2d: kernel must be [3,3,Cin,Cout], got " +
                     shape_str(kernel.shape()));
  const int b = batched ? x.dim(0) : 1;
  const int h = x.dim(batched ? 1 : 0), w = x.dim(batched ? 2 : 1), cin = x.dim(-1);
  const int cout = kernel.dim(3);
  if (kernel.dim(2) != cin)
    throw ShapeError("conv2d: input channels " + shape_str(x.shape()) + " vs kernel " +
                     shape_str(kernel.shape()));
  if (bias.rank() != 1 || bias.dim(0) != cout)
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " must be [" +
                     std::to_string(cout) + "]");

  Shape out_shape = x.shape();
  out_shape.back() = cout;
  Tensor out = detail::make_result(out_shape, {x, kernel, bias});

  const size_t patch = 9 * static_cast<size_t>(cin);
  const size_t rows = static_cast<size_t>(b) * h * w;
  std::vector<double> col(rows * patch, 0.0);
  const double* xd = x.data().data();
  for (int bi = 0; bi < b; ++bi)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double* dst = col.data() + ((static_cast<size_t>(bi) * h + y) * w + xx) * patch;
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int sx = xx + kx - 1;
            if (sx < 0 || sx >= w) continue;
            const double* src = xd + ((static_cast<size_t>(bi) * h + sy) * w + sx) * cin;
            std::copy_n(src, cin, dst + (ky * 3 + kx) * cin);
          }
        }
      }

  detail::map2(out.data(), rows, cout).noalias() =
      detail::CMapMat(col.data(), rows, patch) * detail::cmap2(kernel.data(), patch, cout);
  for (size_t r = 0; r < rows; ++r)
    for (int c = 0; c < cout; ++c) out.data()[r * cout + c] += bias.data()[c];

  if (out.requires_grad()) {
    auto xi = x.ptr(), ki = kernel.ptr(), bi_ = bias.ptr();
    TensorImpl* o = out.get();
    out.get()->backward_fn = [xi, ki, bi_, o, col = std::move(col), b, h, w, cin, cout,
                              rows, patch]() {
      if (bi_->requires_grad) {
        bi_->ensure_grad();
        for (size_t r = 0; r < rows; ++r)
          for (int c = 0; c < cout; ++c) bi_->grad[c] += o->grad[r * cout + c];
      }
      if (ki->requires_grad) {
        ki->ensure_grad();
        detail::map2(ki->grad, patch, cout).noalias() +=
            detail::CMapMat(col.data(), rows, patch).transpose() *
            detail::cmap2(o->grad, rows, cout);
      }
      if (xi->requires_grad) {
        xi->ensure_grad();
        std::vector<double> dcol(rows * patch);
        detail::MapMat(dcol.data(), rows, patch).noalias() =
            detail::cmap2(o->grad, rows, cout) *
            detail::cmap2(ki->data, patch, cout).transpose();
        double* gx = xi->grad.data();
        for (int bi = 0; bi < b; ++bi)
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
              const double* src =
                  dcol.data() + ((static_cast<size_t>(bi) * h + y) * w + xx) * patch;
              for (int ky = 0; ky < 3; ++ky) {
                const int sy = y + ky - 1;
                if (sy < 0 || sy >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                  const int sx = xx + kx - 1;
                  if (sx < 0 || sx >= w) continue;
                  double* dst = gx + ((static_cast<size_t>(bi) * h + sy) * w + sx) * cin;
                  const double* s = src + (ky * 3 + kx) * cin;
                  for (int c = 0; c < cin; ++c) dst[c] += s[c];
                }
              }
            }
      }
    };
  }
  return out;
}

// ---- composites ----

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor()) {
  Tensor y = matmul(x, w);
  return bias.defined() ? add(y, bias) : y;
}

struct MhaParams {
  std::vector<Tensor> wq, wk, wv;  // one [D, d_k] per head
  std::vector<Tensor> bq, bk, bv;  // optional, one [d_k] per head
  Tensor wo;                       // [I*d_k, D_out]
  Tensor bo;                       // optional [D_out]
};

/// Additive causal mask: 0 on j <= i, -1e30 on j > i. exp() of the masked
/// logits underflows to exactly zero attention weight.
inline Tensor causal_mask(int t) {
  Tensor m = Tensor::zeros({t, t});
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) m.data()[static_cast<size_t>(i) * t + j] = -1e30;
  return m;
}

/// Scaled dot-product attention with per-head projections, concatenation,
/// and an output projection. X_q, X_kv: [T, D] or [B, T, D].
inline Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv,
                                   const MhaParams& p, bool causal) {
  const size_t heads = p.wq.size();
  if (heads == 0 || p.wk.size() != heads || p.wv.size() != heads)
    throw ShapeError("multi_head_attention: need equal nonzero head counts");
  if (!p.bq.empty() && (p.bq.size() != heads || p.bk.size() != heads || p.bv.size() != heads))
    throw ShapeError("multi_head_attention: partial bias lists");
  const bool flat = x_q.rank() == 2;
  Tensor q_in = flat ? reshape(x_q, {1, x_q.dim(0), x_q.dim(1)}) : x_q;
  Tensor kv_in = flat ? reshape(x_kv, {1, x_kv.dim(0), x_kv.dim(1)}) : x_kv;
  if (q_in.rank() != 3 || kv_in.rank() != 3 || q_in.dim(-1) != kv_in.dim(-1))
    throw ShapeError("multi_head_attention: inputs " + shape_str(x_q.shape()) + " and " +
                     shape_str(x_kv.shape()));
  const int tq = q_in.dim(1), tkv = kv_in.dim(1);
  if (causal && tq != tkv)
    throw ShapeError("multi_head_attention: causal mask needs square attention");
  const int dk = p.wq[0].dim(-1);
  const double scale_div = std::sqrt(static_cast<double>(dk));
  Tensor mask = causal ? causal_mask(tq) : Tensor();

  std::vector<Tensor> z_heads;
  z_heads.reserve(heads);
  for (size_t i = 0; i < heads; ++i) {
    Tensor q = p.bq.empty() ? matmul(q_in, p.wq[i]) : linear(q_in, p.wq[i], p.bq[i]);
    Tensor k = p.bk.empty() ? matmul(kv_in, p.wk[i]) : linear(kv_in, p.wk[i], p.bk[i]);
    Tensor v = p.bv.empty() ? matmul(kv_in, p.wv[i]) : linear(kv_in, p.wv[i], p.bv[i]);
    Tensor logits = matmul(q, transpose_last2(k));
    if (causal) logits = add(logits, mask);
    Tensor attn = softmax_rows(logits, scale_div);
    z_heads.push_back(matmul(attn, v));
  }
  Tensor z = heads == 1 ? z_heads[0] : concat_last(z_heads);
  Tensor out = linear(z, p.wo, p.bo);
  if (flat) out = reshape(out, {tq, out.dim(-1)});
  return out;
}

/// Mean over the leading axis of the squared Frobenius norm of (pred - target):
/// sum((pred-target)^2) / pred.shape[0].
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("mse_loss: " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  Tensor d = sub(pred, target);
  return scale(sum_all(mul(d, d)), 1.0 / pred.dim(0));
}

/// Central-difference check of d(f)/d(inputs) on a random coordinate subset.
/// Relative error uses denominator max(|analytic|, |numeric|, 1e-8). Inputs
/// with requires_grad = false are skipped (frozen-parameter contract).
template <typename F>
double grad_check(F&& f, const std::vector<Tensor>& inputs, double h = 1e-5,
                  int coords_per_input = 20, uint64_t seed = 12345) {
  if (!(h > 0)) throw std::invalid_argument("grad_check: h must be > 0");
  std::vector<Tensor> live;
  for (const auto& t : inputs)
    if (t.requires_grad()) live.push_back(t);
  for (auto& t : live) t.zero_grad();
  Tensor loss = f();
  backward(loss);

  Rng rng(seed);
  double max_rel = 0;
  for (auto& t : live) {
    if (!t.has_grad())
      throw std::logic_error("grad_check: trainable input received no gradient");
    const int n = static_cast<int>(t.numel());
    const int picks = std::min(coords_per_input, n);
    for (int c = 0; c < picks; ++c) {
      const size_t idx = picks == n ? c : static_cast<size_t>(rng.uniform() * n);
      const double saved = t.data()[idx];
      t.data()[idx] = saved + h;
      const double fp = f().data()[0];
      t.data()[idx] = saved - h;
      const double fm = f().data()[0];
      t.data()[idx] = saved;
      const double numeric = (fp - fm) / (2 * h);
      const double analytic = t.grad()[idx];
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace xce::autograd
