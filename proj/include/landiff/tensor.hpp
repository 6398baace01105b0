#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "landiff/common.hpp"
#include "landiff/rng.hpp"

namespace landiff {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Autodiff graph node. The backward closure captures everything it needs
// (parent tensors, saved activations); `parents` exists only for the
// topological walk.
struct Node {
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;
};

// Dense tensor with optional reverse-mode gradient. Value-like: copies share
// the underlying buffers, so a copy captured by an op sees the same data and
// gradient as the original. A tensor with requires_grad always has its grad
// buffer allocated.
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<real>> data;
  std::shared_ptr<std::vector<real>> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  Tensor() = default;

  int64_t numel() const { return data ? int64_t(data->size()) : 0; }
  int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
  int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  bool defined() const { return bool(data); }

  real& at(int64_t i) { return (*data)[size_t(i)]; }
  real at(int64_t i) const { return (*data)[size_t(i)]; }
  real& at(int64_t r, int64_t c) { return (*data)[size_t(r * cols() + c)]; }
  real at(int64_t r, int64_t c) const { return (*data)[size_t(r * cols() + c)]; }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), real(0));
  }
};

// Thread-local switch for tape construction; sampling and evaluation run
// with the tape off.
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled_flag()) { grad_enabled_flag() = false; }
  ~NoGradGuard() { grad_enabled_flag() = prev; }
};

inline bool grad_enabled() { return grad_enabled_flag(); }

// ---------------------------------------------------------------------------
// Construction

inline Tensor zeros(Shape shape, bool requires_grad = false) {
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<real>>(size_t(shape_numel(t.shape)), real(0));
  t.requires_grad = requires_grad && grad_enabled();
  // Grad storage must exist before any backward closure captures it: op
  // lambdas bind the buffer while the output is being built, so allocating
  // lazily (only once the node is attached) would hand them a dead pointer.
  if (grad_enabled()) t.grad = std::make_shared<std::vector<real>>(t.data->size(), real(0));
  return t;
}

inline Tensor full(Shape shape, real value, bool requires_grad = false) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data->begin(), t.data->end(), value);
  return t;
}

inline Tensor make_tensor(Shape shape, std::vector<real> values, bool requires_grad = false) {
  if (int64_t(values.size()) != shape_numel(shape))
    throw std::invalid_argument("make_tensor: value count does not match shape");
  Tensor t = zeros(std::move(shape), requires_grad);
  std::copy(values.begin(), values.end(), t.data->begin());
  return t;
}

inline Tensor randn(Shape shape, Rng& rng, real stddev = real(1), bool requires_grad = false) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& x : *t.data) x = real(rng.gaussian()) * stddev;
  return t;
}

inline Tensor clone_values(const Tensor& src, bool requires_grad = false) {
  Tensor t = zeros(src.shape, requires_grad);
  std::copy(src.data->begin(), src.data->end(), t.data->begin());
  return t;
}

// ---------------------------------------------------------------------------
// Finite check: the engine surfaces NaN/Inf immediately after every forward op.

inline void check_finite(const Tensor& t, const char* op) {
  for (real x : *t.data)
    if (!std::isfinite(double(x))) throw numeric_error(std::string(op) + ": non-finite value in output");
}

namespace detail {

using EMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

inline CMap cmap(const Tensor& t, int64_t r, int64_t c) { return CMap(t.data->data(), r, c); }
inline MMap gmap(const Tensor& t, int64_t r, int64_t c) { return MMap(t.grad->data(), r, c); }
inline CMap cmap_buf(const std::vector<real>& v, int64_t r, int64_t c) { return CMap(v.data(), r, c); }

inline void ensure_out_grad(Tensor& out) {
  if (out.requires_grad && !out.grad)
    out.grad = std::make_shared<std::vector<real>>(out.data->size(), real(0));
}

// Attaches a node to `out` unless the tape is off or no input needs grad.
inline void attach(Tensor& out, std::initializer_list<const Tensor*> inputs,
                   std::function<void()> backward) {
  bool need = grad_enabled();
  if (need) {
    need = false;
    for (const Tensor* in : inputs)
      if (in->requires_grad) need = true;
  }
  out.requires_grad = need;
  if (!need) return;
  ensure_out_grad(out);
  out.node = std::make_shared<Node>();
  for (const Tensor* in : inputs)
    if (in->node) out.node->parents.push_back(in->node);
  out.node->backward = std::move(backward);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

inline void accumulate(const Tensor& t, const std::vector<real>& delta) {
  if (!t.requires_grad) return;
  auto& g = *t.grad;
  for (size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and affine ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = zeros(a.shape);
  const auto& av = *a.data;
  const auto& bv = *b.data;
  auto& ov = *out.data;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  check_finite(out, "add");
  detail::attach(out, {&a, &b}, [a, b, og = out.grad]() {
    if (a.requires_grad)
      for (size_t i = 0; i < og->size(); ++i) (*a.grad)[i] += (*og)[i];
    if (b.requires_grad)
      for (size_t i = 0; i < og->size(); ++i) (*b.grad)[i] += (*og)[i];
  });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = zeros(a.shape);
  const auto& av = *a.data;
  const auto& bv = *b.data;
  auto& ov = *out.data;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  check_finite(out, "sub");
  detail::attach(out, {&a, &b}, [a, b, og = out.grad]() {
    if (a.requires_grad)
      for (size_t i = 0; i < og->size(); ++i) (*a.grad)[i] += (*og)[i];
    if (b.requires_grad)
      for (size_t i = 0; i < og->size(); ++i) (*b.grad)[i] -= (*og)[i];
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = zeros(a.shape);
  const auto& av = *a.data;
  const auto& bv = *b.data;
  auto& ov = *out.data;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  check_finite(out, "mul");
  detail::attach(out, {&a, &b}, [a, b, og = out.grad]() {
    if (a.requires_grad)
      for (size_t i = 0; i < og->size(); ++i) (*a.grad)[i] += (*og)[i] * (*b.data)[i];
    if (b.requires_grad)
      for (size_t i = 0; i < og->size(); ++i) (*b.grad)[i] += (*og)[i] * (*a.data)[i];
  });
  return out;
}

inline Tensor scale(const Tensor& a, real c) {
  Tensor out = zeros(a.shape);
  const auto& av = *a.data;
  auto& ov = *out.data;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  check_finite(out, "scale");
  detail::attach(out, {&a}, [a, c, og = out.grad]() {
    if (a.requires_grad)
      for (size_t i = 0; i < og->size(); ++i) (*a.grad)[i] += (*og)[i] * c;
  });
  return out;
}

// x: (n x d), bias: (d). Explicit row-broadcast; the engine has no general
// broadcasting.
inline Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  if (x.shape.size() != 2 || bias.numel() != x.cols())
    throw std::invalid_argument("add_rowwise: bias length must equal column count");
  Tensor out = zeros(x.shape);
  const int64_t n = x.rows(), d = x.cols();
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < d; ++c) out.at(r, c) = x.at(r, c) + bias.at(c);
  check_finite(out, "add_rowwise");
  detail::attach(out, {&x, &bias}, [x, bias, n, d, og = out.grad]() {
    if (x.requires_grad)
      for (size_t i = 0; i < og->size(); ++i) (*x.grad)[i] += (*og)[i];
    if (bias.requires_grad)
      for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < d; ++c) (*bias.grad)[size_t(c)] += (*og)[size_t(r * d + c)];
  });
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions do not match");
  const int64_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor out = zeros({n, m});
  detail::MMap(out.data->data(), n, m).noalias() = detail::cmap(a, n, k) * detail::cmap(b, k, m);
  check_finite(out, "matmul");
  detail::attach(out, {&a, &b}, [a, b, n, k, m, og = out.grad]() {
    auto go = detail::cmap_buf(*og, n, m);
    if (a.requires_grad) detail::gmap(a, n, k).noalias() += go * detail::cmap(b, k, m).transpose();
    if (b.requires_grad) detail::gmap(b, k, m).noalias() += detail::cmap(a, n, k).transpose() * go;
  });
  return out;
}

inline Tensor gelu(const Tensor& x) {
  Tensor out = zeros(x.shape);
  const auto& xv = *x.data;
  auto& ov = *out.data;
  for (size_t i = 0; i < ov.size(); ++i) {
    const double v = double(xv[i]);
    ov[i] = real(0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)));
  }
  check_finite(out, "gelu");
  detail::attach(out, {&x}, [x, og = out.grad]() {
    if (!x.requires_grad) return;
    const auto& xv = *x.data;
    for (size_t i = 0; i < og->size(); ++i) {
      const double v = double(xv[i]);
      const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
      const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
      (*x.grad)[i] += (*og)[i] * real(cdf + v * pdf);
    }
  });
  return out;
}

// Per-row layer normalization over the last dimension.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         real eps = real(1e-5)) {
  if (x.shape.size() != 2 || gain.numel() != x.cols() || bias.numel() != x.cols())
    throw std::invalid_argument("layer_norm: gain/bias must match column count");
  const int64_t n = x.rows(), d = x.cols();
  Tensor out = zeros(x.shape);
  auto xhat = std::make_shared<std::vector<real>>(size_t(n * d));
  auto inv_sd = std::make_shared<std::vector<real>>(size_t(n));
  for (int64_t r = 0; r < n; ++r) {
    double mean = 0, sq = 0;
    for (int64_t c = 0; c < d; ++c) mean += double(x.at(r, c));
    mean /= double(d);
    for (int64_t c = 0; c < d; ++c) {
      const double dv = double(x.at(r, c)) - mean;
      sq += dv * dv;
    }
    const double is = 1.0 / std::sqrt(sq / double(d) + double(eps));
    (*inv_sd)[size_t(r)] = real(is);
    for (int64_t c = 0; c < d; ++c) {
      const real h = real((double(x.at(r, c)) - mean) * is);
      (*xhat)[size_t(r * d + c)] = h;
      out.at(r, c) = h * gain.at(c) + bias.at(c);
    }
  }
  check_finite(out, "layer_norm");
  detail::attach(out, {&x, &gain, &bias}, [x, gain, bias, n, d, xhat, inv_sd, og = out.grad]() {
    for (int64_t r = 0; r < n; ++r) {
      const real* go = og->data() + r * d;
      const real* xh = xhat->data() + r * d;
      if (gain.requires_grad || bias.requires_grad) {
        for (int64_t c = 0; c < d; ++c) {
          if (gain.requires_grad) (*gain.grad)[size_t(c)] += go[c] * xh[c];
          if (bias.requires_grad) (*bias.grad)[size_t(c)] += go[c];
        }
      }
      if (x.requires_grad) {
        double m1 = 0, m2 = 0;
        for (int64_t c = 0; c < d; ++c) {
          const double dxh = double(go[c]) * double(gain.at(c));
          m1 += dxh;
          m2 += dxh * double(xh[c]);
        }
        m1 /= double(d);
        m2 /= double(d);
        const double is = double((*inv_sd)[size_t(r)]);
        for (int64_t c = 0; c < d; ++c) {
          const double dxh = double(go[c]) * double(gain.at(c));
          (*x.grad)[size_t(r * d + c)] += real((dxh - m1 - double(xh[c]) * m2) * is);
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Row/column assembly

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  const int64_t d = parts[0].cols();
  int64_t n = 0;
  for (const auto& p : parts) {
    if (p.shape.size() != 2 || p.cols() != d)
      throw std::invalid_argument("concat_rows: column counts differ");
    n += p.rows();
  }
  Tensor out = zeros({n, d});
  int64_t r0 = 0;
  for (const auto& p : parts) {
    std::copy(p.data->begin(), p.data->end(), out.data->begin() + r0 * d);
    r0 += p.rows();
  }
  bool need = grad_enabled();
  if (need) {
    need = false;
    for (const auto& p : parts)
      if (p.requires_grad) need = true;
  }
  out.requires_grad = need;
  if (need) {
    detail::ensure_out_grad(out);
    out.node = std::make_shared<Node>();
    for (const auto& p : parts)
      if (p.node) out.node->parents.push_back(p.node);
    out.node->backward = [parts, d, og = out.grad]() {
      int64_t r0 = 0;
      for (const auto& p : parts) {
        if (p.requires_grad) {
          const int64_t cnt = p.rows() * d;
          for (int64_t i = 0; i < cnt; ++i) (*p.grad)[size_t(i)] += (*og)[size_t(r0 * d + i)];
        }
        r0 += p.rows();
      }
    };
  }
  return out;
}

inline Tensor slice_rows(const Tensor& x, int64_t start, int64_t count) {
  if (x.shape.size() != 2 || start < 0 || count < 0 || start + count > x.rows())
    throw std::invalid_argument("slice_rows: out of range");
  const int64_t d = x.cols();
  Tensor out = zeros({count, d});
  std::copy(x.data->begin() + start * d, x.data->begin() + (start + count) * d, out.data->begin());
  detail::attach(out, {&x}, [x, start, count, d, og = out.grad]() {
    if (!x.requires_grad) return;
    for (int64_t i = 0; i < count * d; ++i) (*x.grad)[size_t(start * d + i)] += (*og)[size_t(i)];
  });
  return out;
}

inline Tensor slice_cols(const Tensor& x, int64_t start, int64_t count) {
  if (x.shape.size() != 2 || start < 0 || count < 0 || start + count > x.cols())
    throw std::invalid_argument("slice_cols: out of range");
  const int64_t n = x.rows(), d = x.cols();
  Tensor out = zeros({n, count});
  for (int64_t r = 0; r < n; ++r)
    for (int64_t c = 0; c < count; ++c) out.at(r, c) = x.at(r, start + c);
  detail::attach(out, {&x}, [x, start, count, n, d, og = out.grad]() {
    if (!x.requires_grad) return;
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < count; ++c)
        (*x.grad)[size_t(r * d + start + c)] += (*og)[size_t(r * count + c)];
  });
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const int64_t n = parts[0].rows();
  int64_t d = 0;
  for (const auto& p : parts) {
    if (p.shape.size() != 2 || p.rows() != n)
      throw std::invalid_argument("concat_cols: row counts differ");
    d += p.cols();
  }
  Tensor out = zeros({n, d});
  int64_t c0 = 0;
  for (const auto& p : parts) {
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c < p.cols(); ++c) out.at(r, c0 + c) = p.at(r, c);
    c0 += p.cols();
  }
  bool need = grad_enabled();
  if (need) {
    need = false;
    for (const auto& p : parts)
      if (p.requires_grad) need = true;
  }
  out.requires_grad = need;
  if (need) {
    detail::ensure_out_grad(out);
    out.node = std::make_shared<Node>();
    for (const auto& p : parts)
      if (p.node) out.node->parents.push_back(p.node);
    out.node->backward = [parts, n, d, og = out.grad]() {
      int64_t c0 = 0;
      for (const auto& p : parts) {
        if (p.requires_grad) {
          for (int64_t r = 0; r < n; ++r)
            for (int64_t c = 0; c < p.cols(); ++c)
              (*p.grad)[size_t(r * p.cols() + c)] += (*og)[size_t(r * d + c0 + c)];
        }
        c0 += p.cols();
      }
    };
  }
  return out;
}

// Embedding lookup: out row i = table row ids[i]. Backward scatter-adds.
inline Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids) {
  if (table.shape.size() != 2) throw std::invalid_argument("gather_rows: table must be 2D");
  const int64_t d = table.cols();
  for (int64_t id : ids)
    if (id < 0 || id >= table.rows()) throw std::out_of_range("gather_rows: id out of range");
  Tensor out = zeros({int64_t(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(table.data->begin() + ids[i] * d, table.data->begin() + (ids[i] + 1) * d,
              out.data->begin() + int64_t(i) * d);
  detail::attach(out, {&table}, [table, ids, d, og = out.grad]() {
    if (!table.requires_grad) return;
    for (size_t i = 0; i < ids.size(); ++i)
      for (int64_t c = 0; c < d; ++c)
        (*table.grad)[size_t(ids[i] * d + c)] += (*og)[i * size_t(d) + size_t(c)];
  });
  return out;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) throw std::invalid_argument("reshape: element count differs");
  Tensor out = zeros(std::move(shape));
  std::copy(x.data->begin(), x.data->end(), out.data->begin());
  detail::attach(out, {&x}, [x, og = out.grad]() {
    if (!x.requires_grad) return;
    for (size_t i = 0; i < og->size(); ++i) (*x.grad)[i] += (*og)[i];
  });
  return out;
}

// Forward takes `values`; backward passes gradients through to `through`
// unchanged (straight-through estimator).
inline Tensor straight_through(const Tensor& through, const std::vector<real>& values) {
  if (int64_t(values.size()) != through.numel())
    throw std::invalid_argument("straight_through: size mismatch");
  Tensor out = zeros(through.shape);
  std::copy(values.begin(), values.end(), out.data->begin());
  check_finite(out, "straight_through");
  detail::attach(out, {&through}, [through, og = out.grad]() {
    if (!through.requires_grad) return;
    for (size_t i = 0; i < og->size(); ++i) (*through.grad)[i] += (*og)[i];
  });
  return out;
}

inline Tensor detach(const Tensor& x) {
  Tensor out = zeros(x.shape);
  std::copy(x.data->begin(), x.data->end(), out.data->begin());
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses (double accumulation regardless of scalar type)

inline Tensor sum(const Tensor& x) {
  double acc = 0;
  for (real v : *x.data) acc += double(v);
  Tensor out = make_tensor({1}, {real(acc)});
  check_finite(out, "sum");
  detail::attach(out, {&x}, [x, og = out.grad]() {
    if (!x.requires_grad) return;
    const real g = (*og)[0];
    for (auto& gv : *x.grad) gv += g;
  });
  return out;
}

inline Tensor mean(const Tensor& x) {
  const real inv = real(1.0 / double(x.numel()));
  return scale(sum(x), inv);
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mse");
  double acc = 0;
  for (size_t i = 0; i < a.data->size(); ++i) {
    const double d = double((*a.data)[i]) - double((*b.data)[i]);
    acc += d * d;
  }
  const double n = double(a.numel());
  Tensor out = make_tensor({1}, {real(acc / n)});
  check_finite(out, "mse");
  detail::attach(out, {&a, &b}, [a, b, n, og = out.grad]() {
    const real g = (*og)[0];
    for (size_t i = 0; i < a.data->size(); ++i) {
      const real d = real(2.0 / n) * ((*a.data)[i] - (*b.data)[i]) * g;
      if (a.requires_grad) (*a.grad)[i] += d;
      if (b.requires_grad) (*b.grad)[i] -= d;
    }
  });
  return out;
}

// Frobenius/L2 norm: sqrt(sum of squares). Gradient is x/||x||, defined as 0
// at the origin.
inline Tensor l2_norm(const Tensor& x) {
  double acc = 0;
  for (real v : *x.data) acc += double(v) * double(v);
  const double norm = std::sqrt(acc);
  Tensor out = make_tensor({1}, {real(norm)});
  check_finite(out, "l2_norm");
  detail::attach(out, {&x, }, [x, norm, og = out.grad]() {
    if (!x.requires_grad || norm < 1e-300) return;
    const real g = (*og)[0];
    const real inv = real(1.0 / norm);
    for (size_t i = 0; i < x.data->size(); ++i) (*x.grad)[i] += g * inv * (*x.data)[i];
  });
  return out;
}

// Weighted token cross-entropy over logit rows. Rows with weight 0 are
// excluded; the result is the weighted mean of -log p(target).
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int64_t>& targets,
                                 const std::vector<real>& weights) {
  if (logits.shape.size() != 2 || targets.size() != size_t(logits.rows()) ||
      weights.size() != targets.size())
    throw std::invalid_argument("cross_entropy_rows: row/target/weight mismatch");
  const int64_t n = logits.rows(), v = logits.cols();
  double wsum = 0;
  for (real w : weights) wsum += double(w);
  if (wsum <= 0) throw std::invalid_argument("cross_entropy_rows: zero total weight");
  auto lse = std::make_shared<std::vector<double>>(size_t(n));
  double loss = 0;
  for (int64_t r = 0; r < n; ++r) {
    if (weights[size_t(r)] == real(0)) continue;
    if (targets[size_t(r)] < 0 || targets[size_t(r)] >= v)
      throw std::out_of_range("cross_entropy_rows: target out of range");
    double mx = -1e300;
    for (int64_t c = 0; c < v; ++c) mx = std::max(mx, double(logits.at(r, c)));
    double s = 0;
    for (int64_t c = 0; c < v; ++c) s += std::exp(double(logits.at(r, c)) - mx);
    const double l = mx + std::log(s);
    (*lse)[size_t(r)] = l;
    loss += double(weights[size_t(r)]) * (l - double(logits.at(r, targets[size_t(r)])));
  }
  Tensor out = make_tensor({1}, {real(loss / wsum)});
  check_finite(out, "cross_entropy_rows");
  detail::attach(out, {&logits}, [logits, targets, weights, wsum, lse, n, v, og = out.grad]() {
    if (!logits.requires_grad) return;
    const double g = double((*og)[0]) / wsum;
    for (int64_t r = 0; r < n; ++r) {
      const double w = double(weights[size_t(r)]);
      if (w == 0) continue;
      const double l = (*lse)[size_t(r)];
      for (int64_t c = 0; c < v; ++c) {
        double p = std::exp(double(logits.at(r, c)) - l);
        if (c == targets[size_t(r)]) p -= 1.0;
        (*logits.grad)[size_t(r * v + c)] += real(g * w * p);
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Boolean attention mask: true = attention allowed. Every row must keep at
// least one reachable column (a token can always attend somewhere).
struct BoolMask {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<uint8_t> bits;

  BoolMask() = default;
  BoolMask(int64_t r, int64_t c, bool value = false)
      : rows(r), cols(c), bits(size_t(r * c), value ? 1 : 0) {}

  bool at(int64_t r, int64_t c) const { return bits[size_t(r * cols + c)] != 0; }
  void set(int64_t r, int64_t c, bool v) { bits[size_t(r * cols + c)] = v ? 1 : 0; }

  static BoolMask all_true(int64_t r, int64_t c) { return BoolMask(r, c, true); }

  static BoolMask causal(int64_t n) {
    BoolMask m(n, n);
    for (int64_t r = 0; r < n; ++r)
      for (int64_t c = 0; c <= r; ++c) m.set(r, c, true);
    return m;
  }

  void validate() const {
    for (int64_t r = 0; r < rows; ++r) {
      bool any = false;
      for (int64_t c = 0; c < cols && !any; ++c) any = at(r, c);
      if (!any) throw std::invalid_argument("BoolMask: fully masked row " + std::to_string(r));
    }
  }

  bool operator==(const BoolMask& o) const {
    return rows == o.rows && cols == o.cols && bits == o.bits;
  }
};

// ---------------------------------------------------------------------------
// Fused multi-head attention with a boolean reachability mask. Masked-out
// logits get an additive -1e9 which underflows to weight exactly zero; with
// the all-true mask nothing is added, so the result is bit-identical to
// unmasked attention.
inline Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                               const BoolMask& mask, int n_heads) {
  if (q.shape.size() != 2 || k.shape.size() != 2 || v.shape.size() != 2)
    throw std::invalid_argument("masked_attention: inputs must be 2D");
  const int64_t nq = q.rows(), nk = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d)
    throw std::invalid_argument("masked_attention: q/k/v model dims differ");
  if (n_heads <= 0 || d % n_heads != 0)
    throw std::invalid_argument("masked_attention: model dim not divisible by head count");
  if (mask.rows != nq || mask.cols != nk)
    throw std::invalid_argument("masked_attention: mask shape mismatch");
  mask.validate();

  const int64_t dh = d / n_heads;
  const real inv_sqrt = real(1.0 / std::sqrt(double(dh)));
  Tensor out = zeros({nq, d});
  // Softmax weights for every head, saved for backward: n_heads blocks of nq x nk.
  auto attn = std::make_shared<std::vector<real>>(size_t(n_heads) * size_t(nq * nk));

  using detail::EMat;
  for (int h = 0; h < n_heads; ++h) {
    Eigen::Map<const EMat, 0, Eigen::OuterStride<>> qh(q.data->data() + h * dh, nq, dh,
                                                       Eigen::OuterStride<>(d));
    Eigen::Map<const EMat, 0, Eigen::OuterStride<>> kh(k.data->data() + h * dh, nk, dh,
                                                       Eigen::OuterStride<>(d));
    Eigen::Map<const EMat, 0, Eigen::OuterStride<>> vh(v.data->data() + h * dh, nk, dh,
                                                       Eigen::OuterStride<>(d));
    Eigen::Map<EMat> ah(attn->data() + size_t(h) * size_t(nq * nk), nq, nk);
    ah.noalias() = qh * kh.transpose() * inv_sqrt;
    for (int64_t r = 0; r < nq; ++r) {
      real* row = ah.data() + r * nk;
      for (int64_t c = 0; c < nk; ++c)
        if (!mask.at(r, c)) row[c] += kMaskedLogit;
      real mx = row[0];
      for (int64_t c = 1; c < nk; ++c) mx = std::max(mx, row[c]);
      double s = 0;
      for (int64_t c = 0; c < nk; ++c) {
        row[c] = real(std::exp(double(row[c]) - double(mx)));
        s += double(row[c]);
      }
      const real inv = real(1.0 / s);
      for (int64_t c = 0; c < nk; ++c) row[c] *= inv;
    }
    Eigen::Map<EMat, 0, Eigen::OuterStride<>> oh(out.data->data() + h * dh, nq, dh,
                                                 Eigen::OuterStride<>(d));
    oh.noalias() = ah * vh;
  }
  check_finite(out, "masked_attention");

  detail::attach(out, {&q, &k, &v}, [q, k, v, attn, nq, nk, d, dh, n_heads, inv_sqrt,
                                     og = out.grad]() {
    using detail::EMat;
    EMat ds(nq, nk);
    for (int h = 0; h < n_heads; ++h) {
      Eigen::Map<const EMat> ah(attn->data() + size_t(h) * size_t(nq * nk), nq, nk);
      Eigen::Map<const EMat, 0, Eigen::OuterStride<>> goh(og->data() + h * dh, nq, dh,
                                                          Eigen::OuterStride<>(d));
      Eigen::Map<const EMat, 0, Eigen::OuterStride<>> qh(q.data->data() + h * dh, nq, dh,
                                                         Eigen::OuterStride<>(d));
      Eigen::Map<const EMat, 0, Eigen::OuterStride<>> kh(k.data->data() + h * dh, nk, dh,
                                                         Eigen::OuterStride<>(d));
      Eigen::Map<const EMat, 0, Eigen::OuterStride<>> vh(v.data->data() + h * dh, nk, dh,
                                                         Eigen::OuterStride<>(d));
      if (v.requires_grad) {
        Eigen::Map<EMat, 0, Eigen::OuterStride<>> gvh(v.grad->data() + h * dh, nk, dh,
                                                      Eigen::OuterStride<>(d));
        gvh.noalias() += ah.transpose() * goh;
      }
      if (q.requires_grad || k.requires_grad) {
        // Softmax backward: dS = A .* (dA - rowsum(dA .* A)).
        ds.noalias() = goh * vh.transpose();
        for (int64_t r = 0; r < nq; ++r) {
          double dot = 0;
          for (int64_t c = 0; c < nk; ++c) dot += double(ds(r, c)) * double(ah(r, c));
          for (int64_t c = 0; c < nk; ++c)
            ds(r, c) = ah(r, c) * (ds(r, c) - real(dot)) * inv_sqrt;
        }
        if (q.requires_grad) {
          Eigen::Map<EMat, 0, Eigen::OuterStride<>> gqh(q.grad->data() + h * dh, nq, dh,
                                                        Eigen::OuterStride<>(d));
          gqh.noalias() += ds * kh;
        }
        if (k.requires_grad) {
          Eigen::Map<EMat, 0, Eigen::OuterStride<>> gkh(k.grad->data() + h * dh, nk, dh,
                                                        Eigen::OuterStride<>(d));
          gkh.noalias() += ds.transpose() * qh;
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Rotary position encodings. Rotations are applied pairwise over channels;
// position 0 is the identity and every rotation preserves pair norms.

namespace detail {

// Rotates channel range [c0, c0+width) of each row by its position using
// frequencies theta^(-2i/width). sign=-1 applies the inverse rotation.
inline void rope_apply_range(const real* in, real* out, int64_t n, int64_t d, int64_t c0,
                             int64_t width, const int64_t* positions, real theta, int sign) {
  const int64_t pairs = width / 2;
  std::vector<double> freq(static_cast<size_t>(pairs));
  for (int64_t p = 0; p < pairs; ++p)
    freq[size_t(p)] = std::pow(double(theta), -2.0 * double(p) / double(width));
  for (int64_t r = 0; r < n; ++r) {
    const real* xi = in + r * d;
    real* xo = out + r * d;
    const double pos = double(positions[r]);
    for (int64_t p = 0; p < pairs; ++p) {
      const double ang = double(sign) * pos * freq[size_t(p)];
      const double c = std::cos(ang), s = std::sin(ang);
      const double a = double(xi[c0 + 2 * p]), b = double(xi[c0 + 2 * p + 1]);
      xo[c0 + 2 * p] = real(a * c - b * s);
      xo[c0 + 2 * p + 1] = real(a * s + b * c);
    }
  }
}

}  // namespace detail

inline Tensor apply_rope_1d(const Tensor& x, const std::vector<int64_t>& positions,
                            real theta = real(10000)) {
  if (x.shape.size() != 2) throw std::invalid_argument("apply_rope_1d: input must be 2D");
  if (x.cols() % 2 != 0) throw std::invalid_argument("apply_rope_1d: model dim must be even");
  if (int64_t(positions.size()) != x.rows())
    throw std::invalid_argument("apply_rope_1d: positions length mismatch");
  const int64_t n = x.rows(), d = x.cols();
  Tensor out = zeros(x.shape);
  detail::rope_apply_range(x.data->data(), out.data->data(), n, d, 0, d, positions.data(), theta, +1);
  check_finite(out, "apply_rope_1d");
  detail::attach(out, {&x}, [x, positions, n, d, theta, og = out.grad]() {
    if (!x.requires_grad) return;
    std::vector<real> gin(size_t(n * d));
    detail::rope_apply_range(og->data(), gin.data(), n, d, 0, d, positions.data(), theta, -1);
    detail::accumulate(x, gin);
  });
  return out;
}

// Axis-factored rotary encoding: channels split into three equal thirds
// rotated by the t, h, w coordinates respectively. Each third behaves exactly
// like apply_rope_1d of that width.
inline Tensor apply_rope_3d(const Tensor& x, const std::vector<std::array<int64_t, 3>>& coords,
                            real theta = real(10000)) {
  if (x.shape.size() != 2) throw std::invalid_argument("apply_rope_3d: input must be 2D");
  if (x.cols() % 6 != 0)
    throw std::invalid_argument("apply_rope_3d: model dim must be divisible by 6");
  if (int64_t(coords.size()) != x.rows())
    throw std::invalid_argument("apply_rope_3d: coords length mismatch");
  const int64_t n = x.rows(), d = x.cols(), third = d / 3;
  std::array<std::vector<int64_t>, 3> axis_pos;
  for (int a = 0; a < 3; ++a) {
    axis_pos[a].resize(size_t(n));
    for (int64_t r = 0; r < n; ++r) axis_pos[a][size_t(r)] = coords[size_t(r)][size_t(a)];
  }
  Tensor out = zeros(x.shape);
  for (int a = 0; a < 3; ++a)
    detail::rope_apply_range(x.data->data(), out.data->data(), n, d, a * third, third,
                             axis_pos[size_t(a)].data(), theta, +1);
  check_finite(out, "apply_rope_3d");
  detail::attach(out, {&x}, [x, axis_pos, n, d, third, theta, og = out.grad]() {
    if (!x.requires_grad) return;
    std::vector<real> gin(size_t(n * d));
    for (int a = 0; a < 3; ++a)
      detail::rope_apply_range(og->data(), gin.data(), n, d, a * third, third,
                               axis_pos[size_t(a)].data(), theta, -1);
    detail::accumulate(x, gin);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reverse-mode sweep from a scalar loss. Populates grad buffers of every
// reachable requires_grad tensor, then releases the graph.
inline void backward(Tensor& loss) {
  if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar");
  if (!loss.requires_grad || !loss.node) return;
  (*loss.grad)[0] = real(1);

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node.get(), 0);
  seen.insert(loss.node.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward();
  // Consume the graph.
  for (Node* nptr : order) {
    nptr->backward = nullptr;
    nptr->parents.clear();
  }
  loss.node.reset();
}

inline real scalar_value(const Tensor& t) {
  if (t.numel() != 1) throw std::invalid_argument("scalar_value: tensor is not a scalar");
  return (*t.data)[0];
}

}  // namespace landiff
