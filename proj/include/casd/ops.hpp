#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>

#include "casd/gemm.hpp"
#include "casd/tensor.hpp"

// Forward/backward primitives. Every op returns a fresh tensor; inputs are
// never written to, gradients accumulate into the inputs' grad buffers.

namespace casd {
namespace detail {

// Coalesced broadcast plan for elementwise binaries. Operand dims of size 1
// get stride 0; adjacent dims with consistent strides are merged so the
// inner loops run over long contiguous spans.
struct BPlan {
  std::vector<int64_t> dims, sa, sb;
  int64_t total = 1;

  // row-major contiguous strides over `dims` (how the op output is laid out)
  std::vector<int64_t> contiguous() const {
    std::vector<int64_t> st(dims.size());
    int64_t acc = 1;
    for (int d = int(dims.size()) - 1; d >= 0; --d) {
      st[d] = acc;
      acc *= dims[d];
    }
    return st;
  }
};

inline BPlan make_bplan(const Shape& out, const Shape& a, const Shape& b, const char* op) {
  int r = int(out.size());
  auto stride_of = [&](const Shape& s) {
    // right-aligned strides, 0 on broadcast dims
    std::vector<int64_t> st(r, 0);
    int off = r - int(s.size());
    int64_t acc = 1;
    for (int d = int(s.size()) - 1; d >= 0; --d) {
      if (s[d] == out[off + d]) {
        st[off + d] = (s[d] == 1) ? 0 : acc;
      } else if (s[d] == 1) {
        st[off + d] = 0;
      } else {
        fail(std::string(op) + ": cannot broadcast " + shape_str(a) + " vs " + shape_str(b));
      }
      acc *= s[d];
    }
    return st;
  };
  BPlan p;
  std::vector<int64_t> sa = stride_of(a), sb = stride_of(b);
  for (int d = 0; d < r; ++d) {
    int64_t n = out[d];
    if (n == 1) continue;
    if (!p.dims.empty() && p.sa.back() == sa[d] * n && p.sb.back() == sb[d] * n &&
        ((p.sa.back() != 0) == (sa[d] != 0)) && ((p.sb.back() != 0) == (sb[d] != 0))) {
      // merge with previous dim when both operands are contiguous across it
      p.dims.back() *= n;
      p.sa.back() = sa[d];
      p.sb.back() = sb[d];
    } else {
      p.dims.push_back(n);
      p.sa.push_back(sa[d]);
      p.sb.push_back(sb[d]);
    }
    p.total *= n;
  }
  if (p.dims.empty()) {
    p.dims = {1};
    p.sa = {0};
    p.sb = {0};
  }
  return p;
}

template <typename T, typename F>
void bloop(const BPlan& p, const T* a, const T* b, T* out, F&& f) {
  int nd = int(p.dims.size());
  std::vector<int64_t> idx(nd, 0);
  int64_t inner = p.dims[nd - 1], ia = p.sa[nd - 1], ib = p.sb[nd - 1];
  int64_t outer = p.total / inner;
  int64_t oa = 0, ob = 0;
  for (int64_t o = 0; o < outer; ++o) {
    if (ia == 1 && ib == 1) {
      for (int64_t i = 0; i < inner; ++i) out[i] = f(a[oa + i], b[ob + i]);
    } else if (ia == 1 && ib == 0) {
      T bv = b[ob];
      for (int64_t i = 0; i < inner; ++i) out[i] = f(a[oa + i], bv);
    } else if (ia == 0 && ib == 1) {
      T av = a[oa];
      for (int64_t i = 0; i < inner; ++i) out[i] = f(av, b[ob + i]);
    } else {
      for (int64_t i = 0; i < inner; ++i) out[i] = f(a[oa + i * ia], b[ob + i * ib]);
    }
    out += inner;
    // odometer over the outer dims
    for (int d = nd - 2; d >= 0; --d) {
      oa += p.sa[d];
      ob += p.sb[d];
      if (++idx[d] < p.dims[d]) break;
      oa -= p.sa[d] * p.dims[d];
      ob -= p.sb[d] * p.dims[d];
      idx[d] = 0;
    }
  }
}

// accumulate `src` (laid out as `out` shape) into `dst` whose shape may have
// broadcast dims; the reverse of bloop's operand addressing
template <typename T>
void breduce_into(const BPlan& p, bool operand_a, const T* src, T* dst) {
  const std::vector<int64_t>& s = operand_a ? p.sa : p.sb;
  int nd = int(p.dims.size());
  std::vector<int64_t> idx(nd, 0);
  int64_t inner = p.dims[nd - 1], is = s[nd - 1];
  int64_t outer = p.total / inner;
  int64_t off = 0;
  for (int64_t o = 0; o < outer; ++o) {
    if (is == 1) {
      for (int64_t i = 0; i < inner; ++i) dst[off + i] += src[i];
    } else if (is == 0) {
      T acc = T(0);
      for (int64_t i = 0; i < inner; ++i) acc += src[i];
      dst[off] += acc;
    } else {
      for (int64_t i = 0; i < inner; ++i) dst[off + i * is] += src[i];
    }
    src += inner;
    for (int d = nd - 2; d >= 0; --d) {
      off += s[d];
      if (++idx[d] < p.dims[d]) break;
      off -= s[d] * p.dims[d];
      idx[d] = 0;
    }
  }
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  int r = std::max(a.size(), b.size());
  Shape out(r);
  for (int d = 0; d < r; ++d) {
    int da = d - (r - int(a.size())), db = d - (r - int(b.size()));
    int na = da >= 0 ? a[da] : 1, nb = db >= 0 ? b[db] : 1;
    if (na != nb && na != 1 && nb != 1)
      fail(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    out[d] = std::max(na, nb);
  }
  return out;
}

}  // namespace detail

namespace ops {

// ---- elementwise binaries with numpy-style broadcasting ----

template <typename T, typename FwdF, typename BwdF>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, FwdF fwd, BwdF bwd) {
  Shape os = detail::broadcast_shape(a.shape, b.shape, name);
  auto plan = std::make_shared<detail::BPlan>(detail::make_bplan(os, a.shape, b.shape, name));
  Tensor<T> out = detail::make_op_output<T>(
      os, {a, b},
      [plan, bwd](const Tensor<T>& o) {
        const Tensor<T>& pa = o.node->parents[0];
        const Tensor<T>& pb = o.node->parents[1];
        std::vector<T> da, db;
        if (pa.requires_grad) da.resize(size_t(o.numel()));
        if (pb.requires_grad) db.resize(size_t(o.numel()));
        bwd(*plan, pa, pb, o, da, db);
        if (pa.requires_grad) detail::breduce_into(*plan, true, da.data(), pa.grad->data());
        if (pb.requires_grad) detail::breduce_into(*plan, false, db.data(), pb.grad->data());
      },
      name);
  detail::bloop(*plan, a.ptr(), b.ptr(), out.ptr(), fwd);
  detail::check_output_finite(out, name);
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "add", [](T x, T y) { return x + y; },
      [](const detail::BPlan& p, const Tensor<T>& pa, const Tensor<T>& pb, const Tensor<T>& o,
         std::vector<T>& da, std::vector<T>& db) {
        const T* g = o.grad->data();
        if (!da.empty()) std::copy(g, g + o.numel(), da.begin());
        if (!db.empty()) std::copy(g, g + o.numel(), db.begin());
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](const detail::BPlan& p, const Tensor<T>& pa, const Tensor<T>& pb, const Tensor<T>& o,
         std::vector<T>& da, std::vector<T>& db) {
        const T* g = o.grad->data();
        if (!da.empty()) std::copy(g, g + o.numel(), da.begin());
        if (!db.empty())
          for (int64_t i = 0; i < o.numel(); ++i) db[i] = -g[i];
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "mul", [](T x, T y) { return x * y; },
      [](const detail::BPlan& p, const Tensor<T>& pa, const Tensor<T>& pb, const Tensor<T>& o,
         std::vector<T>& da, std::vector<T>& db) {
        const T* g = o.grad->data();
        detail::BPlan pg = p;  // g is laid out like the output: contiguous strides
        pg.sa = p.contiguous();
        if (!da.empty()) {
          pg.sb = p.sb;
          detail::bloop(pg, g, pb.ptr(), da.data(), [](T gv, T y) { return gv * y; });
        }
        if (!db.empty()) {
          pg.sb = p.sa;
          detail::bloop(pg, g, pa.ptr(), db.data(), [](T gv, T x) { return gv * x; });
        }
      });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "div", [](T x, T y) { return x / y; },
      [](const detail::BPlan& p, const Tensor<T>& pa, const Tensor<T>& pb, const Tensor<T>& o,
         std::vector<T>& da, std::vector<T>& db) {
        const T* g = o.grad->data();
        detail::BPlan pg = p;
        pg.sa = p.contiguous();
        pg.sb = p.sb;
        if (!da.empty())
          detail::bloop(pg, g, pb.ptr(), da.data(), [](T gv, T y) { return gv / y; });
        if (!db.empty()) {
          // d/db (a/b) = -out/b, with out and g contiguous and b strided
          const T* ov = o.ptr();
          for (int64_t i = 0; i < o.numel(); ++i) db[i] = -g[i] * ov[i];
          std::vector<T> tmp(db.size());
          detail::bloop(pg, db.data(), pb.ptr(), tmp.data(), [](T x, T y) { return x / y; });
          db.swap(tmp);
        }
      });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out = detail::make_op_output<T>(
      a.shape, {a},
      [](const Tensor<T>& o) {
        const Tensor<T>& pa = o.node->parents[0];
        if (!pa.requires_grad) return;
        const T* g = o.grad->data();
        T* d = pa.grad->data();
        for (int64_t i = 0; i < o.numel(); ++i) d[i] += g[i];
      },
      "add_scalar");
  const T* x = a.ptr();
  T* y = out.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) y[i] = x[i] + s;
  detail::check_output_finite(out, "add_scalar");
  return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  Tensor<T> out = detail::make_op_output<T>(
      a.shape, {a},
      [s](const Tensor<T>& o) {
        const Tensor<T>& pa = o.node->parents[0];
        if (!pa.requires_grad) return;
        const T* g = o.grad->data();
        T* d = pa.grad->data();
        for (int64_t i = 0; i < o.numel(); ++i) d[i] += g[i] * s;
      },
      "mul_scalar");
  const T* x = a.ptr();
  T* y = out.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) y[i] = x[i] * s;
  detail::check_output_finite(out, "mul_scalar");
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

// ---- elementwise unaries ----

template <typename T, typename FwdF, typename BwdF>
Tensor<T> unary_op(const Tensor<T>& a, const char* name, FwdF fwd, BwdF grad_of) {
  // grad_of(x, y) -> dy/dx
  Tensor<T> out = detail::make_op_output<T>(
      a.shape, {a},
      [grad_of](const Tensor<T>& o) {
        const Tensor<T>& pa = o.node->parents[0];
        if (!pa.requires_grad) return;
        const T* g = o.grad->data();
        const T* x = pa.ptr();
        const T* y = o.ptr();
        T* d = pa.grad->data();
        for (int64_t i = 0; i < o.numel(); ++i) d[i] += g[i] * grad_of(x[i], y[i]);
      },
      name);
  const T* x = a.ptr();
  T* y = out.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) y[i] = fwd(x[i]);
  detail::check_output_finite(out, name);
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(
      a, "relu", [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  return unary_op(
      a, "leaky_relu", [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& a) {
  return unary_op(
      a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(
      a, "sigmoid",
      [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& a) {
  return unary_op(
      a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& a) {
  return unary_op(
      a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt_op(const Tensor<T>& a) {
  return unary_op(
      a, "sqrt", [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(0.5) / std::max(y, T(1e-30)); });
}

template <typename T>
Tensor<T> abs_op(const Tensor<T>& a) {
  return unary_op(
      a, "abs", [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return unary_op(
      a, "clamp", [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// ---- shape ops ----

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
  // -1 wildcard on a single dim
  int64_t known = 1, wild = -1;
  for (size_t d = 0; d < s.size(); ++d) {
    if (s[d] == -1) {
      if (wild >= 0) fail("reshape: more than one -1 in " + shape_str(s));
      wild = int64_t(d);
    } else {
      known *= s[d];
    }
  }
  if (wild >= 0) s[size_t(wild)] = int(a.numel() / known);
  if (numel_of(s) != a.numel())
    fail("reshape: cannot view " + shape_str(a.shape) + " as " + shape_str(s));
  Tensor<T> out = detail::make_op_output<T>(
      s, {a},
      [](const Tensor<T>& o) {
        const Tensor<T>& pa = o.node->parents[0];
        if (!pa.requires_grad) return;
        const T* g = o.grad->data();
        T* d = pa.grad->data();
        for (int64_t i = 0; i < o.numel(); ++i) d[i] += g[i];
      },
      "reshape");
  out.data = a.data;  // same buffer, values are immutable
  return out;
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& s) {
  auto plan = std::make_shared<detail::BPlan>(detail::make_bplan(s, a.shape, a.shape, "broadcast"));
  Tensor<T> out = detail::make_op_output<T>(
      s, {a},
      [plan](const Tensor<T>& o) {
        const Tensor<T>& pa = o.node->parents[0];
        if (!pa.requires_grad) return;
        detail::breduce_into(*plan, true, o.grad->data(), pa.grad->data());
      },
      "broadcast");
  detail::bloop(*plan, a.ptr(), a.ptr(), out.ptr(), [](T x, T) { return x; });
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) fail("concat: no inputs");
  int r = parts[0].rank();
  if (axis < 0 || axis >= r) fail("concat: bad axis");
  Shape os = parts[0].shape;
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) fail("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && p.shape[d] != os[d])
        fail("concat: shape mismatch " + shape_str(p.shape) + " vs " + shape_str(os));
    total += p.shape[axis];
  }
  os[axis] = total;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= os[d];
  for (int d = axis + 1; d < r; ++d) inner *= os[d];
  std::vector<int64_t> widths;
  for (const auto& p : parts) widths.push_back(p.shape[axis] * inner);
  auto w = std::make_shared<std::vector<int64_t>>(widths);
  int64_t row = total * inner;

  Tensor<T> out = detail::make_op_output<T>(
      os, parts,
      [w, outer, row](const Tensor<T>& o) {
        const T* g = o.grad->data();
        int64_t off = 0;
        for (size_t pi = 0; pi < o.node->parents.size(); ++pi) {
          const Tensor<T>& p = o.node->parents[pi];
          int64_t width = (*w)[pi];
          if (p.requires_grad) {
            T* d = p.grad->data();
            for (int64_t ou = 0; ou < outer; ++ou) {
              const T* src = g + ou * row + off;
              T* dst = d + ou * width;
              for (int64_t i = 0; i < width; ++i) dst[i] += src[i];
            }
          }
          off += width;
        }
      },
      "concat");
  T* y = out.ptr();
  int64_t off = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const T* src = parts[pi].ptr();
    int64_t width = widths[pi];
    for (int64_t ou = 0; ou < outer; ++ou)
      std::memcpy(y + ou * row + off, src + ou * width, size_t(width) * sizeof(T));
    off += width;
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int start, int len) {
  int r = a.rank();
  if (axis < 0 || axis >= r || start < 0 || len <= 0 || start + len > a.shape[axis])
    fail("slice: bad range [" + std::to_string(start) + "," + std::to_string(start + len) +
         ") on axis " + std::to_string(axis) + " of " + shape_str(a.shape));
  Shape os = a.shape;
  os[axis] = len;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.shape[d];
  for (int d = axis + 1; d < r; ++d) inner *= a.shape[d];
  int64_t in_row = int64_t(a.shape[axis]) * inner, out_row = int64_t(len) * inner,
          off = int64_t(start) * inner;

  Tensor<T> out = detail::make_op_output<T>(
      os, {a},
      [outer, inner, in_row, out_row, off](const Tensor<T>& o) {
        const Tensor<T>& pa = o.node->parents[0];
        if (!pa.requires_grad) return;
        const T* g = o.grad->data();
        T* d = pa.grad->data();
        for (int64_t ou = 0; ou < outer; ++ou) {
          const T* src = g + ou * out_row;
          T* dst = d + ou * in_row + off;
          for (int64_t i = 0; i < out_row; ++i) dst[i] += src[i];
        }
      },
      "slice");
  T* y = out.ptr();
  const T* x = a.ptr();
  for (int64_t ou = 0; ou < outer; ++ou)
    std::memcpy(y + ou * out_row, x + ou * in_row + off, size_t(out_row) * sizeof(T));
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
  int r = a.rank();
  if (int(perm.size()) != r) fail("permute: perm rank mismatch");
  Shape os(r);
  for (int d = 0; d < r; ++d) os[d] = a.shape[perm[d]];
  // strides of input walked in output order
  std::vector<int64_t> ist(r, 1);
  for (int d = r - 2; d >= 0; --d) ist[d] = ist[d + 1] * a.shape[d + 1];
  auto walk = std::make_shared<std::vector<int64_t>>(r);
  for (int d = 0; d < r; ++d) (*walk)[d] = ist[perm[d]];
  auto oshape = std::make_shared<Shape>(os);

  Tensor<T> out = detail::make_op_output<T>(
      os, {a},
      [walk, oshape](const Tensor<T>& o) {
        const Tensor<T>& pa = o.node->parents[0];
        if (!pa.requires_grad) return;
        const T* g = o.grad->data();
        T* d = pa.grad->data();
        int r = int(oshape->size());
        std::vector<int64_t> idx(r, 0);
        int64_t src_off = 0;
        for (int64_t i = 0; i < o.numel(); ++i) {
          d[src_off] += g[i];
          for (int dd = r - 1; dd >= 0; --dd) {
            src_off += (*walk)[dd];
            if (++idx[dd] < (*oshape)[dd]) break;
            src_off -= (*walk)[dd] * (*oshape)[dd];
            idx[dd] = 0;
          }
        }
      },
      "permute");
  const T* x = a.ptr();
  T* y = out.ptr();
  std::vector<int64_t> idx(r, 0);
  int64_t src_off = 0;
  for (int64_t i = 0; i < out.numel(); ++i) {
    y[i] = x[src_off];
    for (int dd = r - 1; dd >= 0; --dd) {
      src_off += (*walk)[dd];
      if (++idx[dd] < os[dd]) break;
      src_off -= (*walk)[dd] * os[dd];
      idx[dd] = 0;
    }
  }
  return out;
}

// ---- reductions ----

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a, std::vector<int> axes, bool keepdim, bool mean = false) {
  int r = a.rank();
  std::vector<char> red(r, 0);
  for (int ax : axes) {
    if (ax < 0 || ax >= r) fail("reduce: bad axis " + std::to_string(ax));
    red[ax] = 1;
  }
  Shape os;
  int64_t count = 1;
  for (int d = 0; d < r; ++d) {
    if (red[d]) {
      count *= a.shape[d];
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(a.shape[d]);
    }
  }
  if (os.empty()) os.push_back(1);
  T scale = mean ? T(1) / T(count) : T(1);

  // output strides aligned to input dims (0 on reduced dims)
  auto ost = std::make_shared<std::vector<int64_t>>(r, 0);
  {
    int64_t acc = 1;
    for (int d = r - 1; d >= 0; --d) {
      if (!red[d]) {
        (*ost)[d] = acc;
        acc *= a.shape[d];
      }
    }
  }
  auto ishape = std::make_shared<Shape>(a.shape);

  Tensor<T> out = detail::make_op_output<T>(
      os, {a},
      [ost, ishape, scale](const Tensor<T>& o) {
        const Tensor<T>& pa = o.node->parents[0];
        if (!pa.requires_grad) return;
        const T* g = o.grad->data();
        T* d = pa.grad->data();
        int r = int(ishape->size());
        std::vector<int64_t> idx(r, 0);
        int64_t ooff = 0;
        for (int64_t i = 0; i < pa.numel(); ++i) {
          d[i] += g[ooff] * scale;
          for (int dd = r - 1; dd >= 0; --dd) {
            ooff += (*ost)[dd];
            if (++idx[dd] < (*ishape)[dd]) break;
            ooff -= (*ost)[dd] * (*ishape)[dd];
            idx[dd] = 0;
          }
        }
      },
      mean ? "reduce_mean" : "reduce_sum");
  const T* x = a.ptr();
  T* y = out.ptr();
  std::vector<int64_t> idx(r, 0);
  int64_t ooff = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    y[ooff] += x[i];
    for (int dd = r - 1; dd >= 0; --dd) {
      ooff += (*ost)[dd];
      if (++idx[dd] < a.shape[dd]) break;
      ooff -= (*ost)[dd] * a.shape[dd];
      idx[dd] = 0;
    }
  }
  if (mean)
    for (int64_t i = 0; i < out.numel(); ++i) y[i] *= scale;
  detail::check_output_finite(out, "reduce");
  return out;
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a, std::vector<int> axes, bool keepdim) {
  return reduce_sum(a, std::move(axes), keepdim, true);
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  std::vector<int> axes(a.rank());
  for (int d = 0; d < a.rank(); ++d) axes[d] = d;
  return reduce_sum(a, axes, false);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  std::vector<int> axes(a.rank());
  for (int d = 0; d < a.rank(); ++d) axes[d] = d;
  return reduce_mean(a, axes, false);
}

// min/max along one axis; ties resolve to the lowest index
template <typename T>
Tensor<T> reduce_extreme(const Tensor<T>& a, int axis, bool keepdim, bool is_max) {
  int r = a.rank();
  if (axis < 0 || axis >= r) fail("reduce_extreme: bad axis");
  int64_t outer = 1, inner = 1;
  int n = a.shape[axis];
  for (int d = 0; d < axis; ++d) outer *= a.shape[d];
  for (int d = axis + 1; d < r; ++d) inner *= a.shape[d];
  Shape os;
  for (int d = 0; d < r; ++d) {
    if (d == axis) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(a.shape[d]);
    }
  }
  if (os.empty()) os.push_back(1);
  auto arg = std::make_shared<std::vector<int>>(size_t(outer * inner));

  Tensor<T> out = detail::make_op_output<T>(
      os, {a},
      [arg, outer, inner, n](const Tensor<T>& o) {
        const Tensor<T>& pa = o.node->parents[0];
        if (!pa.requires_grad) return;
        const T* g = o.grad->data();
        T* d = pa.grad->data();
        for (int64_t ou = 0; ou < outer; ++ou)
          for (int64_t i = 0; i < inner; ++i) {
            int k = (*arg)[ou * inner + i];
            d[(ou * n + k) * inner + i] += g[ou * inner + i];
          }
      },
      is_max ? "reduce_max" : "reduce_min");
  const T* x = a.ptr();
  T* y = out.ptr();
  for (int64_t ou = 0; ou < outer; ++ou)
    for (int64_t i = 0; i < inner; ++i) {
      T best = x[ou * n * inner + i];
      int bk = 0;
      for (int k = 1; k < n; ++k) {
        T v = x[(ou * n + k) * inner + i];
        if (is_max ? (v > best) : (v < best)) {
          best = v;
          bk = k;
        }
      }
      y[ou * inner + i] = best;
      (*arg)[ou * inner + i] = bk;
    }
  return out;
}

template <typename T>
Tensor<T> reduce_max(const Tensor<T>& a, int axis, bool keepdim) {
  return reduce_extreme(a, axis, keepdim, true);
}
template <typename T>
Tensor<T> reduce_min(const Tensor<T>& a, int axis, bool keepdim) {
  return reduce_extreme(a, axis, keepdim, false);
}

// ---- softmax ----

// numerically-stable softmax along `axis` (max is subtracted before exp)
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  int r = a.rank();
  if (axis < 0 || axis >= r) fail("softmax: bad axis");
  int64_t outer = 1, inner = 1;
  int n = a.shape[axis];
  for (int d = 0; d < axis; ++d) outer *= a.shape[d];
  for (int d = axis + 1; d < r; ++d) inner *= a.shape[d];

  Tensor<T> out = detail::make_op_output<T>(
      a.shape, {a},
      [outer, inner, n](const Tensor<T>& o) {
        const Tensor<T>& pa = o.node->parents[0];
        if (!pa.requires_grad) return;
        const T* g = o.grad->data();
        const T* y = o.ptr();
        T* d = pa.grad->data();
        for (int64_t ou = 0; ou < outer; ++ou)
          for (int64_t i = 0; i < inner; ++i) {
            int64_t base = ou * n * inner + i;
            T dot = T(0);
            for (int k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
            for (int k = 0; k < n; ++k)
              d[base + k * inner] += y[base + k * inner] * (g[base + k * inner] - dot);
          }
      },
      "softmax");
  const T* x = a.ptr();
  T* y = out.ptr();
  for (int64_t ou = 0; ou < outer; ++ou)
    for (int64_t i = 0; i < inner; ++i) {
      int64_t base = ou * n * inner + i;
      T mx = x[base];
      for (int k = 1; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      T sum = T(0);
      for (int k = 0; k < n; ++k) {
        T e = std::exp(x[base + k * inner] - mx);
        y[base + k * inner] = e;
        sum += e;
      }
      T isum = T(1) / sum;
      for (int k = 0; k < n; ++k) y[base + k * inner] *= isum;
    }
  detail::check_output_finite(out, "softmax");
  return out;
}

// ---- matmul / linear ----

// rank-2 (M,K)x(K,N) or batched rank-3 (B,M,K)x(B,K,N); transB multiplies by
// the transpose of b's trailing matrix
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transB = false) {
  int ra = a.rank(), rb = b.rank();
  if (ra != 2 && ra != 3) fail("matmul: lhs rank must be 2 or 3, got " + shape_str(a.shape));
  if (rb != 2 && rb != 3) fail("matmul: rhs rank must be 2 or 3, got " + shape_str(b.shape));
  int batch = ra == 3 ? a.shape[0] : 1;
  if (rb == 3 && ra == 3 && b.shape[0] != batch) fail("matmul: batch mismatch");
  if (rb == 3 && ra == 2) fail("matmul: rank-2 lhs with rank-3 rhs unsupported");
  int M = a.shape[ra - 2], K = a.shape[ra - 1];
  int bk = transB ? b.shape[rb - 1] : b.shape[rb - 2];
  int N = transB ? b.shape[rb - 2] : b.shape[rb - 1];
  if (bk != K)
    fail("matmul: inner dims " + shape_str(a.shape) + (transB ? " x T" : " x ") + shape_str(b.shape));
  Shape os = ra == 3 ? Shape{batch, M, N} : Shape{M, N};

  Tensor<T> out = detail::make_op_output<T>(
      os, {a, b},
      [batch, M, K, N, transB, rb](const Tensor<T>& o) {
        const Tensor<T>& pa = o.node->parents[0];
        const Tensor<T>& pb = o.node->parents[1];
        const T* g = o.grad->data();
        for (int bi = 0; bi < batch; ++bi) {
          const T* gb = g + size_t(bi) * M * N;
          const T* av = pa.ptr() + size_t(bi) * M * K;
          const T* bv = pb.ptr() + (rb == 3 ? size_t(bi) * K * N : 0);
          if (pa.requires_grad) {
            T* da = pa.grad->data() + size_t(bi) * M * K;
            if (!transB)
              gemm::gemm_nt(gb, bv, da, M, N, K, true);  // dA = dY * B^T
            else
              gemm::gemm_nn(gb, bv, da, M, N, K, true);  // dA = dY * B
          }
          if (pb.requires_grad) {
            T* db = pb.grad->data() + (rb == 3 ? size_t(bi) * K * N : 0);
            if (!transB)
              gemm::gemm_tn(av, gb, db, M, K, N, true);  // dB = A^T * dY
            else
              gemm::gemm_tn(gb, av, db, M, N, K, true);  // dB^T... dB = dY^T * A
          }
        }
      },
      "matmul");
  for (int bi = 0; bi < batch; ++bi) {
    const T* av = a.ptr() + size_t(bi) * M * K;
    const T* bv = b.ptr() + (rb == 3 ? size_t(bi) * (transB ? N * K : K * N) : 0);
    T* yv = out.ptr() + size_t(bi) * M * N;
    if (!transB)
      gemm::gemm_nn(av, bv, yv, M, K, N, false);
    else
      gemm::gemm_nt(av, bv, yv, M, K, N, false);
  }
  detail::check_output_finite(out, "matmul");
  return out;
}

// x:(M,K) or (B,M,K), w:(K,N), optional bias:(N)
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  Tensor<T> y = matmul(x, w);
  if (bias.defined()) {
    Shape bs(y.rank(), 1);
    bs.back() = bias.shape.back();
    y = add(y, reshape(bias, bs));
  }
  return y;
}

// ---- conv2d ----

namespace convdet {

struct Geom {
  int B, H, W, Ci, KH, KW, Co, stride, Ho, Wo, pt, pl;
};

inline Geom conv_geom(const Shape& xs, const Shape& ws, int stride, const char* op) {
  if (xs.size() != 4) fail(std::string(op) + ": input must be (B,H,W,C), got " + shape_str(xs));
  if (ws.size() != 4) fail(std::string(op) + ": weight must be (KH,KW,Ci,Co), got " + shape_str(ws));
  Geom g;
  g.B = xs[0];
  g.H = xs[1];
  g.W = xs[2];
  g.Ci = xs[3];
  g.KH = ws[0];
  g.KW = ws[1];
  g.Co = ws[3];
  g.stride = stride;
  if (ws[2] != g.Ci)
    fail(std::string(op) + ": weight expects " + std::to_string(ws[2]) + " input channels, input has " +
         std::to_string(g.Ci) + " (" + shape_str(xs) + " vs " + shape_str(ws) + ")");
  if (stride != 1 && stride != 2) fail(std::string(op) + ": stride must be 1 or 2");
  g.Ho = (g.H + stride - 1) / stride;
  g.Wo = (g.W + stride - 1) / stride;
  int pad_h = std::max(0, (g.Ho - 1) * stride + g.KH - g.H);
  int pad_w = std::max(0, (g.Wo - 1) * stride + g.KW - g.W);
  g.pt = pad_h / 2;
  g.pl = pad_w / 2;
  return g;
}

template <typename T>
void im2col(const T* x, const Geom& g, T* col) {
  // col is (Ho*Wo, KH*KW*Ci) row-major
  int K = g.KH * g.KW * g.Ci;
  for (int oy = 0; oy < g.Ho; ++oy)
    for (int ox = 0; ox < g.Wo; ++ox) {
      T* row = col + (size_t(oy) * g.Wo + ox) * K;
      for (int ky = 0; ky < g.KH; ++ky) {
        int iy = oy * g.stride + ky - g.pt;
        for (int kx = 0; kx < g.KW; ++kx) {
          int ix = ox * g.stride + kx - g.pl;
          T* dst = row + (size_t(ky) * g.KW + kx) * g.Ci;
          if (iy >= 0 && iy < g.H && ix >= 0 && ix < g.W)
            std::memcpy(dst, x + (size_t(iy) * g.W + ix) * g.Ci, size_t(g.Ci) * sizeof(T));
          else
            std::memset(dst, 0, size_t(g.Ci) * sizeof(T));
        }
      }
    }
}

template <typename T>
void col2im_acc(const T* col, const Geom& g, T* dx) {
  int K = g.KH * g.KW * g.Ci;
  for (int oy = 0; oy < g.Ho; ++oy)
    for (int ox = 0; ox < g.Wo; ++ox) {
      const T* row = col + (size_t(oy) * g.Wo + ox) * K;
      for (int ky = 0; ky < g.KH; ++ky) {
        int iy = oy * g.stride + ky - g.pt;
        if (iy < 0 || iy >= g.H) continue;
        for (int kx = 0; kx < g.KW; ++kx) {
          int ix = ox * g.stride + kx - g.pl;
          if (ix < 0 || ix >= g.W) continue;
          const T* src = row + (size_t(ky) * g.KW + kx) * g.Ci;
          T* dst = dx + (size_t(iy) * g.W + ix) * g.Ci;
          for (int c = 0; c < g.Ci; ++c) dst[c] += src[c];
        }
      }
    }
}

}  // namespace convdet

// 2-d convolution, NHWC, weights (KH,KW,Ci,Co). stride 1 preserves the
// spatial extents (zero padding), stride 2 halves them (ceil).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride) {
  convdet::Geom g = convdet::conv_geom(x.shape, w.shape, stride, "conv2d");
  if (bias.defined() && bias.numel() != g.Co) fail("conv2d: bias size != Co");
  int K = g.KH * g.KW * g.Ci;
  int M = g.Ho * g.Wo;
  auto geom = std::make_shared<convdet::Geom>(g);

  std::vector<Tensor<T>> parents = {x, w};
  if (bias.defined()) parents.push_back(bias);
  Tensor<T> out = detail::make_op_output<T>(
      {g.B, g.Ho, g.Wo, g.Co}, parents,
      [geom, K, M](const Tensor<T>& o) {
        const convdet::Geom& g = *geom;
        const Tensor<T>& px = o.node->parents[0];
        const Tensor<T>& pw = o.node->parents[1];
        const T* gr = o.grad->data();
        auto& col = gemm::scratch<T>(2);
        col.resize(size_t(M) * K);
        auto& dcol = gemm::scratch<T>(3);
        for (int b = 0; b < g.B; ++b) {
          const T* gy = gr + size_t(b) * M * g.Co;
          if (pw.requires_grad) {
            convdet::im2col(px.ptr() + size_t(b) * g.H * g.W * g.Ci, g, col.data());
            gemm::gemm_tn(col.data(), gy, pw.grad->data(), M, K, g.Co, true);
          }
          if (px.requires_grad) {
            dcol.resize(size_t(M) * K);
            gemm::gemm_nt(gy, pw.ptr(), dcol.data(), M, g.Co, K, false);
            convdet::col2im_acc(dcol.data(), g, px.grad->data() + size_t(b) * g.H * g.W * g.Ci);
          }
        }
        if (o.node->parents.size() > 2 && o.node->parents[2].requires_grad) {
          T* db = o.node->parents[2].grad->data();
          for (int64_t i = 0; i < int64_t(g.B) * M; ++i)
            for (int c = 0; c < g.Co; ++c) db[c] += gr[i * g.Co + c];
        }
      },
      "conv2d");
  auto& col = gemm::scratch<T>(2);
  col.resize(size_t(M) * K);
  for (int b = 0; b < g.B; ++b) {
    convdet::im2col(x.ptr() + size_t(b) * g.H * g.W * g.Ci, g, col.data());
    gemm::gemm_nn(col.data(), w.ptr(), out.ptr() + size_t(b) * M * g.Co, M, K, g.Co, false);
  }
  if (bias.defined()) {
    T* y = out.ptr();
    const T* bv = bias.ptr();
    for (int64_t i = 0; i < int64_t(g.B) * M; ++i)
      for (int c = 0; c < g.Co; ++c) y[i * g.Co + c] += bv[c];
  }
  detail::check_output_finite(out, "conv2d");
  return out;
}

// ---- pooling / resampling ----

// (B,H,W,C) -> (B,C), mean over the spatial extent
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) fail("global_avg_pool: input must be (B,H,W,C), got " + shape_str(x.shape));
  int B = x.shape[0], HW = x.shape[1] * x.shape[2], C = x.shape[3];
  T scale = T(1) / T(HW);
  Tensor<T> out = detail::make_op_output<T>(
      {B, C}, {x},
      [B, HW, C, scale](const Tensor<T>& o) {
        const Tensor<T>& px = o.node->parents[0];
        if (!px.requires_grad) return;
        const T* g = o.grad->data();
        T* d = px.grad->data();
        for (int b = 0; b < B; ++b)
          for (int64_t i = 0; i < HW; ++i)
            for (int c = 0; c < C; ++c) d[(size_t(b) * HW + i) * C + c] += g[size_t(b) * C + c] * scale;
      },
      "global_avg_pool");
  const T* xv = x.ptr();
  T* y = out.ptr();
  for (int b = 0; b < B; ++b)
    for (int64_t i = 0; i < HW; ++i)
      for (int c = 0; c < C; ++c) y[size_t(b) * C + c] += xv[(size_t(b) * HW + i) * C + c];
  for (int64_t i = 0; i < out.numel(); ++i) y[i] *= scale;
  return out;
}

// nearest-neighbour x2 upsample on (B,H,W,C)
template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  if (x.rank() != 4) fail("upsample_nearest2x: input must be (B,H,W,C), got " + shape_str(x.shape));
  int B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
  Tensor<T> out = detail::make_op_output<T>(
      {B, 2 * H, 2 * W, C}, {x},
      [B, H, W, C](const Tensor<T>& o) {
        const Tensor<T>& px = o.node->parents[0];
        if (!px.requires_grad) return;
        const T* g = o.grad->data();
        T* d = px.grad->data();
        for (int b = 0; b < B; ++b)
          for (int y = 0; y < 2 * H; ++y)
            for (int x2 = 0; x2 < 2 * W; ++x2) {
              const T* src = g + ((size_t(b) * 2 * H + y) * 2 * W + x2) * C;
              T* dst = d + ((size_t(b) * H + y / 2) * W + x2 / 2) * C;
              for (int c = 0; c < C; ++c) dst[c] += src[c];
            }
      },
      "upsample_nearest2x");
  const T* xv = x.ptr();
  T* y = out.ptr();
  for (int b = 0; b < B; ++b)
    for (int yy = 0; yy < 2 * H; ++yy)
      for (int xx = 0; xx < 2 * W; ++xx)
        std::memcpy(y + ((size_t(b) * 2 * H + yy) * 2 * W + xx) * C,
                    xv + ((size_t(b) * H + yy / 2) * W + xx / 2) * C, size_t(C) * sizeof(T));
  return out;
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
  if (factor < 1 || (factor & (factor - 1)) != 0) fail("upsample_nearest: factor must be a power of 2");
  Tensor<T> y = x;
  for (int f = factor; f > 1; f /= 2) y = upsample_nearest2x(y);
  return y;
}

// ---- operator sugar ----

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

}  // namespace ops
}  // namespace casd
