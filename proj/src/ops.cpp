#include "pflrm/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace pflrm::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

bool should_record(const Tensor& a) { return grad_participating(a); }

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> sa, sb;  // per-out-axis strides, 0 where broadcast
};

BroadcastPlan plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  BroadcastPlan p;
  const std::size_t nd = std::max(a.size(), b.size());
  p.out.resize(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t ea = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t eb = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " do not broadcast");
    p.out[i] = std::max(ea, eb);
  }
  p.sa.assign(nd, 0);
  p.sb.assign(nd, 0);
  std::size_t stride = 1;
  for (std::size_t i = nd; i-- > 0;) {
    const std::size_t ea = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    if (ea != 1) p.sa[i] = stride;
    stride *= ea;
  }
  stride = 1;
  for (std::size_t i = nd; i-- > 0;) {
    const std::size_t eb = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (eb != 1) p.sb[i] = stride;
    stride *= eb;
  }
  return p;
}

template <typename Fn>
void broadcast_apply(const BroadcastPlan& p, const double* a, const double* b, double* out,
                     Fn&& fn) {
  const std::size_t nd = p.out.size();
  if (nd == 0) {
    out[0] = fn(a[0], b[0]);
    return;
  }
  const std::size_t total = shape_numel(p.out);
  std::vector<std::size_t> counter(nd, 0);
  std::size_t oa = 0, ob = 0;
  const std::size_t inner = p.out[nd - 1];
  const std::size_t ia = p.sa[nd - 1], ib = p.sb[nd - 1];
  for (std::size_t base = 0; base < total; base += inner) {
    const double* pa = a + oa;
    const double* pb = b + ob;
    double* po = out + base;
    for (std::size_t i = 0; i < inner; ++i) po[i] = fn(pa[i * ia], pb[i * ib]);
    // advance the outer counter
    for (std::size_t axis = nd - 1; axis-- > 0;) {
      oa += p.sa[axis];
      ob += p.sb[axis];
      if (++counter[axis] < p.out[axis]) break;
      oa -= p.sa[axis] * p.out[axis];
      ob -= p.sb[axis] * p.out[axis];
      counter[axis] = 0;
    }
  }
}

/// Sums `g` (laid out as out_shape) into a buffer of in_shape, where in_shape
/// broadcasts to out_shape.
std::vector<double> reduce_grad_to(const std::vector<double>& g, const Shape& out_shape,
                                   const Shape& in_shape) {
  std::vector<double> r(shape_numel(in_shape), 0.0);
  const std::size_t nd = out_shape.size();
  std::vector<std::size_t> stride(nd, 0);
  std::size_t s = 1;
  for (std::size_t i = nd; i-- > 0;) {
    const std::size_t e = i < nd - in_shape.size() ? 1 : in_shape[i - (nd - in_shape.size())];
    if (e != 1) stride[i] = s;
    s *= e;
  }
  std::vector<std::size_t> counter(nd, 0);
  std::size_t off = 0;
  const std::size_t total = g.size();
  const std::size_t inner = nd == 0 ? 1 : out_shape[nd - 1];
  const std::size_t is = nd == 0 ? 0 : stride[nd - 1];
  for (std::size_t base = 0; base < total; base += inner) {
    double* pr = r.data() + off;
    const double* pg = g.data() + base;
    for (std::size_t i = 0; i < inner; ++i) pr[i * is] += pg[i];
    for (std::size_t axis = nd - 1; axis-- > 0;) {
      off += stride[axis];
      if (++counter[axis] < out_shape[axis]) break;
      off -= stride[axis] * out_shape[axis];
      counter[axis] = 0;
    }
  }
  return r;
}

template <typename FwdFn, typename GradAFn, typename GradBFn>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdFn fwd, GradAFn ga,
                 GradBFn gb) {
  BroadcastPlan p = plan_broadcast(name, a.shape(), b.shape());
  Tensor out = Tensor::zeros(p.out);
  broadcast_apply(p, a.data(), b.data(), out.data(), fwd);
  const bool rec_a = should_record(a);
  const bool rec_b = should_record(b);
  if (!rec_a && !rec_b) return out;
  Tape* tape = Tape::active();
  const std::int64_t na = rec_a ? tape->node_for(a) : -1;
  const std::int64_t nb = rec_b ? tape->node_for(b) : -1;
  auto ai = a.impl_ptr();
  auto bi = b.impl_ptr();
  tape->record(out, [=](Tape& t, const std::vector<double>& gout) {
    if (na >= 0) {
      std::vector<double> gfull(gout.size());
      broadcast_apply(p, ai->data.data(), bi->data.data(), gfull.data(),
                      [&](double x, double y) { return ga(x, y); });
      for (std::size_t i = 0; i < gfull.size(); ++i) gfull[i] *= gout[i];
      auto r = reduce_grad_to(gfull, p.out, ai->shape);
      t.accumulate(na, r);
    }
    if (nb >= 0) {
      std::vector<double> gfull(gout.size());
      broadcast_apply(p, ai->data.data(), bi->data.data(), gfull.data(),
                      [&](double x, double y) { return gb(x, y); });
      for (std::size_t i = 0; i < gfull.size(); ++i) gfull[i] *= gout[i];
      auto r = reduce_grad_to(gfull, p.out, bi->shape);
      t.accumulate(nb, r);
    }
  });
  return out;
}

template <typename FwdFn, typename GradFn>
Tensor unary_op(const Tensor& a, FwdFn fwd, GradFn grad) {
  Tensor out = Tensor::zeros(a.shape());
  const double* in = a.data();
  double* o = out.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) o[i] = fwd(in[i]);
  if (!should_record(a)) return out;
  Tape* tape = Tape::active();
  const std::int64_t na = tape->node_for(a);
  auto ai = a.impl_ptr();
  auto oi = out.impl_ptr();
  tape->record(out, [=](Tape& t, const std::vector<double>& gout) {
    double* buf = t.grad_buffer(na);
    const double* x = ai->data.data();
    const double* y = oi->data.data();
    for (std::size_t i = 0; i < gout.size(); ++i) buf[i] += gout[i] * grad(x[i], y[i]);
  });
  return out;
}

}  // namespace

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  return plan_broadcast(op, a, b).out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor add(const Tensor& a, double b) {
  return unary_op(
      a, [b](double x) { return x + b; }, [](double, double) { return 1.0; });
}

Tensor mul(const Tensor& a, double b) {
  return unary_op(
      a, [b](double x) { return x * b; }, [b](double, double) { return b; });
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        const double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        return phi + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  // log(1+e^x) with the stable branch for large x.
  return unary_op(
      a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor clamp_min(const Tensor& a, double floor) {
  return unary_op(
      a, [floor](double x) { return x < floor ? floor : x; },
      [floor](double x, double) { return x < floor ? 0.0 : 1.0; });
}

// ---------------------------------------------------------------------------
// matmul

namespace {

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate = false) {
  // Row-parallel: each task computes a disjoint block of C rows.
  parallel_for(
      m,
      [&](std::size_t lo, std::size_t hi) {
        CMap A(a + lo * k, static_cast<Eigen::Index>(hi - lo), static_cast<Eigen::Index>(k));
        CMap B(b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
        MMap C(c + lo * n, static_cast<Eigen::Index>(hi - lo), static_cast<Eigen::Index>(n));
        if (accumulate)
          C.noalias() += A * B;
        else
          C.noalias() = A * B;
      },
      // grain in rows; keep per-task work meaningful
      std::max<std::size_t>(1, 16384 / std::max<std::size_t>(1, k * n)));
}

void gemm_at_b(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  // C[k,n] (+)= A[m,k]^T * B[m,n]
  CMap A(a, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
  CMap B(b, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  MMap C(c, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

void gemm_a_bt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  // C[m,k] (+)= A[m,n] * B[k,n]^T
  CMap A(a, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  CMap B(b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  MMap C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool batched = sa.size() == 3;
  if (!((sa.size() == 2 && sb.size() == 2) || (sa.size() == 3 && sb.size() == 3)))
    throw ShapeError("matmul: expected rank 2x2 or 3x3, got " + shape_str(sa) + " @ " +
                     shape_str(sb));
  const std::size_t B = batched ? sa[0] : 1;
  const std::size_t m = sa[batched ? 1 : 0], k = sa[batched ? 2 : 1];
  const std::size_t kb = sb[batched ? 1 : 0], n = sb[batched ? 2 : 1];
  if (k != kb || (batched && sb[0] != B))
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " @ " + shape_str(sb));

  Shape out_shape = batched ? Shape{B, m, n} : Shape{m, n};
  Tensor out = Tensor::zeros(out_shape);
  if (batched) {
    parallel_for(
        B,
        [&](std::size_t lo, std::size_t hi) {
          for (std::size_t i = lo; i < hi; ++i) {
            CMap A(a.data() + i * m * k, static_cast<Eigen::Index>(m),
                   static_cast<Eigen::Index>(k));
            CMap Bm(b.data() + i * k * n, static_cast<Eigen::Index>(k),
                    static_cast<Eigen::Index>(n));
            MMap C(out.data() + i * m * n, static_cast<Eigen::Index>(m),
                   static_cast<Eigen::Index>(n));
            C.noalias() = A * Bm;
          }
        },
        1);
  } else {
    gemm(a.data(), b.data(), out.data(), m, k, n);
  }

  const bool rec_a = should_record(a);
  const bool rec_b = should_record(b);
  if (!rec_a && !rec_b) return out;
  Tape* tape = Tape::active();
  const std::int64_t na = rec_a ? tape->node_for(a) : -1;
  const std::int64_t nb = rec_b ? tape->node_for(b) : -1;
  auto ai = a.impl_ptr();
  auto bi = b.impl_ptr();
  tape->record(out, [=](Tape& t, const std::vector<double>& gout) {
    for (std::size_t i = 0; i < B; ++i) {
      const double* g = gout.data() + i * m * n;
      if (na >= 0)
        gemm_a_bt(g, bi->data.data() + i * k * n, t.grad_buffer(na) + i * m * k, m, k, n, true);
      if (nb >= 0)
        gemm_at_b(ai->data.data() + i * m * k, g, t.grad_buffer(nb) + i * k * n, m, k, n, true);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
  Tensor out = Tensor::scalar(acc);
  if (!should_record(a)) return out;
  Tape* tape = Tape::active();
  const std::int64_t na = tape->node_for(a);
  const std::size_t n = a.size();
  tape->record(out, [=](Tape& t, const std::vector<double>& gout) {
    double* buf = t.grad_buffer(na);
    for (std::size_t i = 0; i < n; ++i) buf[i] += gout[0];
  });
  return out;
}

Tensor mean(const Tensor& a) { return mul(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw ShapeError("sum: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t reduce = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(s[i]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out = Tensor::zeros(out_shape);
  const double* in = a.data();
  double* o = out.data();
  for (std::size_t u = 0; u < outer; ++u)
    for (std::size_t r = 0; r < reduce; ++r) {
      const double* p = in + (u * reduce + r) * inner;
      double* q = o + u * inner;
      for (std::size_t i = 0; i < inner; ++i) q[i] += p[i];
    }
  if (!should_record(a)) return out;
  Tape* tape = Tape::active();
  const std::int64_t na = tape->node_for(a);
  tape->record(out, [=](Tape& t, const std::vector<double>& gout) {
    double* buf = t.grad_buffer(na);
    for (std::size_t u = 0; u < outer; ++u)
      for (std::size_t r = 0; r < reduce; ++r) {
        double* p = buf + (u * reduce + r) * inner;
        const double* q = gout.data() + u * inner;
        for (std::size_t i = 0; i < inner; ++i) p[i] += q[i];
      }
  });
  return out;
}

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim) {
  return mul(sum(a, axis, keepdim), 1.0 / static_cast<double>(a.shape().at(axis)));
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor out = Tensor::from(shape, std::vector<double>(a.vec()));
  if (!should_record(a)) return out;
  Tape* tape = Tape::active();
  const std::int64_t na = tape->node_for(a);
  tape->record(out, [=](Tape& t, const std::vector<double>& gout) {
    t.accumulate(na, gout);
  });
  return out;
}

namespace {

void permute_copy(const double* in, double* out, const Shape& in_shape,
                  const std::vector<std::size_t>& perm) {
  const std::size_t nd = in_shape.size();
  Shape out_shape(nd);
  for (std::size_t i = 0; i < nd; ++i) out_shape[i] = in_shape[perm[i]];
  std::vector<std::size_t> in_strides(nd, 1);
  for (std::size_t i = nd - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  std::vector<std::size_t> gather(nd);
  for (std::size_t i = 0; i < nd; ++i) gather[i] = in_strides[perm[i]];
  std::vector<std::size_t> counter(nd, 0);
  const std::size_t total = shape_numel(in_shape);
  std::size_t off = 0;
  const std::size_t inner = out_shape[nd - 1];
  const std::size_t is = gather[nd - 1];
  for (std::size_t base = 0; base < total; base += inner) {
    for (std::size_t i = 0; i < inner; ++i) out[base + i] = in[off + i * is];
    for (std::size_t axis = nd - 1; axis-- > 0;) {
      off += gather[axis];
      if (++counter[axis] < out_shape[axis]) break;
      off -= gather[axis] * out_shape[axis];
      counter[axis] = 0;
    }
  }
}

}  // namespace

Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm) {
  const Shape& s = a.shape();
  if (perm.size() != s.size()) throw ShapeError("transpose: perm rank mismatch");
  std::vector<bool> seen(s.size(), false);
  for (auto p : perm) {
    if (p >= s.size() || seen[p]) throw ShapeError("transpose: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[perm[i]];
  Tensor out = Tensor::zeros(out_shape);
  if (s.empty() || a.size() == 0) return out;
  permute_copy(a.data(), out.data(), s, perm);
  if (!should_record(a)) return out;
  Tape* tape = Tape::active();
  const std::int64_t na = tape->node_for(a);
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  tape->record(out, [=, in_shape = out_shape](Tape& t, const std::vector<double>& gout) {
    std::vector<double> g(gout.size());
    permute_copy(gout.data(), g.data(), in_shape, inv);
    t.accumulate(na, g);
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
  std::size_t axis_total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i])
        throw ShapeError("concat: shapes " + shape_str(s0) + " vs " + shape_str(s));
    axis_total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = axis_total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Tensor out = Tensor::zeros(out_shape);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis] * inner;
    for (std::size_t u = 0; u < outer; ++u)
      std::memcpy(out.data() + u * axis_total * inner + offset, p.data() + u * len,
                  len * sizeof(double));
    offset += len;
  }
  bool any = false;
  for (const auto& p : parts) any = any || should_record(p);
  if (!any) return out;
  Tape* tape = Tape::active();
  struct Piece {
    std::int64_t node;
    std::size_t offset, len;
  };
  std::vector<Piece> pieces;
  offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis] * inner;
    const std::int64_t node = should_record(p) ? tape->node_for(p) : -1;
    pieces.push_back(Piece{node, offset, len});
    offset += len;
  }
  tape->record(out, [=](Tape& t, const std::vector<double>& gout) {
    for (const auto& piece : pieces) {
      if (piece.node < 0) continue;
      double* buf = t.grad_buffer(piece.node);
      for (std::size_t u = 0; u < outer; ++u) {
        const double* g = gout.data() + u * axis_total * inner + piece.offset;
        double* dst = buf + u * piece.len;
        for (std::size_t i = 0; i < piece.len; ++i) dst[i] += g[i];
      }
    }
  });
  return out;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw ShapeError("slice: axis out of range");
  if (start + len > s[axis])
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") exceeds extent " + std::to_string(s[axis]));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = len;
  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t u = 0; u < outer; ++u)
    std::memcpy(out.data() + u * len * inner, a.data() + (u * s[axis] + start) * inner,
                len * inner * sizeof(double));
  if (!should_record(a)) return out;
  Tape* tape = Tape::active();
  const std::int64_t na = tape->node_for(a);
  const std::size_t ext = s[axis];
  tape->record(out, [=](Tape& t, const std::vector<double>& gout) {
    double* buf = t.grad_buffer(na);
    for (std::size_t u = 0; u < outer; ++u) {
      const double* g = gout.data() + u * len * inner;
      double* dst = buf + (u * ext + start) * inner;
      for (std::size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
    }
  });
  return out;
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  BroadcastPlan p = plan_broadcast("broadcast_to", a.shape(), shape);
  if (p.out != shape)
    throw ShapeError("broadcast_to: " + shape_str(a.shape()) + " does not broadcast to " +
                     shape_str(shape));
  Tensor zero = Tensor::zeros(shape);
  return add(a, zero);  // broadcasting add; backward reduces automatically
}

// ---------------------------------------------------------------------------
// softmax / layer norm / cumsum

Tensor softmax_last(const Tensor& a) {
  const Shape& s = a.shape();
  if (s.empty()) throw ShapeError("softmax_last: scalar input");
  const std::size_t d = s.back();
  const std::size_t rows = a.size() / d;
  Tensor out = Tensor::zeros(s);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data() + r * d;
    double* y = out.data() + r * d;
    double mx = x[0];
    for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      z += y[i];
    }
    const double inv = 1.0 / z;
    for (std::size_t i = 0; i < d; ++i) y[i] *= inv;
  }
  if (!should_record(a)) return out;
  Tape* tape = Tape::active();
  const std::int64_t na = tape->node_for(a);
  auto oi = out.impl_ptr();
  tape->record(out, [=](Tape& t, const std::vector<double>& gout) {
    double* buf = t.grad_buffer(na);
    const double* y = oi->data.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = gout.data() + r * d;
      const double* yr = y + r * d;
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += g[i] * yr[i];
      double* b = buf + r * d;
      for (std::size_t i = 0; i < d; ++i) b[i] += yr[i] * (g[i] - dot);
    }
  });
  return out;
}

Tensor layer_norm_last(const Tensor& a, double eps) {
  const Shape& s = a.shape();
  if (s.empty()) throw ShapeError("layer_norm_last: scalar input");
  const std::size_t d = s.back();
  const std::size_t rows = a.size() / d;
  Tensor out = Tensor::zeros(s);
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data() + r * d;
    double* y = out.data() + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += x[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<double>(d);
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[r] = istd;
    for (std::size_t i = 0; i < d; ++i) y[i] = (x[i] - mu) * istd;
  }
  if (!should_record(a)) return out;
  Tape* tape = Tape::active();
  const std::int64_t na = tape->node_for(a);
  auto oi = out.impl_ptr();
  tape->record(out, [=, istds = std::move(inv_std)](Tape& t, const std::vector<double>& gout) {
    double* buf = t.grad_buffer(na);
    const double* y = oi->data.data();
    const double dn = static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = gout.data() + r * d;
      const double* yr = y + r * d;
      double gsum = 0.0, gysum = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        gsum += g[i];
        gysum += g[i] * yr[i];
      }
      double* b = buf + r * d;
      const double istd = istds[r];
      for (std::size_t i = 0; i < d; ++i)
        b[i] += istd * (g[i] - gsum / dn - yr[i] * gysum / dn);
    }
  });
  return out;
}

Tensor exclusive_cumsum_last(const Tensor& a) {
  const Shape& s = a.shape();
  if (s.empty()) throw ShapeError("exclusive_cumsum_last: scalar input");
  const std::size_t d = s.back();
  const std::size_t rows = a.size() / d;
  Tensor out = Tensor::zeros(s);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data() + r * d;
    double* y = out.data() + r * d;
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      y[i] = acc;
      acc += x[i];
    }
  }
  if (!should_record(a)) return out;
  Tape* tape = Tape::active();
  const std::int64_t na = tape->node_for(a);
  tape->record(out, [=](Tape& t, const std::vector<double>& gout) {
    double* buf = t.grad_buffer(na);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = gout.data() + r * d;
      double* b = buf + r * d;
      double acc = 0.0;
      for (std::size_t i = d; i-- > 0;) {
        b[i] += acc;  // dx_k = sum_{k' > k} g_{k'}
        acc += g[i];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear grid sampling

Tensor grid_sample_bilinear(const Tensor& plane, const Tensor& coords) {
  const Shape& ps = plane.shape();
  const Shape& cs = coords.shape();
  if (ps.size() != 3) throw ShapeError("grid_sample_bilinear: plane must be [H,W,C], got " +
                                       shape_str(ps));
  if (cs.size() != 2 || cs[1] != 2)
    throw ShapeError("grid_sample_bilinear: coords must be [N,2], got " + shape_str(cs));
  const std::size_t H = ps[0], W = ps[1], C = ps[2], N = cs[0];

  struct Corner {
    std::size_t i00, i01, i10, i11;  // plane row offsets (already * C)
    double w00, w01, w10, w11;
    double dux, dvy;  // d(px)/d(u), d(py)/d(v), zero when clamped
    double fx, fy;
  };
  std::vector<Corner> corners(N);
  Tensor out = Tensor::zeros({N, C});
  const double sx = 0.5 * static_cast<double>(W - 1);
  const double sy = 0.5 * static_cast<double>(H - 1);
  for (std::size_t nidx = 0; nidx < N; ++nidx) {
    const double u = coords.data()[nidx * 2 + 0];
    const double v = coords.data()[nidx * 2 + 1];
    double px = (u + 1.0) * sx;
    double py = (v + 1.0) * sy;
    double dux = sx, dvy = sy;
    if (px <= 0.0) { px = 0.0; dux = 0.0; }
    if (px >= static_cast<double>(W - 1)) { px = static_cast<double>(W - 1); dux = 0.0; }
    if (py <= 0.0) { py = 0.0; dvy = 0.0; }
    if (py >= static_cast<double>(H - 1)) { py = static_cast<double>(H - 1); dvy = 0.0; }
    const std::size_t x0 = static_cast<std::size_t>(std::min(px, static_cast<double>(W - 1)));
    const std::size_t y0 = static_cast<std::size_t>(std::min(py, static_cast<double>(H - 1)));
    const std::size_t x1 = std::min(x0 + 1, W - 1);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double fx = px - static_cast<double>(x0);
    const double fy = py - static_cast<double>(y0);
    Corner& k = corners[nidx];
    k.i00 = (y0 * W + x0) * C;
    k.i01 = (y0 * W + x1) * C;
    k.i10 = (y1 * W + x0) * C;
    k.i11 = (y1 * W + x1) * C;
    k.w00 = (1 - fy) * (1 - fx);
    k.w01 = (1 - fy) * fx;
    k.w10 = fy * (1 - fx);
    k.w11 = fy * fx;
    k.dux = dux;
    k.dvy = dvy;
    k.fx = fx;
    k.fy = fy;
    const double* P = plane.data();
    double* o = out.data() + nidx * C;
    for (std::size_t c = 0; c < C; ++c)
      o[c] = k.w00 * P[k.i00 + c] + k.w01 * P[k.i01 + c] + k.w10 * P[k.i10 + c] +
             k.w11 * P[k.i11 + c];
  }
  const bool rec_p = should_record(plane);
  const bool rec_c = should_record(coords);
  if (!rec_p && !rec_c) return out;
  Tape* tape = Tape::active();
  const std::int64_t np = rec_p ? tape->node_for(plane) : -1;
  const std::int64_t nc = rec_c ? tape->node_for(coords) : -1;
  auto pi = plane.impl_ptr();
  tape->record(out, [=, ks = std::move(corners)](Tape& t, const std::vector<double>& gout) {
    if (np >= 0) {
      double* buf = t.grad_buffer(np);
      for (std::size_t nidx = 0; nidx < N; ++nidx) {
        const Corner& k = ks[nidx];
        const double* g = gout.data() + nidx * C;
        for (std::size_t c = 0; c < C; ++c) {
          buf[k.i00 + c] += k.w00 * g[c];
          buf[k.i01 + c] += k.w01 * g[c];
          buf[k.i10 + c] += k.w10 * g[c];
          buf[k.i11 + c] += k.w11 * g[c];
        }
      }
    }
    if (nc >= 0) {
      double* buf = t.grad_buffer(nc);
      const double* P = pi->data.data();
      for (std::size_t nidx = 0; nidx < N; ++nidx) {
        const Corner& k = ks[nidx];
        const double* g = gout.data() + nidx * C;
        double gu = 0.0, gv = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          const double dpx = (1 - k.fy) * (P[k.i01 + c] - P[k.i00 + c]) +
                             k.fy * (P[k.i11 + c] - P[k.i10 + c]);
          const double dpy = (1 - k.fx) * (P[k.i10 + c] - P[k.i00 + c]) +
                             k.fx * (P[k.i11 + c] - P[k.i01 + c]);
          gu += g[c] * dpx;
          gv += g[c] * dpy;
        }
        buf[nidx * 2 + 0] += gu * k.dux;
        buf[nidx * 2 + 1] += gv * k.dvy;
      }
    }
  });
  return out;
}

}  // namespace pflrm::ad
