#include "octloc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace octloc {

namespace {

constexpr double kSqrt2 = 1.41421356237309504880;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

bool any_requires(const std::vector<Tensor>& parents) {
  for (const Tensor& p : parents)
    if (p.defined() && p.requires_grad()) return true;
  return false;
}

// Central node factory: wires parents, propagates requires_grad, installs the
// backprop closure, and (in debug builds) rejects non-finite forward values.
Tensor make_op(Shape shape, std::vector<double> value,
               std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backprop) {
  auto node = std::make_shared<TensorNode>();
  if (value.size() != shape_numel(shape))
    throw ShapeError("internal: op value size mismatch for " +
                     shape_str(shape));
#ifndef NDEBUG
  for (double v : value)
    if (!std::isfinite(v)) throw DataError("op produced a non-finite value");
#endif
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = any_requires(parents);
  for (const Tensor& p : parents) node->parents.push_back(p.node());
  if (node->requires_grad) node->backprop = std::move(backprop);
  return Tensor(std::move(node));
}

void accumulate(TensorNode* parent, std::size_t i, double g) {
  parent->grad[i] += g;
}

bool wants_grad(const TensorNode* n) { return n->requires_grad; }

void same_shape_or_throw(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  same_shape_or_throw(a, b, "add");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = a.values()[i] + b.values()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](TensorNode& n) {
    for (int p = 0; p < 2; ++p) {
      TensorNode* parent = n.parents[p].get();
      if (!wants_grad(parent)) continue;
      parent->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        accumulate(parent, i, n.grad[i]);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  same_shape_or_throw(a, b, "sub");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = a.values()[i] - b.values()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](TensorNode& n) {
    for (int p = 0; p < 2; ++p) {
      TensorNode* parent = n.parents[p].get();
      if (!wants_grad(parent)) continue;
      parent->ensure_grad();
      const double sign = p == 0 ? 1.0 : -1.0;
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        accumulate(parent, i, sign * n.grad[i]);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  same_shape_or_throw(a, b, "mul");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = a.values()[i] * b.values()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](TensorNode& n) {
    TensorNode* pa = n.parents[0].get();
    TensorNode* pb = n.parents[1].get();
    if (wants_grad(pa)) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        accumulate(pa, i, n.grad[i] * pb->value[i]);
    }
    if (wants_grad(pb)) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        accumulate(pb, i, n.grad[i] * pa->value[i]);
    }
  });
}

Tensor scale(const Tensor& x, double s) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.values()[i] * s;
  return make_op(x.shape(), std::move(v), {x}, [s](TensorNode& n) {
    TensorNode* p = n.parents[0].get();
    if (!wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      accumulate(p, i, n.grad[i] * s);
  });
}

Tensor shift(const Tensor& x, double c) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.values()[i] + c;
  return make_op(x.shape(), std::move(v), {x}, [](TensorNode& n) {
    TensorNode* p = n.parents[0].get();
    if (!wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      accumulate(p, i, n.grad[i]);
  });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (b.shape().size() != 1 || x.shape().empty() ||
      x.shape().back() != b.shape()[0])
    throw ShapeError("add_bias: bias must match the last axis of x");
  const std::size_t c = b.numel();
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = x.values()[i] + b.values()[i % c];
  return make_op(x.shape(), std::move(v), {x, b}, [c](TensorNode& n) {
    TensorNode* px = n.parents[0].get();
    TensorNode* pb = n.parents[1].get();
    if (wants_grad(px)) {
      px->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        accumulate(px, i, n.grad[i]);
    }
    if (wants_grad(pb)) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        accumulate(pb, i % c, n.grad[i]);
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
  return make_op(x.shape(), std::move(v), {x}, [](TensorNode& n) {
    TensorNode* p = n.parents[0].get();
    if (!wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (p->value[i] > 0.0) accumulate(p, i, n.grad[i]);
  });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double xi = x.values()[i];
    v[i] = xi * 0.5 * (1.0 + std::erf(xi / kSqrt2));
  }
  return make_op(x.shape(), std::move(v), {x}, [](TensorNode& n) {
    TensorNode* p = n.parents[0].get();
    if (!wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double xi = p->value[i];
      const double phi = 0.5 * (1.0 + std::erf(xi / kSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
      accumulate(p, i, n.grad[i] * (phi + xi * pdf));
    }
  });
}

Tensor sqrt_safe(const Tensor& x) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (x.values()[i] < 0.0) throw DataError("sqrt_safe: negative input");
    v[i] = std::sqrt(x.values()[i]);
  }
  return make_op(x.shape(), std::move(v), {x}, [](TensorNode& n) {
    TensorNode* p = n.parents[0].get();
    if (!wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (n.value[i] > 0.0) accumulate(p, i, n.grad[i] * 0.5 / n.value[i]);
  });
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_op({1}, {s}, {x}, [](TensorNode& n) {
    TensorNode* p = n.parents[0].get();
    if (!wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < p->grad.size(); ++i)
      accumulate(p, i, n.grad[0]);
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: element count mismatch " +
                     shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> v = x.values();
  return make_op(std::move(shape), std::move(v), {x}, [](TensorNode& n) {
    TensorNode* p = n.parents[0].get();
    if (!wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      accumulate(p, i, n.grad[i]);
  });
}

namespace {

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  if (axes.size() != in.size()) throw ShapeError("permute: rank mismatch");
  std::vector<bool> seen(in.size(), false);
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= in.size() || seen[axes[i]])
      throw ShapeError("permute: invalid axis list");
    seen[axes[i]] = true;
    out_shape[i] = in[axes[i]];
  }
  const auto in_strides = strides_of(in);
  // Stride of each output axis inside the flat input buffer.
  std::vector<std::size_t> gather_strides(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i)
    gather_strides[i] = in_strides[axes[i]];

  const std::size_t n = x.numel();
  const auto out_strides = strides_of(out_shape);
  std::vector<std::size_t> src_index(n);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t rem = o, src = 0;
    for (std::size_t a = 0; a < out_shape.size(); ++a) {
      src += (rem / out_strides[a]) * gather_strides[a];
      rem %= out_strides[a];
    }
    src_index[o] = src;
  }
  std::vector<double> v(n);
  for (std::size_t o = 0; o < n; ++o) v[o] = x.values()[src_index[o]];
  return make_op(std::move(out_shape), std::move(v), {x},
                 [src_index](TensorNode& n2) {
                   TensorNode* p = n2.parents[0].get();
                   if (!wants_grad(p)) return;
                   p->ensure_grad();
                   for (std::size_t o = 0; o < n2.grad.size(); ++o)
                     accumulate(p, src_index[o], n2.grad[o]);
                 });
}

Tensor transpose_last2(const Tensor& x) {
  if (x.shape().size() < 2)
    throw ShapeError("transpose_last2: need rank >= 2");
  std::vector<std::size_t> axes(x.shape().size());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = first;
  std::size_t axis_total = 0;
  for (const Tensor& t : parts) {
    const Shape& s = t.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t a = 0; a < s.size(); ++a)
      if (a != axis && s[a] != first[a])
        throw ShapeError("concat: non-axis dims differ");
    axis_total += s[axis];
  }
  out_shape[axis] = axis_total;

  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= first[a];
  for (std::size_t a = axis + 1; a < first.size(); ++a) inner *= first[a];

  std::vector<double> v(shape_numel(out_shape));
  std::vector<std::size_t> part_axis(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p)
    part_axis[p] = parts[p].shape()[axis];

  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t dst_axis = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const std::size_t block = part_axis[p] * inner;
      const double* src = parts[p].values().data() + o * block;
      double* dst = v.data() + (o * axis_total + dst_axis) * inner;
      std::copy(src, src + block, dst);
      dst_axis += part_axis[p];
    }
  }

  std::vector<Tensor> parents = parts;
  return make_op(std::move(out_shape), std::move(v), std::move(parents),
                 [outer, inner, axis_total, part_axis](TensorNode& n) {
                   std::size_t src_axis = 0;
                   for (std::size_t p = 0; p < n.parents.size(); ++p) {
                     TensorNode* parent = n.parents[p].get();
                     const std::size_t block = part_axis[p] * inner;
                     if (wants_grad(parent)) {
                       parent->ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o) {
                         const double* g =
                             n.grad.data() + (o * axis_total + src_axis) * inner;
                         double* dst = parent->grad.data() + o * block;
                         for (std::size_t i = 0; i < block; ++i) dst[i] += g[i];
                       }
                     }
                     src_axis += part_axis[p];
                   }
                 });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t len) {
  const Shape& in = x.shape();
  if (axis >= in.size()) throw ShapeError("slice: axis out of range");
  if (start + len > in[axis]) throw ShapeError("slice: range out of bounds");
  Shape out_shape = in;
  out_shape[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= in[a];
  for (std::size_t a = axis + 1; a < in.size(); ++a) inner *= in[a];
  const std::size_t in_axis = in[axis];

  std::vector<double> v(shape_numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = x.values().data() + (o * in_axis + start) * inner;
    std::copy(src, src + len * inner, v.data() + o * len * inner);
  }
  return make_op(std::move(out_shape), std::move(v), {x},
                 [outer, inner, in_axis, start, len](TensorNode& n) {
                   TensorNode* p = n.parents[0].get();
                   if (!wants_grad(p)) return;
                   p->ensure_grad();
                   for (std::size_t o = 0; o < outer; ++o) {
                     const double* g = n.grad.data() + o * len * inner;
                     double* dst =
                         p->grad.data() + (o * in_axis + start) * inner;
                     for (std::size_t i = 0; i < len * inner; ++i)
                       dst[i] += g[i];
                   }
                 });
}

Tensor gather_rows(const Tensor& x, const std::vector<uint32_t>& idx) {
  if (x.shape().empty()) throw ShapeError("gather_rows: need rank >= 1");
  const std::size_t rows = x.shape()[0];
  const std::size_t rest = x.numel() / std::max<std::size_t>(rows, 1);
  for (uint32_t i : idx)
    if (i >= rows) throw ShapeError("gather_rows: index out of range");
  Shape out_shape = x.shape();
  out_shape[0] = idx.size();
  std::vector<double> v(idx.size() * rest);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(x.values().data() + idx[i] * rest,
              x.values().data() + (idx[i] + 1) * rest, v.data() + i * rest);
  return make_op(std::move(out_shape), std::move(v), {x},
                 [idx, rest](TensorNode& n) {
                   TensorNode* p = n.parents[0].get();
                   if (!wants_grad(p)) return;
                   p->ensure_grad();
                   for (std::size_t i = 0; i < idx.size(); ++i) {
                     const double* g = n.grad.data() + i * rest;
                     double* dst = p->grad.data() + idx[i] * rest;
                     for (std::size_t c = 0; c < rest; ++c) dst[c] += g[c];
                   }
                 });
}

Tensor scatter_rows(const Tensor& x, const std::vector<uint32_t>& idx,
                    std::size_t rows) {
  if (x.shape().empty() || x.shape()[0] != idx.size())
    throw ShapeError("scatter_rows: first dim must equal index count");
  const std::size_t rest =
      x.numel() / std::max<std::size_t>(x.shape()[0], 1);
  for (uint32_t i : idx)
    if (i >= rows) throw ShapeError("scatter_rows: index out of range");
  Shape out_shape = x.shape();
  out_shape[0] = rows;
  std::vector<double> v(rows * rest, 0.0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const double* src = x.values().data() + i * rest;
    double* dst = v.data() + idx[i] * rest;
    for (std::size_t c = 0; c < rest; ++c) dst[c] += src[c];
  }
  return make_op(std::move(out_shape), std::move(v), {x},
                 [idx, rest](TensorNode& n) {
                   TensorNode* p = n.parents[0].get();
                   if (!wants_grad(p)) return;
                   p->ensure_grad();
                   for (std::size_t i = 0; i < idx.size(); ++i) {
                     const double* g = n.grad.data() + idx[i] * rest;
                     double* dst = p->grad.data() + i * rest;
                     for (std::size_t c = 0; c < rest; ++c) dst[c] += g[c];
                   }
                 });
}

Tensor pad_rows(const Tensor& x, std::size_t rows) {
  if (x.shape().empty()) throw ShapeError("pad_rows: need rank >= 1");
  const std::size_t have = x.shape()[0];
  if (rows < have) throw ShapeError("pad_rows: cannot shrink");
  const std::size_t rest = x.numel() / std::max<std::size_t>(have, 1);
  Shape out_shape = x.shape();
  out_shape[0] = rows;
  std::vector<double> v(rows * rest, 0.0);
  std::copy(x.values().begin(), x.values().end(), v.begin());
  return make_op(std::move(out_shape), std::move(v), {x},
                 [have, rest](TensorNode& n) {
                   TensorNode* p = n.parents[0].get();
                   if (!wants_grad(p)) return;
                   p->ensure_grad();
                   for (std::size_t i = 0; i < have * rest; ++i)
                     p->grad[i] += n.grad[i];
                 });
}

namespace {

struct MatmulDims {
  std::size_t batch, m, p, n;
  bool b_shared;  // b is rank 2, broadcast across the batch
};

MatmulDims matmul_dims(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2)
    throw ShapeError("matmul: operands need rank >= 2");
  MatmulDims d{};
  d.m = a[a.size() - 2];
  d.p = a[a.size() - 1];
  if (b[b.size() - 2] != d.p)
    throw ShapeError("matmul: inner dims disagree, " + shape_str(a) + " x " +
                     shape_str(b));
  d.n = b[b.size() - 1];
  d.batch = 1;
  for (std::size_t i = 0; i + 2 < a.size(); ++i) d.batch *= a[i];
  if (b.size() == 2) {
    d.b_shared = true;
  } else {
    if (std::vector<std::size_t>(a.begin(), a.end() - 2) !=
        std::vector<std::size_t>(b.begin(), b.end() - 2))
      throw ShapeError("matmul: batch dims disagree, " + shape_str(a) + " x " +
                       shape_str(b));
    d.b_shared = false;
  }
  return d;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const MatmulDims d = matmul_dims(a.shape(), b.shape());
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(d.n);

  if (FlopCounter* c = FlopCounter::active())
    c->add_macs(static_cast<uint64_t>(d.batch) * d.m * d.p * d.n);

  std::vector<double> v(d.batch * d.m * d.n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t bt = 0; bt < d.batch; ++bt) {
    const double* ab = av + bt * d.m * d.p;
    const double* bb = bv + (d.b_shared ? 0 : bt * d.p * d.n);
    double* cb = v.data() + bt * d.m * d.n;
    // i-k-j order: k ascends for every c[i,j], so the reduction order is the
    // plain left-to-right sum while B streams row-contiguously.
    for (std::size_t i = 0; i < d.m; ++i)
      for (std::size_t k = 0; k < d.p; ++k) {
        const double aik = ab[i * d.p + k];
        const double* brow = bb + k * d.n;
        double* crow = cb + i * d.n;
        for (std::size_t j = 0; j < d.n; ++j) crow[j] += aik * brow[j];
      }
  }

  return make_op(std::move(out_shape), std::move(v), {a, b},
                 [d](TensorNode& node) {
                   TensorNode* pa = node.parents[0].get();
                   TensorNode* pb = node.parents[1].get();
                   const double* av2 = pa->value.data();
                   const double* bv2 = pb->value.data();
                   const double* gv = node.grad.data();
                   if (wants_grad(pa)) {
                     pa->ensure_grad();
                     double* ga = pa->grad.data();
                     for (std::size_t bt = 0; bt < d.batch; ++bt) {
                       const double* gb = gv + bt * d.m * d.n;
                       const double* bb =
                           bv2 + (d.b_shared ? 0 : bt * d.p * d.n);
                       double* gab = ga + bt * d.m * d.p;
                       // dA[i,k] = sum_j dC[i,j] * B[k,j]
                       for (std::size_t i = 0; i < d.m; ++i)
                         for (std::size_t k = 0; k < d.p; ++k) {
                           const double* grow = gb + i * d.n;
                           const double* brow = bb + k * d.n;
                           double s = 0.0;
                           for (std::size_t j = 0; j < d.n; ++j)
                             s += grow[j] * brow[j];
                           gab[i * d.p + k] += s;
                         }
                     }
                   }
                   if (wants_grad(pb)) {
                     pb->ensure_grad();
                     double* gbv = pb->grad.data();
                     // dB[k,j] = sum_batch sum_i A[i,k] * dC[i,j], batches and
                     // i ascending.
                     for (std::size_t bt = 0; bt < d.batch; ++bt) {
                       const double* ab = av2 + bt * d.m * d.p;
                       const double* gb = gv + bt * d.m * d.n;
                       double* gbb = gbv + (d.b_shared ? 0 : bt * d.p * d.n);
                       for (std::size_t i = 0; i < d.m; ++i)
                         for (std::size_t k = 0; k < d.p; ++k) {
                           const double aik = ab[i * d.p + k];
                           const double* grow = gb + i * d.n;
                           double* brow = gbb + k * d.n;
                           for (std::size_t j = 0; j < d.n; ++j)
                             brow[j] += aik * grow[j];
                         }
                     }
                   }
                 });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return b.defined() ? add_bias(y, b) : y;
}

Tensor softmax_masked(const Tensor& x, const std::vector<uint8_t>& mask) {
  if (x.shape().empty()) throw ShapeError("softmax_masked: need rank >= 1");
  if (!mask.empty() && mask.size() != x.numel())
    throw ShapeError("softmax_masked: mask size mismatch");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<double> v(x.numel(), 0.0);
  const double* xv = x.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv + r * n;
    const uint8_t* m = mask.empty() ? nullptr : mask.data() + r * n;
    double mx = 0.0;
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (m && !m[i]) continue;
      if (!any || row[i] > mx) mx = row[i];
      any = true;
    }
    if (!any) throw DataError("softmax_masked: row has no valid entry");
    double sum = 0.0;
    double* out = v.data() + r * n;
    for (std::size_t i = 0; i < n; ++i) {
      if (m && !m[i]) continue;
      out[i] = std::exp(row[i] - mx);
      sum += out[i];
    }
    for (std::size_t i = 0; i < n; ++i) out[i] /= sum;
    if (m)
      for (std::size_t i = 0; i < n; ++i)
        if (!m[i]) out[i] = 0.0;
  }
  return make_op(x.shape(), std::move(v), {x}, [mask, n, rows](TensorNode& nd) {
    TensorNode* p = nd.parents[0].get();
    if (!wants_grad(p)) return;
    p->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = nd.value.data() + r * n;
      const double* g = nd.grad.data() + r * n;
      const uint8_t* m = mask.empty() ? nullptr : mask.data() + r * n;
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (m && !m[i]) continue;
        dot += g[i] * y[i];
      }
      double* dst = p->grad.data() + r * n;
      for (std::size_t i = 0; i < n; ++i) {
        if (m && !m[i]) continue;
        dst[i] += y[i] * (g[i] - dot);
      }
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps) {
  if (x.shape().empty()) throw ShapeError("layernorm: need rank >= 1");
  const std::size_t c = x.shape().back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw ShapeError("layernorm: affine params must have shape (C)");
  const std::size_t rows = x.numel() / c;
  std::vector<double> v(x.numel());
  // x_hat and 1/sqrt(var + eps) are saved for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv = std::make_shared<std::vector<double>>(rows);
  const double* xv = x.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv + r * c;
    double mean = 0.0;
    for (std::size_t i = 0; i < c; ++i) mean += row[i];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i)
      var += (row[i] - mean) * (row[i] - mean);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv)[r] = is;
    for (std::size_t i = 0; i < c; ++i) {
      const double xh = (row[i] - mean) * is;
      (*xhat)[r * c + i] = xh;
      v[r * c + i] = xh * gamma.values()[i] + beta.values()[i];
    }
  }
  return make_op(
      x.shape(), std::move(v), {x, gamma, beta},
      [xhat, inv, rows, c](TensorNode& nd) {
        TensorNode* px = nd.parents[0].get();
        TensorNode* pg = nd.parents[1].get();
        TensorNode* pb = nd.parents[2].get();
        const double* gv = nd.grad.data();
        if (wants_grad(pg)) {
          pg->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < c; ++i)
              pg->grad[i] += gv[r * c + i] * (*xhat)[r * c + i];
        }
        if (wants_grad(pb)) {
          pb->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < c; ++i) pb->grad[i] += gv[r * c + i];
        }
        if (wants_grad(px)) {
          px->ensure_grad();
          const double* gamma_v = pg->value.data();
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < c; ++i) {
              const double dxh = gv[r * c + i] * gamma_v[i];
              m1 += dxh;
              m2 += dxh * (*xhat)[r * c + i];
            }
            m1 /= static_cast<double>(c);
            m2 /= static_cast<double>(c);
            for (std::size_t i = 0; i < c; ++i) {
              const double dxh = gv[r * c + i] * gamma_v[i];
              px->grad[r * c + i] +=
                  (*inv)[r] * (dxh - m1 - (*xhat)[r * c + i] * m2);
            }
          }
        }
      });
}

Tensor l2_normalize(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v * v;
  const double norm = std::sqrt(s);
  if (norm == 0.0) throw DataError("l2_normalize: zero vector");
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.values()[i] / norm;
  return make_op(x.shape(), std::move(v), {x}, [norm](TensorNode& n) {
    TensorNode* p = n.parents[0].get();
    if (!wants_grad(p)) return;
    p->ensure_grad();
    double dot = 0.0;
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      dot += n.grad[i] * n.value[i];
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      accumulate(p, i, (n.grad[i] - n.value[i] * dot) / norm);
  });
}

Tensor octree_dwconv(const Tensor& x, const Tensor& weights,
                     const std::vector<int32_t>& table) {
  if (x.shape().size() != 2) throw ShapeError("octree_dwconv: x must be (N,C)");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (weights.shape() != Shape{27, c})
    throw ShapeError("octree_dwconv: weights must be (27,C)");
  if (table.size() != n * 26)
    throw ShapeError("octree_dwconv: neighbour table size mismatch");

  std::vector<double> v(n * c, 0.0);
  const double* xv = x.values().data();
  const double* wv = weights.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* out = v.data() + i * c;
    const double* self = xv + i * c;
    for (std::size_t ch = 0; ch < c; ++ch) out[ch] = wv[ch] * self[ch];
    for (std::size_t o = 0; o < 26; ++o) {
      const int32_t nb = table[i * 26 + o];
      if (nb < 0) continue;
      const double* w = wv + (o + 1) * c;
      const double* src = xv + static_cast<std::size_t>(nb) * c;
      for (std::size_t ch = 0; ch < c; ++ch) out[ch] += w[ch] * src[ch];
    }
  }
  return make_op(
      {n, c}, std::move(v), {x, weights}, [table, n, c](TensorNode& nd) {
        TensorNode* px = nd.parents[0].get();
        TensorNode* pw = nd.parents[1].get();
        const double* xv2 = px->value.data();
        const double* wv2 = pw->value.data();
        const double* gv = nd.grad.data();
        const bool gx = wants_grad(px);
        const bool gw = wants_grad(pw);
        if (gx) px->ensure_grad();
        if (gw) pw->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const double* g = gv + i * c;
          if (gx)
            for (std::size_t ch = 0; ch < c; ++ch)
              px->grad[i * c + ch] += wv2[ch] * g[ch];
          if (gw)
            for (std::size_t ch = 0; ch < c; ++ch)
              pw->grad[ch] += xv2[i * c + ch] * g[ch];
          for (std::size_t o = 0; o < 26; ++o) {
            const int32_t nb = table[i * 26 + o];
            if (nb < 0) continue;
            const std::size_t j = static_cast<std::size_t>(nb);
            if (gx)
              for (std::size_t ch = 0; ch < c; ++ch)
                px->grad[j * c + ch] += wv2[(o + 1) * c + ch] * g[ch];
            if (gw)
              for (std::size_t ch = 0; ch < c; ++ch)
                pw->grad[(o + 1) * c + ch] += xv2[j * c + ch] * g[ch];
          }
        }
      });
}

Tensor gem_pool(const Tensor& x, const Tensor& p, double clamp_eps) {
  if (x.shape().size() != 2) throw ShapeError("gem_pool: x must be (N,C)");
  if (p.numel() != 1) throw ShapeError("gem_pool: p must be scalar");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (n == 0) throw DataError("gem_pool: empty input");
  const double pv = p.values()[0];
  if (!(pv > 0.0)) throw DataError("gem_pool: p must be positive");

  // y = clamped input, m_c = mean_i y^p, out_c = m_c^(1/p)
  auto clamped = std::make_shared<std::vector<double>>(n * c);
  for (std::size_t i = 0; i < n * c; ++i)
    (*clamped)[i] = std::max(x.values()[i], clamp_eps);
  std::vector<double> mean(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      mean[ch] += std::pow((*clamped)[i * c + ch], pv);
  for (std::size_t ch = 0; ch < c; ++ch) mean[ch] /= static_cast<double>(n);
  std::vector<double> v(c);
  for (std::size_t ch = 0; ch < c; ++ch) v[ch] = std::pow(mean[ch], 1.0 / pv);

  auto mean_keep = std::make_shared<std::vector<double>>(std::move(mean));
  return make_op(
      {c}, std::move(v), {x, p},
      [clamped, mean_keep, n, c, pv, clamp_eps](TensorNode& nd) {
        TensorNode* px = nd.parents[0].get();
        TensorNode* pp = nd.parents[1].get();
        const double* g = nd.grad.data();
        const double* out = nd.value.data();
        if (wants_grad(px)) {
          px->ensure_grad();
          // d out_c / d y_ic = (1/n) * m_c^(1/p - 1) * y_ic^(p-1); zero where
          // the clamp is active.
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
              if (px->value[i * c + ch] < clamp_eps) continue;
              const double y = (*clamped)[i * c + ch];
              const double d = std::pow((*mean_keep)[ch], 1.0 / pv - 1.0) *
                               std::pow(y, pv - 1.0) / static_cast<double>(n);
              px->grad[i * c + ch] += g[ch] * d;
            }
        }
        if (wants_grad(pp)) {
          pp->ensure_grad();
          // d out_c / d p = out_c * (A_c / p - ln(m_c) / p^2),
          // A_c = sum y^p ln y / sum y^p.
          for (std::size_t ch = 0; ch < c; ++ch) {
            double num = 0.0, den = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
              const double y = (*clamped)[i * c + ch];
              const double yp = std::pow(y, pv);
              num += yp * std::log(y);
              den += yp;
            }
            const double a = num / den;
            const double d =
                out[ch] * (a / pv - std::log((*mean_keep)[ch]) / (pv * pv));
            pp->grad[0] += g[ch] * d;
          }
        }
      });
}

Tensor mhsa(const Tensor& x, const std::vector<uint8_t>& key_mask,
            std::size_t heads, const Tensor& wq, const Tensor& bq,
            const Tensor& wk, const Tensor& bk, const Tensor& wv,
            const Tensor& bv, const Tensor& wo, const Tensor& bo,
            AttnCapture* capture) {
  if (x.shape().size() != 3) throw ShapeError("mhsa: x must be (B,T,C)");
  const std::size_t b = x.dim(0), t = x.dim(1), c = x.dim(2);
  if (heads == 0 || c % heads != 0)
    throw ShapeError("mhsa: heads must divide the channel count");
  if (!key_mask.empty() && key_mask.size() != b * t)
    throw ShapeError("mhsa: key mask must be (B,T)");
  const std::size_t hd = c / heads;

  auto split_heads = [&](const Tensor& y) {
    return permute(reshape(y, {b, t, heads, hd}), {0, 2, 1, 3});
  };
  Tensor q = split_heads(linear(x, wq, bq));
  Tensor k = split_heads(linear(x, wk, bk));
  Tensor v = split_heads(linear(x, wv, bv));

  Tensor scores;
  {
    FlopCounter::Scope scope("attn");
    scores = matmul(q, transpose_last2(k));  // (B,H,T,T)
  }
  scores = scale(scores, 1.0 / std::sqrt(static_cast<double>(hd)));

  std::vector<uint8_t> mask;
  if (!key_mask.empty()) {
    // Broadcast the key validity over heads and query rows: masked keys get
    // zero attention from every query.
    mask.resize(b * heads * t * t);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t qi = 0; qi < t; ++qi)
          for (std::size_t ki = 0; ki < t; ++ki)
            mask[((bi * heads + h) * t + qi) * t + ki] = key_mask[bi * t + ki];
  }
  Tensor attn = softmax_masked(scores, mask);
  if (capture) {
    capture->batch = b;
    capture->heads = heads;
    capture->tokens = t;
    capture->attn = attn.values();
  }

  Tensor ctx;
  {
    FlopCounter::Scope scope("attn");
    ctx = matmul(attn, v);  // (B,H,T,hd)
  }
  Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {b, t, c});
  return linear(merged, wo, bo);
}

}  // namespace octloc
