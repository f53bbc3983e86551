#pragma once

#include <cstdint>
#include <vector>

#include "octloc/tensor.hpp"

namespace octloc {

// Elementwise and structural primitives. All ops build graph nodes; gradients
// flow through backward() unless a parent is a plain constant.

Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor sub(const Tensor& a, const Tensor& b);        // same shape
Tensor mul(const Tensor& a, const Tensor& b);        // hadamard, same shape
Tensor scale(const Tensor& x, double s);
Tensor shift(const Tensor& x, double c);
Tensor add_bias(const Tensor& x, const Tensor& b);   // b spans the last axis
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);                        // exact x * Phi(x)
Tensor sqrt_safe(const Tensor& x);                   // subgradient 0 at x == 0
Tensor sum_all(const Tensor& x);                     // -> scalar
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor transpose_last2(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t len);
Tensor gather_rows(const Tensor& x, const std::vector<uint32_t>& idx);
// out[idx[i]] += x[i] into `rows` rows of zeros.
Tensor scatter_rows(const Tensor& x, const std::vector<uint32_t>& idx,
                    std::size_t rows);
Tensor pad_rows(const Tensor& x, std::size_t rows);  // zero tail rows

// Batched matmul: a is (..., m, p), b is (..., p, n) with identical leading
// dims, or b is (p, n) shared across a's batch. Records batch*m*p*n MACs into
// the active FlopCounter.
Tensor matmul(const Tensor& a, const Tensor& b);
// matmul(x, w) plus bias; pass an undefined Tensor to skip the bias.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Softmax over the last axis. mask (same element count as x, nonzero = valid)
// may be empty for all-valid; masked entries are exactly 0 in the output and
// receive zero gradient. A row with no valid entry is a DataError.
Tensor softmax_masked(const Tensor& x, const std::vector<uint8_t>& mask);

// Standard layer norm over the last axis with learned affine.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps = 1e-5);

Tensor l2_normalize(const Tensor& x);  // whole tensor as one vector

// Depthwise octree convolution: 27 per-channel taps (centre first, then the
// 26 offsets in table order); missing neighbours are skipped.
// x is (N, C), weights (27, C), table as produced by neighbor_table().
Tensor octree_dwconv(const Tensor& x, const Tensor& weights,
                     const std::vector<int32_t>& table);

// Generalised-mean pooling over rows: out[c] = (mean_i max(x[i,c], eps)^p)^(1/p)
// with learnable scalar p.
Tensor gem_pool(const Tensor& x, const Tensor& p, double clamp_eps = 1e-6);

// Copy of an attention tensor taken during the forward pass, for dumps and
// diagnostics.
struct AttnCapture {
  std::size_t batch = 0, heads = 0, tokens = 0;
  std::vector<double> attn;  // (batch, heads, tokens, tokens)
};

// Pre-softmax scaling 1/sqrt(C/heads); key_mask is per (batch, token) with
// nonzero = valid, or empty for all-valid. The two attention matmuls (scores
// and values) are recorded under an "attn" flop scope.
Tensor mhsa(const Tensor& x, const std::vector<uint8_t>& key_mask,
            std::size_t heads, const Tensor& wq, const Tensor& bq,
            const Tensor& wk, const Tensor& bk, const Tensor& wv,
            const Tensor& bv, const Tensor& wo, const Tensor& bo,
            AttnCapture* capture = nullptr);

}  // namespace octloc
