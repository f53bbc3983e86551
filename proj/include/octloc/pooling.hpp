#pragma once

#include "octloc/hotformer.hpp"

namespace octloc {

// Attentional pooling of one pyramid level: softmax(Q F^T / sqrt(C)) F with
// learned queries Q of shape (q_l, C).
Tensor pyramid_attn_pool(const Tensor& features, const Tensor& queries);

// Four residual token-mixing blocks over the concatenated pooled tokens:
// X = X + W2 GeLU(W1 LN(X)), where W1/W2 mix across the token axis.
Tensor token_fuser(const Tensor& tokens, const ModelParams& params);

// Token-mixing map q_total -> k_bar, channel-mixing map C -> c_bar, flatten,
// L2 normalise.
Tensor mixer_head(const Tensor& fused, const ModelParams& params,
                  const ModelConfig& cfg);

// Dispatches on cfg.pooling; every mode emits a unit-norm descriptor of
// cfg.descriptor_dim values.
Tensor descriptor_head(const std::vector<Tensor>& level_features,
                       const ModelParams& params, const ModelConfig& cfg);

}  // namespace octloc
