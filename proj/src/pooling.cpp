#include "octloc/pooling.hpp"

#include <cmath>

namespace octloc {

Tensor pyramid_attn_pool(const Tensor& features, const Tensor& queries) {
  if (features.shape().size() != 2 || queries.shape().size() != 2 ||
      features.dim(1) != queries.dim(1))
    throw ShapeError("pyramid_attn_pool: need (N,C) features and (q,C) queries");
  const double c = static_cast<double>(features.dim(1));
  Tensor scores = matmul(queries, transpose_last2(features));
  Tensor attn = softmax_masked(scale(scores, 1.0 / std::sqrt(c)), {});
  return matmul(attn, features);
}

Tensor token_fuser(const Tensor& tokens, const ModelParams& params) {
  Tensor x = tokens;
  for (int f = 0; f < 4; ++f) {
    const std::string prefix = "fuser" + std::to_string(f);
    Tensor h = layernorm(x, params.at(prefix + ".ln.g"),
                         params.at(prefix + ".ln.b"));
    // Left-multiplication mixes across the token axis for every channel.
    Tensor mixed = matmul(params.at(prefix + ".w2"),
                          gelu(matmul(params.at(prefix + ".w1"), h)));
    x = add(x, mixed);
  }
  return x;
}

Tensor mixer_head(const Tensor& fused, const ModelParams& params,
                  const ModelConfig& cfg) {
  Tensor tokens = matmul(params.at("mixer.token.w"), fused);  // (k_bar, C)
  Tensor channels = matmul(tokens, params.at("mixer.chan.w"));
  return l2_normalize(reshape(channels, {cfg.descriptor_dim}));
}

Tensor descriptor_head(const std::vector<Tensor>& level_features,
                       const ModelParams& params, const ModelConfig& cfg) {
  if (level_features.size() != cfg.levels)
    throw ShapeError("descriptor_head: expected one feature map per level");
  switch (cfg.pooling) {
    case PoolingMode::pyramid_attn: {
      std::vector<Tensor> pooled;
      pooled.reserve(cfg.levels);
      for (uint32_t l = 1; l <= cfg.levels; ++l)
        pooled.push_back(pyramid_attn_pool(
            level_features[l - 1], params.at("pool.q" + std::to_string(l))));
      Tensor fused = token_fuser(concat(pooled, 0), params);
      return mixer_head(fused, params, cfg);
    }
    case PoolingMode::gem: {
      // Single-level baseline over the finest attention level.
      Tensor g = gem_pool(level_features[0], params.at("gem.p"));
      Tensor d = linear(reshape(g, {1, cfg.channels}), params.at("gem.proj.w"),
                        params.at("gem.proj.b"));
      return l2_normalize(reshape(d, {cfg.descriptor_dim}));
    }
    case PoolingMode::pyramid_gem: {
      std::vector<Tensor> pooled;
      for (uint32_t l = 1; l <= cfg.levels; ++l)
        pooled.push_back(gem_pool(level_features[l - 1],
                                  params.at("pgem.p" + std::to_string(l))));
      Tensor g = concat(pooled, 0);
      Tensor d = linear(reshape(g, {1, cfg.levels * cfg.channels}),
                        params.at("pgem.proj.w"), params.at("pgem.proj.b"));
      return l2_normalize(reshape(d, {cfg.descriptor_dim}));
    }
  }
  throw ConfigError("descriptor_head: unknown pooling mode");
}

}  // namespace octloc
