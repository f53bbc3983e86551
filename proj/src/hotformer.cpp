#include "octloc/hotformer.hpp"

#include <cmath>

#include "octloc/pooling.hpp"

namespace octloc {

uint32_t ModelConfig::q_total() const {
  uint32_t q = 0;
  for (uint32_t v : pooled_tokens) q += v;
  return q;
}

void ModelConfig::validate() const {
  if (depth == 0 || depth > kMaxOctreeDepth)
    throw ConfigError("model: depth must be in [1, 20]");
  if (levels == 0) throw ConfigError("model: need at least one level");
  if (depth < levels + 1)
    throw ConfigError("model: need depth >= levels + 1");
  if (blocks == 0) throw ConfigError("model: need at least one block");
  if (channels == 0 || heads == 0 || channels % heads != 0)
    throw ConfigError("model: heads must divide channels");
  if (window < 2) throw ConfigError("model: window must be >= 2");
  if (pooled_tokens.size() != levels)
    throw ConfigError("model: pooled_tokens must list one count per level");
  for (uint32_t q : pooled_tokens)
    if (q == 0) throw ConfigError("model: pooled token counts must be > 0");
  if (mixer_tokens == 0 || mixer_channels == 0)
    throw ConfigError("model: mixer dims must be > 0");
  if (descriptor_dim != mixer_tokens * mixer_channels)
    throw ConfigError(
        "model: descriptor_dim must equal mixer_tokens * mixer_channels");
  if (q_total() < mixer_tokens)
    throw ConfigError("model: q_total must be >= mixer_tokens");
  if (fuser_expansion == 0)
    throw ConfigError("model: fuser_expansion must be >= 1");
}

namespace {

constexpr int kFuserBlocks = 4;

struct ParamBuilder {
  ModelParams out;
  uint64_t seed;
  uint64_t counter = 0;

  void matrix(const std::string& name, Shape shape) {
    add(name, std::move(shape), 0.02);
  }
  // Learned query prototypes need unit-scale spread; at 0.02 they would all
  // attend near-uniformly and every pooled token would start as the same
  // window mean.
  void query_matrix(const std::string& name, Shape shape) {
    add(name, std::move(shape), 1.0);
  }
  void zero_matrix(const std::string& name, Shape shape) {
    // Output projections of residual branches start at zero so every block is
    // the identity at initialisation.
    const std::size_t n = shape_numel(shape);
    out.tensors.emplace(name, Tensor::param(std::move(shape),
                                            std::vector<double>(n, 0.0), name));
  }
  void vector(const std::string& name, std::size_t n, double fill) {
    out.tensors.emplace(
        name, Tensor::param({n}, std::vector<double>(n, fill), name));
    out.no_decay.insert(name);
  }
  void add(const std::string& name, Shape shape, double stddev) {
    const std::size_t n = shape_numel(shape);
    std::vector<double> data =
        truncated_normal(n, stddev, derive_seed(seed, ++counter));
    out.tensors.emplace(name,
                        Tensor::param(std::move(shape), std::move(data), name));
  }

  void attention_block(const std::string& prefix, std::size_t c) {
    vector(prefix + ".ln1.g", c, 1.0);
    vector(prefix + ".ln1.b", c, 0.0);
    matrix(prefix + ".attn.wq", {c, c});
    vector(prefix + ".attn.bq", c, 0.0);
    matrix(prefix + ".attn.wk", {c, c});
    vector(prefix + ".attn.bk", c, 0.0);
    matrix(prefix + ".attn.wv", {c, c});
    vector(prefix + ".attn.bv", c, 0.0);
    zero_matrix(prefix + ".attn.wo", {c, c});
    vector(prefix + ".attn.bo", c, 0.0);
    vector(prefix + ".ln2.g", c, 1.0);
    vector(prefix + ".ln2.b", c, 0.0);
    matrix(prefix + ".ffn.w1", {c, 4 * c});
    vector(prefix + ".ffn.b1", 4 * c, 0.0);
    zero_matrix(prefix + ".ffn.w2", {4 * c, c});
    vector(prefix + ".ffn.b2", c, 0.0);
  }
};

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamBuilder b;
  b.seed = derive_seed(seed, 0x706172616dull);
  const std::size_t c = cfg.channels;

  b.matrix("stem.embed.w", {10, c});
  b.vector("stem.embed.b", c, 0.0);
  b.zero_matrix("stem.conv.w", {27, c});
  for (uint32_t s = 0; s < cfg.stem_blocks; ++s) {
    const std::string prefix = "stem.osa" + std::to_string(s);
    b.zero_matrix(prefix + ".cpe.w", {27, c});
    b.attention_block(prefix, c);
  }
  for (uint32_t l = 1; l <= cfg.levels; ++l) {
    const std::string prefix = "ds" + std::to_string(l);
    b.matrix(prefix + ".w", {8, c, c});
    b.vector(prefix + ".b", c, 0.0);
    b.vector(prefix + ".ln.g", c, 1.0);
    b.vector(prefix + ".ln.b", c, 0.0);
  }
  if (cfg.relay_tokens) {
    b.matrix("adape.w1", {9, c});
    b.vector("adape.b1", c, 0.0);
    b.matrix("adape.w2", {c, c});
    b.vector("adape.b2", c, 0.0);
  }
  for (uint32_t m = 0; m < cfg.blocks; ++m) {
    const std::string blk = "blk" + std::to_string(m);
    if (cfg.relay_tokens) b.attention_block(blk + ".rtsa", c);
    for (uint32_t l = 1; l <= cfg.levels; ++l) {
      const std::string prefix = blk + ".hosa" + std::to_string(l);
      b.zero_matrix(prefix + ".cpe.w", {27, c});
      b.attention_block(prefix, c);
    }
  }

  switch (cfg.pooling) {
    case PoolingMode::pyramid_attn: {
      for (uint32_t l = 1; l <= cfg.levels; ++l)
        b.query_matrix("pool.q" + std::to_string(l),
                       {cfg.pooled_tokens[l - 1], c});
      const std::size_t q = cfg.q_total();
      for (int f = 0; f < kFuserBlocks; ++f) {
        const std::string prefix = "fuser" + std::to_string(f);
        b.vector(prefix + ".ln.g", c, 1.0);
        b.vector(prefix + ".ln.b", c, 0.0);
        b.matrix(prefix + ".w1", {q * cfg.fuser_expansion, q});
        b.zero_matrix(prefix + ".w2", {q, q * cfg.fuser_expansion});
      }
      b.matrix("mixer.token.w", {cfg.mixer_tokens, q});
      b.matrix("mixer.chan.w", {c, cfg.mixer_channels});
      break;
    }
    case PoolingMode::gem: {
      b.vector("gem.p", 1, 3.0);
      b.matrix("gem.proj.w", {c, cfg.descriptor_dim});
      b.vector("gem.proj.b", cfg.descriptor_dim, 0.0);
      break;
    }
    case PoolingMode::pyramid_gem: {
      for (uint32_t l = 1; l <= cfg.levels; ++l)
        b.vector("pgem.p" + std::to_string(l), 1, 3.0);
      b.matrix("pgem.proj.w", {cfg.levels * c, cfg.descriptor_dim});
      b.vector("pgem.proj.b", cfg.descriptor_dim, 0.0);
      break;
    }
  }
  return std::move(b.out);
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end())
    throw DataError("model params: missing tensor " + name);
  return it->second;
}

std::size_t ModelParams::total_parameters() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.numel();
  return n;
}

void ModelParams::clear_grads() {
  for (auto& [name, t] : tensors) t.clear_grad();
}

AttentionBlockParams attention_block_params(const ModelParams& params,
                                            const std::string& prefix) {
  AttentionBlockParams p;
  p.ln1g = params.at(prefix + ".ln1.g");
  p.ln1b = params.at(prefix + ".ln1.b");
  p.wq = params.at(prefix + ".attn.wq");
  p.bq = params.at(prefix + ".attn.bq");
  p.wk = params.at(prefix + ".attn.wk");
  p.bk = params.at(prefix + ".attn.bk");
  p.wv = params.at(prefix + ".attn.wv");
  p.bv = params.at(prefix + ".attn.bv");
  p.wo = params.at(prefix + ".attn.wo");
  p.bo = params.at(prefix + ".attn.bo");
  p.ln2g = params.at(prefix + ".ln2.g");
  p.ln2b = params.at(prefix + ".ln2.b");
  p.ffn_w1 = params.at(prefix + ".ffn.w1");
  p.ffn_b1 = params.at(prefix + ".ffn.b1");
  p.ffn_w2 = params.at(prefix + ".ffn.w2");
  p.ffn_b2 = params.at(prefix + ".ffn.b2");
  return p;
}

Tensor transformer_block(const Tensor& x, const std::vector<uint8_t>& key_mask,
                         std::size_t heads, const AttentionBlockParams& p,
                         AttnCapture* capture) {
  Tensor h = layernorm(x, p.ln1g, p.ln1b);
  Tensor a = mhsa(h, key_mask, heads, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo,
                  p.bo, capture);
  Tensor y = add(x, a);
  Tensor h2 = layernorm(y, p.ln2g, p.ln2b);
  Tensor f = linear(gelu(linear(h2, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2);
  return add(y, f);
}

Tensor octant_input_features(const OctreeLevel& leaf) {
  if (leaf.size() == 0) throw DataError("octant_input_features: empty level");
  uint32_t max_count = 0;
  for (const OctantStats& st : leaf.stats)
    max_count = std::max(max_count, st.count);
  const double log_norm = std::log1p(static_cast<double>(max_count));
  const double cells = static_cast<double>(1u << leaf.depth);
  const double cov_scale = cells * cells;

  std::vector<double> v(leaf.size() * 10);
  for (std::size_t i = 0; i < leaf.size(); ++i) {
    const OctantStats& st = leaf.stats[i];
    const Coords3 c = morton_decode(leaf.keys[i], leaf.depth);
    double* row = v.data() + i * 10;
    row[0] = std::log1p(static_cast<double>(st.count)) / log_norm;
    const double lo[3] = {c.x / cells, c.y / cells, c.z / cells};
    for (int a = 0; a < 3; ++a)
      row[1 + a] = (st.centroid[a] - lo[a]) * cells - 0.5;
    for (int a = 0; a < 6; ++a) row[4 + a] = st.cov[a] * cov_scale;
  }
  return Tensor::from({leaf.size(), 10}, std::move(v));
}

Tensor window_position_stats(const OctreeLevel& level,
                             const WindowPartition& part, AdapeStats mode) {
  if (part.count != level.size())
    throw ShapeError("window_position_stats: partition/level mismatch");
  std::vector<double> v(static_cast<std::size_t>(part.windows) * 9, 0.0);
  for (uint32_t w = 0; w < part.windows; ++w) {
    const uint32_t begin = w * part.window_size;
    const uint32_t end = std::min(part.count, begin + part.window_size);
    double* row = v.data() + static_cast<std::size_t>(w) * 9;
    if (mode == AdapeStats::centroids) {
      // Unweighted sample stats over the member octant centroids.
      const double n = static_cast<double>(end - begin);
      for (uint32_t i = begin; i < end; ++i)
        for (int a = 0; a < 3; ++a) row[a] += level.stats[i].centroid[a];
      for (int a = 0; a < 3; ++a) row[a] /= n;
      if (end - begin > 1) {
        double m[6] = {0, 0, 0, 0, 0, 0};
        for (uint32_t i = begin; i < end; ++i) {
          const double dx = level.stats[i].centroid[0] - row[0];
          const double dy = level.stats[i].centroid[1] - row[1];
          const double dz = level.stats[i].centroid[2] - row[2];
          m[0] += dx * dx;
          m[1] += dy * dy;
          m[2] += dz * dz;
          m[3] += dx * dy;
          m[4] += dx * dz;
          m[5] += dy * dz;
        }
        for (int a = 0; a < 6; ++a) row[3 + a] = m[a] / (n - 1.0);
      }
    } else {
      // Pooled raw-point stats: merge the member octants' counts, centroids
      // and covariances exactly (between/within decomposition).
      uint64_t total = 0;
      for (uint32_t i = begin; i < end; ++i) total += level.stats[i].count;
      for (uint32_t i = begin; i < end; ++i)
        for (int a = 0; a < 3; ++a)
          row[a] += level.stats[i].centroid[a] *
                    static_cast<double>(level.stats[i].count);
      for (int a = 0; a < 3; ++a) row[a] /= static_cast<double>(total);
      if (total > 1) {
        double m[6] = {0, 0, 0, 0, 0, 0};
        for (uint32_t i = begin; i < end; ++i) {
          const OctantStats& st = level.stats[i];
          const double nc = static_cast<double>(st.count);
          const double dx = st.centroid[0] - row[0];
          const double dy = st.centroid[1] - row[1];
          const double dz = st.centroid[2] - row[2];
          const double sw = nc - 1.0;
          m[0] += sw * st.cov[0] + nc * dx * dx;
          m[1] += sw * st.cov[1] + nc * dy * dy;
          m[2] += sw * st.cov[2] + nc * dz * dz;
          m[3] += sw * st.cov[3] + nc * dx * dy;
          m[4] += sw * st.cov[4] + nc * dx * dz;
          m[5] += sw * st.cov[5] + nc * dy * dz;
        }
        for (int a = 0; a < 6; ++a)
          row[3 + a] = m[a] / static_cast<double>(total - 1);
      }
    }
  }
  return Tensor::from({part.windows, 9}, std::move(v));
}

Tensor adape_encode(const Tensor& psi, const ModelParams& params) {
  Tensor h = linear(psi, params.at("adape.w1"), params.at("adape.b1"));
  return linear(gelu(h), params.at("adape.w2"), params.at("adape.b2"));
}

namespace {

// (N, C) flat level features -> (w, k, C) windows; pads are zero.
Tensor to_windows(const Tensor& flat, const WindowPartition& part,
                  std::size_t c) {
  Tensor padded =
      pad_rows(flat, static_cast<std::size_t>(part.windows) * part.window_size);
  return reshape(padded, {part.windows, part.window_size, c});
}

Tensor from_windows(const Tensor& windowed, const WindowPartition& part,
                    std::size_t c) {
  Tensor flat = reshape(
      windowed,
      {static_cast<std::size_t>(part.windows) * part.window_size, c});
  return slice(flat, 0, 0, part.count);
}

std::vector<uint8_t> slot_mask(const WindowPartition& part) {
  return part.valid;
}

// Slot mask with the always-valid relay token prepended as slot 0.
std::vector<uint8_t> relay_mask(const WindowPartition& part) {
  std::vector<uint8_t> mask(static_cast<std::size_t>(part.windows) *
                            (1 + part.window_size));
  for (uint32_t w = 0; w < part.windows; ++w) {
    uint8_t* row = mask.data() + static_cast<std::size_t>(w) * (1 + part.window_size);
    row[0] = 1;
    for (uint32_t s = 0; s < part.window_size; ++s)
      row[1 + s] = part.valid[static_cast<std::size_t>(w) * part.window_size + s];
  }
  return mask;
}

// Masked average over valid slots, realised as a batched matmul with
// constant per-window weight rows.
Tensor masked_window_mean(const Tensor& windowed, const WindowPartition& part,
                          std::size_t c) {
  std::vector<double> w(static_cast<std::size_t>(part.windows) *
                            part.window_size,
                        0.0);
  for (uint32_t wi = 0; wi < part.windows; ++wi) {
    const uint32_t begin = wi * part.window_size;
    const uint32_t end = std::min(part.count, begin + part.window_size);
    const double inv = 1.0 / static_cast<double>(end - begin);
    for (uint32_t i = begin; i < end; ++i) w[i] = inv;
  }
  Tensor weights =
      Tensor::from({part.windows, 1, part.window_size}, std::move(w));
  return reshape(matmul(weights, windowed), {part.windows, c});
}

Tensor downsample_level(const Tensor& fine_features, const OctreePyramid& pyr,
                        uint32_t l, const ModelConfig& cfg,
                        const ModelParams& params) {
  const std::size_t c = cfg.channels;
  const OctreeLevel& fine = pyr.levels[l - 1];
  const OctreeLevel& coarse = pyr.levels[l];
  const std::vector<uint32_t>& parent = pyr.parent_of[l - 1];
  const std::string prefix = "ds" + std::to_string(l);
  const Tensor& w = params.at(prefix + ".w");  // (8, C, C)

  // Children are routed through the weight matrix of their octant position
  // (the low 3 bits of the key), then scatter-added onto their parent.
  std::vector<std::vector<uint32_t>> by_pos(8), par_of_pos(8);
  for (uint32_t f = 0; f < fine.size(); ++f) {
    const uint32_t pos = static_cast<uint32_t>(fine.keys[f] & 7);
    by_pos[pos].push_back(f);
    par_of_pos[pos].push_back(parent[f]);
  }

  Tensor acc;
  for (uint32_t pos = 0; pos < 8; ++pos) {
    if (by_pos[pos].empty()) continue;
    Tensor wp = reshape(slice(w, 0, pos, 1), {c, c});
    Tensor rows = gather_rows(fine_features, by_pos[pos]);
    Tensor routed = matmul(rows, wp);
    Tensor spread = scatter_rows(routed, par_of_pos[pos], coarse.size());
    acc = acc.defined() ? add(acc, spread) : spread;
  }
  acc = add_bias(acc, params.at(prefix + ".b"));
  return layernorm(acc, params.at(prefix + ".ln.g"),
                   params.at(prefix + ".ln.b"));
}

}  // namespace

EmbedResult forward(const PointCloud& pc, const BoundingRegion& region,
                    const ModelConfig& cfg, const ModelParams& params,
                    AttnSink* attn_sink) {
  cfg.validate();
  region.validate();
  if (region.mode != cfg.coord_mode)
    throw ConfigError("forward: region mode and model coord_mode disagree");
  const std::size_t c = cfg.channels;

  EmbedResult res;
  res.pyramid = build_pyramid(pc, region, cfg.depth, cfg.levels);
  const OctreePyramid& pyr = res.pyramid;
  const OctreeLevel& leaf = pyr.levels[0];

  // Stem: per-octant features, linear embedding, one depthwise conv, then
  // plain windowed attention blocks over the leaf level.
  res.leaf_partition = serialize(leaf, cfg.window);
  const std::vector<int32_t> leaf_nbr =
      neighbor_table(leaf, pyr.coord_mode);
  Tensor x;
  {
    FlopCounter::Scope scope("stem");
    x = linear(octant_input_features(leaf), params.at("stem.embed.w"),
               params.at("stem.embed.b"));
    x = add(x, octree_dwconv(x, params.at("stem.conv.w"), leaf_nbr));
    for (uint32_t s = 0; s < cfg.stem_blocks; ++s) {
      FlopCounter::Scope inner("osa" + std::to_string(s));
      const std::string prefix = "stem.osa" + std::to_string(s);
      x = add(x, octree_dwconv(x, params.at(prefix + ".cpe.w"), leaf_nbr));
      Tensor xw = to_windows(x, res.leaf_partition, c);
      xw = transformer_block(xw, slot_mask(res.leaf_partition), cfg.heads,
                             attention_block_params(params, prefix));
      x = from_windows(xw, res.leaf_partition, c);
    }
  }

  // Feature pyramid F_1..F_L by position-routed downsampling + LN.
  std::vector<Tensor> feats(cfg.levels + 1);
  feats[0] = x;
  for (uint32_t l = 1; l <= cfg.levels; ++l) {
    FlopCounter::Scope scope("ds" + std::to_string(l));
    feats[l] = downsample_level(feats[l - 1], pyr, l, cfg, params);
  }

  res.partitions.reserve(cfg.levels);
  std::vector<std::vector<int32_t>> nbr(cfg.levels + 1);
  for (uint32_t l = 1; l <= cfg.levels; ++l) {
    res.partitions.push_back(serialize(pyr.levels[l], cfg.window));
    nbr[l] = neighbor_table(pyr.levels[l], pyr.coord_mode);
  }

  // Relay tokens: masked window average plus the position-stats encoding.
  std::vector<Tensor> relay(cfg.levels + 1);
  if (cfg.relay_tokens) {
    FlopCounter::Scope scope("relay_init");
    std::size_t expected = 0;
    for (uint32_t l = 1; l <= cfg.levels; ++l) {
      const WindowPartition& part = res.partitions[l - 1];
      Tensor psi = window_position_stats(pyr.levels[l], part, cfg.adape_stats);
      Tensor mean = masked_window_mean(to_windows(feats[l], part, c), part, c);
      relay[l] = add(mean, adape_encode(psi, params));
      expected += (pyr.levels[l].size() + cfg.window - 1) / cfg.window;
      res.relay_token_count += part.windows;
    }
    if (res.relay_token_count != expected)
      throw DataError("forward: relay token count mismatch");
  }

  for (uint32_t m = 0; m < cfg.blocks; ++m) {
    const std::string blk = "blk" + std::to_string(m);
    FlopCounter::Scope block_scope(blk);
    if (cfg.relay_tokens) {
      // Relay attention: concatenate the per-level relay tokens into one
      // sequence, run a full-attention block, split back.
      FlopCounter::Scope scope("rtsa");
      std::vector<Tensor> parts(relay.begin() + 1, relay.end());
      Tensor rt = concat(parts, 0);
      const std::size_t w_total = rt.dim(0);
      rt = reshape(rt, {1, w_total, c});
      AttnCapture capture;
      rt = transformer_block(rt, {}, cfg.heads,
                             attention_block_params(params, blk + ".rtsa"),
                             attn_sink ? &capture : nullptr);
      if (attn_sink)
        attn_sink->records.push_back({blk + "/rtsa", std::move(capture)});
      rt = reshape(rt, {w_total, c});
      std::size_t off = 0;
      for (uint32_t l = 1; l <= cfg.levels; ++l) {
        const std::size_t n = res.partitions[l - 1].windows;
        relay[l] = slice(rt, 0, off, n);
        off += n;
      }
    }
    for (uint32_t l = 1; l <= cfg.levels; ++l) {
      FlopCounter::Scope scope("hosa" + std::to_string(l));
      const std::string prefix = blk + ".hosa" + std::to_string(l);
      const WindowPartition& part = res.partitions[l - 1];
      // Positional encoding runs on the full level map via octree neighbours,
      // then features are re-windowed for attention.
      feats[l] = add(feats[l],
                     octree_dwconv(feats[l], params.at(prefix + ".cpe.w"),
                                   nbr[l]));
      Tensor fw = to_windows(feats[l], part, c);
      AttnCapture capture;
      AttnCapture* cap = attn_sink ? &capture : nullptr;
      if (cfg.relay_tokens) {
        Tensor rt3 = reshape(relay[l], {part.windows, 1, c});
        Tensor tokens = concat({rt3, fw}, 1);
        tokens = transformer_block(tokens, relay_mask(part), cfg.heads,
                                   attention_block_params(params, prefix), cap);
        relay[l] = reshape(slice(tokens, 1, 0, 1), {part.windows, c});
        fw = slice(tokens, 1, 1, part.window_size);
      } else {
        fw = transformer_block(fw, slot_mask(part), cfg.heads,
                               attention_block_params(params, prefix), cap);
      }
      if (attn_sink)
        attn_sink->records.push_back(
            {blk + "/hosa" + std::to_string(l), std::move(capture)});
      feats[l] = from_windows(fw, part, c);
    }
  }

  res.features.assign(feats.begin() + 1, feats.end());
  {
    FlopCounter::Scope scope("pool");
    res.descriptor = descriptor_head(res.features, params, cfg);
  }
  return res;
}

uint64_t expected_block_attention_macs(const ModelConfig& cfg,
                                       const std::vector<uint32_t>& windows) {
  const uint64_t c = cfg.channels;
  // Each window carries its relay token as an extra attention slot.
  const uint64_t k1 = cfg.relay_tokens ? cfg.window + 1 : cfg.window;
  uint64_t total = 0, w_total = 0;
  for (uint32_t w : windows) {
    total += static_cast<uint64_t>(w) * 2 * k1 * k1 * c;
    w_total += w;
  }
  if (cfg.relay_tokens) total += 2 * w_total * w_total * c;
  return total;
}

}  // namespace octloc
