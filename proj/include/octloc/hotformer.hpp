#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "octloc/ops.hpp"
#include "octloc/serialization.hpp"

namespace octloc {

enum class PoolingMode { pyramid_attn, gem, pyramid_gem };
enum class AdapeStats { centroids, points };

struct ModelConfig {
  uint32_t depth = 7;        // leaf octree depth d
  uint32_t levels = 3;       // L attention levels at depths d-1 .. d-L
  uint32_t blocks = 10;      // M stacked relay/window attention blocks
  uint32_t channels = 256;   // C
  uint32_t window = 64;      // k octants per attention window
  uint32_t heads = 8;
  uint32_t stem_blocks = 2;  // windowed attention blocks on the leaf level
  std::vector<uint32_t> pooled_tokens = {74, 36, 18};  // q_l per level
  uint32_t mixer_tokens = 32;    // k_bar
  uint32_t mixer_channels = 8;   // c_bar
  uint32_t descriptor_dim = 256; // must equal k_bar * c_bar
  uint32_t fuser_expansion = 1;  // r
  bool relay_tokens = true;
  CoordMode coord_mode = CoordMode::cylindrical;
  PoolingMode pooling = PoolingMode::pyramid_attn;
  AdapeStats adape_stats = AdapeStats::centroids;

  uint32_t q_total() const;
  void validate() const;  // throws ConfigError
};

// Named parameter store. Weight decay applies to matrix-shaped tensors only;
// biases, norm affines and scalars are listed in no_decay.
struct ModelParams {
  std::map<std::string, Tensor> tensors;
  std::set<std::string> no_decay;

  static ModelParams init(const ModelConfig& cfg, uint64_t seed);
  const Tensor& at(const std::string& name) const;
  std::size_t total_parameters() const;
  void clear_grads();
};

// Weights of one pre-norm attention + FFN block.
struct AttentionBlockParams {
  Tensor ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2g, ln2b, ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

AttentionBlockParams attention_block_params(const ModelParams& params,
                                            const std::string& prefix);

// x + MHSA(LN(x)) followed by x + FFN(LN(x)); FFN expands 4x with GeLU.
Tensor transformer_block(const Tensor& x, const std::vector<uint8_t>& key_mask,
                         std::size_t heads, const AttentionBlockParams& p,
                         AttnCapture* capture = nullptr);

// 10 input channels per leaf octant: normalised log occupancy, centroid
// offset inside the cell in [-0.5, 0.5]^3, and the 6 covariance entries
// rescaled to cell units by (2^d)^2.
Tensor octant_input_features(const OctreeLevel& leaf);

// Per-window position statistics for the relay-token encoding: mean and
// sample covariance (9 values: mu_xyz, var_xyz, cov_xy/xz/yz) over the valid
// octants, either of the octant centroids or of the pooled raw points.
Tensor window_position_stats(const OctreeLevel& level,
                             const WindowPartition& part, AdapeStats mode);

// Shared 2-layer MLP (9 -> C -> C, GeLU between) over the window stats.
Tensor adape_encode(const Tensor& psi, const ModelParams& params);

struct AttnRecord {
  std::string label;
  AttnCapture capture;
};

struct AttnSink {
  std::vector<AttnRecord> records;
};

struct EmbedResult {
  OctreePyramid pyramid;
  WindowPartition leaf_partition;
  std::vector<WindowPartition> partitions;  // levels 1..L
  std::vector<Tensor> features;             // refined (N_l, C) per level 1..L
  Tensor descriptor;                        // (descriptor_dim), unit norm
  std::size_t relay_token_count = 0;        // 0 when relay tokens disabled
};

// Full embedding pipeline: octree build, stem, pyramid features, M relay +
// windowed attention blocks, pooled descriptor. Deterministic and invariant
// to input point order.
EmbedResult forward(const PointCloud& pc, const BoundingRegion& region,
                    const ModelConfig& cfg, const ModelParams& params,
                    AttnSink* attn_sink = nullptr);

// Attention MACs one block should report: sum_l w_l * 2(k+1)^2 * C for the
// windowed attention plus 2 * w_total^2 * C for the relay attention.
uint64_t expected_block_attention_macs(const ModelConfig& cfg,
                                       const std::vector<uint32_t>& windows);

}  // namespace octloc
