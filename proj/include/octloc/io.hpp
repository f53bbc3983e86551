#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "octloc/hotformer.hpp"

namespace octloc {

// CRC-32 (IEEE, reflected 0xEDB88320), as used by zip/png.
uint32_t crc32(const uint8_t* data, std::size_t n);

// Binary cloud format: magic "HOPC", u32 version, u64 count, count x 3 f64,
// all little-endian. Pose and source id travel in a JSON sidecar at
// path + ".meta.json"; a cloud without a sidecar gets an identity pose.
void save_cloud(const std::string& path, const PointCloud& pc);
PointCloud load_cloud(const std::string& path);

// Plain x,y,z per line, comma separated. Interchange only, no pose.
PointCloud load_cloud_csv(const std::string& path);

// One line per octant over every pyramid level:
// depth <d> code <hex> count <n> centroid <x> <y> <z>
void save_octree_dump(const std::string& path, const OctreePyramid& pyr);

// One line per octant of one serialized level:
// window <w> code <hex> centroid <x> <y> <z>
void save_window_dump(const std::string& path, const OctreeLevel& level,
                      const WindowPartition& part);

// Long-format CSV per captured attention tensor: head,row,col,value rows,
// one file per record named <prefix><label>.csv ('/' becomes '_').
void save_attention_dumps(const std::string& prefix,
                          const std::vector<AttnRecord>& records);

struct DescriptorRecord {
  uint64_t id = 0;
  std::string source_id;
  Pose pose;
  std::vector<double> descriptor;
};

// Descriptor set: magic "HODC", u32 version, u32 dim, u64 count, then per
// record a u64 id followed by dim f64. Source ids and poses go to the
// .meta.json sidecar.
void save_descriptors(const std::string& path,
                      const std::vector<DescriptorRecord>& records);
std::vector<DescriptorRecord> load_descriptors(const std::string& path);

// Weight file: magic "HOWT", u32 version, length-prefixed canonical config
// JSON, u32 tensor count, per tensor (name, rank, dims, f64 payload), and a
// trailing CRC-32 of everything before it.
void save_weights(const std::string& path, const std::string& config_json,
                  const ModelParams& params);

struct LoadedWeights {
  std::string config_json;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

LoadedWeights load_weights(const std::string& path);  // IntegrityError on CRC

// Rebuilds a parameter set from loaded tensors; throws DataError naming the
// first missing/extra/mis-shaped record.
ModelParams params_from_weights(const LoadedWeights& w,
                                const ModelConfig& cfg);

}  // namespace octloc
