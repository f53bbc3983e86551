#pragma once

#include <array>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "octloc/geometry.hpp"

namespace octloc {

// 3 bits per level, most significant triplet first; within a triplet the bit
// order is (z, y, x) with x least significant, so codes sort like
// interleaved-bit strings.
constexpr uint32_t kMaxOctreeDepth = 20;

struct OctKey {
  uint64_t code = 0;
  uint8_t depth = 0;
};

uint64_t morton_encode(uint32_t x, uint32_t y, uint32_t z, uint32_t depth);

struct Coords3 {
  uint32_t x = 0;
  uint32_t y = 0;
  uint32_t z = 0;
};

Coords3 morton_decode(uint64_t code, uint32_t depth);

// Per-octant statistics over the unit coordinates of the member points.
// cov is the sample covariance (n-1 denominator, zero when count == 1) with
// entries ordered (xx, yy, zz, xy, xz, yz).
struct OctantStats {
  uint32_t count = 0;
  std::array<double, 3> centroid{0.0, 0.0, 0.0};
  std::array<double, 6> cov{0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
};

struct OctreeLevel {
  uint8_t depth = 0;
  std::vector<uint64_t> keys;  // strictly ascending
  std::vector<OctantStats> stats;
  std::unordered_map<uint64_t, uint32_t> key_to_index;
  std::size_t size() const { return keys.size(); }
};

// levels[0] is the leaf level (depth d); levels[l] has depth d - l. Parent
// links go from levels[l] into levels[l + 1]; a parent key is child >> 3.
struct OctreePyramid {
  CoordMode coord_mode = CoordMode::cartesian;
  std::vector<OctreeLevel> levels;
  std::vector<std::vector<uint32_t>> parent_of;  // [l][fine idx] -> coarse idx
  std::vector<std::vector<std::vector<uint32_t>>> children_of;
  // children_of[l][coarse idx] lists indices into levels[l] (<= 8 entries).
};

// Quantises the normalised cloud to 2^depth bins per axis and builds the leaf
// level plus `levels_below` coarser levels by key-shift merging. Stats at the
// leaf use a two-pass accumulation in (key, coords)-sorted order; coarser
// stats pool children with the between/within decomposition. The result is
// bitwise invariant to input point permutation.
OctreePyramid build_pyramid(const PointCloud& pc, const BoundingRegion& region,
                            uint32_t depth, uint32_t levels_below);

// Consistency check used by tests: ascending keys, parent/child agreement,
// count conservation, centroids inside their cells.
void check_pyramid(const OctreePyramid& pyr);

// Occupied same-depth 26-neighbourhood, deduplicated, self excluded. In
// cylindrical mode the theta axis (unit axis 1) wraps modulo 2^depth; rho and
// z do not.
std::vector<uint32_t> neighbors(const OctreeLevel& level, uint32_t index,
                                CoordMode mode);

// Flat 26-slot neighbour table for the depthwise octree convolutions: entry
// [i * 26 + o] is the level index of octant i's neighbour at offset o, or -1.
// Offsets are enumerated in fixed (dz, dy, dx) lexicographic order with
// (0,0,0) skipped. Wrapped duplicates are kept; each slot has its own conv
// weight.
std::vector<int32_t> neighbor_table(const OctreeLevel& level, CoordMode mode);

// Physical extent of an octant cell. Cartesian: lo/hi are xyz corners.
// Cylindrical: lo/hi are (rho, theta, z) and the cell is an annular sector.
struct CellBounds {
  CoordMode mode = CoordMode::cartesian;
  std::array<double, 3> lo{0.0, 0.0, 0.0};
  std::array<double, 3> hi{0.0, 0.0, 0.0};
};

CellBounds octant_cell_bounds(const OctKey& key, const BoundingRegion& region);

// Arc length of a cylindrical cell at its outer rho: rho_hi * theta span.
double cell_arc_length_outer(const CellBounds& cell);

}  // namespace octloc
