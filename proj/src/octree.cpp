#include "octloc/octree.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

namespace octloc {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Spreads the low 21 bits of a out to every third bit.
uint64_t split3(uint32_t a) {
  uint64_t x = a & 0x1fffff;
  x = (x | x << 32) & 0x1f00000000ffffull;
  x = (x | x << 16) & 0x1f0000ff0000ffull;
  x = (x | x << 8) & 0x100f00f00f00f00full;
  x = (x | x << 4) & 0x10c30c30c30c30c3ull;
  x = (x | x << 2) & 0x1249249249249249ull;
  return x;
}

uint32_t compact3(uint64_t x) {
  x &= 0x1249249249249249ull;
  x = (x ^ (x >> 2)) & 0x10c30c30c30c30c3ull;
  x = (x ^ (x >> 4)) & 0x100f00f00f00f00full;
  x = (x ^ (x >> 8)) & 0x1f0000ff0000ffull;
  x = (x ^ (x >> 16)) & 0x1f00000000ffffull;
  x = (x ^ (x >> 32)) & 0x1fffff;
  return static_cast<uint32_t>(x);
}

void check_depth(uint32_t depth) {
  if (depth == 0 || depth > kMaxOctreeDepth)
    throw ConfigError("octree depth must be in [1, 20]");
}

}  // namespace

uint64_t morton_encode(uint32_t x, uint32_t y, uint32_t z, uint32_t depth) {
  check_depth(depth);
  const uint32_t n = 1u << depth;
  if (x >= n || y >= n || z >= n)
    throw DataError("morton_encode: coordinate out of range for depth");
  return split3(x) | (split3(y) << 1) | (split3(z) << 2);
}

Coords3 morton_decode(uint64_t code, uint32_t depth) {
  check_depth(depth);
  if (code >= (1ull << (3 * depth)))
    throw DataError("morton_decode: code out of range for depth");
  return {compact3(code), compact3(code >> 1), compact3(code >> 2)};
}

OctreePyramid build_pyramid(const PointCloud& pc, const BoundingRegion& region,
                            uint32_t depth, uint32_t levels_below) {
  check_depth(depth);
  if (depth < levels_below + 1)
    throw ConfigError("build_pyramid: need depth >= levels_below + 1");

  const UnitCloud unit = normalize_to_unit(pc, region);
  const double scale = static_cast<double>(1u << depth);

  struct Keyed {
    uint64_t key;
    std::array<double, 3> u;
  };
  std::vector<Keyed> pts;
  pts.reserve(unit.coords.size());
  for (const auto& u : unit.coords) {
    const uint32_t ix = static_cast<uint32_t>(u[0] * scale);
    const uint32_t iy = static_cast<uint32_t>(u[1] * scale);
    const uint32_t iz = static_cast<uint32_t>(u[2] * scale);
    pts.push_back({morton_encode(ix, iy, iz, depth), u});
  }
  // Sorting by (key, coords) pins the accumulation order regardless of the
  // input permutation, which keeps the stats bitwise reproducible.
  std::sort(pts.begin(), pts.end(), [](const Keyed& a, const Keyed& b) {
    if (a.key != b.key) return a.key < b.key;
    return a.u < b.u;
  });

  OctreePyramid pyr;
  pyr.coord_mode = region.mode;
  pyr.levels.resize(levels_below + 1);

  // Leaf level with two-pass stats per key run.
  OctreeLevel& leaf = pyr.levels[0];
  leaf.depth = static_cast<uint8_t>(depth);
  std::size_t i = 0;
  while (i < pts.size()) {
    std::size_t j = i;
    while (j < pts.size() && pts[j].key == pts[i].key) ++j;
    const std::size_t n = j - i;
    OctantStats st;
    st.count = static_cast<uint32_t>(n);
    for (std::size_t p = i; p < j; ++p)
      for (int a = 0; a < 3; ++a) st.centroid[a] += pts[p].u[a];
    for (int a = 0; a < 3; ++a) st.centroid[a] /= static_cast<double>(n);
    if (n > 1) {
      double m[6] = {0, 0, 0, 0, 0, 0};
      for (std::size_t p = i; p < j; ++p) {
        const double dx = pts[p].u[0] - st.centroid[0];
        const double dy = pts[p].u[1] - st.centroid[1];
        const double dz = pts[p].u[2] - st.centroid[2];
        m[0] += dx * dx;
        m[1] += dy * dy;
        m[2] += dz * dz;
        m[3] += dx * dy;
        m[4] += dx * dz;
        m[5] += dy * dz;
      }
      for (int a = 0; a < 6; ++a) st.cov[a] = m[a] / static_cast<double>(n - 1);
    }
    leaf.keys.push_back(pts[i].key);
    leaf.stats.push_back(st);
    i = j;
  }

  // Coarser levels: shift keys, merge runs of children. Pooling the child
  // stats with the between/within decomposition reproduces the raw-point
  // statistics without touching the points again.
  for (uint32_t l = 1; l <= levels_below; ++l) {
    const OctreeLevel& fine = pyr.levels[l - 1];
    OctreeLevel& coarse = pyr.levels[l];
    coarse.depth = static_cast<uint8_t>(depth - l);
    std::vector<uint32_t> parent(fine.size());
    std::vector<std::vector<uint32_t>> kids;
    std::size_t c = 0;
    while (c < fine.size()) {
      const uint64_t pkey = fine.keys[c] >> 3;
      std::size_t e = c;
      while (e < fine.size() && (fine.keys[e] >> 3) == pkey) ++e;

      OctantStats st;
      uint64_t total = 0;
      for (std::size_t k = c; k < e; ++k) total += fine.stats[k].count;
      st.count = static_cast<uint32_t>(total);
      for (std::size_t k = c; k < e; ++k)
        for (int a = 0; a < 3; ++a)
          st.centroid[a] +=
              fine.stats[k].centroid[a] * static_cast<double>(fine.stats[k].count);
      for (int a = 0; a < 3; ++a) st.centroid[a] /= static_cast<double>(total);
      if (total > 1) {
        double m[6] = {0, 0, 0, 0, 0, 0};
        for (std::size_t k = c; k < e; ++k) {
          const OctantStats& ch = fine.stats[k];
          const double nc = static_cast<double>(ch.count);
          const double dx = ch.centroid[0] - st.centroid[0];
          const double dy = ch.centroid[1] - st.centroid[1];
          const double dz = ch.centroid[2] - st.centroid[2];
          const double w = nc - 1.0;  // scatter = (n-1) * sample cov
          m[0] += w * ch.cov[0] + nc * dx * dx;
          m[1] += w * ch.cov[1] + nc * dy * dy;
          m[2] += w * ch.cov[2] + nc * dz * dz;
          m[3] += w * ch.cov[3] + nc * dx * dy;
          m[4] += w * ch.cov[4] + nc * dx * dz;
          m[5] += w * ch.cov[5] + nc * dy * dz;
        }
        for (int a = 0; a < 6; ++a)
          st.cov[a] = m[a] / static_cast<double>(total - 1);
      }

      const uint32_t pidx = static_cast<uint32_t>(coarse.keys.size());
      std::vector<uint32_t> members;
      for (std::size_t k = c; k < e; ++k) {
        parent[k] = pidx;
        members.push_back(static_cast<uint32_t>(k));
      }
      kids.push_back(std::move(members));
      coarse.keys.push_back(pkey);
      coarse.stats.push_back(st);
      c = e;
    }
    pyr.parent_of.push_back(std::move(parent));
    pyr.children_of.push_back(std::move(kids));
  }

  for (OctreeLevel& level : pyr.levels) {
    level.key_to_index.reserve(level.size() * 2);
    for (uint32_t k = 0; k < level.size(); ++k)
      level.key_to_index.emplace(level.keys[k], k);
  }
  return pyr;
}

void check_pyramid(const OctreePyramid& pyr) {
  for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
    const OctreeLevel& level = pyr.levels[l];
    if (level.keys.size() != level.stats.size())
      throw DataError("pyramid: keys/stats size mismatch");
    for (std::size_t k = 1; k < level.keys.size(); ++k)
      if (level.keys[k] <= level.keys[k - 1])
        throw DataError("pyramid: keys not strictly ascending");
    const double cells = static_cast<double>(1u << level.depth);
    uint64_t count_sum = 0;
    for (std::size_t k = 0; k < level.size(); ++k) {
      const OctantStats& st = level.stats[k];
      if (st.count == 0) throw DataError("pyramid: empty octant");
      count_sum += st.count;
      const Coords3 c = morton_decode(level.keys[k], level.depth);
      const double lo[3] = {c.x / cells, c.y / cells, c.z / cells};
      for (int a = 0; a < 3; ++a) {
        if (st.centroid[a] < lo[a] - 1e-12 ||
            st.centroid[a] > lo[a] + 1.0 / cells + 1e-12)
          throw DataError("pyramid: centroid outside its cell");
      }
    }
    if (l > 0) {
      uint64_t prev = 0;
      for (const OctantStats& st : pyr.levels[l - 1].stats) prev += st.count;
      if (prev != count_sum)
        throw DataError("pyramid: point count not conserved across levels");
      for (std::size_t f = 0; f < pyr.levels[l - 1].size(); ++f) {
        const uint32_t p = pyr.parent_of[l - 1][f];
        if (pyr.levels[l].keys[p] != (pyr.levels[l - 1].keys[f] >> 3))
          throw DataError("pyramid: parent key mismatch");
      }
    }
  }
}

namespace {

// Fixed offset enumeration shared by neighbors() and neighbor_table():
// (dz, dy, dx) lexicographic over {-1,0,1}^3 minus the centre.
struct Offset {
  int dx, dy, dz;
};

std::array<Offset, 26> make_offsets() {
  std::array<Offset, 26> out{};
  int i = 0;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (dx == 0 && dy == 0 && dz == 0) continue;
        out[i++] = {dx, dy, dz};
      }
  return out;
}

const std::array<Offset, 26> kOffsets = make_offsets();

// Returns -1 when the offset leaves the grid (or maps back onto the centre
// through the theta wrap).
int64_t neighbor_key(const OctreeLevel& level, const Coords3& c,
                     const Offset& o, CoordMode mode) {
  const int64_t n = 1u << level.depth;
  int64_t nx = static_cast<int64_t>(c.x) + o.dx;
  int64_t ny = static_cast<int64_t>(c.y) + o.dy;
  int64_t nz = static_cast<int64_t>(c.z) + o.dz;
  if (nx < 0 || nx >= n || nz < 0 || nz >= n) return -1;
  if (mode == CoordMode::cylindrical) {
    ny = (ny + n) % n;  // theta axis is periodic
  } else if (ny < 0 || ny >= n) {
    return -1;
  }
  if (nx == c.x && ny == c.y && nz == c.z) return -1;
  return static_cast<int64_t>(
      morton_encode(static_cast<uint32_t>(nx), static_cast<uint32_t>(ny),
                    static_cast<uint32_t>(nz), level.depth));
}

}  // namespace

std::vector<uint32_t> neighbors(const OctreeLevel& level, uint32_t index,
                                CoordMode mode) {
  if (index >= level.size()) throw DataError("neighbors: index out of range");
  const Coords3 c = morton_decode(level.keys[index], level.depth);
  std::vector<uint32_t> out;
  out.reserve(26);
  for (const Offset& o : kOffsets) {
    const int64_t key = neighbor_key(level, c, o, mode);
    if (key < 0) continue;
    auto it = level.key_to_index.find(static_cast<uint64_t>(key));
    if (it == level.key_to_index.end()) continue;
    // The theta wrap can reach the same octant through two offsets at shallow
    // depths; report each occupied neighbour once.
    if (std::find(out.begin(), out.end(), it->second) == out.end())
      out.push_back(it->second);
  }
  return out;
}

std::vector<int32_t> neighbor_table(const OctreeLevel& level, CoordMode mode) {
  std::vector<int32_t> table(level.size() * 26, -1);
  for (uint32_t i = 0; i < level.size(); ++i) {
    const Coords3 c = morton_decode(level.keys[i], level.depth);
    for (std::size_t o = 0; o < kOffsets.size(); ++o) {
      const int64_t key = neighbor_key(level, c, kOffsets[o], mode);
      if (key < 0) continue;
      auto it = level.key_to_index.find(static_cast<uint64_t>(key));
      if (it != level.key_to_index.end())
        table[i * 26 + o] = static_cast<int32_t>(it->second);
    }
  }
  return table;
}

CellBounds octant_cell_bounds(const OctKey& key, const BoundingRegion& region) {
  region.validate();
  const Coords3 c = morton_decode(key.code, key.depth);
  const double cells = static_cast<double>(1u << key.depth);
  CellBounds out;
  out.mode = region.mode;
  if (region.mode == CoordMode::cartesian) {
    const double idx[3] = {static_cast<double>(c.x), static_cast<double>(c.y),
                           static_cast<double>(c.z)};
    for (int a = 0; a < 3; ++a) {
      const double span = region.hi[a] - region.lo[a];
      out.lo[a] = region.lo[a] + idx[a] / cells * span;
      out.hi[a] = region.lo[a] + (idx[a] + 1.0) / cells * span;
    }
  } else {
    out.lo[0] = c.x / cells * region.rho_max;
    out.hi[0] = (c.x + 1.0) / cells * region.rho_max;
    out.lo[1] = -kPi + c.y / cells * 2.0 * kPi;
    out.hi[1] = -kPi + (c.y + 1.0) / cells * 2.0 * kPi;
    const double zspan = region.z_max - region.z_min;
    out.lo[2] = region.z_min + c.z / cells * zspan;
    out.hi[2] = region.z_min + (c.z + 1.0) / cells * zspan;
  }
  return out;
}

double cell_arc_length_outer(const CellBounds& cell) {
  if (cell.mode != CoordMode::cylindrical)
    throw DataError("cell_arc_length_outer: cartesian cell has no arc");
  return cell.hi[0] * (cell.hi[1] - cell.lo[1]);
}

}  // namespace octloc
