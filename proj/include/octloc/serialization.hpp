#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "octloc/octree.hpp"

namespace octloc {

// Fixed windows of k consecutive octants along the space-filling curve. The
// level stores octants in key order already, so octant i lands in window
// i / k, slot i % k; padding appears only in the final window.
struct WindowPartition {
  uint8_t level_depth = 0;
  uint32_t window_size = 0;  // k
  uint32_t windows = 0;      // w = ceil(N / k)
  uint32_t count = 0;        // N octants
  uint32_t pad_count = 0;    // w * k - N
  std::vector<std::pair<uint32_t, uint32_t>> slot_of;  // octant -> (window, slot)
  std::vector<uint8_t> valid;                          // w * k mask
};

WindowPartition serialize(const OctreeLevel& level, uint32_t window_size);

// Scatters per-octant channel vectors into the (w, k, C) window layout,
// writing pad_value into the padded tail slots.
std::vector<double> serialize_values(const WindowPartition& part,
                                     const std::vector<double>& per_octant,
                                     std::size_t channels,
                                     double pad_value = 0.0);

// Exact inverse of serialize_values on the valid slots; padded slots are
// discarded.
std::vector<double> unserialize(const WindowPartition& part,
                                const std::vector<double>& windowed,
                                std::size_t channels);

// Mean over windows of (max - min) radial distance of the window's octant
// centroids, measured in metres in the sensor frame. Used to compare how
// tightly the two coordinate modes group windows by range.
double mean_window_radial_spread(const OctreeLevel& level,
                                 const WindowPartition& part,
                                 const BoundingRegion& region);

}  // namespace octloc
