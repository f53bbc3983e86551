#include "octloc/serialization.hpp"

#include <algorithm>
#include <cmath>

namespace octloc {

WindowPartition serialize(const OctreeLevel& level, uint32_t window_size) {
  if (window_size < 2) throw ConfigError("serialize: window size must be >= 2");
  if (level.size() == 0) throw DataError("serialize: empty level");

  WindowPartition part;
  part.level_depth = level.depth;
  part.window_size = window_size;
  part.count = static_cast<uint32_t>(level.size());
  part.windows = (part.count + window_size - 1) / window_size;
  part.pad_count = part.windows * window_size - part.count;
  part.slot_of.reserve(part.count);
  for (uint32_t i = 0; i < part.count; ++i)
    part.slot_of.emplace_back(i / window_size, i % window_size);
  part.valid.assign(static_cast<std::size_t>(part.windows) * window_size, 0);
  for (uint32_t i = 0; i < part.count; ++i) part.valid[i] = 1;
  return part;
}

std::vector<double> serialize_values(const WindowPartition& part,
                                     const std::vector<double>& per_octant,
                                     std::size_t channels, double pad_value) {
  if (per_octant.size() != static_cast<std::size_t>(part.count) * channels)
    throw ShapeError("serialize_values: per-octant buffer size mismatch");
  const std::size_t slots =
      static_cast<std::size_t>(part.windows) * part.window_size;
  std::vector<double> out(slots * channels, pad_value);
  // Key order equals slot order, so valid slots are a prefix copy.
  std::copy(per_octant.begin(), per_octant.end(), out.begin());
  return out;
}

std::vector<double> unserialize(const WindowPartition& part,
                                const std::vector<double>& windowed,
                                std::size_t channels) {
  const std::size_t slots =
      static_cast<std::size_t>(part.windows) * part.window_size;
  if (windowed.size() != slots * channels)
    throw ShapeError("unserialize: windowed buffer size mismatch");
  return std::vector<double>(
      windowed.begin(),
      windowed.begin() + static_cast<std::size_t>(part.count) * channels);
}

double mean_window_radial_spread(const OctreeLevel& level,
                                 const WindowPartition& part,
                                 const BoundingRegion& region) {
  if (part.count != level.size())
    throw ShapeError("mean_window_radial_spread: partition/level mismatch");
  double total = 0.0;
  for (uint32_t w = 0; w < part.windows; ++w) {
    double rmin = 0.0, rmax = 0.0;
    bool first = true;
    const uint32_t begin = w * part.window_size;
    const uint32_t end = std::min(part.count, begin + part.window_size);
    for (uint32_t i = begin; i < end; ++i) {
      const auto& c = level.stats[i].centroid;
      double radial;
      if (region.mode == CoordMode::cylindrical) {
        radial = c[0] * region.rho_max;
      } else {
        const double x = region.lo[0] + c[0] * (region.hi[0] - region.lo[0]);
        const double y = region.lo[1] + c[1] * (region.hi[1] - region.lo[1]);
        radial = std::hypot(x, y);
      }
      if (first) {
        rmin = rmax = radial;
        first = false;
      } else {
        rmin = std::min(rmin, radial);
        rmax = std::max(rmax, radial);
      }
    }
    total += rmax - rmin;
  }
  return total / static_cast<double>(part.windows);
}

}  // namespace octloc
