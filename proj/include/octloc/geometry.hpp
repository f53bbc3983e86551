#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "octloc/common.hpp"

namespace octloc {

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

// Sensor pose: translation in metres, unit quaternion (w, x, y, z).
struct Pose {
  std::array<double, 3> t{0.0, 0.0, 0.0};
  std::array<double, 4> q{1.0, 0.0, 0.0, 0.0};
};

struct PointCloud {
  std::vector<Point3> points;
  std::string source_id;
  Pose pose;
};

enum class CoordMode { cartesian, cylindrical };

struct Cylindrical {
  double rho = 0.0;    // metres, >= 0
  double theta = 0.0;  // radians in [-pi, pi), branch cut on the -x axis
  double z = 0.0;
};

// rho = hypot(x, y), theta = atan2(y, x) folded so that +pi maps to -pi.
// The origin gets theta = 0.
Cylindrical to_cylindrical(const Point3& p);
Point3 from_cylindrical(const Cylindrical& c);

// Crop volume for normalisation. Cartesian mode uses [lo, hi) per axis;
// cylindrical mode uses rho < rho_max, z in [z_min, z_max), full theta range.
struct BoundingRegion {
  CoordMode mode = CoordMode::cartesian;
  std::array<double, 3> lo{-30.0, -30.0, -2.0};
  std::array<double, 3> hi{30.0, 30.0, 18.0};
  double rho_max = 30.0;
  double z_min = -2.0;
  double z_max = 18.0;
  void validate() const;  // throws ConfigError on a degenerate region
};

struct UnitCloud {
  std::vector<std::array<double, 3>> coords;  // each component in [0, 1)
  std::size_t dropped = 0;
};

// Maps points into the unit cube. Points outside the region are dropped (not
// clamped) and counted; an empty result is a DataError. In cylindrical mode
// the unit axes are (rho, theta, z).
UnitCloud normalize_to_unit(const PointCloud& pc, const BoundingRegion& region);

// Centroid per occupied voxel, output ordered by voxel integer key ascending
// (lexicographic on the floor-quantised index triple). Invariant to input
// point order and idempotent.
PointCloud voxel_downsample(const PointCloud& pc, double voxel);

// Vertical cylinder standing on z = 0: "tree trunk".
struct CylinderLandmark {
  double cx = 0.0;
  double cy = 0.0;
  double radius = 0.5;
  double height = 8.0;
};

struct SceneSpec {
  std::vector<CylinderLandmark> landmarks;  // at least 4
  std::vector<double> ring_radii;           // metres
  std::vector<uint32_t> ring_points;        // same length as ring_radii
  uint32_t points_per_landmark = 48;
  double noise_sigma = 0.0;  // metres, isotropic gaussian on every point
  uint64_t seed = 0;
  void validate() const;
};

enum class SensorProfile { ground, aerial };

// Deterministic synthetic submap in the sensor-local frame. The ground
// profile combines concentric ground rings around the pose with points on the
// lateral surfaces of the landmarks; the aerial profile samples the landmarks
// top-biased (lateral surface plus top cap) with low z occluded, no rings.
PointCloud synth_submap(const SceneSpec& spec, const Pose& pose,
                        SensorProfile profile);

struct AugmentConfig {
  bool flip_x = false;           // coin flip, mirrors x
  bool flip_y = false;           // coin flip, mirrors y
  bool rotate_z = false;         // uniform rotation about z
  double rotate_max_deg = 180.0; // magnitude bound for rotate_z
  double translate_max = 0.0;    // uniform per-axis shift in [-max, max]
  double jitter_sigma = 0.0;     // per-point gaussian, metres
  bool block_removal = false;    // delete one axis-aligned block
  double block_size = 4.0;       // edge length of the removed block
};

// Applies the enabled augmentations in a fixed order (flips, rotation,
// translation, jitter, block removal). Deterministic for a given seed. The
// pose is left untouched; removing every point is a DataError.
PointCloud augment(const PointCloud& pc, uint64_t seed,
                   const AugmentConfig& cfg);

// xy-plane distance between two poses; used for tuple mining and retrieval
// ground truth.
double pose_horizontal_distance(const Pose& a, const Pose& b);

void validate_pose(const Pose& p);  // unit quaternion within 1e-9

}  // namespace octloc
