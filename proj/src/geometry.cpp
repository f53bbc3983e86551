#include "octloc/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <tuple>

namespace octloc {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::array<double, 3> quat_rotate(const std::array<double, 4>& q,
                                  const std::array<double, 3>& v) {
  // v' = v + 2*w*(u x v) + 2*(u x (u x v)), u = (qx, qy, qz)
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  const double ux = y * v[2] - z * v[1];
  const double uy = z * v[0] - x * v[2];
  const double uz = x * v[1] - y * v[0];
  const double uux = y * uz - z * uy;
  const double uuy = z * ux - x * uz;
  const double uuz = x * uy - y * ux;
  return {v[0] + 2.0 * (w * ux + uux), v[1] + 2.0 * (w * uy + uuy),
          v[2] + 2.0 * (w * uz + uuz)};
}

std::array<double, 4> quat_conj(const std::array<double, 4>& q) {
  return {q[0], -q[1], -q[2], -q[3]};
}

// World point -> sensor-local frame of the pose.
Point3 world_to_local(const Point3& p, const Pose& pose) {
  std::array<double, 3> d{p.x - pose.t[0], p.y - pose.t[1], p.z - pose.t[2]};
  auto r = quat_rotate(quat_conj(pose.q), d);
  return {r[0], r[1], r[2]};
}

uint64_t pose_stream_id(const Pose& pose, SensorProfile profile) {
  uint64_t h = profile == SensorProfile::ground ? 0x67726f756e64ull : 0x61657269616cull;
  auto mix_double = [&h](double v) {
    uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(bits));
    h = hash_mix(h ^ bits);
  };
  for (double v : pose.t) mix_double(v);
  for (double v : pose.q) mix_double(v);
  return h;
}

}  // namespace

Cylindrical to_cylindrical(const Point3& p) {
  Cylindrical c;
  c.rho = std::hypot(p.x, p.y);
  c.theta = std::atan2(p.y, p.x);
  // atan2 returns (-pi, pi]; fold the branch point so theta is in [-pi, pi).
  if (c.theta >= kPi) c.theta = -kPi;
  c.z = p.z;
  return c;
}

Point3 from_cylindrical(const Cylindrical& c) {
  return {c.rho * std::cos(c.theta), c.rho * std::sin(c.theta), c.z};
}

void BoundingRegion::validate() const {
  if (mode == CoordMode::cartesian) {
    for (int a = 0; a < 3; ++a) {
      if (!(lo[a] < hi[a]))
        throw ConfigError("bounding region: lo must be < hi on every axis");
    }
  } else {
    if (!(rho_max > 0.0))
      throw ConfigError("bounding region: rho_max must be positive");
    if (!(z_min < z_max))
      throw ConfigError("bounding region: z_min must be < z_max");
  }
}

UnitCloud normalize_to_unit(const PointCloud& pc, const BoundingRegion& region) {
  region.validate();
  UnitCloud out;
  out.coords.reserve(pc.points.size());
  // Guard against (v - lo) / (hi - lo) rounding up to exactly 1.0 for points
  // just inside the upper boundary.
  const double below_one = std::nextafter(1.0, 0.0);
  auto clamp_unit = [below_one](double u) {
    return u >= 1.0 ? below_one : u;
  };
  if (region.mode == CoordMode::cartesian) {
    for (const Point3& p : pc.points) {
      const double v[3] = {p.x, p.y, p.z};
      bool inside = true;
      std::array<double, 3> u{};
      for (int a = 0; a < 3 && inside; ++a) {
        if (v[a] < region.lo[a] || v[a] >= region.hi[a]) {
          inside = false;
        } else {
          u[a] = clamp_unit((v[a] - region.lo[a]) / (region.hi[a] - region.lo[a]));
        }
      }
      if (inside)
        out.coords.push_back(u);
      else
        ++out.dropped;
    }
  } else {
    for (const Point3& p : pc.points) {
      const Cylindrical c = to_cylindrical(p);
      if (c.rho >= region.rho_max || c.z < region.z_min || c.z >= region.z_max) {
        ++out.dropped;
        continue;
      }
      out.coords.push_back({clamp_unit(c.rho / region.rho_max),
                            clamp_unit((c.theta + kPi) / (2.0 * kPi)),
                            clamp_unit((c.z - region.z_min) /
                                       (region.z_max - region.z_min))});
    }
  }
  if (out.coords.empty())
    throw DataError("normalize_to_unit: all points fall outside the region");
  return out;
}

PointCloud voxel_downsample(const PointCloud& pc, double voxel) {
  if (!(voxel > 0.0)) throw ConfigError("voxel_downsample: voxel must be > 0");
  if (pc.points.empty()) throw DataError("voxel_downsample: empty cloud");

  struct Entry {
    std::array<int64_t, 3> key;
    Point3 p;
  };
  std::vector<Entry> entries;
  entries.reserve(pc.points.size());
  for (const Point3& p : pc.points) {
    entries.push_back({{static_cast<int64_t>(std::floor(p.x / voxel)),
                        static_cast<int64_t>(std::floor(p.y / voxel)),
                        static_cast<int64_t>(std::floor(p.z / voxel))},
                       p});
  }
  // Sorting by (key, coords) makes the per-voxel accumulation order, and so
  // the centroids, independent of the input point order.
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.key != b.key) return a.key < b.key;
    return std::tie(a.p.x, a.p.y, a.p.z) < std::tie(b.p.x, b.p.y, b.p.z);
  });

  PointCloud out;
  out.source_id = pc.source_id;
  out.pose = pc.pose;
  std::size_t i = 0;
  while (i < entries.size()) {
    std::size_t j = i;
    double sx = 0.0, sy = 0.0, sz = 0.0;
    while (j < entries.size() && entries[j].key == entries[i].key) {
      sx += entries[j].p.x;
      sy += entries[j].p.y;
      sz += entries[j].p.z;
      ++j;
    }
    const double n = static_cast<double>(j - i);
    out.points.push_back({sx / n, sy / n, sz / n});
    i = j;
  }
  return out;
}

void SceneSpec::validate() const {
  if (landmarks.size() < 4)
    throw ConfigError("scene: need at least 4 landmarks");
  if (ring_radii.size() != ring_points.size())
    throw ConfigError("scene: ring_radii and ring_points length mismatch");
  for (double r : ring_radii)
    if (!(r > 0.0)) throw ConfigError("scene: ring radius must be positive");
  for (const CylinderLandmark& lm : landmarks) {
    if (!(lm.radius > 0.0) || !(lm.height > 0.0))
      throw ConfigError("scene: landmark radius/height must be positive");
  }
  if (noise_sigma < 0.0) throw ConfigError("scene: negative noise sigma");
}

PointCloud synth_submap(const SceneSpec& spec, const Pose& pose,
                        SensorProfile profile) {
  spec.validate();
  validate_pose(pose);
  std::mt19937_64 rng(derive_seed(spec.seed, pose_stream_id(pose, profile)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<Point3> world;
  if (profile == SensorProfile::ground) {
    // Concentric ground rings centred on the pose.
    for (std::size_t r = 0; r < spec.ring_radii.size(); ++r) {
      const double radius = spec.ring_radii[r];
      for (uint32_t i = 0; i < spec.ring_points[r]; ++i) {
        const double ang = 2.0 * kPi * unit(rng);
        world.push_back({pose.t[0] + radius * std::cos(ang),
                         pose.t[1] + radius * std::sin(ang), 0.0});
      }
    }
    // Lateral surfaces of the landmarks, full height.
    for (const CylinderLandmark& lm : spec.landmarks) {
      for (uint32_t i = 0; i < spec.points_per_landmark; ++i) {
        const double ang = 2.0 * kPi * unit(rng);
        const double zz = lm.height * unit(rng);
        world.push_back({lm.cx + lm.radius * std::cos(ang),
                         lm.cy + lm.radius * std::sin(ang), zz});
      }
    }
  } else {
    // Aerial view: landmark tops dominate, the lower half of each trunk is
    // occluded. 60% lateral surface with z biased toward the top, 40% top cap.
    for (const CylinderLandmark& lm : spec.landmarks) {
      const uint32_t lateral = spec.points_per_landmark * 3 / 5;
      for (uint32_t i = 0; i < spec.points_per_landmark; ++i) {
        const double ang = 2.0 * kPi * unit(rng);
        if (i < lateral) {
          const double u = unit(rng);
          const double zz = lm.height * (1.0 - 0.5 * u * u);  // in [h/2, h]
          world.push_back({lm.cx + lm.radius * std::cos(ang),
                           lm.cy + lm.radius * std::sin(ang), zz});
        } else {
          const double rr = lm.radius * std::sqrt(unit(rng));
          world.push_back({lm.cx + rr * std::cos(ang),
                           lm.cy + rr * std::sin(ang), lm.height});
        }
      }
    }
  }

  if (spec.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (Point3& p : world) {
      p.x += noise(rng);
      p.y += noise(rng);
      p.z += noise(rng);
    }
  }

  PointCloud out;
  out.pose = pose;
  out.points.reserve(world.size());
  for (const Point3& p : world) out.points.push_back(world_to_local(p, pose));
  return out;
}

PointCloud augment(const PointCloud& pc, uint64_t seed,
                   const AugmentConfig& cfg) {
  if (pc.points.empty()) throw DataError("augment: empty cloud");
  std::mt19937_64 rng(derive_seed(seed, 0x617567ull));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  double sx = 1.0, sy = 1.0;
  if (cfg.flip_x && unit(rng) < 0.5) sx = -1.0;
  if (cfg.flip_y && unit(rng) < 0.5) sy = -1.0;
  double ca = 1.0, sa = 0.0;
  if (cfg.rotate_z) {
    const double bound = cfg.rotate_max_deg * kPi / 180.0;
    const double ang = (2.0 * unit(rng) - 1.0) * bound;
    ca = std::cos(ang);
    sa = std::sin(ang);
  }
  double tx = 0.0, ty = 0.0, tz = 0.0;
  if (cfg.translate_max > 0.0) {
    tx = (2.0 * unit(rng) - 1.0) * cfg.translate_max;
    ty = (2.0 * unit(rng) - 1.0) * cfg.translate_max;
    tz = (2.0 * unit(rng) - 1.0) * cfg.translate_max;
  }

  PointCloud out;
  out.source_id = pc.source_id;
  out.pose = pc.pose;
  out.points.reserve(pc.points.size());
  for (const Point3& p : pc.points) {
    const double fx = sx * p.x, fy = sy * p.y;
    out.points.push_back(
        {ca * fx - sa * fy + tx, sa * fx + ca * fy + ty, p.z + tz});
  }

  if (cfg.jitter_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.jitter_sigma);
    for (Point3& p : out.points) {
      p.x += noise(rng);
      p.y += noise(rng);
      p.z += noise(rng);
    }
  }

  if (cfg.block_removal) {
    Point3 mn = out.points[0], mx = out.points[0];
    for (const Point3& p : out.points) {
      mn.x = std::min(mn.x, p.x); mx.x = std::max(mx.x, p.x);
      mn.y = std::min(mn.y, p.y); mx.y = std::max(mx.y, p.y);
      mn.z = std::min(mn.z, p.z); mx.z = std::max(mx.z, p.z);
    }
    const double cx = mn.x + (mx.x - mn.x) * unit(rng);
    const double cy = mn.y + (mx.y - mn.y) * unit(rng);
    const double cz = mn.z + (mx.z - mn.z) * unit(rng);
    const double h = cfg.block_size * 0.5;
    std::vector<Point3> kept;
    kept.reserve(out.points.size());
    for (const Point3& p : out.points) {
      const bool inside = std::abs(p.x - cx) <= h && std::abs(p.y - cy) <= h &&
                          std::abs(p.z - cz) <= h;
      if (!inside) kept.push_back(p);
    }
    if (kept.empty())
      throw DataError("augment: block removal deleted every point");
    out.points = std::move(kept);
  }
  return out;
}

double pose_horizontal_distance(const Pose& a, const Pose& b) {
  return std::hypot(a.t[0] - b.t[0], a.t[1] - b.t[1]);
}

void validate_pose(const Pose& p) {
  const double n2 =
      p.q[0] * p.q[0] + p.q[1] * p.q[1] + p.q[2] * p.q[2] + p.q[3] * p.q[3];
  if (std::abs(std::sqrt(n2) - 1.0) > 1e-9)
    throw DataError("pose quaternion is not unit length");
}

}  // namespace octloc
