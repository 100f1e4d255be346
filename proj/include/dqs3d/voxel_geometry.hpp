#pragma once

// Integer-lattice quantization and the quarter-turn transform group.
//
// Quantization is the componentwise floor of p / s_v. Rotations are about
// the upright (z) axis, counter-clockwise:
//   x' = x cos(theta) - y sin(theta),  y' = x sin(theta) + y cos(theta)
// with theta = k * pi/2, evaluated by integer case analysis so that integer
// inputs stay exactly integral.

#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>

#include "dqs3d/error.hpp"

namespace dqs3d {

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend constexpr Point3 operator+(Point3 a, Point3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend constexpr Point3 operator-(Point3 a, Point3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend constexpr Point3 operator-(Point3 a) { return {-a.x, -a.y, -a.z}; }
  friend constexpr Point3 operator*(Point3 a, double s) { return {a.x * s, a.y * s, a.z * s}; }
  friend constexpr Point3 operator*(double s, Point3 a) { return a * s; }
  friend constexpr Point3 operator/(Point3 a, double s) { return {a.x / s, a.y / s, a.z / s}; }
  friend constexpr bool operator==(Point3, Point3) = default;

  constexpr double operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  constexpr double& operator[](int axis) { return axis == 0 ? x : (axis == 1 ? y : z); }
};

inline double dot(Point3 a, Point3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(Point3 a) { return std::sqrt(dot(a, a)); }

inline bool is_finite(Point3 p) {
  return std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.z);
}

/// Lattice coordinates in units of the voxel size. Ordered lexicographically.
struct VoxelKey {
  std::int64_t i = 0;
  std::int64_t j = 0;
  std::int64_t k = 0;

  friend constexpr VoxelKey operator+(VoxelKey a, VoxelKey b) { return {a.i + b.i, a.j + b.j, a.k + b.k}; }
  friend constexpr VoxelKey operator-(VoxelKey a, VoxelKey b) { return {a.i - b.i, a.j - b.j, a.k - b.k}; }
  friend constexpr auto operator<=>(const VoxelKey&, const VoxelKey&) = default;
};

class VoxelSize {
 public:
  explicit VoxelSize(double meters) : value_(meters) {
    if (!(meters > 0.0) || !std::isfinite(meters)) {
      throw InvalidInput("voxel size must be finite and > 0, got " + std::to_string(meters));
    }
  }
  double value() const noexcept { return value_; }
  friend bool operator==(VoxelSize, VoxelSize) = default;

 private:
  double value_;
};

inline void check_quarter_turns(int quarter_turns) {
  if (quarter_turns < 0 || quarter_turns > 3) {
    throw InvalidInput("quarter_turns must be in {0,1,2,3}, got " + std::to_string(quarter_turns));
  }
}

/// Rotation by quarter_turns * pi/2 about z followed by a translation.
struct Transform {
  int quarter_turns = 0;
  Point3 translation{};

  void validate() const {
    check_quarter_turns(quarter_turns);
    if (!is_finite(translation)) throw InvalidInput("transform translation must be finite");
  }
  static Transform identity() { return {}; }
};

inline double quarter_turn_angle(int quarter_turns) {
  return quarter_turns * (std::numbers::pi / 2.0);
}

inline Point3 rotate_point(Point3 p, int quarter_turns) {
  check_quarter_turns(quarter_turns);
  switch (quarter_turns) {
    case 1: return {-p.y, p.x, p.z};
    case 2: return {-p.x, -p.y, p.z};
    case 3: return {p.y, -p.x, p.z};
    default: return p;
  }
}

inline VoxelKey rotate_key(VoxelKey v, int quarter_turns) {
  check_quarter_turns(quarter_turns);
  switch (quarter_turns) {
    case 1: return {-v.j, v.i, v.k};
    case 2: return {-v.i, -v.j, v.k};
    case 3: return {v.j, -v.i, v.k};
    default: return v;
  }
}

inline Point3 apply_transform(Point3 p, const Transform& t) {
  t.validate();
  return rotate_point(p, t.quarter_turns) + t.translation;
}

inline Transform inverse(const Transform& t) {
  t.validate();
  const int k = (4 - t.quarter_turns) % 4;
  return {k, -rotate_point(t.translation, k)};
}

/// t2 after t1.
inline Transform compose(const Transform& t2, const Transform& t1) {
  t1.validate();
  t2.validate();
  return {(t1.quarter_turns + t2.quarter_turns) % 4,
          rotate_point(t1.translation, t2.quarter_turns) + t2.translation};
}

namespace detail {

// floor(x / s) such that n * s <= x < (n + 1) * s holds in floating point.
// The correction step makes quantize(n * s) == n for every representable n.
inline std::int64_t lattice_floor(double x, double s) {
  auto n = static_cast<std::int64_t>(std::floor(x / s));
  if (static_cast<double>(n) * s > x) {
    --n;
  } else if (static_cast<double>(n + 1) * s <= x) {
    ++n;
  }
  return n;
}

}  // namespace detail

inline VoxelKey quantize(Point3 p, VoxelSize s) {
  if (!is_finite(p)) throw InvalidInput("cannot quantize a non-finite point");
  const double sv = s.value();
  return {detail::lattice_floor(p.x, sv), detail::lattice_floor(p.y, sv), detail::lattice_floor(p.z, sv)};
}

/// Componentwise floor of a point already expressed in voxel units.
inline VoxelKey floor_key(Point3 voxel_units) {
  if (!is_finite(voxel_units)) throw InvalidInput("cannot quantize a non-finite point");
  return {static_cast<std::int64_t>(std::floor(voxel_units.x)),
          static_cast<std::int64_t>(std::floor(voxel_units.y)),
          static_cast<std::int64_t>(std::floor(voxel_units.z))};
}

inline Point3 to_point(VoxelKey v) {
  return {static_cast<double>(v.i), static_cast<double>(v.j), static_cast<double>(v.k)};
}

/// Lattice corner key * s_v in meters.
inline Point3 key_to_meters(VoxelKey v, VoxelSize s) { return to_point(v) * s.value(); }

/// Voxel center in meters; the anchor position used for box encoding.
inline Point3 voxel_center(VoxelKey v, VoxelSize s) {
  return (to_point(v) + Point3{0.5, 0.5, 0.5}) * s.value();
}

/// Fractional remainder p / s_v - quantize(p, s_v), in voxel units, each
/// component in [0, 1).
inline Point3 frac(Point3 p, VoxelSize s) {
  const VoxelKey key = quantize(p, s);
  const double sv = s.value();
  auto component = [](double scaled, std::int64_t n) {
    const double f = scaled - static_cast<double>(n);
    if (f < 0.0) return 0.0;
    return f < 1.0 ? f : std::nextafter(1.0, 0.0);
  };
  return {component(p.x / sv, key.i), component(p.y / sv, key.j), component(p.z / sv, key.k)};
}

/// Student-side anchor key of teacher anchor v: rotate_key(v) + quantize(translation).
inline VoxelKey map_anchor(VoxelKey v, const Transform& t, VoxelSize s) {
  t.validate();
  return rotate_key(v, t.quarter_turns) + quantize(t.translation, s);
}

}  // namespace dqs3d
