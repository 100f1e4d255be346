#pragma once

// Eight-parameter box encoding relative to a voxel anchor.
//
//   d1 = (x + w/2) - ax    d2 = ax - (x - w/2)
//   d3 = (y + l/2) - ay    d4 = ay - (y - l/2)
//   d5 = (z + h/2) - az    d6 = az - (z - h/2)
//   d7 = log(w/l) sin(2 yaw)   d8 = log(w/l) cos(2 yaw)
//
// Center offsets are world-frame, (w, l, h) are intrinsic. Under a
// quarter-turn rotation the offsets rotate, the dims stay, and the yaw moves
// to yaw - theta; box geometry only sees yaw mod pi, where -theta and +theta
// agree for quarter turns.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "dqs3d/error.hpp"
#include "dqs3d/voxel_geometry.hpp"

namespace dqs3d {

/// Wraps an angle into [-pi, pi).
inline double normalize_yaw(double yaw) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double y = std::fmod(yaw + std::numbers::pi, two_pi);
  if (y < 0.0) y += two_pi;
  y -= std::numbers::pi;
  return y < std::numbers::pi ? y : -std::numbers::pi;
}

struct OrientedBox {
  Point3 center;
  Point3 dims{1.0, 1.0, 1.0};  // w, l, h
  double yaw = 0.0;
  int class_id = 0;

  double volume() const { return dims.x * dims.y * dims.z; }

  void validate() const {
    if (!is_finite(center) || !is_finite(dims) || !std::isfinite(yaw)) {
      throw InvalidBox("box has non-finite fields");
    }
    if (!(dims.x > 0.0 && dims.y > 0.0 && dims.z > 0.0)) throw InvalidBox("box dims must be > 0");
  }

  friend bool operator==(const OrientedBox&, const OrientedBox&) = default;
};

struct BoxDeltas {
  std::array<double, 8> d{};

  double& operator[](std::size_t i) { return d[i]; }
  double operator[](std::size_t i) const { return d[i]; }
  friend bool operator==(const BoxDeltas&, const BoxDeltas&) = default;
};

/// One dense-head output at a voxel anchor. class_scores are logits.
struct Prediction {
  BoxDeltas deltas;
  double centerness = 0.0;
  std::vector<double> class_scores;

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

inline BoxDeltas encode(const OrientedBox& box, Point3 anchor) {
  box.validate();
  const Point3 off = box.center - anchor;
  const Point3 half = box.dims * 0.5;
  const double log_ratio = std::log(box.dims.x / box.dims.y);
  return {{off.x + half.x, -off.x + half.x, off.y + half.y, -off.y + half.y, off.z + half.z,
           -off.z + half.z, log_ratio * std::sin(2.0 * box.yaw), log_ratio * std::cos(2.0 * box.yaw)}};
}

namespace detail {

inline void check_extents(const BoxDeltas& d) {
  for (double v : d.d) {
    if (!std::isfinite(v)) throw InvalidDeltas("non-finite box delta");
  }
  if (!(d[0] + d[1] > 0.0 && d[2] + d[3] > 0.0 && d[4] + d[5] > 0.0)) {
    throw InvalidDeltas("opposing face distances must sum to a positive extent");
  }
}

inline Point3 decoded_center(const BoxDeltas& d, Point3 anchor) {
  return anchor + Point3{0.5 * (d[0] - d[1]), 0.5 * (d[2] - d[3]), 0.5 * (d[4] - d[5])};
}

}  // namespace detail

/// Inverse of encode. The (yaw, w/l) and (yaw + pi/2, l/w) encodings are the
/// same deltas; the representative with w >= l is returned. A square
/// footprint (d7 = d8 = 0) decodes with yaw 0.
inline OrientedBox decode(const BoxDeltas& d, Point3 anchor, int class_id = 0) {
  detail::check_extents(d);
  OrientedBox box;
  box.center = detail::decoded_center(d, anchor);
  box.class_id = class_id;
  const double w = d[0] + d[1];
  const double l = d[2] + d[3];
  const double h = d[4] + d[5];
  const double rho = std::hypot(d[6], d[7]);
  if (rho == 0.0) {
    box.dims = {w, l, h};
    box.yaw = 0.0;
    return box;
  }
  box.dims = {std::max(w, l), std::min(w, l), h};
  box.yaw = normalize_yaw(0.5 * std::atan2(d[6], d[7]));
  return box;
}

/// Decode for axis-aligned scenes. The yaw is known to be a multiple of
/// pi/2; whether the footprint is turned is read off the sign of
/// d8 relative to log(w/l), and the result always has yaw 0.
inline OrientedBox decode_aabb(const BoxDeltas& d, Point3 anchor, int class_id = 0) {
  detail::check_extents(d);
  OrientedBox box;
  box.center = detail::decoded_center(d, anchor);
  box.class_id = class_id;
  const double w = d[0] + d[1];
  const double l = d[2] + d[3];
  const bool turned = d[7] * std::log(w / l) < 0.0;
  box.dims = turned ? Point3{l, w, d[4] + d[5]} : Point3{w, l, d[4] + d[5]};
  box.yaw = 0.0;
  return box;
}

/// Box parameters of the rotated box, evaluated at the rotated anchor,
/// expressed as a linear map of the original parameters.
inline BoxDeltas transform_deltas(const BoxDeltas& d, int quarter_turns) {
  check_quarter_turns(quarter_turns);
  if (quarter_turns == 0) return d;
  if (quarter_turns == 2) return {{d[1], d[0], d[3], d[2], d[4], d[5], d[6], d[7]}};
  static constexpr std::array<int, 4> kCos{1, 0, -1, 0};
  static constexpr std::array<int, 4> kSin{0, 1, 0, -1};
  const auto k = static_cast<std::size_t>(quarter_turns);
  const double c = kCos[k];
  const double s = kSin[k];
  const double cos2 = (quarter_turns % 2 == 0) ? 1.0 : -1.0;
  // Offsets (dx, dy) = ((d1 - d2)/2, (d3 - d4)/2) rotate; half extents stay.
  const double dx = 0.5 * (d[0] - d[1]);
  const double dy = 0.5 * (d[2] - d[3]);
  const double hw = 0.5 * (d[0] + d[1]);
  const double hl = 0.5 * (d[2] + d[3]);
  const double rx = c * dx - s * dy;
  const double ry = s * dx + c * dy;
  BoxDeltas out;
  out[0] = hw + rx;
  out[1] = hw - rx;
  out[2] = hl + ry;
  out[3] = hl - ry;
  out[4] = d[4];
  out[5] = d[5];
  out[6] = d[6] * cos2;
  out[7] = d[7] * cos2;
  return out;
}

inline OrientedBox transform_box(const OrientedBox& box, const Transform& t) {
  t.validate();
  OrientedBox out = box;
  out.center = apply_transform(box.center, t);
  out.yaw = normalize_yaw(box.yaw - quarter_turn_angle(t.quarter_turns));
  return out;
}

inline constexpr double kYawTolerance = 1e-9;

/// Re-expresses a box whose yaw is a multiple of pi/2 with yaw 0, swapping
/// w and l for odd quarter turns.
inline OrientedBox to_axis_aligned(const OrientedBox& box) {
  const double half_pi = 0.5 * std::numbers::pi;
  const double turns = box.yaw / half_pi;
  const double nearest = std::round(turns);
  if (std::abs(box.yaw - nearest * half_pi) > kYawTolerance) {
    throw Unsupported("box yaw is not a multiple of pi/2");
  }
  OrientedBox out = box;
  if (static_cast<std::int64_t>(nearest) % 2 != 0) std::swap(out.dims.x, out.dims.y);
  out.yaw = 0.0;
  return out;
}

/// True if p lies inside the (possibly yawed) box, boundary included.
inline bool contains(const OrientedBox& box, Point3 p) {
  const Point3 off = p - box.center;
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  const double local_x = c * off.x + s * off.y;
  const double local_y = -s * off.x + c * off.y;
  return std::abs(local_x) <= 0.5 * box.dims.x && std::abs(local_y) <= 0.5 * box.dims.y &&
         std::abs(off.z) <= 0.5 * box.dims.z;
}

/// Intersection over union of two yaw-0 boxes.
inline double aabb_iou(const OrientedBox& a, const OrientedBox& b) {
  if (std::abs(a.yaw) > kYawTolerance || std::abs(b.yaw) > kYawTolerance) {
    throw Unsupported("aabb_iou requires yaw-0 boxes");
  }
  a.validate();
  b.validate();
  double inter = 1.0;
  for (int axis = 0; axis < 3; ++axis) {
    const double lo = std::max(a.center[axis] - 0.5 * a.dims[axis], b.center[axis] - 0.5 * b.dims[axis]);
    const double hi = std::min(a.center[axis] + 0.5 * a.dims[axis], b.center[axis] + 0.5 * b.dims[axis]);
    if (hi <= lo) return 0.0;
    inter *= hi - lo;
  }
  const double uni = a.volume() + b.volume() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

}  // namespace dqs3d
