#pragma once

// Synthetic indoor-like scenes, voxel features and ground-truth assignment.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <vector>

#include "dqs3d/box_codec.hpp"
#include "dqs3d/error.hpp"
#include "dqs3d/losses.hpp"
#include "dqs3d/matching.hpp"
#include "dqs3d/model.hpp"
#include "dqs3d/qec.hpp"
#include "dqs3d/voxel_geometry.hpp"

namespace dqs3d {

using PointCloud = std::vector<Point3>;

struct Scene {
  PointCloud points;
  std::vector<OrientedBox> boxes;
  bool labeled = true;

  friend bool operator==(const Scene&, const Scene&) = default;
};

struct SimConfig {
  Point3 arena{8.0, 8.0, 3.0};  // scenes live in [0, arena]
  int min_boxes = 2;
  int max_boxes = 8;
  double min_dim = 0.3;
  double max_dim = 1.5;
  int points_per_box = 300;
  int clutter_points = 100;
  int n_classes = 3;
  bool yawed = false;
  double voxel_size = 0.01;
  double labeled_fraction = 0.1;
  double translation_half_range = 0.5;
  int max_placement_retries = 500;
  std::uint64_t seed = 0;

  void validate() const {
    if (min_boxes < 1 || max_boxes < min_boxes) throw InvalidInput("box count range must satisfy 1 <= min <= max");
    if (!(min_dim > 0.0 && max_dim >= min_dim)) throw InvalidInput("box dim range must satisfy 0 < min <= max");
    if (points_per_box < 1 || clutter_points < 0) throw InvalidInput("point counts must be positive");
    if (n_classes < 1) throw InvalidInput("n_classes must be >= 1");
    if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) throw InvalidInput("labeled_fraction must be in (0, 1]");
    if (!(translation_half_range >= 0.0)) throw InvalidInput("translation range must be >= 0");
    if (!(arena.x > max_dim && arena.y > max_dim && arena.z > max_dim)) {
      throw InvalidInput("arena must be larger than the largest box");
    }
    (void)VoxelSize(voxel_size);
  }
};

/// Footprint-covering yaw-0 box, used for overlap tests between yawed boxes.
inline OrientedBox bounding_aabb(const OrientedBox& b) {
  const double c = std::abs(std::cos(b.yaw));
  const double s = std::abs(std::sin(b.yaw));
  OrientedBox out = b;
  out.dims = {c * b.dims.x + s * b.dims.y, s * b.dims.x + c * b.dims.y, b.dims.z};
  out.yaw = 0.0;
  return out;
}

/// Uniform sample on the surface of a box.
inline Point3 sample_surface(const OrientedBox& b, std::mt19937_64& rng) {
  const double w = b.dims.x, l = b.dims.y, h = b.dims.z;
  const std::array<double, 3> area{l * h, w * h, w * l};  // faces normal to x, y, z
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double pick = u(rng) * (area[0] + area[1] + area[2]);
  const int normal_axis = pick < area[0] ? 0 : (pick < area[0] + area[1] ? 1 : 2);
  Point3 local{(u(rng) - 0.5) * w, (u(rng) - 0.5) * l, (u(rng) - 0.5) * h};
  const double side = u(rng) < 0.5 ? -0.5 : 0.5;
  local[normal_axis] = side * b.dims[normal_axis];
  const double c = std::cos(b.yaw);
  const double s = std::sin(b.yaw);
  return b.center + Point3{c * local.x - s * local.y, s * local.x + c * local.y, local.z};
}

/// Deterministic for a given (cfg, seed). Boxes stand on the floor and do
/// not overlap (pairwise IoU of their footprint boxes < 0.05).
inline Scene generate_scene(const SimConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> count(cfg.min_boxes, cfg.max_boxes);
  std::uniform_int_distribution<int> cls(0, cfg.n_classes - 1);
  Scene scene;
  const int n_boxes = count(rng);
  for (int b = 0; b < n_boxes; ++b) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_placement_retries && !placed; ++attempt) {
      OrientedBox box;
      box.dims = {cfg.min_dim + u(rng) * (cfg.max_dim - cfg.min_dim), cfg.min_dim + u(rng) * (cfg.max_dim - cfg.min_dim),
                  cfg.min_dim + u(rng) * (cfg.max_dim - cfg.min_dim)};
      box.yaw = cfg.yawed ? normalize_yaw((u(rng) * 2.0 - 1.0) * std::numbers::pi) : 0.0;
      box.class_id = cls(rng);
      const OrientedBox footprint = bounding_aabb(box);
      const double fx = footprint.dims.x, fy = footprint.dims.y;
      if (fx >= cfg.arena.x || fy >= cfg.arena.y) continue;
      box.center = {0.5 * fx + u(rng) * (cfg.arena.x - fx), 0.5 * fy + u(rng) * (cfg.arena.y - fy), 0.5 * box.dims.z};
      OrientedBox fp = bounding_aabb(box);
      const bool overlaps = std::any_of(scene.boxes.begin(), scene.boxes.end(),
                                        [&](const OrientedBox& o) { return aabb_iou(bounding_aabb(o), fp) >= 0.05; });
      if (overlaps) continue;
      scene.boxes.push_back(box);
      placed = true;
    }
    if (!placed) throw GenerationFailure("could not place box " + std::to_string(b) + " without overlap");
  }
  for (const OrientedBox& box : scene.boxes) {
    for (int i = 0; i < cfg.points_per_box; ++i) scene.points.push_back(sample_surface(box, rng));
  }
  for (int i = 0; i < cfg.clutter_points; ++i) {
    scene.points.push_back({u(rng) * cfg.arena.x, u(rng) * cfg.arena.y, u(rng) * cfg.arena.z});
  }
  scene.labeled = true;
  return scene;
}

/// n scenes with per-scene seeds derived from cfg.seed; the first
/// max(1, round(labeled_fraction * n)) are labeled.
inline std::vector<Scene> generate_dataset(const SimConfig& cfg, std::size_t n, std::uint64_t stream = 0) {
  std::vector<Scene> scenes;
  scenes.reserve(n);
  const auto n_labeled = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.labeled_fraction * static_cast<double>(n))));
  for (std::size_t i = 0; i < n; ++i) {
    Scene s = generate_scene(cfg, mix_seed(mix_seed(cfg.seed, stream), i));
    s.labeled = i < n_labeled;
    scenes.push_back(std::move(s));
  }
  return scenes;
}

inline Transform sample_transform(std::mt19937_64& rng, double translation_half_range) {
  std::uniform_int_distribution<int> k(0, 3);
  Transform t;
  t.quarter_turns = k(rng);
  if (translation_half_range > 0.0) {
    std::uniform_real_distribution<double> u(-translation_half_range, translation_half_range);
    t.translation = {u(rng), u(rng), u(rng)};
  }
  return t;
}

/// Scene seen through an augmentation: points moved (with or without the
/// compensation term), boxes moved rigidly.
inline Scene transform_scene(const Scene& scene, const Transform& t, VoxelSize s, bool with_qec, unsigned threads = 1) {
  Scene out;
  out.labeled = scene.labeled;
  if (with_qec) {
    out.points = apply_with_qec(scene.points, t, s, threads);
  } else {
    out.points.reserve(scene.points.size());
    for (const Point3& p : scene.points) out.points.push_back(apply_transform(p, t));
  }
  for (const OrientedBox& b : scene.boxes) out.boxes.push_back(transform_box(b, t));
  return out;
}

/// Per-voxel features: constant 1, n / (n + 1) for n points, mean point
/// offset from the voxel center and per-axis standard deviation, both in
/// voxel units.
inline FeatureGrid voxel_features(const PointCloud& points, VoxelSize s) {
  struct Acc {
    std::size_t n = 0;
    Point3 sum;
    Point3 sum_sq;
  };
  std::map<VoxelKey, Acc> acc;
  for (const Point3& p : points) {
    const VoxelKey key = quantize(p, s);
    const Point3 off = p / s.value() - to_point(key) - Point3{0.5, 0.5, 0.5};
    Acc& a = acc[key];
    ++a.n;
    a.sum = a.sum + off;
    a.sum_sq = a.sum_sq + Point3{off.x * off.x, off.y * off.y, off.z * off.z};
  }
  FeatureGrid grid(s);
  for (const auto& [key, a] : acc) {
    const double n = static_cast<double>(a.n);
    const Point3 mean = a.sum / n;
    FeatureVector f{};
    f[0] = 1.0;
    f[1] = n / (n + 1.0);
    for (int axis = 0; axis < 3; ++axis) {
      f[static_cast<std::size_t>(2 + axis)] = mean[axis];
      const double var = a.sum_sq[axis] / n - mean[axis] * mean[axis];
      f[static_cast<std::size_t>(5 + axis)] = std::sqrt(std::max(0.0, var));
    }
    grid.entries.emplace(key, f);
  }
  return grid;
}

/// Occupied voxel keys of a cloud, sorted.
inline std::vector<VoxelKey> occupied_voxels(const PointCloud& points, VoxelSize s) {
  std::vector<VoxelKey> keys;
  keys.reserve(points.size());
  for (const Point3& p : points) keys.push_back(quantize(p, s));
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  return keys;
}

/// Assigns each voxel whose anchor lies inside a box to the smallest-volume
/// such box.
template <typename KeyRange>
LabelGrid assign_labels(const KeyRange& keys, const std::vector<OrientedBox>& boxes, VoxelSize s) {
  LabelGrid labels;
  for (const VoxelKey& key : keys) {
    const Point3 anchor = voxel_center(key, s);
    const OrientedBox* best = nullptr;
    for (const OrientedBox& b : boxes) {
      if (contains(b, anchor) && (best == nullptr || b.volume() < best->volume())) best = &b;
    }
    if (best == nullptr) continue;
    VoxelLabel label;
    label.deltas = encode(*best, anchor);
    label.centerness = centerness_target(label.deltas);
    label.class_id = best->class_id;
    labels.emplace(key, label);
  }
  return labels;
}

inline LabelGrid assign_labels(const FeatureGrid& grid, const std::vector<OrientedBox>& boxes) {
  std::vector<VoxelKey> keys;
  keys.reserve(grid.entries.size());
  for (const auto& kv : grid.entries) keys.push_back(kv.first);
  return assign_labels(keys, boxes, grid.voxel_size);
}

struct MockConfig {
  double noise_sigma = 0.05;
  double class_logit = 4.0;
  int n_classes = 3;
};

/// Stand-in detector: every occupied voxel assigned to a ground-truth box
/// predicts that box's deltas and centerness target plus Gaussian noise,
/// and near-one-hot class logits.
inline PredictionGrid mock_predict(const Scene& scene, VoxelSize s, const MockConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const LabelGrid labels = assign_labels(occupied_voxels(scene.points, s), scene.boxes, s);
  PredictionGrid grid(s);
  for (const auto& [key, label] : labels) {
    Prediction p;
    p.deltas = label.deltas;
    if (cfg.noise_sigma > 0.0) {
      for (double& d : p.deltas.d) d += cfg.noise_sigma * noise(rng);
    }
    const double c = label.centerness + (cfg.noise_sigma > 0.0 ? cfg.noise_sigma * noise(rng) : 0.0);
    p.centerness = std::clamp(c, 0.0, 1.0);
    p.class_scores.assign(static_cast<std::size_t>(cfg.n_classes), 0.0);
    p.class_scores.at(static_cast<std::size_t>(label.class_id)) = cfg.class_logit;
    if (cfg.noise_sigma > 0.0) {
      for (double& v : p.class_scores) v += cfg.noise_sigma * noise(rng);
    }
    grid.insert(key, std::move(p));
  }
  return grid;
}

/// Proposal list of a prediction grid: optional confidence filter, top-k by
/// score, then NMS.
inline std::vector<ScoredBox> proposals(const PredictionGrid& grid, const FilterConfig* filter, std::size_t pre_nms_k,
                                        double nms_iou) {
  return nms(top_k(grid_to_boxes(grid, filter), pre_nms_k), nms_iou);
}

struct PairCounts {
  std::size_t dense = 0;
  std::size_t proposal = 0;
};

/// Dense pairs after filtering and filtered proposal pairs for one
/// teacher/student view of a scene. The teacher grid is in its own frame.
inline PairCounts count_pairs(const PredictionGrid& teacher, const PredictionGrid& student, const Transform& t,
                              const FilterConfig& filter, std::size_t pre_nms_k = 200, double nms_iou = 0.5) {
  PairCounts out;
  const PredictionGrid aligned = align_teacher(teacher, t);
  out.dense = dense_match(aligned, student, filter).size();
  const auto teacher_props = proposals(aligned, &filter, pre_nms_k, nms_iou);
  const auto student_props = proposals(student, nullptr, pre_nms_k, nms_iou);
  if (!teacher_props.empty() && !student_props.empty()) {
    std::vector<OrientedBox> tb, sb;
    for (const ScoredBox& b : teacher_props) tb.push_back(b.box);
    for (const ScoredBox& b : student_props) sb.push_back(b.box);
    out.proposal = proposal_match(tb, sb).size();
  }
  return out;
}

}  // namespace dqs3d
