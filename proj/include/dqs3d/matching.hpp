#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "dqs3d/box_codec.hpp"
#include "dqs3d/error.hpp"
#include "dqs3d/voxel_geometry.hpp"

namespace dqs3d {

/// Voxel-keyed dense predictions. std::map keeps keys in lexicographic order,
/// which every consumer relies on for deterministic iteration.
class PredictionGrid {
 public:
  using Map = std::map<VoxelKey, Prediction>;

  explicit PredictionGrid(VoxelSize voxel_size) : voxel_size_(voxel_size) {}

  VoxelSize voxel_size() const noexcept { return voxel_size_; }
  const Map& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  /// Returns false (and leaves the grid untouched) if the key is taken.
  bool insert(VoxelKey key, Prediction p) { return entries_.emplace(key, std::move(p)).second; }

  const Prediction* find(VoxelKey key) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second;
  }

  Point3 anchor(VoxelKey key) const { return voxel_center(key, voxel_size_); }

  friend bool operator==(const PredictionGrid& a, const PredictionGrid& b) {
    return a.voxel_size_ == b.voxel_size_ && a.entries_ == b.entries_;
  }

 private:
  VoxelSize voxel_size_;
  Map entries_;
};

struct FilterConfig {
  double tau_center = 0.40;
  double tau_cls = 0.20;

  void validate() const {
    if (!(tau_center >= 0.0 && tau_center <= 1.0 && tau_cls >= 0.0 && tau_cls <= 1.0)) {
      throw InvalidInput("filter thresholds must lie in [0, 1]");
    }
  }
};

struct MatchPair {
  Prediction teacher;  // aligned into the student frame
  Prediction student;
  VoxelKey key;
};

struct MatchSet {
  std::vector<MatchPair> pairs;

  std::size_t size() const noexcept { return pairs.size(); }
  bool empty() const noexcept { return pairs.empty(); }
};

/// Max-subtracted softmax.
inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double top = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - top);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

inline double max_softmax(std::span<const double> logits) {
  if (logits.empty()) return 0.0;
  const auto probs = softmax(logits);
  return *std::max_element(probs.begin(), probs.end());
}

inline bool passes_filter(const Prediction& p, const FilterConfig& f) {
  return p.centerness > f.tau_center && max_softmax(p.class_scores) > f.tau_cls;
}

/// Moves teacher predictions into the student frame: keys through
/// map_anchor, deltas through transform_deltas. Centerness and class scores
/// are copied unchanged.
inline PredictionGrid align_teacher(const PredictionGrid& grid, const Transform& t) {
  t.validate();
  PredictionGrid out(grid.voxel_size());
  for (const auto& [key, pred] : grid.entries()) {
    Prediction moved = pred;
    moved.deltas = transform_deltas(pred.deltas, t.quarter_turns);
    if (!out.insert(map_anchor(key, t, grid.voxel_size()), std::move(moved))) {
      throw Error("align_teacher: two anchors mapped to one key");
    }
  }
  return out;
}

/// Keeps only the teacher entries that pass the confidence filter.
inline PredictionGrid filter_grid(const PredictionGrid& grid, const FilterConfig& f) {
  PredictionGrid out(grid.voxel_size());
  for (const auto& [key, pred] : grid.entries()) {
    if (passes_filter(pred, f)) out.insert(key, pred);
  }
  return out;
}

/// Pairs predictions at identical anchors, then drops pairs whose teacher
/// entry fails the confidence filter. Student entries are never filtered.
inline MatchSet dense_match(const PredictionGrid& teacher_aligned, const PredictionGrid& student,
                            const FilterConfig& f) {
  if (!(teacher_aligned.voxel_size() == student.voxel_size())) {
    throw InvalidInput("dense_match: grids use different voxel sizes");
  }
  f.validate();
  MatchSet out;
  auto t = teacher_aligned.entries().begin();
  auto s = student.entries().begin();
  const auto t_end = teacher_aligned.entries().end();
  const auto s_end = student.entries().end();
  while (t != t_end && s != s_end) {
    if (t->first < s->first) {
      ++t;
    } else if (s->first < t->first) {
      ++s;
    } else {
      if (passes_filter(t->second, f)) out.pairs.push_back({t->second, s->second, t->first});
      ++t;
      ++s;
    }
  }
  return out;
}

struct ProposalPair {
  std::size_t teacher = 0;
  std::size_t student = 0;
};

/// Nearest-center pairing: every teacher box takes the student box with the
/// closest center (lowest index on ties).
inline std::vector<ProposalPair> proposal_match(std::span<const OrientedBox> teacher_boxes,
                                                std::span<const OrientedBox> student_boxes) {
  if (teacher_boxes.empty()) return {};
  if (student_boxes.empty()) throw NoCandidates("proposal_match: no student proposals to match against");
  std::vector<ProposalPair> out;
  out.reserve(teacher_boxes.size());
  for (std::size_t i = 0; i < teacher_boxes.size(); ++i) {
    std::size_t best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < student_boxes.size(); ++j) {
      const double dist = norm(teacher_boxes[i].center - student_boxes[j].center);
      if (dist < best_dist) {
        best_dist = dist;
        best = j;
      }
    }
    out.push_back({i, best});
  }
  return out;
}

struct ScoredBox {
  OrientedBox box;
  double score = 0.0;

  friend bool operator==(const ScoredBox&, const ScoredBox&) = default;
};

/// Greedy non-maximum suppression over yaw-0 boxes, descending score, ties
/// in input order. Boxes of different classes never suppress each other
/// when `per_class` is set.
inline std::vector<ScoredBox> nms(std::span<const ScoredBox> boxes, double iou_threshold, bool per_class = false) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) throw InvalidInput("nms threshold must be in (0, 1)");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (const ScoredBox& b : boxes) {
    if (!std::isfinite(b.score)) throw InvalidInput("nms: non-finite score");
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return boxes[a].score > boxes[b].score; });
  std::vector<ScoredBox> kept;
  for (std::size_t idx : order) {
    const ScoredBox& cand = boxes[idx];
    bool suppressed = false;
    for (const ScoredBox& k : kept) {
      if (per_class && k.box.class_id != cand.box.class_id) continue;
      if (aabb_iou(k.box, cand.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

/// Decodes every grid entry to a scored yaw-0 box (score = centerness times
/// the top class probability, class = argmax).
inline std::vector<ScoredBox> grid_to_boxes(const PredictionGrid& grid, const FilterConfig* filter = nullptr) {
  std::vector<ScoredBox> out;
  for (const auto& [key, pred] : grid.entries()) {
    if (filter != nullptr && !passes_filter(pred, *filter)) continue;
    const auto probs = softmax(pred.class_scores);
    const auto top = std::max_element(probs.begin(), probs.end());
    const int cls = top == probs.end() ? 0 : static_cast<int>(top - probs.begin());
    const double p = top == probs.end() ? 1.0 : *top;
    const BoxDeltas& d = pred.deltas;
    if (!(d[0] + d[1] > 0.0 && d[2] + d[3] > 0.0 && d[4] + d[5] > 0.0)) continue;
    out.push_back({decode_aabb(d, grid.anchor(key), cls), pred.centerness * p});
  }
  return out;
}

/// Keeps the `k` highest-scoring boxes (stable on ties), as detectors do
/// before NMS.
inline std::vector<ScoredBox> top_k(std::vector<ScoredBox> boxes, std::size_t k) {
  std::stable_sort(boxes.begin(), boxes.end(), [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
  if (boxes.size() > k) boxes.resize(k);
  return boxes;
}

}  // namespace dqs3d
