#pragma once

// Coverage and mean average precision over a set of scenes.

#include <algorithm>
#include <map>
#include <numeric>
#include <vector>

#include "dqs3d/box_codec.hpp"
#include "dqs3d/error.hpp"
#include "dqs3d/matching.hpp"

namespace dqs3d {

struct ThresholdMetrics {
  double iou_threshold = 0.0;
  double coverage = 0.0;  // pooled over classes
  double mean_ap = 0.0;
  std::map<int, double> ap_per_class;
};

struct DetectionMetrics {
  std::vector<ThresholdMetrics> thresholds;

  const ThresholdMetrics& at(double iou) const {
    for (const ThresholdMetrics& t : thresholds) {
      if (t.iou_threshold == iou) return t;
    }
    throw InvalidInput("no metrics computed at the requested IoU threshold");
  }
};

/// Area under the precision envelope (all-point interpolation).
inline double average_precision(const std::vector<double>& recall, const std::vector<double>& precision) {
  std::vector<double> mrec{0.0};
  std::vector<double> mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  return ap;
}

namespace detail {

inline double class_ap(const std::vector<std::vector<ScoredBox>>& predictions,
                       const std::vector<std::vector<OrientedBox>>& gt, int cls, double threshold) {
  struct Ranked {
    double score;
    std::size_t scene;
    std::size_t index;
  };
  std::vector<Ranked> ranked;
  std::size_t n_gt = 0;
  for (std::size_t s = 0; s < gt.size(); ++s) {
    for (const OrientedBox& g : gt[s]) n_gt += g.class_id == cls ? 1 : 0;
    for (std::size_t i = 0; i < predictions[s].size(); ++i) {
      if (predictions[s][i].box.class_id == cls) ranked.push_back({predictions[s][i].score, s, i});
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  std::vector<std::vector<bool>> taken(gt.size());
  for (std::size_t s = 0; s < gt.size(); ++s) taken[s].assign(gt[s].size(), false);
  std::vector<double> recall, precision;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const Ranked& cand = ranked[r];
    const OrientedBox& box = predictions[cand.scene][cand.index].box;
    double best = 0.0;
    std::size_t best_idx = 0;
    bool found = false;
    for (std::size_t g = 0; g < gt[cand.scene].size(); ++g) {
      if (gt[cand.scene][g].class_id != cls) continue;
      const double iou = aabb_iou(box, gt[cand.scene][g]);
      if (!found || iou > best) {
        best = iou;
        best_idx = g;
        found = true;
      }
    }
    if (found && best >= threshold && !taken[cand.scene][best_idx]) {
      taken[cand.scene][best_idx] = true;
      ++tp;
    }
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
  }
  return average_precision(recall, precision);
}

}  // namespace detail

/// Per-class AP (greedy matching in descending score order, each ground
/// truth matched at most once) averaged over classes present in the ground
/// truth, and coverage: the fraction of ground-truth boxes with a prediction
/// of the same class at IoU >= threshold. Boxes must have yaw 0.
inline DetectionMetrics evaluate(const std::vector<std::vector<ScoredBox>>& predictions,
                                 const std::vector<std::vector<OrientedBox>>& gt,
                                 const std::vector<double>& iou_thresholds = {0.25, 0.50}) {
  if (predictions.size() != gt.size()) throw InvalidInput("evaluate: predictions and ground truth cover different scene counts");
  std::map<int, std::size_t> classes;
  std::size_t n_gt = 0;
  for (const auto& scene : gt) {
    for (const OrientedBox& g : scene) {
      ++classes[g.class_id];
      ++n_gt;
    }
  }
  if (n_gt == 0) throw UndefinedMetric("evaluate: no ground-truth boxes");

  DetectionMetrics out;
  for (double threshold : iou_thresholds) {
    ThresholdMetrics m;
    m.iou_threshold = threshold;
    std::size_t covered = 0;
    for (std::size_t s = 0; s < gt.size(); ++s) {
      for (const OrientedBox& g : gt[s]) {
        const bool hit = std::any_of(predictions[s].begin(), predictions[s].end(), [&](const ScoredBox& p) {
          return p.box.class_id == g.class_id && aabb_iou(p.box, g) >= threshold;
        });
        covered += hit ? 1 : 0;
      }
    }
    m.coverage = static_cast<double>(covered) / static_cast<double>(n_gt);
    double sum = 0.0;
    for (const auto& [cls, count] : classes) {
      const double ap = detail::class_ap(predictions, gt, cls, threshold);
      m.ap_per_class[cls] = ap;
      sum += ap;
    }
    m.mean_ap = sum / static_cast<double>(classes.size());
    out.thresholds.push_back(std::move(m));
  }
  return out;
}

}  // namespace dqs3d
