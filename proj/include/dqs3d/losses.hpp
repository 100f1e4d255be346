#pragma once

// Consistency and supervised losses, warmup ramp and EMA teacher update.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <vector>

#include "dqs3d/box_codec.hpp"
#include "dqs3d/error.hpp"
#include "dqs3d/matching.hpp"
#include "dqs3d/parallel.hpp"

namespace dqs3d {

struct LossConfig {
  double tau_box = 0.30;
  double lambda_box = 1.00;
  double lambda_center = 0.25;
  double lambda_semantic = 0.50;
  double warmup_fraction = 0.30;

  void validate() const {
    if (!(tau_box > 0.0)) throw InvalidInput("tau_box must be > 0");
    if (lambda_box < 0.0 || lambda_center < 0.0 || lambda_semantic < 0.0) {
      throw InvalidInput("loss weights must be >= 0");
    }
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw InvalidInput("warmup_fraction must be in [0, 1]");
  }
};

inline constexpr double kProbabilityFloor = 1e-8;

inline double huber(double x, double tau) {
  const double a = std::abs(x);
  return a < tau ? 0.5 * x * x : tau * (a - 0.5 * tau);
}

/// d huber / dx.
inline double huber_grad(double x, double tau) { return std::clamp(x, -tau, tau); }

/// Mean of the per-component Huber penalties over the 8 box parameters.
inline double huber_box_loss(std::span<const double, 8> delta_diff, double tau_box) {
  if (!(tau_box > 0.0)) throw InvalidInput("tau_box must be > 0");
  double sum = 0.0;
  for (double x : delta_diff) sum += huber(x, tau_box);
  return sum / 8.0;
}

inline double centerness_loss(double c, double c_tilde) {
  const double d = c - c_tilde;
  return d * d;
}

/// KL(target || pred) with a probability floor inside the logarithm.
inline double semantic_loss(std::span<const double> target_probs, std::span<const double> pred_probs) {
  if (target_probs.size() != pred_probs.size()) throw InvalidInput("semantic_loss: size mismatch");
  double sum_t = 0.0;
  double sum_p = 0.0;
  for (std::size_t i = 0; i < target_probs.size(); ++i) {
    if (target_probs[i] < 0.0 || pred_probs[i] < 0.0) throw InvalidInput("semantic_loss: negative probability");
    sum_t += target_probs[i];
    sum_p += pred_probs[i];
  }
  if (std::abs(sum_t - 1.0) > 1e-6 || std::abs(sum_p - 1.0) > 1e-6) {
    throw InvalidInput("semantic_loss: inputs must sum to 1");
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < target_probs.size(); ++i) {
    const double t = target_probs[i];
    if (t == 0.0) continue;
    kl += t * (std::log(std::max(t, kProbabilityFloor)) - std::log(std::max(pred_probs[i], kProbabilityFloor)));
  }
  return std::max(kl, 0.0);
}

/// Consistency weight at training progress f in [0, 1]: a Gaussian ramp
/// exp(-5 (1 - x)^2), x = min(f / warmup, 1), shifted and rescaled so that it
/// is exactly 0 at f = 0 and exactly 1 once x reaches 1.
inline double warmup_weight(double step_fraction, double warmup_fraction) {
  if (warmup_fraction <= 0.0) return 1.0;
  const double x = std::clamp(step_fraction / warmup_fraction, 0.0, 1.0);
  if (x >= 1.0) return 1.0;
  const double floor = std::exp(-5.0);
  const double phase = 1.0 - x;
  return (std::exp(-5.0 * phase * phase) - floor) / (1.0 - floor);
}

struct ConsistencyTerms {
  double box = 0.0;
  double center = 0.0;
  double semantic = 0.0;
  double total = 0.0;  // weighted, warmup-scaled, averaged over pairs
};

inline ConsistencyTerms consistency_pair_terms(const MatchPair& pair, const LossConfig& cfg) {
  std::array<double, 8> diff{};
  for (std::size_t i = 0; i < 8; ++i) diff[i] = pair.student.deltas[i] - pair.teacher.deltas[i];
  ConsistencyTerms t;
  t.box = huber_box_loss(diff, cfg.tau_box);
  t.center = centerness_loss(pair.student.centerness, pair.teacher.centerness);
  t.semantic = semantic_loss(softmax(pair.teacher.class_scores), softmax(pair.student.class_scores));
  t.total = cfg.lambda_box * t.box + cfg.lambda_center * t.center + cfg.lambda_semantic * t.semantic;
  return t;
}

/// Weighted consistency loss averaged over pairs and scaled by the warmup
/// ramp. Teacher entries are constants.
inline ConsistencyTerms consistency_terms(const MatchSet& m, const LossConfig& cfg, double step_fraction) {
  cfg.validate();
  if (!(step_fraction >= 0.0 && step_fraction <= 1.0)) throw InvalidInput("step_fraction must be in [0, 1]");
  ConsistencyTerms out;
  if (m.empty()) return out;
  std::vector<double> box;
  std::vector<double> center;
  std::vector<double> semantic;
  // Sorting the per-pair terms by key makes the reduction independent of
  // pair order.
  std::vector<const MatchPair*> ordered;
  ordered.reserve(m.size());
  for (const MatchPair& p : m.pairs) ordered.push_back(&p);
  std::stable_sort(ordered.begin(), ordered.end(), [](const MatchPair* a, const MatchPair* b) { return a->key < b->key; });
  for (const MatchPair* p : ordered) {
    const ConsistencyTerms t = consistency_pair_terms(*p, cfg);
    box.push_back(t.box);
    center.push_back(t.center);
    semantic.push_back(t.semantic);
  }
  const auto n = static_cast<double>(m.size());
  out.box = tree_sum(box) / n;
  out.center = tree_sum(center) / n;
  out.semantic = tree_sum(semantic) / n;
  out.total = warmup_weight(step_fraction, cfg.warmup_fraction) *
              (cfg.lambda_box * out.box + cfg.lambda_center * out.center + cfg.lambda_semantic * out.semantic);
  return out;
}

inline double consistency_loss(const MatchSet& m, const LossConfig& cfg, double step_fraction) {
  return consistency_terms(m, cfg, step_fraction).total;
}

/// Centerness target of an anchor given its ground-truth deltas. With the
/// per-axis normalized offset u_a = (d+ - d-) / (d+ + d-) and
/// r2 = sum_a u_a^2, the target is exp(-max(0, r2 - 1) / 2): 1 inside the
/// inscribed ellipsoid, exp(-1) at the box corners.
inline double centerness_target(const BoxDeltas& gt) {
  double r2 = 0.0;
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const double pos = gt[2 * axis];
    const double neg = gt[2 * axis + 1];
    const double u = (pos - neg) / (pos + neg);
    r2 += u * u;
  }
  return std::exp(-0.5 * std::max(0.0, r2 - 1.0));
}

/// Ground truth attached to one student voxel.
struct VoxelLabel {
  BoxDeltas deltas;  // encode(gt box, anchor)
  double centerness = 1.0;
  int class_id = 0;
};

/// Voxel keys carrying a label; every other occupied voxel is background.
using LabelGrid = std::map<VoxelKey, VoxelLabel>;

/// Binary KL between target c* and prediction c: zero iff c == c*.
inline double binary_kl(double target, double c) {
  if (c == target) return 0.0;
  const double p = std::clamp(c, kProbabilityFloor, 1.0 - kProbabilityFloor);
  auto term = [](double a, double b) { return a <= 0.0 ? 0.0 : a * std::log(a / b); };
  return std::max(0.0, term(target, p) + term(1.0 - target, 1.0 - p));
}

struct SupervisedTerms {
  double iou = 0.0;
  double center = 0.0;
  double semantic = 0.0;
  double background = 0.0;
  double total = 0.0;
};

/// Per-voxel supervised terms for a labeled voxel.
inline SupervisedTerms supervised_voxel_terms(const Prediction& pred, const VoxelLabel& label, Point3 anchor) {
  SupervisedTerms t;
  t.iou = 1.0 - aabb_iou(decode_aabb(pred.deltas, anchor), decode_aabb(label.deltas, anchor));
  t.center = binary_kl(label.centerness, pred.centerness);
  if (!pred.class_scores.empty()) {
    const auto probs = softmax(pred.class_scores);
    t.semantic = -std::log(std::max(probs.at(static_cast<std::size_t>(label.class_id)), kProbabilityFloor));
  }
  t.total = t.iou + t.center + t.semantic;
  return t;
}

/// Supervised loss averaged over the occupied voxels of the student grid:
/// 1 - IoU of the decoded boxes, binary KL on centerness and cross entropy
/// on classes for labeled voxels; background voxels contribute a binary KL
/// pushing centerness towards 0.
inline SupervisedTerms supervised_terms(const PredictionGrid& student, const LabelGrid& labels) {
  SupervisedTerms out;
  if (student.empty()) return out;
  std::vector<double> iou, center, semantic, background;
  for (const auto& [key, pred] : student.entries()) {
    const auto it = labels.find(key);
    if (it == labels.end()) {
      background.push_back(binary_kl(0.0, pred.centerness));
      continue;
    }
    const SupervisedTerms t = supervised_voxel_terms(pred, it->second, student.anchor(key));
    iou.push_back(t.iou);
    center.push_back(t.center);
    semantic.push_back(t.semantic);
  }
  const auto n = static_cast<double>(student.size());
  out.iou = tree_sum(iou) / n;
  out.center = tree_sum(center) / n;
  out.semantic = tree_sum(semantic) / n;
  out.background = tree_sum(background) / n;
  out.total = out.iou + out.center + out.semantic + out.background;
  return out;
}

inline double supervised_loss(const PredictionGrid& student, const LabelGrid& labels) {
  return supervised_terms(student, labels).total;
}

/// Flat parameter vector of the toy detector.
struct ModelParams {
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// teacher <- alpha * teacher + (1 - alpha) * student.
inline ModelParams ema_update(const ModelParams& teacher, const ModelParams& student, double alpha) {
  if (teacher.size() != student.size()) throw InvalidInput("ema_update: parameter size mismatch");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidInput("ema_update: alpha must be in [0, 1]");
  ModelParams out;
  out.values.resize(teacher.size());
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    out.values[i] = alpha * teacher.values[i] + (1.0 - alpha) * student.values[i];
  }
  return out;
}

}  // namespace dqs3d
