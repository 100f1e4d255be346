#pragma once

// Mean-teacher self-training of the toy detector.
//
// Per step and scene: the teacher sees the raw cloud, the student an
// augmented copy (quarter turn + translation, with or without the
// compensation term). Teacher predictions are aligned into the student
// frame, densely matched and filtered, and the student takes one gradient
// step on supervised + consistency loss. The teacher then tracks the student
// by EMA.

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dqs3d/error.hpp"
#include "dqs3d/losses.hpp"
#include "dqs3d/matching.hpp"
#include "dqs3d/metrics.hpp"
#include "dqs3d/model.hpp"
#include "dqs3d/parallel.hpp"
#include "dqs3d/scene.hpp"

namespace dqs3d {

struct SelfTrainConfig {
  double voxel_size = 0.01;
  double translation_half_range = 0.5;
  std::size_t n_classes = 3;
  LossConfig loss;
  FilterConfig filter;
  double alpha = 0.999;
  double learning_rate = 0.5;
  std::size_t steps = 500;
  std::size_t batch_labeled = 2;
  std::size_t batch_unlabeled = 2;
  bool use_qec = true;
  bool consistency = true;  // false: supervised-only run
  std::uint64_t seed = 0;
  unsigned threads = 1;
  bool record_history = false;
  std::size_t eval_every = 10;
  std::size_t eval_scenes = 4;
  std::size_t pre_nms_top_k = 200;
  double nms_iou = 0.5;
};

struct TraceRow {
  std::size_t step = 0;
  double sup_loss = 0.0;
  double cons_loss = 0.0;
  double warmup_weight = 0.0;
  std::size_t pairs_dense = 0;
  std::size_t pairs_proposal = 0;
  double coverage25 = 0.0;
  double map25 = 0.0;
  double map50 = 0.0;
};

struct SelfTrainResult {
  ModelParams student;
  ModelParams teacher;
  ModelParams initial;
  std::vector<TraceRow> trace;
  std::vector<ModelParams> student_history;  // student fed to EMA at each step
  std::size_t qec_points_checked = 0;
};

/// Teacher pseudo-labels on raw scenes: filtered, top-k, NMS.
inline std::vector<std::vector<ScoredBox>> pseudo_labels(const ModelParams& params, const ModelShape& shape,
                                                        const std::vector<const Scene*>& scenes, VoxelSize s,
                                                        const SelfTrainConfig& cfg) {
  std::vector<std::vector<ScoredBox>> out(scenes.size());
  parallel_for(scenes.size(), cfg.threads, [&](std::size_t i) {
    const PredictionGrid pred = model_forward(params, shape, voxel_features(scenes[i]->points, s));
    out[i] = proposals(pred, &cfg.filter, cfg.pre_nms_top_k, cfg.nms_iou);
  });
  return out;
}

/// Mean absolute error of d1..d6 against ground truth over the labeled
/// voxels of each scene, no augmentation.
inline double box_regression_error(const ModelParams& params, const ModelShape& shape, const std::vector<Scene>& scenes,
                                   VoxelSize s) {
  std::vector<double> errors;
  for (const Scene& scene : scenes) {
    const FeatureGrid f = voxel_features(scene.points, s);
    const PredictionGrid pred = model_forward(params, shape, f);
    for (const auto& [key, label] : assign_labels(f, scene.boxes)) {
      const Prediction* p = pred.find(key);
      double e = 0.0;
      for (std::size_t k = 0; k < 6; ++k) e += std::abs(p->deltas[k] - label.deltas[k]);
      errors.push_back(e / 6.0);
    }
  }
  if (errors.empty()) throw UndefinedMetric("box_regression_error: no labeled voxels");
  return tree_sum(errors) / static_cast<double>(errors.size());
}

namespace detail {

struct TrainState {
  const std::vector<Scene>& scenes;
  const SelfTrainConfig& cfg;
  VoxelSize s;
  ModelShape shape;
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
  std::vector<const Scene*> eval_set;
  SelfTrainResult result;
  TraceRow last_eval;
};

inline void train_step(TrainState& st, std::size_t step) {
  const SelfTrainConfig& cfg = st.cfg;
  const VoxelSize s = st.s;
  SelfTrainResult& result = st.result;
  const double fraction = static_cast<double>(step) / static_cast<double>(cfg.steps);
  std::mt19937_64 rng(mix_seed(cfg.seed, step + 1));
  std::vector<std::size_t> picks;
  {
    std::uniform_int_distribution<std::size_t> pl(0, st.labeled.size() - 1);
    for (std::size_t b = 0; b < cfg.batch_labeled; ++b) picks.push_back(st.labeled[pl(rng)]);
    if (!st.unlabeled.empty()) {
      std::uniform_int_distribution<std::size_t> pu(0, st.unlabeled.size() - 1);
      for (std::size_t b = 0; b < cfg.batch_unlabeled; ++b) picks.push_back(st.unlabeled[pu(rng)]);
    }
  }
  std::vector<Transform> transforms;
  for (std::size_t b = 0; b < picks.size(); ++b) transforms.push_back(sample_transform(rng, cfg.translation_half_range));

  std::vector<SceneBatch> batch;
  batch.reserve(picks.size());
  for (std::size_t b = 0; b < picks.size(); ++b) batch.push_back(SceneBatch{FeatureGrid(s), std::nullopt, std::nullopt});
  parallel_for(picks.size(), cfg.threads, [&](std::size_t b) {
    const Scene& scene = st.scenes[picks[b]];
    const Transform& t = transforms[b];
    const Scene moved = transform_scene(scene, t, s, cfg.use_qec);
    if (step == 0 && cfg.use_qec) {
      for (std::size_t i = 0; i < scene.points.size(); ++i) {
        if (!(quantize(moved.points[i], s) == map_anchor(quantize(scene.points[i], s), t, s))) {
          std::ostringstream msg;
          msg << "student voxel of point " << i << " in scene " << picks[b] << " is not the mapped teacher anchor";
          throw Error(msg.str());
        }
      }
    }
    SceneBatch& sb = batch[b];
    sb.student_features = voxel_features(moved.points, s);
    if (scene.labeled) sb.labels = assign_labels(sb.student_features, moved.boxes);
    if (cfg.consistency) {
      const PredictionGrid teacher = model_forward(result.teacher, st.shape, voxel_features(scene.points, s));
      sb.teacher_aligned = align_teacher(teacher, t);
    }
  });
  if (step == 0 && cfg.use_qec) {
    for (std::size_t p : picks) result.qec_points_checked += st.scenes[p].points.size();
  }

  const LossAndGradient lg =
      loss_and_gradient(result.student, st.shape, batch, cfg.loss, cfg.filter, fraction, cfg.threads);
  if (!std::isfinite(lg.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << step << " (supervised " << lg.supervised << ", consistency "
        << lg.consistency << ")";
    throw Divergence(msg.str());
  }

  TraceRow row;
  row.step = step;
  row.sup_loss = lg.supervised;
  row.cons_loss = lg.consistency;
  row.warmup_weight = lg.warmup;
  row.pairs_dense = lg.pairs;
  if (cfg.consistency) {
    std::vector<std::size_t> counts(batch.size(), 0);
    parallel_for(batch.size(), cfg.threads, [&](std::size_t b) {
      const PredictionGrid student = model_forward(result.student, st.shape, batch[b].student_features);
      const auto tp = proposals(*batch[b].teacher_aligned, &cfg.filter, cfg.pre_nms_top_k, cfg.nms_iou);
      const auto sp = proposals(student, nullptr, cfg.pre_nms_top_k, cfg.nms_iou);
      counts[b] = (tp.empty() || sp.empty()) ? 0 : tp.size();
    });
    for (std::size_t c : counts) row.pairs_proposal += c;
  }

  for (std::size_t k = 0; k < result.student.size(); ++k) {
    result.student.values[k] -= cfg.learning_rate * lg.gradient[k];
    if (!std::isfinite(result.student.values[k])) {
      throw Divergence("non-finite parameter " + std::to_string(k) + " after step " + std::to_string(step));
    }
  }
  if (cfg.record_history) result.student_history.push_back(result.student);
  result.teacher = ema_update(result.teacher, result.student, cfg.alpha);

  if (!st.eval_set.empty() && (step % cfg.eval_every == 0 || step + 1 == cfg.steps)) {
    const auto preds = pseudo_labels(result.teacher, st.shape, st.eval_set, s, cfg);
    std::vector<std::vector<OrientedBox>> gt;
    for (const Scene* sc : st.eval_set) gt.push_back(sc->boxes);
    const DetectionMetrics m = evaluate(preds, gt, {0.25, 0.50});
    st.last_eval.coverage25 = m.at(0.25).coverage;
    st.last_eval.map25 = m.at(0.25).mean_ap;
    st.last_eval.map50 = m.at(0.50).mean_ap;
  }
  row.coverage25 = st.last_eval.coverage25;
  row.map25 = st.last_eval.map25;
  row.map50 = st.last_eval.map50;
  result.trace.push_back(row);
}

}  // namespace detail

inline SelfTrainResult self_train(const std::vector<Scene>& scenes, const SelfTrainConfig& cfg) {
  cfg.loss.validate();
  cfg.filter.validate();
  detail::TrainState st{scenes, cfg, VoxelSize(cfg.voxel_size), ModelShape{cfg.n_classes}, {}, {}, {}, {}, {}};
  for (std::size_t i = 0; i < scenes.size(); ++i) (scenes[i].labeled ? st.labeled : st.unlabeled).push_back(i);
  if (st.labeled.empty()) throw InvalidInput("self_train needs at least one labeled scene");
  if (cfg.steps == 0) throw InvalidInput("self_train needs at least one step");
  if (cfg.eval_every == 0) throw InvalidInput("eval_every must be >= 1");
  for (std::size_t i = 0; i < st.unlabeled.size() && st.eval_set.size() < cfg.eval_scenes; ++i) {
    if (!scenes[st.unlabeled[i]].boxes.empty()) st.eval_set.push_back(&scenes[st.unlabeled[i]]);
  }

  st.result.student = init_params(st.shape, mix_seed(cfg.seed, 0x1417));
  st.result.initial = st.result.student;
  st.result.teacher = st.result.student;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    try {
      detail::train_step(st, step);
    } catch (const InvalidDeltas& e) {
      // a collapsed box head decodes to empty boxes
      throw Divergence("degenerate predictions at step " + std::to_string(step) + ": " + e.what());
    }
  }
  return std::move(st.result);
}

}  // namespace dqs3d
