#pragma once

// Toy per-voxel linear detector and the analytic gradient of the training
// objective
//
//   L = mean_labeled(supervised) + w(f) * mean_pairs(consistency)
//
// with respect to the student parameters. Teacher predictions enter only as
// constant targets.

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <vector>

#include "dqs3d/box_codec.hpp"
#include "dqs3d/error.hpp"
#include "dqs3d/losses.hpp"
#include "dqs3d/matching.hpp"
#include "dqs3d/parallel.hpp"
#include "dqs3d/voxel_geometry.hpp"

namespace dqs3d {

inline constexpr std::size_t kFeatureDim = 8;
using FeatureVector = std::array<double, kFeatureDim>;

struct FeatureGrid {
  explicit FeatureGrid(VoxelSize s) : voxel_size(s) {}

  VoxelSize voxel_size;
  std::map<VoxelKey, FeatureVector> entries;
};

/// Parameter layout: 8 box rows, 1 centerness row, n_classes class rows, each
/// of length kFeatureDim.
struct ModelShape {
  std::size_t n_classes = 3;

  std::size_t n_params() const { return kFeatureDim * (9 + n_classes); }
  static constexpr std::size_t box_row(std::size_t o) { return o * kFeatureDim; }
  static constexpr std::size_t center_row() { return 8 * kFeatureDim; }
  static constexpr std::size_t class_row(std::size_t c) { return (9 + c) * kFeatureDim; }
};

inline ModelParams init_params(const ModelShape& shape, std::uint64_t seed, double sigma = 0.01) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  ModelParams p;
  p.values.resize(shape.n_params());
  for (double& v : p.values) v = n(rng);
  return p;
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Raw linear head outputs for one voxel.
struct RawOutput {
  std::array<double, 8> box{};
  double center = 0.0;
  std::vector<double> logits;
};

inline RawOutput linear_heads(const ModelParams& params, const ModelShape& shape, const FeatureVector& f) {
  auto row = [&](std::size_t offset) {
    double s = 0.0;
    for (std::size_t i = 0; i < kFeatureDim; ++i) s += params.values[offset + i] * f[i];
    return s;
  };
  RawOutput out;
  for (std::size_t o = 0; o < 8; ++o) out.box[o] = row(ModelShape::box_row(o));
  out.center = row(ModelShape::center_row());
  out.logits.resize(shape.n_classes);
  for (std::size_t c = 0; c < shape.n_classes; ++c) out.logits[c] = row(ModelShape::class_row(c));
  return out;
}

inline Prediction head_to_prediction(const RawOutput& raw) {
  Prediction p;
  for (std::size_t o = 0; o < 6; ++o) p.deltas[o] = softplus(raw.box[o]);
  p.deltas[6] = raw.box[6];
  p.deltas[7] = raw.box[7];
  p.centerness = sigmoid(raw.center);
  p.class_scores = raw.logits;
  return p;
}

inline void check_params(const ModelParams& params, const ModelShape& shape) {
  if (params.size() != shape.n_params()) {
    throw InvalidInput("model parameters have size " + std::to_string(params.size()) + ", expected " +
                       std::to_string(shape.n_params()));
  }
}

inline PredictionGrid model_forward(const ModelParams& params, const ModelShape& shape, const FeatureGrid& features) {
  check_params(params, shape);
  PredictionGrid out(features.voxel_size);
  for (const auto& [key, f] : features.entries) out.insert(key, head_to_prediction(linear_heads(params, shape, f)));
  return out;
}

/// One scene's contribution to a training batch.
struct SceneBatch {
  FeatureGrid student_features;
  std::optional<LabelGrid> labels;                 // labeled scenes only
  std::optional<PredictionGrid> teacher_aligned;   // consistency target
};

struct LossAndGradient {
  double supervised = 0.0;
  double consistency = 0.0;  // warmup-scaled
  double warmup = 0.0;
  double total = 0.0;
  std::size_t pairs = 0;
  std::vector<double> gradient;
};

namespace detail {

// d IoU / d(lo, hi) of box p against fixed box g, axis-aligned.
struct IouGrad {
  double iou = 0.0;
  std::array<double, 3> d_lo{};
  std::array<double, 3> d_hi{};
};

inline IouGrad iou_interval_grad(const std::array<double, 3>& plo, const std::array<double, 3>& phi,
                                 const std::array<double, 3>& glo, const std::array<double, 3>& ghi) {
  IouGrad g;
  std::array<double, 3> ov{};
  std::array<double, 3> ext{};
  double inter = 1.0;
  double vp = 1.0;
  double vg = 1.0;
  for (std::size_t a = 0; a < 3; ++a) {
    ov[a] = std::min(phi[a], ghi[a]) - std::max(plo[a], glo[a]);
    ext[a] = phi[a] - plo[a];
    vp *= ext[a];
    vg *= ghi[a] - glo[a];
    if (ov[a] <= 0.0) return g;
    inter *= ov[a];
  }
  const double uni = vp + vg - inter;
  g.iou = inter / uni;
  for (std::size_t a = 0; a < 3; ++a) {
    const double others = inter / ov[a];
    const double di_dhi = phi[a] < ghi[a] ? others : 0.0;
    const double di_dlo = plo[a] > glo[a] ? -others : 0.0;
    const double dv = vp / ext[a];
    g.d_hi[a] = (di_dhi * uni - inter * (dv - di_dhi)) / (uni * uni);
    g.d_lo[a] = (di_dlo * uni - inter * (-dv - di_dlo)) / (uni * uni);
  }
  return g;
}

// Interval endpoints of decode_aabb as functions of the first six deltas:
// lo/hi[a] = anchor[a] + sum_j coef * d_j.
struct AabbJacobian {
  std::array<double, 3> lo{};
  std::array<double, 3> hi{};
  std::array<std::array<double, 6>, 3> dlo{};
  std::array<std::array<double, 6>, 3> dhi{};
};

inline AabbJacobian aabb_jacobian(const BoxDeltas& d, Point3 anchor) {
  const bool turned = d[7] * std::log((d[0] + d[1]) / (d[2] + d[3])) < 0.0;
  AabbJacobian j;
  for (std::size_t a = 0; a < 3; ++a) {
    std::array<double, 6> dc{};
    std::array<double, 6> de{};
    dc[2 * a] = 0.5;
    dc[2 * a + 1] = -0.5;
    std::size_t ext_axis = a;
    if (turned && a < 2) ext_axis = 1 - a;
    de[2 * ext_axis] = 1.0;
    de[2 * ext_axis + 1] = 1.0;
    const double c = anchor[static_cast<int>(a)] + 0.5 * (d[2 * a] - d[2 * a + 1]);
    const double e = d[2 * ext_axis] + d[2 * ext_axis + 1];
    j.lo[a] = c - 0.5 * e;
    j.hi[a] = c + 0.5 * e;
    for (std::size_t k = 0; k < 6; ++k) {
      j.dlo[a][k] = dc[k] - 0.5 * de[k];
      j.dhi[a][k] = dc[k] + 0.5 * de[k];
    }
  }
  return j;
}

inline void accumulate_row(std::vector<double>& grad, std::size_t offset, double g, const FeatureVector& f) {
  if (g == 0.0) return;
  for (std::size_t i = 0; i < kFeatureDim; ++i) grad[offset + i] += g * f[i];
}

// Gradient of -sum_i t_i log(max(p_i, eps)) w.r.t. the logits of p.
inline std::vector<double> floored_cross_entropy_grad(const std::vector<double>& target,
                                                      const std::vector<double>& probs) {
  double active_mass = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (target[i] != 0.0 && probs[i] >= kProbabilityFloor) active_mass += target[i];
  }
  std::vector<double> g(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j) {
    const double own = (target[j] != 0.0 && probs[j] >= kProbabilityFloor) ? target[j] : 0.0;
    g[j] = probs[j] * active_mass - own;
  }
  return g;
}

struct ScenePartial {
  double supervised = 0.0;
  std::vector<double> sup_grad;
  std::vector<double> pair_losses;  // unweighted by warmup, lambda-weighted
  std::vector<double> cons_grad;    // sum over pairs, not yet averaged
  std::size_t pairs = 0;
};

inline ScenePartial scene_partial(const ModelParams& params, const ModelShape& shape, const SceneBatch& scene,
                                  const LossConfig& lcfg, const FilterConfig& fcfg) {
  ScenePartial out;
  out.sup_grad.assign(params.size(), 0.0);
  out.cons_grad.assign(params.size(), 0.0);

  std::map<VoxelKey, RawOutput> raw;
  PredictionGrid student(scene.student_features.voxel_size);
  for (const auto& [key, f] : scene.student_features.entries) {
    raw.emplace(key, linear_heads(params, shape, f));
    student.insert(key, head_to_prediction(raw.at(key)));
  }

  if (scene.labels && !student.empty()) {
    const LabelGrid& labels = *scene.labels;
    const SupervisedTerms terms = supervised_terms(student, labels);
    out.supervised = terms.total;
    const double inv_n = 1.0 / static_cast<double>(student.size());
    for (const auto& [key, pred] : student.entries()) {
      const FeatureVector& f = scene.student_features.entries.at(key);
      const RawOutput& r = raw.at(key);
      const auto it = labels.find(key);
      if (it == labels.end()) {
        accumulate_row(out.sup_grad, ModelShape::center_row(), inv_n * pred.centerness, f);
        continue;
      }
      const VoxelLabel& label = it->second;
      const Point3 anchor = student.anchor(key);
      const AabbJacobian pj = aabb_jacobian(pred.deltas, anchor);
      const OrientedBox gt = decode_aabb(label.deltas, anchor);
      std::array<double, 3> glo{};
      std::array<double, 3> ghi{};
      for (int a = 0; a < 3; ++a) {
        glo[static_cast<std::size_t>(a)] = gt.center[a] - 0.5 * gt.dims[a];
        ghi[static_cast<std::size_t>(a)] = gt.center[a] + 0.5 * gt.dims[a];
      }
      const IouGrad ig = iou_interval_grad(pj.lo, pj.hi, glo, ghi);
      for (std::size_t k = 0; k < 6; ++k) {
        double d_iou = 0.0;
        for (std::size_t a = 0; a < 3; ++a) d_iou += ig.d_lo[a] * pj.dlo[a][k] + ig.d_hi[a] * pj.dhi[a][k];
        accumulate_row(out.sup_grad, ModelShape::box_row(k), -inv_n * d_iou * sigmoid(r.box[k]), f);
      }
      accumulate_row(out.sup_grad, ModelShape::center_row(), inv_n * (pred.centerness - label.centerness), f);
      const auto probs = softmax(pred.class_scores);
      std::vector<double> onehot(shape.n_classes, 0.0);
      onehot.at(static_cast<std::size_t>(label.class_id)) = 1.0;
      const auto g = floored_cross_entropy_grad(onehot, probs);
      for (std::size_t c = 0; c < shape.n_classes; ++c) {
        accumulate_row(out.sup_grad, ModelShape::class_row(c), inv_n * g[c], f);
      }
    }
  }

  if (scene.teacher_aligned) {
    const MatchSet matches = dense_match(*scene.teacher_aligned, student, fcfg);
    out.pairs = matches.size();
    for (const MatchPair& pair : matches.pairs) {
      out.pair_losses.push_back(consistency_pair_terms(pair, lcfg).total);
      const FeatureVector& f = scene.student_features.entries.at(pair.key);
      const RawOutput& r = raw.at(pair.key);
      for (std::size_t k = 0; k < 8; ++k) {
        double g = lcfg.lambda_box / 8.0 * huber_grad(pair.student.deltas[k] - pair.teacher.deltas[k], lcfg.tau_box);
        if (k < 6) g *= sigmoid(r.box[k]);
        accumulate_row(out.cons_grad, ModelShape::box_row(k), g, f);
      }
      const double c = pair.student.centerness;
      accumulate_row(out.cons_grad, ModelShape::center_row(),
                     lcfg.lambda_center * 2.0 * (c - pair.teacher.centerness) * c * (1.0 - c), f);
      const auto g = floored_cross_entropy_grad(softmax(pair.teacher.class_scores), softmax(pair.student.class_scores));
      for (std::size_t cls = 0; cls < shape.n_classes; ++cls) {
        accumulate_row(out.cons_grad, ModelShape::class_row(cls), lcfg.lambda_semantic * g[cls], f);
      }
    }
  }
  return out;
}

}  // namespace detail

/// Loss and analytic gradient for one batch. Per-scene partials are reduced
/// in scene order, so the result does not depend on `threads`.
inline LossAndGradient loss_and_gradient(const ModelParams& params, const ModelShape& shape,
                                         const std::vector<SceneBatch>& batch, const LossConfig& lcfg,
                                         const FilterConfig& fcfg, double step_fraction, unsigned threads = 1) {
  check_params(params, shape);
  lcfg.validate();
  std::vector<detail::ScenePartial> partials(batch.size());
  parallel_for(batch.size(), threads,
               [&](std::size_t i) { partials[i] = detail::scene_partial(params, shape, batch[i], lcfg, fcfg); });

  LossAndGradient out;
  out.gradient.assign(params.size(), 0.0);
  out.warmup = warmup_weight(step_fraction, lcfg.warmup_fraction);
  std::size_t n_labeled = 0;
  for (const SceneBatch& s : batch) n_labeled += s.labels.has_value() ? 1 : 0;
  std::vector<double> sup;
  std::vector<double> pair_losses;
  for (const detail::ScenePartial& p : partials) out.pairs += p.pairs;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const detail::ScenePartial& p = partials[i];
    if (batch[i].labels) {
      sup.push_back(p.supervised);
      const double w = 1.0 / static_cast<double>(n_labeled);
      for (std::size_t k = 0; k < params.size(); ++k) out.gradient[k] += w * p.sup_grad[k];
    }
    pair_losses.insert(pair_losses.end(), p.pair_losses.begin(), p.pair_losses.end());
  }
  if (n_labeled > 0) out.supervised = tree_sum(sup) / static_cast<double>(n_labeled);
  if (out.pairs > 0) {
    const double scale = out.warmup / static_cast<double>(out.pairs);
    out.consistency = scale * tree_sum(pair_losses);
    for (const detail::ScenePartial& p : partials) {
      for (std::size_t k = 0; k < params.size(); ++k) out.gradient[k] += scale * p.cons_grad[k];
    }
  }
  out.total = out.supervised + out.consistency;
  return out;
}

/// Analytic gradient of the batch objective w.r.t. the student parameters.
inline std::vector<double> gradient(const ModelParams& params, const ModelShape& shape,
                                    const std::vector<SceneBatch>& batch, const LossConfig& lcfg,
                                    const FilterConfig& fcfg, double step_fraction, unsigned threads = 1) {
  return loss_and_gradient(params, shape, batch, lcfg, fcfg, step_fraction, threads).gradient;
}

}  // namespace dqs3d
