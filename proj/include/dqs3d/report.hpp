#pragma once

// Machine-readable outputs. Reals are printed with 9 significant digits.

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "dqs3d/matching.hpp"
#include "dqs3d/metrics.hpp"
#include "dqs3d/qec.hpp"
#include "dqs3d/scene_io.hpp"
#include "dqs3d/self_train.hpp"

namespace dqs3d {

inline std::string sig9(double v) {
  if (v == 0.0) return "0";  // folds -0
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// Round every real in a JSON tree to 9 significant digits.
inline json round_sig9(const json& j) {
  if (j.is_number_float()) {
    const double v = j.get<double>();
    return std::isfinite(v) ? json(std::stod(sig9(v))) : j;
  }
  if (j.is_array()) {
    json out = json::array();
    for (const json& e : j) out.push_back(round_sig9(e));
    return out;
  }
  if (j.is_object()) {
    json out = json::object();
    for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = round_sig9(it.value());
    return out;
  }
  return j;
}

inline void write_histogram_csv(std::ostream& out, const StatReport& r) {
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b < r.histogram.size(); ++b) {
    out << sig9(r.bin_width * static_cast<double>(b)) << ',' << sig9(r.bin_width * static_cast<double>(b + 1)) << ','
        << r.histogram[b] << '\n';
  }
}

inline json stat_report_json(const StatReport& r) {
  json nz = json::array();
  for (std::size_t c : r.nonzero_components) nz.push_back(c);
  return round_sig9({{"samples", r.samples},
                     {"zero_fraction", r.zero_fraction},
                     {"mean_norm", r.mean_norm},
                     {"max_norm", r.max_norm},
                     {"axis_aligned_fraction", r.axis_aligned_fraction},
                     {"in_range_fraction", r.in_range_fraction},
                     {"nonzero_components", nz},
                     {"norm_unit", "voxel_size"}});
}

inline json deltas_json(const BoxDeltas& d) {
  json a = json::array();
  for (double v : d.d) a.push_back(v);
  return a;
}

/// One JSON object per line: key, teacher/student deltas, teacher confidence.
inline void write_matches_jsonl(std::ostream& out, const MatchSet& m) {
  for (const MatchPair& p : m.pairs) {
    const json line = {{"key", {p.key.i, p.key.j, p.key.k}},
                       {"teacher_deltas", deltas_json(p.teacher.deltas)},
                       {"student_deltas", deltas_json(p.student.deltas)},
                       {"teacher_centerness", p.teacher.centerness},
                       {"teacher_class_confidence", max_softmax(p.teacher.class_scores)}};
    out << round_sig9(line).dump() << '\n';
  }
}

inline void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace) {
  // coverage is pooled over classes
  out << "step,sup_loss,cons_loss,warmup_weight,pairs_dense,pairs_proposal,coverage25,map25,map50\n";
  for (const TraceRow& r : trace) {
    out << r.step << ',' << sig9(r.sup_loss) << ',' << sig9(r.cons_loss) << ',' << sig9(r.warmup_weight) << ','
        << r.pairs_dense << ',' << r.pairs_proposal << ',' << sig9(r.coverage25) << ',' << sig9(r.map25) << ','
        << sig9(r.map50) << '\n';
  }
}

inline json metrics_json(const DetectionMetrics& m) {
  json out = json::object();
  out["coverage_kind"] = "pooled";
  for (const ThresholdMetrics& t : m.thresholds) {
    json per_class = json::object();
    for (const auto& [cls, ap] : t.ap_per_class) per_class[std::to_string(cls)] = ap;
    out["iou_" + sig9(t.iou_threshold)] = {{"coverage", t.coverage}, {"mAP", t.mean_ap}, {"ap_per_class", per_class}};
  }
  return round_sig9(out);
}

inline json params_json(const ModelParams& p) {
  json a = json::array();
  for (double v : p.values) a.push_back(v);
  return a;
}

/// {"scenes":[{"boxes":[{center,dims,yaw,class,score}]}]}
inline json predictions_json(const std::vector<std::vector<ScoredBox>>& preds) {
  json scenes = json::array();
  for (const auto& scene : preds) {
    json boxes = json::array();
    for (const ScoredBox& b : scene) {
      json jb = box_to_json(b.box);
      jb["score"] = b.score;
      boxes.push_back(std::move(jb));
    }
    scenes.push_back({{"boxes", std::move(boxes)}});
  }
  return {{"scenes", std::move(scenes)}};
}

inline std::vector<std::vector<ScoredBox>> predictions_from_json(const json& j, const std::string& source) {
  if (!j.is_object() || !j.contains("scenes") || !j["scenes"].is_array()) {
    throw ParseError(source, "expected an object with a \"scenes\" array");
  }
  std::vector<std::vector<ScoredBox>> out;
  for (std::size_t s = 0; s < j["scenes"].size(); ++s) {
    const json& scene = j["scenes"][s];
    const std::string where = source + ":scenes[" + std::to_string(s) + "]";
    if (!scene.is_object()) throw ParseError(where, "expected an object");
    std::vector<ScoredBox> boxes;
    if (scene.contains("boxes")) {
      if (!scene["boxes"].is_array()) throw ParseError(where + ".boxes", "expected an array");
      for (std::size_t i = 0; i < scene["boxes"].size(); ++i) {
        const std::string bw = where + ".boxes[" + std::to_string(i) + "]";
        const json& jb = scene["boxes"][i];
        ScoredBox sb{box_from_json(jb, bw), 1.0};
        if (jb.contains("score")) sb.score = detail::finite_number(jb["score"], bw + ".score");
        boxes.push_back(sb);
      }
    }
    out.push_back(std::move(boxes));
  }
  return out;
}

}  // namespace dqs3d
