#pragma once

// Scene files.
//
// JSON schema:
//   { "points": [[x,y,z],...],
//     "boxes": [{"center":[x,y,z], "dims":[w,l,h], "yaw":0.0, "class":int}],
//     "labeled": bool }
// A missing "boxes" field is an unlabeled scene with no boxes; a missing
// "labeled" field defaults to whether boxes are present.
//
// Plain XYZ files hold one "x y z" triple per line (blank lines and lines
// starting with '#' are skipped); boxes come from an optional sidecar JSON
// with the "boxes"/"labeled" fields above.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "dqs3d/error.hpp"
#include "dqs3d/scene.hpp"
#include "json.hpp"

namespace dqs3d {

using json = nlohmann::json;

namespace detail {

inline double finite_number(const json& j, const std::string& where) {
  if (!j.is_number()) throw ParseError(where, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) throw ParseError(where, "non-finite value");
  return v;
}

inline Point3 triple(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3) throw ParseError(where, "expected an array of 3 numbers");
  return {finite_number(j[0], where + "[0]"), finite_number(j[1], where + "[1]"), finite_number(j[2], where + "[2]")};
}

inline std::string line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  std::size_t col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string(), "cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(source + ":" + line_col(text, e.byte == 0 ? 0 : e.byte - 1), e.what());
  }
}

}  // namespace detail

inline json box_to_json(const OrientedBox& b) {
  return {{"center", {b.center.x, b.center.y, b.center.z}},
          {"dims", {b.dims.x, b.dims.y, b.dims.z}},
          {"yaw", b.yaw},
          {"class", b.class_id}};
}

inline OrientedBox box_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) throw ParseError(where, "expected an object");
  OrientedBox b;
  if (!j.contains("center")) throw ParseError(where, "missing field \"center\"");
  if (!j.contains("dims")) throw ParseError(where, "missing field \"dims\"");
  b.center = detail::triple(j["center"], where + ".center");
  b.dims = detail::triple(j["dims"], where + ".dims");
  b.yaw = j.contains("yaw") ? detail::finite_number(j["yaw"], where + ".yaw") : 0.0;
  if (j.contains("class")) {
    if (!j["class"].is_number_integer()) throw ParseError(where + ".class", "expected an integer");
    b.class_id = j["class"].get<int>();
  }
  if (!(b.dims.x > 0.0 && b.dims.y > 0.0 && b.dims.z > 0.0)) throw ParseError(where + ".dims", "dims must be > 0");
  return b;
}

inline json scene_to_json(const Scene& scene) {
  json points = json::array();
  for (const Point3& p : scene.points) points.push_back({p.x, p.y, p.z});
  json boxes = json::array();
  for (const OrientedBox& b : scene.boxes) boxes.push_back(box_to_json(b));
  return {{"points", std::move(points)}, {"boxes", std::move(boxes)}, {"labeled", scene.labeled}};
}

namespace detail {

inline void read_boxes(const json& j, const std::string& source, Scene& scene) {
  bool has_boxes = false;
  if (j.contains("boxes")) {
    const json& boxes = j["boxes"];
    if (!boxes.is_array()) throw ParseError(source + ":boxes", "expected an array");
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      scene.boxes.push_back(box_from_json(boxes[i], source + ":boxes[" + std::to_string(i) + "]"));
    }
    has_boxes = true;
  }
  if (j.contains("labeled")) {
    if (!j["labeled"].is_boolean()) throw ParseError(source + ":labeled", "expected a boolean");
    scene.labeled = j["labeled"].get<bool>();
  } else {
    scene.labeled = has_boxes && !scene.boxes.empty();
  }
}

}  // namespace detail

inline Scene scene_from_json(const json& j, const std::string& source = "<scene>") {
  if (!j.is_object()) throw ParseError(source, "scene must be a JSON object");
  if (!j.contains("points")) throw ParseError(source, "missing field \"points\"");
  const json& points = j["points"];
  if (!points.is_array()) throw ParseError(source + ":points", "expected an array");
  Scene scene;
  scene.points.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    scene.points.push_back(detail::triple(points[i], source + ":points[" + std::to_string(i) + "]"));
  }
  if (scene.points.empty()) throw ParseError(source + ":points", "scene needs at least one point");
  detail::read_boxes(j, source, scene);
  return scene;
}

inline void save_scene(const std::filesystem::path& path, const Scene& scene) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << scene_to_json(scene).dump() << '\n';
}

/// XYZ points plus an optional sidecar with boxes.
inline Scene load_xyz(const std::filesystem::path& xyz, const std::filesystem::path& sidecar = {}) {
  const std::string text = detail::read_file(xyz);
  std::istringstream in(text);
  std::string line;
  Scene scene;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    std::array<std::string, 3> tok;
    std::string extra;
    const std::string where = xyz.string() + ":" + std::to_string(line_no);
    if (!(fields >> tok[0] >> tok[1] >> tok[2])) throw ParseError(where, "expected three coordinates");
    if (fields >> extra) throw ParseError(where, "more than three fields");
    Point3 p;
    for (int axis = 0; axis < 3; ++axis) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(tok[static_cast<std::size_t>(axis)], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok[static_cast<std::size_t>(axis)].size()) {
        throw ParseError(where + " field " + std::to_string(axis + 1), "not a number: " + tok[static_cast<std::size_t>(axis)]);
      }
      if (!std::isfinite(v)) throw ParseError(where + " field " + std::to_string(axis + 1), "non-finite value");
      p[axis] = v;
    }
    scene.points.push_back(p);
  }
  if (scene.points.empty()) throw ParseError(xyz.string(), "no points");
  scene.labeled = false;
  if (!sidecar.empty() && std::filesystem::exists(sidecar)) {
    const json j = detail::parse_json_text(detail::read_file(sidecar), sidecar.string());
    if (!j.is_object()) throw ParseError(sidecar.string(), "sidecar must be a JSON object");
    detail::read_boxes(j, sidecar.string(), scene);
  }
  return scene;
}

/// Dispatches on extension: ".xyz"/".txt" are point files (sidecar: same
/// path with ".json"), everything else is scene JSON.
inline Scene load_scene(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".xyz" || ext == ".txt") {
    std::filesystem::path sidecar = path;
    sidecar.replace_extension(".json");
    return load_xyz(path, sidecar);
  }
  const std::string text = detail::read_file(path);
  return scene_from_json(detail::parse_json_text(text, path.string()), path.string());
}

}  // namespace dqs3d
