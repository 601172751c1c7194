#include "maskveil/landmarks.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "maskveil/errors.hpp"

namespace maskveil {

const Point2& LandmarkSet::at(const std::string& label) const {
  const auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end()) throw DomainError("landmark '" + label + "' missing");
  return points[static_cast<std::size_t>(it - labels.begin())];
}

void LandmarkSet::validate() const {
  if (labels.size() != points.size()) throw DomainError("landmark labels/points length mismatch");
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    if (!(p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0)) {
      throw DomainError("landmark '" + labels[i] + "' outside [0,1]^2");
    }
  }
}

void FeatureLayout::validate() const {
  if (point_labels.empty()) throw DomainError("layout has no points");
  if (point_labels.size() > kMaxPoints) throw DomainError("layout exceeds 500 points");
  if (patch_size <= 0) throw DomainError("layout patch size must be positive");
  if (patch_channels != 1 && patch_channels != 3) throw DomainError("layout channels must be 1 or 3");
}

LandmarkSet select_landmarks(const LandmarkSet& all, const FeatureLayout& layout) {
  LandmarkSet out;
  out.labels = layout.point_labels;
  out.points.reserve(layout.point_labels.size());
  for (const auto& label : layout.point_labels) out.points.push_back(all.at(label));
  return out;
}

const std::vector<std::string>& face_labels() {
  static const std::vector<std::string> labels = {
      "brow_left",        "brow_right",        "eye_corner_left_outer", "eye_left",
      "eye_corner_left_inner", "eye_corner_right_inner", "eye_right",   "eye_corner_right_outer",
      "nose_bridge",      "nose_tip",          "nose_wing_left",        "nose_wing_right",
      "mouth_corner_left", "mouth_top",        "mouth_corner_right",    "mouth_bottom",
      "chin"};
  return labels;
}

FeatureLayout builtin_layout(int points) {
  FeatureLayout layout;
  layout.version_id = static_cast<std::uint16_t>(points);
  switch (points) {
    case 5:
      layout.point_labels = {"eye_left", "eye_right", "nose_tip", "mouth_corner_left",
                             "mouth_corner_right"};
      break;
    case 9:
      layout.point_labels = {"brow_left",   "brow_right", "eye_left",          "eye_right",
                             "nose_bridge", "nose_tip",   "mouth_corner_left", "mouth_corner_right",
                             "chin"};
      break;
    case 17:
      layout.point_labels = face_labels();
      break;
    default:
      throw DomainError("no built-in layout with " + std::to_string(points) + " points");
  }
  return layout;
}

AnnotationMap read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open landmarks file " + path.string());
  AnnotationMap out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string name, triple;
    ss >> name;
    LandmarkSet set;
    while (ss >> triple) {
      const auto a = triple.find(':');
      const auto b = triple.find(':', a == std::string::npos ? a : a + 1);
      if (a == std::string::npos || b == std::string::npos) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad triple '" +
                          triple + "'");
      }
      try {
        set.labels.push_back(triple.substr(0, a));
        set.points.push_back({std::stod(triple.substr(a + 1, b - a - 1)), std::stod(triple.substr(b + 1))});
      } catch (const std::logic_error&) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad number in '" +
                          triple + "'");
      }
    }
    try {
      set.validate();
    } catch (const DomainError& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    out[name] = std::move(set);
  }
  return out;
}

std::string format_annotation_line(const std::string& name, const LandmarkSet& set) {
  std::string line = name;
  char buf[64];
  for (std::size_t i = 0; i < set.size(); ++i) {
    std::snprintf(buf, sizeof buf, ":%.6f:%.6f", set.points[i].x, set.points[i].y);
    line += ' ';
    line += set.labels[i];
    line += buf;
  }
  return line;
}

void write_annotations(const AnnotationMap& annotations, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& [name, set] : annotations) out << format_annotation_line(name, set) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace maskveil
