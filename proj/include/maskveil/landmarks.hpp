#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace maskveil {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

/// Labelled facial landmarks in normalized [0, 1]^2 canvas coordinates.
struct LandmarkSet {
  std::vector<std::string> labels;
  std::vector<Point2> points;

  std::size_t size() const { return points.size(); }
  /// Throws DomainError when the label is absent.
  const Point2& at(const std::string& label) const;
  /// Throws DomainError on length mismatch or out-of-range coordinates.
  void validate() const;

  friend bool operator==(const LandmarkSet&, const LandmarkSet&) = default;
};

/// Which landmarks a recognizer version reads, and how large its patches are.
struct FeatureLayout {
  std::uint16_t version_id = 0;
  std::vector<std::string> point_labels;
  int patch_size = 4;
  int patch_channels = 3;

  static constexpr std::size_t kMaxPoints = 500;

  std::size_t feature_dim() const {
    return point_labels.size() * static_cast<std::size_t>(patch_size * patch_size * patch_channels);
  }
  void validate() const;

  friend bool operator==(const FeatureLayout&, const FeatureLayout&) = default;
};

/// Selects the layout's points, in layout order, from a landmark set that
/// carries at least those labels.
LandmarkSet select_landmarks(const LandmarkSet& all, const FeatureLayout& layout);

/// The seventeen labels written by the synthetic corpus generator.
const std::vector<std::string>& face_labels();

/// Built-in recognizer layouts: 5, 9 and 17 points (version id = count).
FeatureLayout builtin_layout(int points);

/// Annotation file: one line per image, `<relative path> label:x:y ...`.
using AnnotationMap = std::map<std::string, LandmarkSet>;

AnnotationMap read_annotations(const std::filesystem::path& path);
void write_annotations(const AnnotationMap& annotations, const std::filesystem::path& path);
std::string format_annotation_line(const std::string& name, const LandmarkSet& set);

}  // namespace maskveil
