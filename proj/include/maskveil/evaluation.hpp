#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "maskveil/image.hpp"
#include "maskveil/recognizer.hpp"

namespace maskveil {

/// r_s = F_c / (1 + T_o - F_c).
double protection_rate(double t_o, double f_c);

struct TargetMetrics {
  std::uint16_t version_id = 0;
  double t_o = 0.0;               // originals correctly identified
  double f_c = 0.0;               // protected images misidentified
  double t_r = 0.0;               // mean confidence on restored images
  double restored_accuracy = 0.0;
  double r_s = 0.0;               // NaN when the rate is undefined
};

struct ImageRecord {
  std::string name;
  std::string identity;
  std::vector<std::string> original_prediction;   // per target
  std::vector<std::string> protected_prediction;
  std::vector<std::string> restored_prediction;
  std::vector<double> restored_confidence;
  double dssim = 0.0;
};

/// Per-target rates plus a worst-case aggregate in which an image counts as
/// recognized only if every target identifies it, and as protected only if
/// every target is fooled.
struct MetricsReport {
  std::vector<TargetMetrics> per_target;
  double t_o = 0.0;
  double f_c = 0.0;
  double t_r = 0.0;
  double restored_accuracy = 0.0;
  double r_s = 0.0;
  double mean_dssim = 0.0;
  double max_dssim = 0.0;
  std::vector<ImageRecord> records;

  std::string to_manifest() const;
  std::string records_csv() const;
};

MetricsReport evaluate_run(std::span<const RecognizerModel* const> targets,
                           std::span<const LabeledImage> originals,
                           std::span<const PixelImage> protected_images,
                           std::span<const PixelImage> restored_images);

/// Replaces each in-region sample with probability min(p / 255, 1) by a
/// uniform random byte. Draws are made for every sample regardless of p, so
/// a larger p replaces a superset of samples.
PixelImage baseline_pixel_confuse(const PixelImage& img, std::span<const Region> regions, double p,
                                  std::uint64_t seed);

inline constexpr double kTwistRadius = 48.0;

/// Radial pinch: pixels within `radius` of `center` (pixel coordinates) are
/// sampled from a point pressure * (1 - dist / radius) pixels closer to the
/// centre, with bilinear interpolation.
PixelImage baseline_twist(const PixelImage& img, Point2 center, double pressure,
                          double radius = kTwistRadius);

struct ScatterPoint {
  double x = 0.0;
  double y = 0.0;
  std::string tag;
  friend bool operator==(const ScatterPoint&, const ScatterPoint&) = default;
};

void export_scatter(std::span<const ScatterPoint> points, const std::filesystem::path& path);
std::vector<ScatterPoint> read_scatter(const std::filesystem::path& path);

}  // namespace maskveil
