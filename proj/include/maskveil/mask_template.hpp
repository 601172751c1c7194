#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "maskveil/image.hpp"
#include "maskveil/landmarks.hpp"

namespace maskveil {

// ---------------------------------------------------------------------------
// Multi-scale aggregation

/// A landmark set measured on a copy of the canvas scaled by `scale`; its
/// coordinates lie in [0, scale]^2.
struct ScaledLandmarks {
  double scale = 1.0;
  LandmarkSet set;
};

/// Per-label mean position across scales plus a spread figure (mean
/// Euclidean distance of each scale's position from the mean).
struct AggregatedDistribution {
  std::vector<std::string> labels;
  std::vector<Point2> means;
  std::vector<double> spreads;
  std::vector<std::string> warnings;

  bool consistent() const { return warnings.empty(); }
  LandmarkSet mean_set() const { return {labels, means}; }
};

inline constexpr double kDefaultScaleTolerance = 0.02;

AggregatedDistribution aggregate_scales(std::span<const ScaledLandmarks> sets,
                                        double tolerance = kDefaultScaleTolerance);

/// Aggregates one annotated landmark set observed at full and half scale.
AggregatedDistribution aggregate_single(const LandmarkSet& set);

// ---------------------------------------------------------------------------
// Feature-point regression

inline constexpr double kDefaultLambda = 0.1;

/// Independent ridge regressions, one per output coordinate. Column j of
/// `weights` minimises sum_i (t_ij - w_j . x_i)^2 + lambda |w_j|^2.
struct RegressionModel {
  std::uint16_t version_id = 0;
  std::vector<std::string> output_names;
  Eigen::MatrixXd weights;  // input_dim x outputs
  double lambda = kDefaultLambda;
  std::size_t training_count = 0;

  Eigen::VectorXd predict(const Eigen::VectorXd& input) const;
};

/// Rows of `inputs` are samples; rows of `targets` are their coordinates.
/// Throws SingularityError when lambda == 0 and the normal matrix is
/// rank deficient.
RegressionModel fit_feature_regression(const Eigen::MatrixXd& inputs,
                                       const Eigen::MatrixXd& targets, double lambda);

/// Sum of squared residuals for one output column.
double regression_loss(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets,
                       const Eigen::VectorXd& weights);

/// Regression input for a landmark distribution: flattened (x, y) per label in
/// canvas pixel units, followed by a constant 1 bias term.
Eigen::VectorXd regression_input(const LandmarkSet& distribution);

/// Fits the mapping from aggregated corpus landmarks to a recognizer
/// layout's feature-point coordinates (x then y per point).
RegressionModel fit_layout_regression(std::span<const LandmarkSet> annotations,
                                      const FeatureLayout& layout, double lambda = kDefaultLambda);

std::vector<std::uint8_t> serialize_regression(const RegressionModel& model);
RegressionModel deserialize_regression(std::span<const std::uint8_t> bytes);
void save_regression(const RegressionModel& model, const std::filesystem::path& path);
RegressionModel load_regression(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Templates

inline constexpr int kDefaultOffsetRadius = 2;
inline constexpr std::size_t kMaxRegionsPerSource = 500;
inline constexpr std::size_t kRecommendedMaxSources = 3;

struct MaskTemplate {
  std::vector<std::uint16_t> source_versions;
  int canvas_width = kCanvasSize;
  int canvas_height = kCanvasSize;
  int channels = kCanvasChannels;
  std::vector<Region> regions;
  std::vector<std::uint8_t> priorities;  // one per region, lower = stronger
  std::uint64_t offset_seed = 0;
  int offset_radius = kDefaultOffsetRadius;

  std::size_t payload_bytes_per_region() const {
    return static_cast<std::size_t>(kRegionSize * kRegionSize * channels);
  }
  /// Throws DomainError on out-of-canvas or overlapping regions.
  void validate() const;
};

/// Compares the fields persisted in key files (the offset seed and radius
/// are provenance and live in run manifests).
bool structurally_equal(const MaskTemplate& a, const MaskTemplate& b);

template <typename T>
struct WithWarnings {
  T value;
  std::vector<std::string> warnings;
};

/// Uniform integer offsets in [-radius, radius]^2, x then y per point.
std::vector<std::pair<int, int>> draw_offsets(std::uint64_t seed, int radius, std::size_t count);

WithWarnings<MaskTemplate> derive_template(const RegressionModel& reg, const FeatureLayout& layout,
                                           const AggregatedDistribution& phi,
                                           std::uint64_t offset_seed,
                                           int offset_radius = kDefaultOffsetRadius);

/// Union of regions; a region overlapping a region of a stronger (lower
/// rank) template is dropped. Equal ranks resolve by list order. Empty
/// `priorities` means list order.
WithWarnings<MaskTemplate> superpose(std::span<const MaskTemplate> templates,
                                     std::span<const int> priorities = {});

// ---------------------------------------------------------------------------
// Keys

/// A template together with the exact XOR bytes applied at each region.
struct CloakKey {
  MaskTemplate mask;
  std::vector<std::uint8_t> payloads;  // payload_bytes_per_region() per region
  double sigma_used = 0.0;
  std::vector<std::uint16_t> target_versions;

  void validate() const;
};

/// `MVK1` for templates, `MVK2` for keys; little-endian, CRC32 footer.
std::vector<std::uint8_t> serialize_template(const MaskTemplate& t);
std::vector<std::uint8_t> serialize_key(const CloakKey& k);
std::variant<MaskTemplate, CloakKey> deserialize_key_file(std::span<const std::uint8_t> bytes);

void save_template(const MaskTemplate& t, const std::filesystem::path& path);
void save_key(const CloakKey& k, const std::filesystem::path& path);
/// Accepts either container; a key's payload is discarded.
MaskTemplate load_template(const std::filesystem::path& path);
/// Requires an `MVK2` container.
CloakKey load_key(const std::filesystem::path& path);

}  // namespace maskveil
