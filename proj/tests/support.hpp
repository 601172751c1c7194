#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "maskveil/image.hpp"
#include "maskveil/landmarks.hpp"
#include "maskveil/mask_template.hpp"
#include "maskveil/recognizer.hpp"
#include "maskveil/rng.hpp"

namespace maskveil::testing {

inline PixelImage random_image(SplitMix64& rng, int w, int h, int ch) {
  PixelImage img(w, h, ch);
  for (auto& b : img.data()) b = static_cast<std::uint8_t>(rng.next() & 0xFF);
  return img;
}

inline std::vector<std::uint8_t> random_bytes(SplitMix64& rng, std::size_t n) {
  std::vector<std::uint8_t> out(n);
  for (auto& b : out) b = static_cast<std::uint8_t>(rng.next() & 0xFF);
  return out;
}

/// Up to `count` non-overlapping 4x4 regions placed by rejection sampling.
inline std::vector<Region> random_regions(SplitMix64& rng, int w, int h, std::size_t count) {
  std::vector<Region> out;
  for (std::size_t attempt = 0; out.size() < count && attempt < count * 50; ++attempt) {
    Region r{static_cast<int>(rng.uniform_int(0, w - kRegionSize)),
             static_cast<int>(rng.uniform_int(0, h - kRegionSize)), kRegionSize};
    bool clash = false;
    for (const auto& k : out) clash = clash || k.overlaps(r);
    if (!clash) out.push_back(r);
  }
  return out;
}

inline MaskTemplate template_from(std::vector<Region> regions, int w = kCanvasSize, int h = kCanvasSize,
                                  int ch = kCanvasChannels, std::uint16_t version = 9) {
  MaskTemplate t;
  t.source_versions = {version};
  t.canvas_width = w;
  t.canvas_height = h;
  t.channels = ch;
  t.priorities.assign(regions.size(), 1);
  t.regions = std::move(regions);
  return t;
}

/// Landmarks with the given labels at seeded positions away from the border.
inline LandmarkSet random_landmarks(SplitMix64& rng, const std::vector<std::string>& labels) {
  LandmarkSet s;
  s.labels = labels;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    s.points.push_back({0.1 + 0.8 * rng.uniform(), 0.1 + 0.8 * rng.uniform()});
  }
  return s;
}

/// A recognizer over `layout` with a seeded orthonormal basis and two
/// arbitrary centroids; enough to exercise the optimizer.
inline RecognizerModel random_model(SplitMix64& rng, const FeatureLayout& layout, Eigen::Index k) {
  const auto d = static_cast<Eigen::Index>(layout.feature_dim());
  Eigen::MatrixXd g(d, k);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.gaussian();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  RecognizerModel m;
  m.layout = layout;
  m.basis = qr.householderQ() * Eigen::MatrixXd::Identity(d, k);
  m.mean = Eigen::VectorXd::Constant(d, 0.5);
  m.tau = Eigen::VectorXd::Ones(k);
  m.identities = {"a", "b"};
  m.centroids = Eigen::MatrixXd::Zero(k, 2);
  m.centroids(0, 1) = 1.0;
  return m;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("maskveil_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace maskveil::testing
