#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "maskveil/image.hpp"
#include "maskveil/mask_template.hpp"
#include "maskveil/recognizer.hpp"
#include "maskveil/rng.hpp"

namespace maskveil {

enum class NoiseKind { kGaussian, kCorpus };

/// Where candidate pad bytes come from. Gaussian proposals are XOR pads
/// directly; corpus proposals are raw patch bytes that the optimizer turns
/// into pads which replace the region with the patch.
struct NoiseSource {
  NoiseKind kind = NoiseKind::kGaussian;
  double gaussian_sigma = 25.0 / 255.0;
  std::vector<std::uint8_t> bank;  // concatenated patches of patch_bytes each
  std::size_t patch_bytes = static_cast<std::size_t>(kRegionSize * kRegionSize * kCanvasChannels);
  std::uint64_t seed = 0;

  std::size_t bank_size() const { return patch_bytes ? bank.size() / patch_bytes : 0; }
  void validate() const;
};

/// Collects the 4x4 patches around every landmark of the reference images.
NoiseSource harvest_patch_bank(std::span<const LabeledImage> references, std::uint64_t seed);

/// Stateful proposal stream.
class NoiseSampler {
 public:
  explicit NoiseSampler(const NoiseSource& source);
  void fill(std::span<std::uint8_t> out);

 private:
  const NoiseSource& source_;
  SplitMix64 rng_;
};

/// `region_count` proposals of patch_bytes each, deterministic per seed.
std::vector<std::uint8_t> sample_noise(const NoiseSource& source, std::size_t region_count);

struct PerturbationConfig {
  double sigma = 0.05;
  int phase1_rounds = 750;
  int group_size = 5;
  int group_rounds = 50;
  std::size_t total_budget = 20000;
  std::uint64_t seed = 0;
  /// When non-empty, pad bytes are drawn only from these values.
  std::vector<std::uint8_t> pad_alphabet;

  void validate() const;
};

struct PerturbationResult {
  CloakKey key;
  double objective = 0.0;
  double dssim = 0.0;
  bool no_gain = true;
  std::size_t evaluations = 0;
  std::vector<double> trace;  // best feasible objective after each evaluation
};

/// Hill-climbs the XOR pad inside the template's regions, maximising the
/// worst-case (over targets) embedding displacement of the protected image
/// subject to dssim(original, protected) <= sigma. A proposal is kept only
/// when it strictly improves the objective and stays within budget.
PerturbationResult optimize_perturbation(const PixelImage& img, const LandmarkSet& landmarks,
                                         const MaskTemplate& mask,
                                         std::span<const RecognizerModel* const> targets,
                                         const PerturbationConfig& config,
                                         const NoiseSource& source);

/// Worst-case embedding displacement between two renderings of one face.
double embedding_displacement(const PixelImage& original, const PixelImage& perturbed,
                              const LandmarkSet& landmarks,
                              std::span<const RecognizerModel* const> targets);

PixelImage protect(const PixelImage& img, const CloakKey& key);
PixelImage restore(const PixelImage& protected_img, const CloakKey& key);

/// Counts samples that differ between two same-shaped images.
std::size_t count_differences(const PixelImage& a, const PixelImage& b);

/// True when every target misidentifies the image.
bool fools_all(const PixelImage& img, const LabeledImage& truth,
               std::span<const RecognizerModel* const> targets);

struct SigmaTuning {
  double sigma = 1.0;
  std::vector<std::pair<double, double>> trace;  // (sigma, F_c)
};

inline constexpr int kMaxBisectionSteps = 12;
inline constexpr double kSigmaTolerance = 0.005;

/// Finds (by bisection from sigma = 1) the smallest budget whose optimized
/// pads still reach `fc_target` on the sample. `templates` holds one
/// template shared by all images, or one per image.
SigmaTuning tune_sigma(std::span<const LabeledImage> samples,
                       std::span<const MaskTemplate> templates,
                       std::span<const RecognizerModel* const> targets, double fc_target,
                       const PerturbationConfig& config, const NoiseSource& source);

/// F_c of the sample when each image is protected under `sigma`.
double misclassification_at(std::span<const LabeledImage> samples,
                            std::span<const MaskTemplate> templates,
                            std::span<const RecognizerModel* const> targets, double sigma,
                            const PerturbationConfig& config, const NoiseSource& source);

}  // namespace maskveil
