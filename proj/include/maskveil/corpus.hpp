#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "maskveil/landmarks.hpp"
#include "maskveil/recognizer.hpp"

namespace maskveil {

struct SyntheticCorpusSpec {
  int identities = 20;
  int images_per_identity = 6;
  std::uint64_t seed = 2024;
};

/// Renders a deterministic corpus of cartoon faces: each identity has its
/// own geometry and palette, each image its own pose, lighting and sensor
/// noise. Landmarks are exact (rounded to 6 decimals as in annotation files).
/// Rendering uses only integer and IEEE add/multiply arithmetic so the bytes
/// are platform independent.
std::vector<LabeledImage> synthesize_corpus(const SyntheticCorpusSpec& spec);

/// Writes `<dir>/<identity>/<image>.png`, `<dir>/landmarks.txt` and
/// `<dir>/corpus_manifest.txt` (one `name = digest` line per image).
void write_corpus(const std::vector<LabeledImage>& corpus, const std::filesystem::path& dir);

/// Loads every PNG/PPM under `<dir>/<identity>/`, normalized to the canonical
/// canvas, paired with its annotation. Sorted by relative path.
std::vector<LabeledImage> load_corpus(const std::filesystem::path& dir,
                                      const std::filesystem::path& landmarks_file);

/// Lists image files under `<dir>/<identity>/` as sorted relative paths.
std::vector<std::string> list_corpus_images(const std::filesystem::path& dir);

}  // namespace maskveil
