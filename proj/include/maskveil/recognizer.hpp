#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "maskveil/image.hpp"
#include "maskveil/landmarks.hpp"

namespace maskveil {

/// One image of a labelled corpus.
struct LabeledImage {
  std::string name;      // path relative to the corpus root
  std::string identity;  // corpus directory name
  PixelImage image;
  LandmarkSet landmarks;
};

/// Eigen-projection recognizer: landmark patches -> centred projection onto
/// an orthonormal basis -> per-dimension tau scaling -> nearest centroid.
struct RecognizerModel {
  FeatureLayout layout;
  Eigen::VectorXd mean;       // d
  Eigen::MatrixXd basis;      // d x k, orthonormal columns
  Eigen::VectorXd tau;        // k, diagonal of the adaptation matrix
  std::vector<std::string> identities;
  Eigen::MatrixXd centroids;  // k x identities

  Eigen::Index dim() const { return mean.size(); }
  Eigen::Index k() const { return basis.cols(); }
  void validate() const;
};

/// Reads the layout's patches around each landmark, scaled to [0, 1] and
/// concatenated in layout order (row-major, channels interleaved).
Eigen::VectorXd extract_feature_vector(const PixelImage& img, const LandmarkSet& landmarks,
                                       const FeatureLayout& layout);

struct PcaBasis {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // columns sorted by decreasing variance
  Eigen::VectorXd variances;
};

/// Top-k principal components of the rows of `samples`. Each component's
/// first non-negligible entry is made positive.
PcaBasis fit_pca(const Eigen::MatrixXd& samples, Eigen::Index k);

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Per identity (in dataset order), the first floor(n * fraction) images,
/// at least one, go to training and the rest are held out.
DatasetSplit split_by_identity(std::span<const LabeledImage> dataset, double fraction);

struct TrainResult {
  RecognizerModel model;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
  double held_out_accuracy = 0.0;  // NaN when nothing is held out
};

/// Per identity, the first floor(n * split_fraction) images (at least one)
/// train the model and the remainder are held out for accuracy.
TrainResult train_recognizer(std::span<const LabeledImage> dataset, const FeatureLayout& layout,
                             Eigen::Index k, double split_fraction = 0.75,
                             const Eigen::VectorXd& tau = {});

/// Recomputes centroids from training images under a new tau.
RecognizerModel with_tau(const RecognizerModel& model, std::span<const LabeledImage> dataset,
                         std::span<const std::size_t> train_indices, const Eigen::VectorXd& tau);

Eigen::VectorXd embed_features(const RecognizerModel& model, const Eigen::VectorXd& features);
Eigen::VectorXd embed(const RecognizerModel& model, const PixelImage& img,
                      const LandmarkSet& landmarks);

struct Recognition {
  std::size_t identity = 0;
  double confidence = 0.0;
};

Recognition classify_embedding(const RecognizerModel& model, const Eigen::VectorXd& embedding);
Recognition recognize(const RecognizerModel& model, const PixelImage& img,
                      const LandmarkSet& landmarks);

/// Projects points (rows) onto their own top-2 principal components.
std::vector<Point2> pca_project_embeddings(const Eigen::MatrixXd& embeddings);

struct ImageWithLandmarks {
  const PixelImage* image;
  const LandmarkSet* landmarks;
};

std::vector<Point2> pca_project_2d(const RecognizerModel& model,
                                   std::span<const ImageWithLandmarks> items);

/// Model file: `MVM1` container (u16 version, fields, CRC32 footer).
std::vector<std::uint8_t> serialize_model(const RecognizerModel& model);
RecognizerModel deserialize_model(std::span<const std::uint8_t> bytes);
void save_model(const RecognizerModel& model, const std::filesystem::path& path);
RecognizerModel load_model(const std::filesystem::path& path);

}  // namespace maskveil
