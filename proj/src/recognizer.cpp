#include "maskveil/recognizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string_view>

#include "maskveil/binio.hpp"
#include "maskveil/errors.hpp"

namespace maskveil {

namespace {

constexpr double kSignTolerance = 1e-12;

void fix_sign(Eigen::Ref<Eigen::VectorXd> v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::abs(v[i]) > kSignTolerance) {
      if (v[i] < 0) v = -v;
      return;
    }
  }
}

}  // namespace

void RecognizerModel::validate() const {
  layout.validate();
  const auto d = static_cast<Eigen::Index>(layout.feature_dim());
  if (mean.size() != d || basis.rows() != d) throw DomainError("model: feature dimension mismatch");
  if (k() < 1 || k() > d) throw DomainError("model: invalid embedding dimension");
  if (tau.size() != k()) throw DomainError("model: tau length must equal k");
  if ((tau.array() <= 0.0).any()) throw DomainError("model: tau entries must be positive");
  if (identities.size() < 2) throw DomainError("model: at least two identities required");
  if (centroids.rows() != k() || centroids.cols() != static_cast<Eigen::Index>(identities.size())) {
    throw DomainError("model: centroid shape mismatch");
  }
}

Eigen::VectorXd extract_feature_vector(const PixelImage& img, const LandmarkSet& landmarks,
                                       const FeatureLayout& layout) {
  layout.validate();
  if (img.empty()) throw DomainError("extract_feature_vector: empty image");
  if (img.width() < layout.patch_size || img.height() < layout.patch_size) {
    throw DomainError("extract_feature_vector: image smaller than patch");
  }
  const int ps = layout.patch_size;
  const int pc = layout.patch_channels;
  Eigen::VectorXd out(static_cast<Eigen::Index>(layout.feature_dim()));
  Eigen::Index k = 0;
  for (const auto& label : layout.point_labels) {
    const Point2& p = landmarks.at(label);
    const int ox = patch_origin(p.x, img.width(), ps);
    const int oy = patch_origin(p.y, img.height(), ps);
    for (int y = oy; y < oy + ps; ++y) {
      for (int x = ox; x < ox + ps; ++x) {
        for (int c = 0; c < pc; ++c) {
          double v;
          if (img.channels() == pc) {
            v = img.at(x, y, c);
          } else if (pc == 3) {
            v = img.at(x, y, 0);
          } else {
            v = (img.at(x, y, 0) + img.at(x, y, 1) + img.at(x, y, 2)) / 3.0;
          }
          out[k++] = v / 255.0;
        }
      }
    }
  }
  return out;
}

PcaBasis fit_pca(const Eigen::MatrixXd& samples, Eigen::Index k) {
  const Eigen::Index n = samples.rows(), d = samples.cols();
  if (n < 1 || d < 1) throw DomainError("fit_pca: empty sample matrix");
  if (k < 1 || k > d) throw DomainError("fit_pca: k out of range");
  PcaBasis out;
  out.mean = samples.colwise().mean().transpose();
  const Eigen::MatrixXd centred = samples.rowwise() - out.mean.transpose();
  const Eigen::MatrixXd cov = (centred.transpose() * centred) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw SingularityError("fit_pca: eigen-decomposition failed");
  out.components.resize(d, k);
  out.variances.resize(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    const Eigen::Index src = d - 1 - j;  // eigenvalues ascend
    out.components.col(j) = solver.eigenvectors().col(src);
    out.variances[j] = std::max(0.0, solver.eigenvalues()[src]);
    fix_sign(out.components.col(j));
  }
  return out;
}

namespace {

std::vector<std::string> identity_names(std::span<const LabeledImage> dataset) {
  std::map<std::string, int> seen;
  for (const auto& s : dataset) seen[s.identity] = 0;
  std::vector<std::string> out;
  for (const auto& [name, _] : seen) out.push_back(name);
  return out;
}

Eigen::MatrixXd compute_centroids(const RecognizerModel& model,
                                  std::span<const LabeledImage> dataset,
                                  std::span<const std::size_t> train) {
  const auto n_ids = static_cast<Eigen::Index>(model.identities.size());
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(model.k(), n_ids);
  std::vector<int> counts(model.identities.size(), 0);
  for (auto i : train) {
    const auto it = std::lower_bound(model.identities.begin(), model.identities.end(),
                                     dataset[i].identity);
    const auto id = static_cast<std::size_t>(it - model.identities.begin());
    sums.col(static_cast<Eigen::Index>(id)) +=
        embed(model, dataset[i].image, dataset[i].landmarks);
    ++counts[id];
  }
  for (Eigen::Index j = 0; j < n_ids; ++j) {
    if (counts[static_cast<std::size_t>(j)] == 0) {
      throw DomainError("identity '" + model.identities[static_cast<std::size_t>(j)] +
                        "' has no training images");
    }
    sums.col(j) /= counts[static_cast<std::size_t>(j)];
  }
  return sums;
}

}  // namespace

DatasetSplit split_by_identity(std::span<const LabeledImage> dataset, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw DomainError("split fraction must be in (0, 1]");
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < dataset.size(); ++i) members[dataset[i].identity].push_back(i);
  DatasetSplit out;
  for (const auto& [name, idx] : members) {
    if (idx.size() < 2) throw DomainError("identity '" + name + "' has a single image");
    const auto n = static_cast<double>(idx.size());
    const auto n_train = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::floor(n * fraction + 1e-9)), 1, idx.size());
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.test.insert(out.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

TrainResult train_recognizer(std::span<const LabeledImage> dataset, const FeatureLayout& layout,
                             Eigen::Index k, double split_fraction, const Eigen::VectorXd& tau) {
  layout.validate();
  if (!(split_fraction > 0.0 && split_fraction <= 1.0)) {
    throw DomainError("train_recognizer: split fraction must be in (0, 1]");
  }
  TrainResult result;
  RecognizerModel& model = result.model;
  model.layout = layout;
  model.identities = identity_names(dataset);
  if (model.identities.size() < 2) throw DomainError("train_recognizer: need at least 2 identities");

  auto split = split_by_identity(dataset, split_fraction);
  result.train_indices = std::move(split.train);
  result.test_indices = std::move(split.test);

  const auto d = static_cast<Eigen::Index>(layout.feature_dim());
  const auto n_train = static_cast<Eigen::Index>(result.train_indices.size());
  if (k < 1 || k > std::min(d, n_train)) {
    throw DomainError("train_recognizer: k=" + std::to_string(k) + " exceeds min(d=" +
                      std::to_string(d) + ", training samples=" + std::to_string(n_train) + ")");
  }
  Eigen::MatrixXd features(n_train, d);
  for (Eigen::Index r = 0; r < n_train; ++r) {
    const auto& s = dataset[result.train_indices[static_cast<std::size_t>(r)]];
    features.row(r) = extract_feature_vector(s.image, s.landmarks, layout).transpose();
  }
  PcaBasis pca = fit_pca(features, k);
  model.mean = std::move(pca.mean);
  model.basis = std::move(pca.components);
  model.tau = tau.size() == 0 ? Eigen::VectorXd::Ones(k) : tau;
  if (model.tau.size() != k || (model.tau.array() <= 0.0).any()) {
    throw DomainError("train_recognizer: tau must have k strictly positive entries");
  }
  model.centroids = compute_centroids(model, dataset, result.train_indices);

  if (result.test_indices.empty()) {
    result.held_out_accuracy = std::numeric_limits<double>::quiet_NaN();
  } else {
    std::size_t correct = 0;
    for (auto i : result.test_indices) {
      const auto r = recognize(model, dataset[i].image, dataset[i].landmarks);
      if (model.identities[r.identity] == dataset[i].identity) ++correct;
    }
    result.held_out_accuracy =
        static_cast<double>(correct) / static_cast<double>(result.test_indices.size());
  }
  return result;
}

RecognizerModel with_tau(const RecognizerModel& model, std::span<const LabeledImage> dataset,
                         std::span<const std::size_t> train_indices, const Eigen::VectorXd& tau) {
  RecognizerModel out = model;
  out.tau = tau;
  if (tau.size() != model.k() || (tau.array() <= 0.0).any()) {
    throw DomainError("with_tau: tau must have k strictly positive entries");
  }
  out.centroids = compute_centroids(out, dataset, train_indices);
  return out;
}

Eigen::VectorXd embed_features(const RecognizerModel& model, const Eigen::VectorXd& features) {
  if (features.size() != model.dim()) throw DomainError("embed: feature dimension mismatch");
  return model.tau.cwiseProduct(model.basis.transpose() * (features - model.mean));
}

Eigen::VectorXd embed(const RecognizerModel& model, const PixelImage& img,
                      const LandmarkSet& landmarks) {
  return embed_features(model, extract_feature_vector(img, landmarks, model.layout));
}

Recognition classify_embedding(const RecognizerModel& model, const Eigen::VectorXd& embedding) {
  if (embedding.size() != model.k()) throw DomainError("recognize: embedding dimension mismatch");
  const auto n = model.centroids.cols();
  Eigen::VectorXd dist(n);
  for (Eigen::Index j = 0; j < n; ++j) dist[j] = (embedding - model.centroids.col(j)).norm();
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < n; ++j) {
    if (dist[j] < dist[best]) best = j;
  }
  // Softmax over negative distances, shifted by the minimum for stability.
  double denom = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) denom += std::exp(dist[best] - dist[j]);
  return {static_cast<std::size_t>(best), 1.0 / denom};
}

Recognition recognize(const RecognizerModel& model, const PixelImage& img,
                      const LandmarkSet& landmarks) {
  return classify_embedding(model, embed(model, img, landmarks));
}

std::vector<Point2> pca_project_embeddings(const Eigen::MatrixXd& embeddings) {
  if (embeddings.rows() < 3) throw DomainError("pca_project_2d: need at least 3 points");
  const Eigen::Index comps = std::min<Eigen::Index>(2, embeddings.cols());
  const PcaBasis pca = fit_pca(embeddings, comps);
  std::vector<Point2> out;
  out.reserve(static_cast<std::size_t>(embeddings.rows()));
  for (Eigen::Index r = 0; r < embeddings.rows(); ++r) {
    const Eigen::VectorXd c = embeddings.row(r).transpose() - pca.mean;
    out.push_back({pca.components.col(0).dot(c), comps > 1 ? pca.components.col(1).dot(c) : 0.0});
  }
  return out;
}

std::vector<Point2> pca_project_2d(const RecognizerModel& model,
                                   std::span<const ImageWithLandmarks> items) {
  if (items.size() < 3) throw DomainError("pca_project_2d: need at least 3 images");
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(items.size()), model.k());
  for (std::size_t i = 0; i < items.size(); ++i) {
    rows.row(static_cast<Eigen::Index>(i)) =
        embed(model, *items[i].image, *items[i].landmarks).transpose();
  }
  return pca_project_embeddings(rows);
}

std::vector<std::uint8_t> serialize_model(const RecognizerModel& model) {
  model.validate();
  binio::Writer w;
  w.header("MVM1");
  w.u16(model.layout.version_id);
  w.u8(static_cast<std::uint8_t>(model.layout.patch_size));
  w.u8(static_cast<std::uint8_t>(model.layout.patch_channels));
  w.u16(static_cast<std::uint16_t>(model.layout.point_labels.size()));
  for (const auto& l : model.layout.point_labels) w.str16(l);
  w.u32(static_cast<std::uint32_t>(model.dim()));
  w.u32(static_cast<std::uint32_t>(model.k()));
  for (Eigen::Index i = 0; i < model.dim(); ++i) w.f64(model.mean[i]);
  for (Eigen::Index j = 0; j < model.k(); ++j) {
    for (Eigen::Index i = 0; i < model.dim(); ++i) w.f64(model.basis(i, j));
  }
  for (Eigen::Index j = 0; j < model.k(); ++j) w.f64(model.tau[j]);
  w.u32(static_cast<std::uint32_t>(model.identities.size()));
  for (std::size_t c = 0; c < model.identities.size(); ++c) {
    w.str16(model.identities[c]);
    for (Eigen::Index j = 0; j < model.k(); ++j) {
      w.f64(model.centroids(j, static_cast<Eigen::Index>(c)));
    }
  }
  return w.finish();
}

RecognizerModel deserialize_model(std::span<const std::uint8_t> bytes) {
  static constexpr std::string_view kMagic[] = {"MVM1"};
  binio::Reader r(bytes, kMagic, "model file");
  RecognizerModel m;
  m.layout.version_id = r.u16();
  m.layout.patch_size = r.u8();
  m.layout.patch_channels = r.u8();
  const auto points = r.u16();
  for (int i = 0; i < points; ++i) m.layout.point_labels.push_back(r.str16());
  const auto d = static_cast<Eigen::Index>(r.u32());
  const auto k = static_cast<Eigen::Index>(r.u32());
  if (d != static_cast<Eigen::Index>(m.layout.feature_dim()) || k < 1 || k > d) {
    throw FormatError("model file: inconsistent dimensions");
  }
  m.mean.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) m.mean[i] = r.f64();
  m.basis.resize(d, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    for (Eigen::Index i = 0; i < d; ++i) m.basis(i, j) = r.f64();
  }
  m.tau.resize(k);
  for (Eigen::Index j = 0; j < k; ++j) m.tau[j] = r.f64();
  const auto ids = r.u32();
  if (ids > 1'000'000) throw FormatError("model file: implausible identity count");
  m.centroids.resize(k, static_cast<Eigen::Index>(ids));
  for (std::uint32_t c = 0; c < ids; ++c) {
    m.identities.push_back(r.str16());
    for (Eigen::Index j = 0; j < k; ++j) m.centroids(j, static_cast<Eigen::Index>(c)) = r.f64();
  }
  r.finish();
  try {
    m.validate();
  } catch (const DomainError& e) {
    throw FormatError(std::string("model file: ") + e.what());
  }
  return m;
}

void save_model(const RecognizerModel& model, const std::filesystem::path& path) {
  binio::write_file(path, serialize_model(model));
}

RecognizerModel load_model(const std::filesystem::path& path) {
  return deserialize_model(binio::read_file(path));
}

}  // namespace maskveil
