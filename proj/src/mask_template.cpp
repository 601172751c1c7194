#include "maskveil/mask_template.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string_view>

#include "maskveil/binio.hpp"
#include "maskveil/errors.hpp"
#include "maskveil/rng.hpp"

namespace maskveil {

AggregatedDistribution aggregate_scales(std::span<const ScaledLandmarks> sets, double tolerance) {
  if (sets.empty()) throw DomainError("aggregate_scales: no landmark sets");
  const auto& schema = sets.front().set.labels;
  for (const auto& s : sets) {
    if (s.set.labels != schema) throw DomainError("aggregate_scales: label schemas differ");
    if (s.set.points.size() != schema.size()) throw DomainError("aggregate_scales: ragged set");
    if (!(s.scale > 0.0)) throw DomainError("aggregate_scales: scale must be positive");
  }
  AggregatedDistribution out;
  out.labels = schema;
  out.means.assign(schema.size(), {});
  out.spreads.assign(schema.size(), 0.0);
  const auto n = static_cast<double>(sets.size());
  for (std::size_t i = 0; i < schema.size(); ++i) {
    Point2 sum;
    for (const auto& s : sets) {
      sum.x += s.set.points[i].x / s.scale;
      sum.y += s.set.points[i].y / s.scale;
    }
    const Point2 mean{sum.x / n, sum.y / n};
    double spread = 0.0;
    for (const auto& s : sets) {
      spread += std::hypot(s.set.points[i].x / s.scale - mean.x, s.set.points[i].y / s.scale - mean.y);
    }
    out.means[i] = mean;
    out.spreads[i] = spread / n;
    if (out.spreads[i] > tolerance) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "scale inconsistency: '%s' spreads %.4f (> %.4f)",
                    schema[i].c_str(), out.spreads[i], tolerance);
      out.warnings.emplace_back(buf);
    }
  }
  return out;
}

AggregatedDistribution aggregate_single(const LandmarkSet& set) {
  ScaledLandmarks half{0.5, set};
  for (auto& p : half.set.points) p = {p.x * 0.5, p.y * 0.5};
  const ScaledLandmarks both[] = {{1.0, set}, half};
  return aggregate_scales(both);
}

// ---------------------------------------------------------------------------

Eigen::VectorXd RegressionModel::predict(const Eigen::VectorXd& input) const {
  if (input.size() != weights.rows()) throw DomainError("regression: input dimension mismatch");
  return weights.transpose() * input;
}

RegressionModel fit_feature_regression(const Eigen::MatrixXd& inputs,
                                       const Eigen::MatrixXd& targets, double lambda) {
  if (inputs.rows() < 1 || inputs.cols() < 1) throw DomainError("regression: no samples");
  if (targets.rows() != inputs.rows()) throw DomainError("regression: sample count mismatch");
  if (!(lambda >= 0.0)) throw DomainError("regression: lambda must be >= 0");
  const Eigen::Index d = inputs.cols();
  if (lambda == 0.0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(inputs);
    if (qr.rank() < d) {
      throw SingularityError("regression: design matrix is rank deficient (rank " +
                             std::to_string(qr.rank()) + " < " + std::to_string(d) +
                             "); use lambda > 0");
    }
  }
  Eigen::MatrixXd normal = inputs.transpose() * inputs;
  normal.diagonal().array() += lambda;
  const Eigen::MatrixXd rhs = inputs.transpose() * targets;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(normal);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
    throw SingularityError("regression: normal matrix is not positive definite; use lambda > 0");
  }
  RegressionModel out;
  out.weights = ldlt.solve(rhs);
  // One step of iterative refinement keeps the residual near machine precision.
  out.weights += ldlt.solve(rhs - normal * out.weights);
  out.lambda = lambda;
  out.training_count = static_cast<std::size_t>(inputs.rows());
  out.output_names.resize(static_cast<std::size_t>(targets.cols()));
  for (std::size_t j = 0; j < out.output_names.size(); ++j) {
    out.output_names[j] = "t" + std::to_string(j);
  }
  return out;
}

double regression_loss(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets,
                       const Eigen::VectorXd& weights) {
  return (targets - inputs * weights).squaredNorm();
}

Eigen::VectorXd regression_input(const LandmarkSet& distribution) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(2 * distribution.size() + 1));
  // Canvas pixel units keep the default ridge penalty small relative to
  // real landmark variation.
  constexpr double scale = kCanvasSize - 1;
  for (std::size_t i = 0; i < distribution.size(); ++i) {
    v[static_cast<Eigen::Index>(2 * i)] = distribution.points[i].x * scale;
    v[static_cast<Eigen::Index>(2 * i + 1)] = distribution.points[i].y * scale;
  }
  v[v.size() - 1] = 1.0;
  return v;
}

RegressionModel fit_layout_regression(std::span<const LandmarkSet> annotations,
                                      const FeatureLayout& layout, double lambda) {
  layout.validate();
  if (annotations.empty()) throw DomainError("fit_layout_regression: no annotations");
  const auto& schema = annotations.front().labels;
  const auto rows = static_cast<Eigen::Index>(annotations.size());
  const auto in_dim = static_cast<Eigen::Index>(2 * schema.size() + 1);
  const auto out_dim = static_cast<Eigen::Index>(2 * layout.point_labels.size());
  Eigen::MatrixXd inputs(rows, in_dim), targets(rows, out_dim);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& set = annotations[static_cast<std::size_t>(r)];
    if (set.labels != schema) throw DomainError("fit_layout_regression: label schemas differ");
    inputs.row(r) = regression_input(aggregate_single(set).mean_set()).transpose();
    const LandmarkSet target = select_landmarks(set, layout);
    for (std::size_t i = 0; i < target.size(); ++i) {
      targets(r, static_cast<Eigen::Index>(2 * i)) = target.points[i].x;
      targets(r, static_cast<Eigen::Index>(2 * i + 1)) = target.points[i].y;
    }
  }
  RegressionModel out = fit_feature_regression(inputs, targets, lambda);
  out.version_id = layout.version_id;
  for (std::size_t i = 0; i < layout.point_labels.size(); ++i) {
    out.output_names[2 * i] = layout.point_labels[i] + ".x";
    out.output_names[2 * i + 1] = layout.point_labels[i] + ".y";
  }
  return out;
}

std::vector<std::uint8_t> serialize_regression(const RegressionModel& model) {
  binio::Writer w;
  w.header("MVR1");
  w.u16(model.version_id);
  w.f64(model.lambda);
  w.u32(static_cast<std::uint32_t>(model.training_count));
  w.u32(static_cast<std::uint32_t>(model.weights.rows()));
  w.u32(static_cast<std::uint32_t>(model.weights.cols()));
  for (const auto& name : model.output_names) w.str16(name);
  for (Eigen::Index j = 0; j < model.weights.cols(); ++j) {
    for (Eigen::Index i = 0; i < model.weights.rows(); ++i) w.f64(model.weights(i, j));
  }
  return w.finish();
}

RegressionModel deserialize_regression(std::span<const std::uint8_t> bytes) {
  static constexpr std::string_view kMagic[] = {"MVR1"};
  binio::Reader r(bytes, kMagic, "regression file");
  RegressionModel m;
  m.version_id = r.u16();
  m.lambda = r.f64();
  m.training_count = r.u32();
  const auto rows = r.u32();
  const auto cols = r.u32();
  if (static_cast<std::uint64_t>(rows) * cols * 8 > bytes.size()) {
    throw TruncatedFileError("regression file: truncated");
  }
  for (std::uint32_t j = 0; j < cols; ++j) m.output_names.push_back(r.str16());
  m.weights.resize(rows, cols);
  for (Eigen::Index j = 0; j < m.weights.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.weights.rows(); ++i) m.weights(i, j) = r.f64();
  }
  r.finish();
  return m;
}

void save_regression(const RegressionModel& model, const std::filesystem::path& path) {
  binio::write_file(path, serialize_regression(model));
}

RegressionModel load_regression(const std::filesystem::path& path) {
  return deserialize_regression(binio::read_file(path));
}

// ---------------------------------------------------------------------------

void MaskTemplate::validate() const {
  if (canvas_width <= 0 || canvas_height <= 0 || canvas_width > 65535 || canvas_height > 65535) {
    throw DomainError("template: invalid canvas");
  }
  if (channels != 1 && channels != 3) throw DomainError("template: channels must be 1 or 3");
  if (priorities.size() != regions.size()) throw DomainError("template: priority count mismatch");
  if (source_versions.size() > 255) throw DomainError("template: too many source versions");
  const std::size_t cap = kMaxRegionsPerSource * std::max<std::size_t>(1, source_versions.size());
  if (regions.size() > cap) throw DomainError("template: more than 500 regions per source version");
  for (std::size_t i = 0; i < regions.size(); ++i) {
    if (regions[i].size != kRegionSize) throw DomainError("template: region size must be 4");
    if (!regions[i].fits(canvas_width, canvas_height)) throw DomainError("template: region outside canvas");
    for (std::size_t j = 0; j < i; ++j) {
      if (regions[i].overlaps(regions[j])) throw DomainError("template: overlapping regions");
    }
  }
}

bool structurally_equal(const MaskTemplate& a, const MaskTemplate& b) {
  return a.source_versions == b.source_versions && a.canvas_width == b.canvas_width &&
         a.canvas_height == b.canvas_height && a.channels == b.channels &&
         a.regions == b.regions && a.priorities == b.priorities;
}

std::vector<std::pair<int, int>> draw_offsets(std::uint64_t seed, int radius, std::size_t count) {
  if (radius < 0) throw DomainError("offset radius must be >= 0");
  SplitMix64 rng(seed);
  std::vector<std::pair<int, int>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto dx = static_cast<int>(rng.uniform_int(-radius, radius));
    const auto dy = static_cast<int>(rng.uniform_int(-radius, radius));
    out.emplace_back(dx, dy);
  }
  return out;
}

WithWarnings<MaskTemplate> derive_template(const RegressionModel& reg, const FeatureLayout& layout,
                                           const AggregatedDistribution& phi,
                                           std::uint64_t offset_seed, int offset_radius) {
  layout.validate();
  const auto points = layout.point_labels.size();
  if (static_cast<std::size_t>(reg.weights.cols()) != 2 * points) {
    throw DomainError("derive_template: regression was not fitted for this layout");
  }
  WithWarnings<MaskTemplate> out;
  MaskTemplate& t = out.value;
  t.source_versions = {layout.version_id};
  t.offset_seed = offset_seed;
  t.offset_radius = offset_radius;

  const Eigen::VectorXd pred = reg.predict(regression_input(phi.mean_set()));
  const auto offsets = draw_offsets(offset_seed, offset_radius, points);
  const int max_x = t.canvas_width - kRegionSize, max_y = t.canvas_height - kRegionSize;
  for (std::size_t i = 0; i < points; ++i) {
    const double px = pred[static_cast<Eigen::Index>(2 * i)];
    const double py = pred[static_cast<Eigen::Index>(2 * i + 1)];
    const double outside = std::max({0.0, -px, px - 1.0, -py, py - 1.0}) *
                           (std::max(t.canvas_width, t.canvas_height) - 1);
    if (outside > offset_radius) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "predicted '%s' at (%.3f, %.3f) lies off canvas; clamped",
                    layout.point_labels[i].c_str(), px, py);
      out.warnings.emplace_back(buf);
    }
    Region r;
    r.origin_x = std::clamp(patch_origin(px, t.canvas_width, kRegionSize) + offsets[i].first, 0, max_x);
    r.origin_y = std::clamp(patch_origin(py, t.canvas_height, kRegionSize) + offsets[i].second, 0, max_y);
    const bool collides = std::any_of(t.regions.begin(), t.regions.end(),
                                      [&](const Region& k) { return k.overlaps(r); });
    if (collides) continue;
    t.regions.push_back(r);
    t.priorities.push_back(1);
  }
  return out;
}

WithWarnings<MaskTemplate> superpose(std::span<const MaskTemplate> templates,
                                     std::span<const int> priorities) {
  if (templates.empty()) throw DomainError("superpose: no templates");
  if (!priorities.empty() && priorities.size() != templates.size()) {
    throw DomainError("superpose: one priority per template required");
  }
  std::vector<int> rank(templates.size());
  for (std::size_t i = 0; i < templates.size(); ++i) {
    rank[i] = priorities.empty() ? static_cast<int>(i) + 1 : priorities[i];
    if (rank[i] < 0 || rank[i] > 255) throw DomainError("superpose: priority must fit in a byte");
  }
  const auto& first = templates.front();
  for (const auto& t : templates) {
    if (t.canvas_width != first.canvas_width || t.canvas_height != first.canvas_height ||
        t.channels != first.channels) {
      throw DomainError("superpose: templates use different canvases");
    }
  }
  std::vector<std::size_t> order(templates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rank[a] < rank[b]; });

  WithWarnings<MaskTemplate> out;
  MaskTemplate& merged = out.value;
  merged.canvas_width = first.canvas_width;
  merged.canvas_height = first.canvas_height;
  merged.channels = first.channels;
  merged.offset_seed = first.offset_seed;
  merged.offset_radius = first.offset_radius;
  for (const auto& t : templates) {
    merged.source_versions.insert(merged.source_versions.end(), t.source_versions.begin(),
                                  t.source_versions.end());
  }
  std::vector<std::size_t> owner;
  std::size_t dropped = 0;
  for (auto ti : order) {
    for (const auto& r : templates[ti].regions) {
      bool conflict = false;
      for (std::size_t j = 0; j < merged.regions.size() && !conflict; ++j) {
        conflict = owner[j] != ti && merged.regions[j].overlaps(r);
      }
      if (conflict) {
        ++dropped;
        continue;
      }
      merged.regions.push_back(r);
      merged.priorities.push_back(static_cast<std::uint8_t>(rank[ti]));
      owner.push_back(ti);
    }
  }
  if (merged.source_versions.size() > kRecommendedMaxSources) {
    out.warnings.emplace_back("superposing " + std::to_string(merged.source_versions.size()) +
                              " recognizers; less than 3 are recommended");
  }
  if (dropped > 0) {
    out.warnings.emplace_back("dropped " + std::to_string(dropped) + " conflicting region(s)");
  }
  return out;
}

// ---------------------------------------------------------------------------

void CloakKey::validate() const {
  mask.validate();
  if (payloads.size() != mask.regions.size() * mask.payload_bytes_per_region()) {
    throw DomainError("key: payload count does not match region count");
  }
}

namespace {

std::vector<std::uint8_t> write_container(const MaskTemplate& t, const std::uint8_t* payloads) {
  t.validate();
  binio::Writer w;
  w.header(payloads ? "MVK2" : "MVK1");
  w.u8(static_cast<std::uint8_t>(t.source_versions.size()));
  for (auto v : t.source_versions) w.u16(v);
  w.u16(static_cast<std::uint16_t>(t.canvas_width));
  w.u16(static_cast<std::uint16_t>(t.canvas_height));
  w.u8(static_cast<std::uint8_t>(t.channels));
  w.u8(static_cast<std::uint8_t>(kRegionSize));
  w.u32(static_cast<std::uint32_t>(t.regions.size()));
  const std::size_t per = t.payload_bytes_per_region();
  for (std::size_t i = 0; i < t.regions.size(); ++i) {
    w.u16(static_cast<std::uint16_t>(t.regions[i].origin_x));
    w.u16(static_cast<std::uint16_t>(t.regions[i].origin_y));
    w.u8(t.priorities[i]);
    if (payloads) w.bytes({payloads + i * per, per});
  }
  return w.finish();
}

}  // namespace

std::vector<std::uint8_t> serialize_template(const MaskTemplate& t) {
  return write_container(t, nullptr);
}

std::vector<std::uint8_t> serialize_key(const CloakKey& k) {
  k.validate();
  return write_container(k.mask, k.payloads.data());
}

std::variant<MaskTemplate, CloakKey> deserialize_key_file(std::span<const std::uint8_t> bytes) {
  static constexpr std::string_view kMagic[] = {"MVK1", "MVK2"};
  binio::Reader r(bytes, kMagic, "key file");
  const bool has_payload = r.magic() == "MVK2";
  MaskTemplate t;
  t.offset_radius = 0;
  const auto sources = r.u8();
  for (int i = 0; i < sources; ++i) t.source_versions.push_back(r.u16());
  t.canvas_width = r.u16();
  t.canvas_height = r.u16();
  t.channels = r.u8();
  const auto size = r.u8();
  if (size != kRegionSize) throw FormatError("key file: region size must be 4");
  if (t.channels != 1 && t.channels != 3) throw FormatError("key file: bad channel count");
  const auto count = r.u32();
  const std::size_t per = t.payload_bytes_per_region();
  const std::size_t record = 5 + (has_payload ? per : 0);
  if (static_cast<std::uint64_t>(count) * record > bytes.size()) {
    throw TruncatedFileError("key file: truncated (region table)");
  }
  std::vector<std::uint8_t> payloads;
  for (std::uint32_t i = 0; i < count; ++i) {
    Region reg;
    reg.origin_x = r.u16();
    reg.origin_y = r.u16();
    t.regions.push_back(reg);
    t.priorities.push_back(r.u8());
    if (has_payload) {
      const auto p = r.bytes(per);
      payloads.insert(payloads.end(), p.begin(), p.end());
    }
  }
  r.finish();
  try {
    t.validate();
  } catch (const DomainError& e) {
    throw FormatError(std::string("key file: ") + e.what());
  }
  if (!has_payload) return t;
  CloakKey k;
  k.target_versions = t.source_versions;
  k.mask = std::move(t);
  k.payloads = std::move(payloads);
  return k;
}

void save_template(const MaskTemplate& t, const std::filesystem::path& path) {
  binio::write_file(path, serialize_template(t));
}

void save_key(const CloakKey& k, const std::filesystem::path& path) {
  binio::write_file(path, serialize_key(k));
}

MaskTemplate load_template(const std::filesystem::path& path) {
  auto v = deserialize_key_file(binio::read_file(path));
  if (auto* k = std::get_if<CloakKey>(&v)) return std::move(k->mask);
  return std::get<MaskTemplate>(std::move(v));
}

CloakKey load_key(const std::filesystem::path& path) {
  auto v = deserialize_key_file(binio::read_file(path));
  if (auto* k = std::get_if<CloakKey>(&v)) return std::move(*k);
  throw FormatError(path.string() + ": template file (MVK1) carries no payload; a key (MVK2) is required");
}

}  // namespace maskveil
