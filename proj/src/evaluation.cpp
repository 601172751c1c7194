#include "maskveil/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "maskveil/errors.hpp"
#include "maskveil/rng.hpp"

namespace maskveil {

double protection_rate(double t_o, double f_c) {
  if (!(t_o >= 0.0 && t_o <= 1.0) || !(f_c >= 0.0 && f_c <= 1.0)) {
    throw DomainError("protection_rate: T_o and F_c must lie in [0, 1]");
  }
  const double denom = 1.0 + t_o - f_c;
  if (denom <= 0.0) throw SingularityError("protection_rate: 1 + T_o - F_c is zero");
  return f_c / denom;
}

namespace {

double rate_or_nan(double t_o, double f_c) {
  try {
    return protection_rate(t_o, f_c);
  } catch (const SingularityError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

MetricsReport evaluate_run(std::span<const RecognizerModel* const> targets,
                           std::span<const LabeledImage> originals,
                           std::span<const PixelImage> protected_images,
                           std::span<const PixelImage> restored_images) {
  if (targets.empty()) throw DomainError("evaluate_run: no targets");
  if (originals.empty()) throw DomainError("evaluate_run: empty image list");
  if (protected_images.size() != originals.size() || restored_images.size() != originals.size()) {
    throw DomainError("evaluate_run: image lists are not aligned");
  }
  const auto n = originals.size();
  MetricsReport rep;
  rep.per_target.resize(targets.size());
  std::size_t all_correct = 0, all_fooled = 0, all_restored = 0;
  std::vector<double> conf_sum(targets.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& truth = originals[i];
    if (!truth.image.same_shape(protected_images[i]) || !truth.image.same_shape(restored_images[i])) {
      throw DomainError("evaluate_run: image shapes differ for " + truth.name);
    }
    ImageRecord rec;
    rec.name = truth.name;
    rec.identity = truth.identity;
    bool correct = true, fooled = true, restored_ok = true;
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const auto& m = *targets[t];
      const auto o = recognize(m, truth.image, truth.landmarks);
      const auto p = recognize(m, protected_images[i], truth.landmarks);
      const auto r = recognize(m, restored_images[i], truth.landmarks);
      rec.original_prediction.push_back(m.identities[o.identity]);
      rec.protected_prediction.push_back(m.identities[p.identity]);
      rec.restored_prediction.push_back(m.identities[r.identity]);
      rec.restored_confidence.push_back(r.confidence);
      auto& tm = rep.per_target[t];
      const bool oc = rec.original_prediction.back() == truth.identity;
      const bool pf = rec.protected_prediction.back() != truth.identity;
      const bool rc = rec.restored_prediction.back() == truth.identity;
      tm.t_o += oc;
      tm.f_c += pf;
      tm.restored_accuracy += rc;
      conf_sum[t] += r.confidence;
      correct = correct && oc;
      fooled = fooled && pf;
      restored_ok = restored_ok && rc;
    }
    all_correct += correct;
    all_fooled += fooled;
    all_restored += restored_ok;
    rec.dssim = dssim(truth.image, protected_images[i]);
    rep.mean_dssim += rec.dssim;
    rep.max_dssim = std::max(rep.max_dssim, rec.dssim);
    rep.records.push_back(std::move(rec));
  }
  const auto dn = static_cast<double>(n);
  rep.t_r = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < targets.size(); ++t) {
    auto& tm = rep.per_target[t];
    tm.version_id = targets[t]->layout.version_id;
    tm.t_o /= dn;
    tm.f_c /= dn;
    tm.restored_accuracy /= dn;
    tm.t_r = conf_sum[t] / dn;
    tm.r_s = rate_or_nan(tm.t_o, tm.f_c);
    rep.t_r = std::min(rep.t_r, tm.t_r);
  }
  rep.t_o = static_cast<double>(all_correct) / dn;
  rep.f_c = static_cast<double>(all_fooled) / dn;
  rep.restored_accuracy = static_cast<double>(all_restored) / dn;
  rep.r_s = rate_or_nan(rep.t_o, rep.f_c);
  rep.mean_dssim /= dn;
  return rep;
}

std::string MetricsReport::to_manifest() const {
  std::ostringstream out;
  out << "images = " << records.size() << '\n';
  out << "T_o = " << fmt(t_o) << '\n';
  out << "F_c = " << fmt(f_c) << '\n';
  out << "T_r = " << fmt(t_r) << '\n';
  out << "restored_accuracy = " << fmt(restored_accuracy) << '\n';
  out << "r_s = " << fmt(r_s) << '\n';
  out << "mean_dssim = " << fmt(mean_dssim) << '\n';
  out << "max_dssim = " << fmt(max_dssim) << '\n';
  for (const auto& tm : per_target) {
    const std::string p = "target." + std::to_string(tm.version_id) + ".";
    out << p << "T_o = " << fmt(tm.t_o) << '\n';
    out << p << "F_c = " << fmt(tm.f_c) << '\n';
    out << p << "T_r = " << fmt(tm.t_r) << '\n';
    out << p << "restored_accuracy = " << fmt(tm.restored_accuracy) << '\n';
    out << p << "r_s = " << fmt(tm.r_s) << '\n';
  }
  return out.str();
}

std::string MetricsReport::records_csv() const {
  std::ostringstream out;
  out << "name,identity,target_index,original,protected,restored,restored_confidence,dssim\n";
  for (const auto& r : records) {
    for (std::size_t t = 0; t < r.original_prediction.size(); ++t) {
      out << r.name << ',' << r.identity << ',' << t << ',' << r.original_prediction[t] << ','
          << r.protected_prediction[t] << ',' << r.restored_prediction[t] << ','
          << fmt(r.restored_confidence[t]) << ',' << fmt(r.dssim) << '\n';
    }
  }
  return out.str();
}

PixelImage baseline_pixel_confuse(const PixelImage& img, std::span<const Region> regions, double p,
                                  std::uint64_t seed) {
  if (!(p >= 0.0)) throw DomainError("pixel confusion: p must be >= 0");
  const double prob = std::min(p / 255.0, 1.0);
  PixelImage out = img;
  SplitMix64 rng(seed);
  for (const auto& r : regions) {
    if (!r.fits(img.width(), img.height())) throw DomainError("pixel confusion: region out of bounds");
    for (int y = r.origin_y; y < r.origin_y + r.size; ++y) {
      for (int x = r.origin_x; x < r.origin_x + r.size; ++x) {
        for (int c = 0; c < img.channels(); ++c) {
          const double u = rng.uniform();
          const auto v = static_cast<std::uint8_t>(rng.next() >> 56);
          if (u < prob) out.at(x, y, c) = v;
        }
      }
    }
  }
  return out;
}

PixelImage baseline_twist(const PixelImage& img, Point2 center, double pressure, double radius) {
  if (!(pressure >= 0.0)) throw DomainError("twist: pressure must be >= 0");
  if (!(radius > 0.0)) throw DomainError("twist: radius must be positive");
  if (!(center.x >= 0.0 && center.y >= 0.0 && center.x <= img.width() - 1 &&
        center.y <= img.height() - 1)) {
    throw DomainError("twist: centre outside canvas");
  }
  PixelImage out = img;
  if (pressure == 0.0) return out;
  const auto sample = [&img](double sx, double sy, int c) {
    sx = std::clamp(sx, 0.0, static_cast<double>(img.width() - 1));
    sy = std::clamp(sy, 0.0, static_cast<double>(img.height() - 1));
    const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
    const int x1 = std::min(x0 + 1, img.width() - 1), y1 = std::min(y0 + 1, img.height() - 1);
    const double fx = sx - x0, fy = sy - y0;
    const double top = (1 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c);
    const double bot = (1 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c);
    return static_cast<std::uint8_t>(std::clamp(std::floor((1 - fy) * top + fy * bot + 0.5), 0.0, 255.0));
  };
  const int x_lo = std::max(0, static_cast<int>(std::floor(center.x - radius)));
  const int x_hi = std::min(img.width() - 1, static_cast<int>(std::ceil(center.x + radius)));
  const int y_lo = std::max(0, static_cast<int>(std::floor(center.y - radius)));
  const int y_hi = std::min(img.height() - 1, static_cast<int>(std::ceil(center.y + radius)));
  for (int y = y_lo; y <= y_hi; ++y) {
    for (int x = x_lo; x <= x_hi; ++x) {
      const double dx = center.x - x, dy = center.y - y;
      const double dist = std::hypot(dx, dy);
      if (dist >= radius || dist == 0.0) continue;
      const double shift = pressure * (1.0 - dist / radius);
      const double sx = x + dx / dist * shift, sy = y + dy / dist * shift;
      for (int c = 0; c < img.channels(); ++c) out.at(x, y, c) = sample(sx, sy, c);
    }
  }
  return out;
}

void export_scatter(std::span<const ScatterPoint> points, const std::filesystem::path& path) {
  if (points.empty()) throw DomainError("export_scatter: no points");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "x,y,tag\n";
  char buf[64];
  for (const auto& p : points) {
    if (p.tag.find_first_of(",\n\r") != std::string::npos) {
      throw DomainError("export_scatter: tag contains a separator");
    }
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,", p.x, p.y);
    out << buf << p.tag << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<ScatterPoint> read_scatter(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "x,y,tag") throw FormatError("scatter: bad header");
  std::vector<ScatterPoint> out;
  while (std::getline(in, line)) {
    const auto a = line.find(',');
    const auto b = line.find(',', a + 1);
    if (a == std::string::npos || b == std::string::npos) throw FormatError("scatter: bad row");
    out.push_back({std::stod(line.substr(0, a)), std::stod(line.substr(a + 1, b - a - 1)),
                   line.substr(b + 1)});
  }
  return out;
}

}  // namespace maskveil
