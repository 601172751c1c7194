#include "maskveil/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "maskveil/errors.hpp"
#include "maskveil/image.hpp"
#include "maskveil/rng.hpp"

namespace maskveil {

namespace {

using Rgb = std::array<double, 3>;

struct Ellipse {
  double cx, cy, rx, ry;
  bool contains(double x, double y) const {
    const double u = (x - cx) / rx, v = (y - cy) / ry;
    return u * u + v * v <= 1.0;
  }
};

struct Identity {
  Rgb background, skin, iris, sclera, brow, lip, nostril, nose;
  double face_rx, face_ry;
  double eye_x, eye_y, eye_w, eye_h, iris_r;
  double brow_h, brow_w;
  double nose_tip_y, wing_x, wing_r, tip_r;
  double mouth_w, mouth_y, mouth_h;
  std::uint64_t texture_seed;
  double texture_gain;
};

double range(SplitMix64& g, double lo, double hi) { return lo + (hi - lo) * g.uniform(); }

Rgb color(SplitMix64& g, double lo, double hi) {
  return {range(g, lo, hi), range(g, lo, hi), range(g, lo, hi)};
}

Identity make_identity(std::uint64_t seed) {
  SplitMix64 g(seed);
  Identity id{};
  id.background = color(g, 30, 220);
  const double tone = range(g, 90, 220);
  id.skin = {tone + range(g, 0, 30), tone * range(g, 0.75, 0.9), tone * range(g, 0.6, 0.8)};
  id.iris = color(g, 10, 200);
  id.sclera = {range(g, 215, 250), range(g, 215, 250), range(g, 210, 245)};
  id.brow = color(g, 10, 120);
  id.lip = {range(g, 120, 230), range(g, 30, 120), range(g, 40, 130)};
  id.nostril = color(g, 20, 90);
  id.nose = {id.skin[0] * range(g, 0.7, 1.1), id.skin[1] * range(g, 0.7, 1.1), id.skin[2] * range(g, 0.7, 1.1)};
  id.face_rx = range(g, 62, 72);
  id.face_ry = range(g, 84, 96);
  id.eye_x = range(g, 26, 34);
  id.eye_y = range(g, 18, 26);
  id.eye_w = range(g, 11, 14);
  id.eye_h = range(g, 5, 7);
  id.iris_r = range(g, 3.5, 5);
  id.brow_h = range(g, 14, 18);
  id.brow_w = range(g, 10, 15);
  id.nose_tip_y = range(g, 10, 18);
  id.wing_x = range(g, 10, 13);
  id.wing_r = range(g, 2.5, 4);
  id.tip_r = range(g, 3, 5);
  id.mouth_w = range(g, 18, 26);
  id.mouth_y = range(g, 36, 44);
  id.mouth_h = range(g, 5, 8);
  id.texture_seed = g.next();
  id.texture_gain = range(g, 4, 14);
  return id;
}

// Hash-based lattice noise in [-1, 1]; integer arithmetic only.
double lattice(std::uint64_t seed, int x, int y) {
  std::uint64_t h = seed ^ (static_cast<std::uint64_t>(static_cast<std::uint32_t>(x)) << 32) ^
                    static_cast<std::uint32_t>(y);
  SplitMix64 g(h);
  return static_cast<double>(g.next() >> 11) * 0x1.0p-52 - 1.0;
}

struct Pose {
  double cx, cy, scale, gain;
};

struct Face {
  Identity id;
  Pose pose;

  Point2 place(double lx, double ly) const {
    return {pose.cx + pose.scale * lx, pose.cy + pose.scale * ly};
  }
  Ellipse ellipse(double lx, double ly, double rx, double ry) const {
    const Point2 c = place(lx, ly);
    return {c.x, c.y, pose.scale * rx, pose.scale * ry};
  }
};

std::vector<std::pair<std::string, Point2>> face_landmarks(const Face& f) {
  const Identity& d = f.id;
  const double mouth_top = d.mouth_y - d.mouth_h, mouth_bottom = d.mouth_y + d.mouth_h;
  return {
      {"brow_left", f.place(-d.eye_x, -d.eye_y - d.brow_h)},
      {"brow_right", f.place(d.eye_x, -d.eye_y - d.brow_h)},
      {"eye_corner_left_outer", f.place(-d.eye_x - d.eye_w, -d.eye_y)},
      {"eye_left", f.place(-d.eye_x, -d.eye_y)},
      {"eye_corner_left_inner", f.place(-d.eye_x + d.eye_w, -d.eye_y)},
      {"eye_corner_right_inner", f.place(d.eye_x - d.eye_w, -d.eye_y)},
      {"eye_right", f.place(d.eye_x, -d.eye_y)},
      {"eye_corner_right_outer", f.place(d.eye_x + d.eye_w, -d.eye_y)},
      {"nose_bridge", f.place(0, -d.eye_y + 2)},
      {"nose_tip", f.place(0, d.nose_tip_y)},
      {"nose_wing_left", f.place(-d.wing_x, d.nose_tip_y - 2)},
      {"nose_wing_right", f.place(d.wing_x, d.nose_tip_y - 2)},
      {"mouth_corner_left", f.place(-d.mouth_w, d.mouth_y)},
      {"mouth_top", f.place(0, mouth_top)},
      {"mouth_corner_right", f.place(d.mouth_w, d.mouth_y)},
      {"mouth_bottom", f.place(0, mouth_bottom)},
      {"chin", f.place(0, d.face_ry * 0.9)},
  };
}

PixelImage render(const Face& f, SplitMix64& noise) {
  const Identity& d = f.id;
  const Ellipse face = f.ellipse(0, 0, d.face_rx, d.face_ry);
  const Ellipse brows[] = {f.ellipse(-d.eye_x, -d.eye_y - d.brow_h, d.brow_w, 3),
                           f.ellipse(d.eye_x, -d.eye_y - d.brow_h, d.brow_w, 3)};
  const Ellipse eyes[] = {f.ellipse(-d.eye_x, -d.eye_y, d.eye_w, d.eye_h),
                          f.ellipse(d.eye_x, -d.eye_y, d.eye_w, d.eye_h)};
  const Ellipse irises[] = {f.ellipse(-d.eye_x, -d.eye_y, d.iris_r, d.iris_r),
                            f.ellipse(d.eye_x, -d.eye_y, d.iris_r, d.iris_r)};
  const Ellipse bridge = f.ellipse(0, -d.eye_y + 8, 3, 12);
  const Ellipse tip = f.ellipse(0, d.nose_tip_y, d.tip_r, d.tip_r);
  const Ellipse wings[] = {f.ellipse(-d.wing_x, d.nose_tip_y - 2, d.wing_r, d.wing_r),
                           f.ellipse(d.wing_x, d.nose_tip_y - 2, d.wing_r, d.wing_r)};
  const Ellipse mouth = f.ellipse(0, d.mouth_y, d.mouth_w + 1.5, d.mouth_h + 0.5);

  PixelImage img(kCanvasSize, kCanvasSize, 3);
  for (int y = 0; y < kCanvasSize; ++y) {
    for (int x = 0; x < kCanvasSize; ++x) {
      const double px = x, py = y;
      Rgb c = d.background;
      if (face.contains(px, py)) {
        const double t = d.texture_gain * lattice(d.texture_seed, x / 3, y / 3);
        c = {d.skin[0] + t, d.skin[1] + t, d.skin[2] + t};
        if (bridge.contains(px, py)) c = d.nose;
        for (const auto& e : brows) if (e.contains(px, py)) c = d.brow;
        for (const auto& e : eyes) if (e.contains(px, py)) c = d.sclera;
        for (const auto& e : irises) if (e.contains(px, py)) c = d.iris;
        if (tip.contains(px, py)) c = d.nose;
        for (const auto& e : wings) if (e.contains(px, py)) c = d.nostril;
        if (mouth.contains(px, py)) c = d.lip;
      }
      for (int ch = 0; ch < 3; ++ch) {
        // Triangular sensor noise in [-6, 6].
        const double n = static_cast<double>(noise.uniform_int(0, 6) + noise.uniform_int(0, 6) - 6);
        const double v = std::floor(c[static_cast<std::size_t>(ch)] * f.pose.gain + n + 0.5);
        img.at(x, y, ch) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
      }
    }
  }
  return img;
}

double round6(double v) { return std::floor(v * 1e6 + 0.5) / 1e6; }

}  // namespace

std::vector<LabeledImage> synthesize_corpus(const SyntheticCorpusSpec& spec) {
  if (spec.identities < 2 || spec.images_per_identity < 2) {
    throw DomainError("synthesize_corpus: need at least 2 identities with 2 images each");
  }
  std::vector<LabeledImage> out;
  for (int i = 0; i < spec.identities; ++i) {
    char id_name[16];
    std::snprintf(id_name, sizeof id_name, "id%02d", i);
    const Identity id = make_identity(derive_seed(spec.seed, id_name));
    for (int j = 0; j < spec.images_per_identity; ++j) {
      LabeledImage li;
      li.identity = id_name;
      li.name = std::string(id_name) + "/img" + std::to_string(j) + ".png";
      SplitMix64 g(derive_seed(spec.seed, li.name));
      Face face{id, {range(g, 122, 134), range(g, 122, 134), range(g, 0.94, 1.06), range(g, 0.9, 1.1)}};
      li.image = render(face, g);
      for (const auto& [label, p] : face_landmarks(face)) {
        li.landmarks.labels.push_back(label);
        li.landmarks.points.push_back({round6(p.x / (kCanvasSize - 1)), round6(p.y / (kCanvasSize - 1))});
      }
      li.landmarks.validate();
      out.push_back(std::move(li));
    }
  }
  return out;
}

void write_corpus(const std::vector<LabeledImage>& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  AnnotationMap annotations;
  std::ofstream manifest(dir / "corpus_manifest.txt", std::ios::trunc);
  if (!manifest) throw IoError("cannot write corpus manifest in " + dir.string());
  for (const auto& li : corpus) {
    const fs::path file = dir / li.name;
    fs::create_directories(file.parent_path(), ec);
    if (ec) throw IoError("cannot create " + file.parent_path().string());
    save_png(li.image, file);
    annotations[li.name] = li.landmarks;
    manifest << li.name << " = " << image_digest(li.image) << '\n';
  }
  write_annotations(annotations, dir / "landmarks.txt");
}

std::vector<std::string> list_corpus_images(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("corpus directory not found: " + dir.string());
  std::vector<std::string> names;
  for (const auto& sub : fs::directory_iterator(dir)) {
    if (!sub.is_directory()) continue;
    for (const auto& f : fs::directory_iterator(sub.path())) {
      const auto ext = f.path().extension().string();
      if (f.is_regular_file() && (ext == ".png" || ext == ".ppm")) {
        names.push_back(fs::relative(f.path(), dir).generic_string());
      }
    }
  }
  std::sort(names.begin(), names.end());
  return names;
}

std::vector<LabeledImage> load_corpus(const std::filesystem::path& dir,
                                      const std::filesystem::path& landmarks_file) {
  const AnnotationMap annotations = read_annotations(landmarks_file);
  std::vector<LabeledImage> out;
  for (const auto& name : list_corpus_images(dir)) {
    const auto it = annotations.find(name);
    if (it == annotations.end()) throw DomainError("no landmarks for corpus image " + name);
    LabeledImage li;
    li.name = name;
    li.identity = name.substr(0, name.find('/'));
    li.image = normalize_canvas(load_image(dir / name));
    li.landmarks = it->second;
    out.push_back(std::move(li));
  }
  if (out.empty()) throw DomainError("corpus " + dir.string() + " contains no images");
  return out;
}

}  // namespace maskveil
