#include "maskveil/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "maskveil/binio.hpp"
#include "maskveil/corpus.hpp"
#include "maskveil/errors.hpp"
#include "maskveil/evaluation.hpp"
#include "maskveil/image.hpp"
#include "maskveil/mask_template.hpp"
#include "maskveil/perturbation.hpp"
#include "maskveil/recognizer.hpp"
#include "maskveil/rng.hpp"

namespace fs = std::filesystem;

namespace maskveil::cli {

std::map<std::string, std::string> read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  int line_no = 0;
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    out[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  return out;
}

unsigned worker_count(std::size_t jobs) {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MASKVEIL_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) n = static_cast<unsigned>(v);
  }
  return static_cast<unsigned>(std::max<std::size_t>(1, std::min<std::size_t>(n, jobs)));
}

namespace {

// Runs fn(i) for i in [0, n) on a worker pool; the first exception wins.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const unsigned workers = worker_count(n);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  const auto body = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  if (workers <= 1) {
    body();
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(body);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

class Manifest {
 public:
  void add(const std::string& key, const std::string& value) { lines_ += key + " = " + value + "\n"; }
  void add(const std::string& key, double value) { add(key, fmt(value)); }
  void add_int(const std::string& key, std::uint64_t value) { add(key, std::to_string(value)); }
  void append(const std::string& text) { lines_ += text; }

  void write(const fs::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << lines_;
    if (!out) throw IoError("write failed: " + path.string());
  }

 private:
  std::string lines_;
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

Eigen::VectorXd parse_tau(const std::string& text, Eigen::Index k) {
  if (text.empty()) return Eigen::VectorXd::Ones(k);
  std::vector<double> vals;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      vals.push_back(std::stod(item));
    } catch (const std::logic_error&) {
      throw DomainError("--tau: bad number '" + item + "'");
    }
  }
  if (vals.size() == 1) return Eigen::VectorXd::Constant(k, vals[0]);
  if (static_cast<Eigen::Index>(vals.size()) != k) {
    throw DomainError("--tau needs 1 or k=" + std::to_string(k) + " values");
  }
  return Eigen::Map<Eigen::VectorXd>(vals.data(), k);
}

std::string seed_text(std::uint64_t seed) { return std::to_string(seed); }

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", static_cast<unsigned>(v));
  return buf;
}

fs::path key_path_for(const fs::path& keys_dir, const std::string& name) {
  return (keys_dir / name).replace_extension(".mvk");
}

// Options shared by the corpus-driven commands.
struct CorpusOpts {
  std::string corpus;
  std::string landmarks;
  double split = 0.75;
  bool held_out = false;

  void add_to(CLI::App* app, bool required = true) {
    auto* c = app->add_option("--corpus", corpus, "Corpus root (<identity>/<image>.png)");
    if (required) c->required();
    app->add_option("--landmarks", landmarks, "Landmark annotation file (default <corpus>/landmarks.txt)");
    app->add_option("--split", split, "Training fraction per identity")->capture_default_str();
    app->add_flag("--held-out", held_out, "Restrict to the held-out split");
  }

  fs::path landmarks_path() const {
    return landmarks.empty() ? fs::path(corpus) / "landmarks.txt" : fs::path(landmarks);
  }

  std::vector<LabeledImage> load() const {
    if (!fs::exists(landmarks_path())) throw IoError("landmarks file not found: " + landmarks_path().string());
    auto all = load_corpus(corpus, landmarks_path());
    if (!held_out) return all;
    const auto split_idx = split_by_identity(all, split);
    std::vector<LabeledImage> out;
    for (auto i : split_idx.test) out.push_back(std::move(all[i]));
    return out;
  }
};

struct OptimizerOpts {
  double sigma = 0.05;
  int phase1_rounds = 750;
  int group_size = 5;
  int group_rounds = 50;
  std::size_t budget = 20000;
  std::string noise = "corpus";
  double noise_sigma = 25.0 / 255.0;
  int radius = kDefaultOffsetRadius;

  void add_to(CLI::App* app) {
    app->add_option("--sigma", sigma, "Perceptual (DSSIM) budget")->capture_default_str();
    app->add_option("--phase1-rounds", phase1_rounds)->capture_default_str();
    app->add_option("--group-size", group_size)->capture_default_str();
    app->add_option("--group-rounds", group_rounds)->capture_default_str();
    app->add_option("--budget", budget, "Max objective evaluations per image")->capture_default_str();
    app->add_option("--noise", noise, "Noise source")->check(CLI::IsMember({"gaussian", "corpus"}))->capture_default_str();
    app->add_option("--noise-sigma", noise_sigma)->capture_default_str();
    app->add_option("--radius", radius, "Template offset radius (pixels)")->capture_default_str();
  }

  PerturbationConfig config(std::uint64_t seed) const {
    PerturbationConfig c;
    c.sigma = sigma;
    c.phase1_rounds = phase1_rounds;
    c.group_size = group_size;
    c.group_rounds = group_rounds;
    c.total_budget = budget;
    c.seed = seed;
    return c;
  }
};

std::vector<RecognizerModel> load_models(const std::vector<std::string>& paths) {
  std::vector<RecognizerModel> out;
  for (const auto& p : paths) {
    if (!fs::exists(p)) throw IoError("model file not found: " + p);
    out.push_back(load_model(p));
  }
  return out;
}

std::vector<const RecognizerModel*> pointers(const std::vector<RecognizerModel>& models) {
  std::vector<const RecognizerModel*> out;
  for (const auto& m : models) out.push_back(&m);
  return out;
}

// ---------------------------------------------------------------------------

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::uint64_t seed = 0;
  std::string out_dir;
  double fc_target = 0.0;
};

int cmd_make_corpus(Context& ctx, const SyntheticCorpusSpec& spec) {
  const auto corpus = synthesize_corpus(spec);
  write_corpus(corpus, ctx.out_dir);
  ctx.out << "wrote " << corpus.size() << " images to " << ctx.out_dir << '\n';
  return kOk;
}

struct TrainOpts {
  CorpusOpts corpus;
  int layout = 9;
  int k = 32;
  std::string tau;
};

int cmd_train(Context& ctx, const TrainOpts& o) {
  CorpusOpts all = o.corpus;
  all.held_out = false;
  const auto data = all.load();
  const auto layout = builtin_layout(o.layout);
  const auto tau = parse_tau(o.tau, o.k);
  const auto res = train_recognizer(data, layout, o.k, o.corpus.split, tau);
  ensure_dir(ctx.out_dir);
  const std::string stem = "model_v" + std::to_string(layout.version_id);
  const fs::path model_path = fs::path(ctx.out_dir) / (stem + ".mvm");
  save_model(res.model, model_path);

  Manifest m;
  m.add("command", "train-recognizer");
  m.add("seed", seed_text(ctx.seed));
  m.add("layout", std::to_string(layout.version_id));
  m.add("k", std::to_string(o.k));
  m.add("split", o.corpus.split);
  m.add("identities", std::to_string(res.model.identities.size()));
  m.add("train_images", std::to_string(res.train_indices.size()));
  m.add("held_out_images", std::to_string(res.test_indices.size()));
  m.add("T_o", res.held_out_accuracy);
  m.add("model_file", model_path.filename().string());
  m.add("model_crc32", hex32(binio::crc32(serialize_model(res.model))));
  m.write(fs::path(ctx.out_dir) / ("train_manifest_v" + std::to_string(layout.version_id) + ".txt"));
  ctx.out << "held-out T_o = " << fmt(res.held_out_accuracy) << " (" << res.test_indices.size()
          << " images) -> " << model_path.string() << '\n';
  return kOk;
}

struct FitOpts {
  CorpusOpts corpus;
  std::string model;
  double lambda = kDefaultLambda;
  int radius = kDefaultOffsetRadius;
};

int cmd_fit_template(Context& ctx, const FitOpts& o) {
  CorpusOpts all = o.corpus;
  all.held_out = false;
  const auto data = all.load();
  if (!fs::exists(o.model)) throw IoError("model file not found: " + o.model);
  const auto model = load_model(o.model);
  const auto split = split_by_identity(data, o.corpus.split);
  std::vector<LandmarkSet> annotations;
  for (auto i : split.train) annotations.push_back(data[i].landmarks);
  const auto reg = fit_layout_regression(annotations, model.layout, o.lambda);

  // Corpus-mean template: the aggregate of every training annotation.
  std::vector<ScaledLandmarks> scaled;
  for (const auto& a : annotations) scaled.push_back({1.0, a});
  auto phi = aggregate_scales(scaled, 1.0);
  const auto derived = derive_template(reg, model.layout, phi, ctx.seed, o.radius);
  for (const auto& w : derived.warnings) ctx.err << "warning: " << w << '\n';

  ensure_dir(ctx.out_dir);
  const std::string v = std::to_string(model.layout.version_id);
  save_regression(reg, fs::path(ctx.out_dir) / ("regression_v" + v + ".mvr"));
  save_template(derived.value, fs::path(ctx.out_dir) / ("template_v" + v + ".mvk"));
  Manifest m;
  m.add("command", "fit-template");
  m.add("seed", seed_text(ctx.seed));
  m.add("layout", v);
  m.add("lambda", o.lambda);
  m.add("training_count", std::to_string(reg.training_count));
  m.add("offset_radius", std::to_string(o.radius));
  m.add("regions", std::to_string(derived.value.regions.size()));
  m.write(fs::path(ctx.out_dir) / ("template_manifest_v" + v + ".txt"));
  ctx.out << "fitted regression on " << reg.training_count << " annotations; template has "
          << derived.value.regions.size() << " regions\n";
  return kOk;
}

struct ProtectOpts {
  CorpusOpts corpus;
  OptimizerOpts optimizer;
  std::vector<std::string> models;
  std::vector<std::string> regressions;
  std::string template_file;
  std::vector<std::string> images;
  bool tune = false;
  std::size_t tune_sample = 8;
};

int cmd_protect(Context& ctx, const ProtectOpts& o) {
  auto data = o.corpus.load();
  if (!o.images.empty()) {
    std::vector<LabeledImage> picked;
    for (const auto& name : o.images) {
      auto it = std::find_if(data.begin(), data.end(), [&](const auto& li) { return li.name == name; });
      if (it == data.end()) throw IoError("image not in corpus: " + name);
      picked.push_back(*it);
    }
    data = std::move(picked);
  }
  const auto models = load_models(o.models);
  const auto targets = pointers(models);
  if (models.empty()) throw DomainError("protect: at least one --model is required");
  if (models.size() > kRecommendedMaxSources) {
    ctx.err << "warning: " << models.size()
            << " target recognizers; less than 3 are recommended\n";
  }
  std::optional<MaskTemplate> fixed;
  std::vector<RegressionModel> regs;
  if (!o.template_file.empty()) {
    if (!fs::exists(o.template_file)) throw IoError("template file not found: " + o.template_file);
    fixed = load_template(o.template_file);
  } else {
    if (o.regressions.size() != models.size()) {
      throw DomainError("protect: give one --regression per --model, or a --template");
    }
    for (const auto& r : o.regressions) {
      if (!fs::exists(r)) throw IoError("regression file not found: " + r);
      regs.push_back(load_regression(r));
    }
  }

  const auto templates_for = [&](const LabeledImage& li, std::uint64_t img_seed,
                                 std::vector<std::string>& warnings) {
    if (fixed) return *fixed;
    std::vector<MaskTemplate> parts;
    const auto phi = aggregate_single(li.landmarks);
    for (std::size_t m = 0; m < models.size(); ++m) {
      const auto seed = derive_seed(img_seed, "offsets/" + std::to_string(m));
      auto d = derive_template(regs[m], models[m].layout, phi, seed, o.optimizer.radius);
      warnings.insert(warnings.end(), d.warnings.begin(), d.warnings.end());
      parts.push_back(std::move(d.value));
    }
    if (parts.size() == 1) return parts.front();
    auto merged = superpose(parts);
    for (auto& w : merged.warnings) {
      if (w.find("recommended") == std::string::npos) warnings.push_back(w);
    }
    return merged.value;
  };

  NoiseSource base_source;
  base_source.seed = derive_seed(ctx.seed, "noise");
  if (o.optimizer.noise == "corpus") {
    // The bank comes from the training split so held-out faces never donate patches.
    CorpusOpts all = o.corpus;
    all.held_out = false;
    auto everything = all.load();
    std::vector<LabeledImage> refs;
    for (auto i : split_by_identity(everything, o.corpus.split).train) refs.push_back(std::move(everything[i]));
    base_source = harvest_patch_bank(refs, base_source.seed);
  } else {
    base_source.gaussian_sigma = o.optimizer.noise_sigma;
  }

  Manifest m;
  m.add("command", "protect");
  m.add("seed", seed_text(ctx.seed));
  m.add("noise", o.optimizer.noise);
  for (std::size_t i = 0; i < models.size(); ++i) {
    m.add("target." + std::to_string(i), std::to_string(models[i].layout.version_id));
  }

  double sigma = o.optimizer.sigma;
  if (o.tune) {
    const std::size_t n = std::min(o.tune_sample, data.size());
    std::vector<LabeledImage> sample(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(n));
    std::vector<MaskTemplate> sample_templates;
    std::vector<std::string> ignored;
    for (const auto& li : sample) {
      sample_templates.push_back(templates_for(li, derive_seed(ctx.seed, li.name), ignored));
    }
    const auto tuned = tune_sigma(sample, sample_templates, targets, ctx.fc_target,
                                  o.optimizer.config(derive_seed(ctx.seed, "tune")), base_source);
    sigma = tuned.sigma;
    m.add("fc_target", ctx.fc_target);
    for (std::size_t i = 0; i < tuned.trace.size(); ++i) {
      m.add("tune." + std::to_string(i), fmt(tuned.trace[i].first) + " " + fmt(tuned.trace[i].second));
    }
    ctx.out << "tuned sigma = " << fmt(sigma) << '\n';
  }
  m.add("sigma", sigma);

  const fs::path out_dir(ctx.out_dir);
  struct Outcome {
    PixelImage protected_image;
    CloakKey key;
    PerturbationResult result;
    std::vector<std::string> warnings;
  };
  std::vector<Outcome> outcomes(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const auto& li = data[i];
    const auto img_seed = derive_seed(ctx.seed, li.name);
    Outcome& oc = outcomes[i];
    const MaskTemplate mask = templates_for(li, img_seed, oc.warnings);
    auto cfg = o.optimizer.config(derive_seed(img_seed, "optimizer"));
    cfg.sigma = sigma;
    NoiseSource src = base_source;
    src.seed = derive_seed(img_seed, "noise");
    oc.result = optimize_perturbation(li.image, li.landmarks, mask, targets, cfg, src);
    oc.key = oc.result.key;
    oc.protected_image = protect(li.image, oc.key);
  });

  std::size_t no_gain = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& li = data[i];
    const auto& oc = outcomes[i];
    for (const auto& w : oc.warnings) ctx.err << "warning: " << li.name << ": " << w << '\n';
    const fs::path img_path = (out_dir / "protected" / li.name).replace_extension(".png");
    const fs::path key_path = key_path_for(out_dir / "keys", li.name);
    ensure_dir(img_path.parent_path());
    ensure_dir(key_path.parent_path());
    save_png(oc.protected_image, img_path);
    const auto key_bytes = serialize_key(oc.key);
    binio::write_file(key_path, key_bytes);
    const std::string p = "image." + li.name + ".";
    m.add(p + "regions", std::to_string(oc.key.mask.regions.size()));
    m.add(p + "objective", oc.result.objective);
    m.add(p + "sigma_used", oc.result.dssim);
    m.add(p + "no_gain", oc.result.no_gain ? "1" : "0");
    m.add(p + "evaluations", std::to_string(oc.result.evaluations));
    m.add(p + "digest", image_digest(oc.protected_image));
    m.add(p + "key_crc32", hex32(binio::crc32(key_bytes)));
    no_gain += oc.result.no_gain;
  }
  ensure_dir(out_dir);
  m.write(out_dir / "protect_manifest.txt");
  ctx.out << "protected " << data.size() << " image(s); " << no_gain << " without gain\n";
  return kOk;
}

std::vector<std::string> list_tree(const fs::path& root) {
  std::vector<std::string> out;
  if (!fs::is_directory(root)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().extension() == ".png") {
      out.push_back(fs::relative(e.path(), root).generic_string());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct RestoreOpts {
  std::string run_dir;
  std::string corpus;
  std::vector<std::string> protected_files;
  std::vector<std::string> key_files;
  std::vector<std::string> originals;
};

int cmd_restore(Context& ctx, const RestoreOpts& o) {
  std::vector<fs::path> inputs, keys, outputs, originals;
  if (!o.run_dir.empty()) {
    const fs::path run(o.run_dir);
    const auto names = list_tree(run / "protected");
    if (names.empty()) throw IoError("no protected images under " + (run / "protected").string());
    for (const auto& n : names) {
      inputs.push_back(run / "protected" / n);
      keys.push_back(key_path_for(run / "keys", n));
      outputs.push_back(run / "restored" / n);
      if (!o.corpus.empty()) originals.push_back(fs::path(o.corpus) / n);
    }
  } else {
    if (o.protected_files.empty() || o.protected_files.size() != o.key_files.size()) {
      throw DomainError("restore: --protected and --key lists must be non-empty and aligned");
    }
    if (!o.originals.empty() && o.originals.size() != o.protected_files.size()) {
      throw DomainError("restore: --original list must align with --protected");
    }
    for (std::size_t i = 0; i < o.protected_files.size(); ++i) {
      inputs.emplace_back(o.protected_files[i]);
      keys.emplace_back(o.key_files[i]);
      outputs.push_back(fs::path(ctx.out_dir) / fs::path(o.protected_files[i]).filename());
      if (!o.originals.empty()) originals.emplace_back(o.originals[i]);
    }
  }
  // Every key is validated before any image is written.
  std::vector<CloakKey> loaded;
  for (const auto& k : keys) {
    if (!fs::exists(k)) throw IoError("key file not found: " + k.string());
    try {
      loaded.push_back(load_key(k));
    } catch (const FormatError& e) {
      throw FormatError(k.string() + ": " + e.what());
    }
  }
  std::vector<PixelImage> restored;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto img = load_image(inputs[i]);
    try {
      restored.push_back(restore(img, loaded[i]));
    } catch (const DomainError& e) {
      throw DomainError(inputs[i].string() + " / " + keys[i].string() + ": " + e.what());
    }
  }
  Manifest m;
  m.add("command", "restore");
  std::size_t mismatched = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    ensure_dir(outputs[i].parent_path());
    save_png(restored[i], outputs[i]);
    m.add("image." + outputs[i].filename().string() + ".digest", image_digest(restored[i]));
    if (!originals.empty()) {
      const auto orig = normalize_canvas(load_image(originals[i]));
      const auto diff = orig.same_shape(restored[i]) ? count_differences(orig, restored[i]) : orig.size();
      m.add("image." + outputs[i].filename().string() + ".differing_samples", std::to_string(diff));
      ctx.out << outputs[i].string() << ": " << diff << " differing samples\n";
      mismatched += diff != 0;
    }
  }
  const fs::path manifest_dir = o.run_dir.empty() ? fs::path(ctx.out_dir) : fs::path(o.run_dir);
  ensure_dir(manifest_dir);
  m.write(manifest_dir / "restore_manifest.txt");
  ctx.out << "restored " << inputs.size() << " image(s)\n";
  if (mismatched) {
    ctx.err << "error: " << mismatched << " restored image(s) differ from their originals\n";
    return kVerificationMismatch;
  }
  return kOk;
}

struct EvalOpts {
  CorpusOpts corpus;
  std::vector<std::string> models;
  std::string run_dir;
  std::string baseline;
  double p = 167;
  double pressure = 63;
  bool pca = false;
};

// Regions a recognizer reads: its patches at the image's landmarks.
std::vector<Region> recognizer_regions(const RecognizerModel& m, const LandmarkSet& lm,
                                       const PixelImage& img) {
  std::vector<Region> out;
  for (const auto& label : m.layout.point_labels) {
    const auto& p = lm.at(label);
    out.push_back({patch_origin(p.x, img.width(), kRegionSize), patch_origin(p.y, img.height(), kRegionSize),
                   kRegionSize});
  }
  return out;
}

PixelImage apply_baseline(const std::string& kind, const LabeledImage& li,
                          const std::vector<RecognizerModel>& models, double p, double pressure,
                          std::uint64_t seed) {
  if (kind == "confuse") {
    std::vector<Region> regions;
    for (const auto& m : models) {
      const auto r = recognizer_regions(m, li.landmarks, li.image);
      regions.insert(regions.end(), r.begin(), r.end());
    }
    return baseline_pixel_confuse(li.image, regions, p, derive_seed(seed, li.name));
  }
  const auto& tip = li.landmarks.at("nose_tip");
  return baseline_twist(li.image, {tip.x * (li.image.width() - 1), tip.y * (li.image.height() - 1)},
                        pressure);
}

void write_report(const MetricsReport& rep, const Manifest& header, const fs::path& dir,
                  const std::string& stem) {
  ensure_dir(dir);
  Manifest m = header;
  m.append(rep.to_manifest());
  m.write(dir / (stem + "_manifest.txt"));
  write_text(dir / (stem + "_records.csv"), rep.records_csv());
}

int cmd_evaluate(Context& ctx, const EvalOpts& o) {
  const auto data = o.corpus.load();
  const auto models = load_models(o.models);
  if (models.empty()) throw DomainError("evaluate: at least one --model is required");
  const auto targets = pointers(models);
  Manifest header;
  header.add("command", "evaluate");
  header.add("seed", seed_text(ctx.seed));

  std::vector<LabeledImage> originals;
  std::vector<PixelImage> prot, rest;
  if (!o.baseline.empty()) {
    header.add("baseline", o.baseline);
    header.add(o.baseline == "confuse" ? "p" : "pressure", o.baseline == "confuse" ? o.p : o.pressure);
    originals = data;
    for (const auto& li : data) {
      prot.push_back(apply_baseline(o.baseline, li, models, o.p, o.pressure, ctx.seed));
    }
    rest = prot;  // baselines are not reversible
  } else {
    if (o.run_dir.empty()) throw DomainError("evaluate: --run or --baseline is required");
    const fs::path run(o.run_dir);
    const auto names = list_tree(run / "protected");
    if (names.empty()) throw IoError("missing artifacts: no images under " + (run / "protected").string());
    std::vector<std::string> absent;
    for (const auto& n : names) {
      if (!fs::exists(run / "restored" / n)) absent.push_back((run / "restored" / n).string());
      const auto it = std::find_if(data.begin(), data.end(), [&](const auto& li) { return li.name == n; });
      if (it == data.end()) absent.push_back((fs::path(o.corpus.corpus) / n).string());
    }
    if (!absent.empty()) {
      std::string msg = "missing artifacts:";
      for (const auto& a : absent) msg += "\n  " + a;
      throw IoError(msg);
    }
    for (const auto& n : names) {
      originals.push_back(*std::find_if(data.begin(), data.end(), [&](const auto& li) { return li.name == n; }));
      prot.push_back(load_image(run / "protected" / n));
      rest.push_back(load_image(run / "restored" / n));
    }
  }
  const auto rep = evaluate_run(targets, originals, prot, rest);
  const fs::path out_dir(ctx.out_dir);
  write_report(rep, header, out_dir, o.baseline.empty() ? "metrics" : "baseline_" + o.baseline);
  if (o.pca) {
    std::vector<ImageWithLandmarks> items;
    for (std::size_t i = 0; i < originals.size(); ++i) items.push_back({&originals[i].image, &originals[i].landmarks});
    for (std::size_t i = 0; i < originals.size(); ++i) items.push_back({&prot[i], &originals[i].landmarks});
    const auto pts = pca_project_2d(models.front(), items);
    std::vector<ScatterPoint> rows;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      rows.push_back({pts[i].x, pts[i].y, i < originals.size() ? "orig" : "protected"});
    }
    export_scatter(rows, out_dir / "pca_scatter.csv");
  }
  ctx.out << "T_o = " << fmt(rep.t_o) << "  F_c = " << fmt(rep.f_c) << "  T_r = " << fmt(rep.t_r)
          << "  r_s = " << fmt(rep.r_s) << "  mean_dssim = " << fmt(rep.mean_dssim) << '\n';
  return kOk;
}

struct BaselineOpts {
  CorpusOpts corpus;
  std::vector<std::string> models;
  std::string kind = "confuse";
  double p = 167;
  double pressure = 63;
};

int cmd_baseline(Context& ctx, const BaselineOpts& o) {
  const auto data = o.corpus.load();
  const auto models = load_models(o.models);
  if (models.empty()) throw DomainError("baseline: at least one --model is required");
  std::vector<PixelImage> out_imgs;
  const fs::path out_dir(ctx.out_dir);
  for (const auto& li : data) {
    out_imgs.push_back(apply_baseline(o.kind, li, models, o.p, o.pressure, ctx.seed));
    const fs::path path = (out_dir / "baseline" / li.name).replace_extension(".png");
    ensure_dir(path.parent_path());
    save_png(out_imgs.back(), path);
  }
  const auto rep = evaluate_run(pointers(models), data, out_imgs, out_imgs);
  Manifest header;
  header.add("command", "baseline");
  header.add("seed", seed_text(ctx.seed));
  header.add("baseline", o.kind);
  header.add(o.kind == "confuse" ? "p" : "pressure", o.kind == "confuse" ? o.p : o.pressure);
  write_report(rep, header, out_dir, "baseline_" + o.kind);
  ctx.out << o.kind << ": F_c = " << fmt(rep.f_c) << "  mean_dssim = " << fmt(rep.mean_dssim) << '\n';
  return kOk;
}

struct SuperposeOpts {
  std::vector<std::string> templates;
  std::vector<int> priorities;
};

int cmd_superpose(Context& ctx, const SuperposeOpts& o) {
  std::vector<MaskTemplate> ts;
  for (const auto& t : o.templates) {
    if (!fs::exists(t)) throw IoError("template file not found: " + t);
    ts.push_back(load_template(t));
  }
  const auto merged = superpose(ts, o.priorities);
  for (const auto& w : merged.warnings) ctx.err << "warning: " << w << '\n';
  const fs::path out(ctx.out_dir);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  save_template(merged.value, out);
  ctx.out << "merged " << ts.size() << " template(s): " << merged.value.regions.size() << " regions\n";
  return kOk;
}

struct PcaOpts {
  CorpusOpts corpus;
  std::string model;
  std::string run_dir;
};

int cmd_export_pca(Context& ctx, const PcaOpts& o) {
  const auto data = o.corpus.load();
  if (!fs::exists(o.model)) throw IoError("model file not found: " + o.model);
  const auto model = load_model(o.model);
  const fs::path run(o.run_dir);
  std::vector<PixelImage> prot;
  std::vector<const LabeledImage*> used;
  for (const auto& li : data) {
    const fs::path p = run / "protected" / li.name;
    if (!fs::exists(p)) continue;
    used.push_back(&li);
    prot.push_back(load_image(p));
  }
  if (used.empty()) throw IoError("missing artifacts: no protected images under " + (run / "protected").string());
  std::vector<ImageWithLandmarks> items;
  for (const auto* li : used) items.push_back({&li->image, &li->landmarks});
  for (std::size_t i = 0; i < used.size(); ++i) items.push_back({&prot[i], &used[i]->landmarks});
  const auto pts = pca_project_2d(model, items);
  std::vector<ScatterPoint> rows;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    rows.push_back({pts[i].x, pts[i].y, i < used.size() ? "orig" : "protected"});
  }
  const fs::path out(ctx.out_dir);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  export_scatter(rows, out);
  ctx.out << "wrote " << rows.size() << " points to " << out.string() << '\n';
  return kOk;
}

// Appends `--key value` for config entries the subcommand understands and
// the command line does not already set.
std::vector<std::string> merge_config(const std::vector<std::string>& args, CLI::App& app) {
  std::string config_path;
  for (std::size_t i = 0; i + 1 < args.size(); ++i) {
    if (args[i] == "--config") config_path = args[i + 1];
  }
  for (const auto& a : args) {
    if (a.rfind("--config=", 0) == 0) config_path = a.substr(9);
  }
  if (config_path.empty() || args.empty()) return args;
  CLI::App* sub = nullptr;
  for (auto* s : app.get_subcommands({})) {
    if (s->get_name() == args.front()) sub = s;
  }
  if (!sub) return args;
  std::vector<std::string> out = args;
  for (const auto& [key, value] : read_config(config_path)) {
    const std::string flag = "--" + key;
    if (std::find(args.begin(), args.end(), flag) != args.end()) continue;
    if (std::any_of(args.begin(), args.end(), [&](const std::string& a) { return a.rfind(flag + "=", 0) == 0; })) continue;
    if (sub->get_option_no_throw(flag) == nullptr) continue;
    auto* opt = sub->get_option(flag);
    if (opt->get_type_size() == 0) {
      if (value == "1" || value == "true" || value == "yes") out.push_back(flag);
      continue;
    }
    if (opt->get_expected_max() > 1) {
      std::stringstream ss(value);
      std::string item;
      while (ss >> item) {
        out.push_back(flag);
        out.push_back(item);
      }
    } else {
      out.push_back(flag);
      out.push_back(value);
    }
  }
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args) { return run(args, std::cout, std::cerr); }

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"maskveil: reversible mask-template image cloaking"};
  app.require_subcommand(1);
  Context ctx{out, err, 0, {}, 0.0};
  std::string config;

  const auto common = [&](CLI::App* sub, bool needs_out = true) {
    sub->add_option("--config", config, "key = value configuration file");
    sub->add_option("--seed", ctx.seed, "Master seed")->capture_default_str();
    auto* o = sub->add_option("--out", ctx.out_dir, "Output directory or file");
    if (needs_out) o->required();
  };

  SyntheticCorpusSpec corpus_spec;
  auto* make = app.add_subcommand("make-corpus", "Render the synthetic desk corpus");
  common(make);
  make->add_option("--identities", corpus_spec.identities)->capture_default_str();
  make->add_option("--per-identity", corpus_spec.images_per_identity)->capture_default_str();
  make->callback([&] { corpus_spec.seed = ctx.seed; });

  TrainOpts train;
  auto* train_cmd = app.add_subcommand("train-recognizer", "Train an eigen-projection recognizer");
  common(train_cmd);
  train.corpus.add_to(train_cmd);
  train_cmd->add_option("--layout", train.layout, "Built-in layout: 5, 9 or 17 points")->capture_default_str();
  train_cmd->add_option("--k", train.k, "Embedding dimension")->capture_default_str();
  train_cmd->add_option("--tau", train.tau, "tau: one value or k comma-separated values");

  FitOpts fit;
  auto* fit_cmd = app.add_subcommand("fit-template", "Fit the feature-point regression and a template");
  common(fit_cmd);
  fit.corpus.add_to(fit_cmd);
  fit_cmd->add_option("--model", fit.model, "Recognizer model file")->required();
  fit_cmd->add_option("--lambda", fit.lambda, "Ridge penalty")->capture_default_str();
  fit_cmd->add_option("--radius", fit.radius, "Offset radius (pixels)")->capture_default_str();

  ProtectOpts prot;
  auto* prot_cmd = app.add_subcommand("protect", "Optimize keys and write protected images");
  common(prot_cmd);
  prot.corpus.add_to(prot_cmd);
  prot.optimizer.add_to(prot_cmd);
  prot_cmd->add_option("--model", prot.models, "Target recognizer model file(s)")->required();
  prot_cmd->add_option("--regression", prot.regressions, "Regression file per model");
  prot_cmd->add_option("--template", prot.template_file, "Use this template for every image");
  prot_cmd->add_option("--fc-target", ctx.fc_target, "Required F_c for --tune-sigma")->capture_default_str();
  prot_cmd->add_flag("--tune-sigma", prot.tune, "Bisect sigma to the smallest budget reaching --fc-target");
  prot_cmd->add_option("--tune-sample", prot.tune_sample, "Images used for tuning")->capture_default_str();
  prot_cmd->add_option("images", prot.images, "Relative image names (default: whole corpus)");

  RestoreOpts rest;
  auto* rest_cmd = app.add_subcommand("restore", "Restore protected images with their keys");
  common(rest_cmd, false);
  rest_cmd->add_option("--run", rest.run_dir, "Protect output directory (protected/ and keys/)");
  rest_cmd->add_option("--corpus", rest.corpus, "Originals for verification in --run mode");
  rest_cmd->add_option("--protected", rest.protected_files, "Protected image(s)");
  rest_cmd->add_option("--key", rest.key_files, "Key file(s), aligned with --protected");
  rest_cmd->add_option("--original", rest.originals, "Originals for verification");

  EvalOpts eval;
  auto* eval_cmd = app.add_subcommand("evaluate", "Compute T_o, F_c, T_r, r_s and DSSIM");
  common(eval_cmd);
  eval.corpus.add_to(eval_cmd);
  eval_cmd->add_option("--model", eval.models, "Target recognizer model file(s)")->required();
  eval_cmd->add_option("--run", eval.run_dir, "Directory with protected/ and restored/");
  eval_cmd->add_option("--baseline", eval.baseline)->check(CLI::IsMember({"confuse", "twist"}));
  eval_cmd->add_option("--p", eval.p, "Confusion threshold")->capture_default_str();
  eval_cmd->add_option("--pressure", eval.pressure, "Twist pressure")->capture_default_str();
  eval_cmd->add_flag("--pca", eval.pca, "Also export a 2-D PCA scatter");
  eval_cmd->add_option("--fc-target", ctx.fc_target);
  eval_cmd->add_option("--sigma", prot.optimizer.sigma);

  BaselineOpts base;
  auto* base_cmd = app.add_subcommand("baseline", "Apply a baseline attack and evaluate it");
  common(base_cmd);
  base.corpus.add_to(base_cmd);
  base_cmd->add_option("--model", base.models, "Target recognizer model file(s)")->required();
  base_cmd->add_option("--kind", base.kind)->check(CLI::IsMember({"confuse", "twist"}))->capture_default_str();
  base_cmd->add_option("--p", base.p, "Confusion threshold")->capture_default_str();
  base_cmd->add_option("--pressure", base.pressure, "Twist pressure")->capture_default_str();

  SuperposeOpts sup;
  auto* sup_cmd = app.add_subcommand("superpose", "Merge templates of several recognizers");
  common(sup_cmd);
  sup_cmd->add_option("--template", sup.templates, "Template file(s), strongest first")->required();
  sup_cmd->add_option("--priority", sup.priorities, "Priority rank per template (lower wins)");

  PcaOpts pca;
  auto* pca_cmd = app.add_subcommand("export-pca", "Export 2-D PCA scatter of originals vs protected");
  common(pca_cmd);
  pca.corpus.add_to(pca_cmd);
  pca_cmd->add_option("--model", pca.model, "Recognizer model file")->required();
  pca_cmd->add_option("--run", pca.run_dir, "Protect output directory")->required();

  try {
    auto merged = merge_config(args, app);
    std::vector<std::string> reversed(merged.rbegin(), merged.rend());
    try {
      app.parse(reversed);
    } catch (const CLI::ParseError& e) {
      std::ostringstream o, eo;
      const int code = app.exit(e, o, eo);
      out << o.str();
      err << eo.str();
      return code == 0 ? kOk : kDomainOrFormat;
    }
    if (make->parsed()) return cmd_make_corpus(ctx, corpus_spec);
    if (train_cmd->parsed()) return cmd_train(ctx, train);
    if (fit_cmd->parsed()) return cmd_fit_template(ctx, fit);
    if (prot_cmd->parsed()) return cmd_protect(ctx, prot);
    if (rest_cmd->parsed()) return cmd_restore(ctx, rest);
    if (eval_cmd->parsed()) return cmd_evaluate(ctx, eval);
    if (base_cmd->parsed()) return cmd_baseline(ctx, base);
    if (sup_cmd->parsed()) return cmd_superpose(ctx, sup);
    if (pca_cmd->parsed()) return cmd_export_pca(ctx, pca);
    return kDomainOrFormat;
  } catch (const UnreachableTargetError& e) {
    err << "error: " << e.what() << '\n';
    return kUnreachableTarget;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kDomainOrFormat;
  }
}

}  // namespace maskveil::cli
