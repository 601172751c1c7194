// Acceptance suite: one PASS/FAIL line per criterion.
// `maskveil_acceptance --write-pins` records the desk-run values to pin.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "maskveil/binio.hpp"
#include "maskveil/cli.hpp"
#include "maskveil/errors.hpp"
#include "maskveil/evaluation.hpp"
#include "maskveil/image.hpp"
#include "maskveil/mask_template.hpp"
#include "maskveil/perturbation.hpp"
#include "maskveil/recognizer.hpp"
#include "maskveil/rng.hpp"

namespace fs = std::filesystem;
using namespace maskveil;

namespace {

struct Check {
  bool ok = true;
  std::string detail;

  void expect(bool cond, const std::string& what) {
    if (!cond && ok) detail = what;
    ok = ok && cond;
  }
};

using Pins = std::map<std::string, std::string>;

Pins read_pins(const fs::path& path) {
  Pins pins;
  if (fs::exists(path)) pins = cli::read_config(path);
  return pins;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::map<std::string, std::string> read_manifest(const fs::path& p) { return cli::read_config(p); }

int invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::cerr << "  command failed (" << code << "): " << args.front() << "\n" << err.str();
  return code;
}

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", static_cast<unsigned>(v));
  return buf;
}

std::string file_crc(const fs::path& p) {
  const auto bytes = binio::read_file(p);
  return hex32(binio::crc32(bytes));
}

PixelImage random_image(SplitMix64& rng, int w, int h, int ch) {
  PixelImage img(w, h, ch);
  for (auto& b : img.data()) b = static_cast<std::uint8_t>(rng.next() & 0xFF);
  return img;
}

std::vector<Region> random_regions(SplitMix64& rng, int w, int h, std::size_t count) {
  std::vector<Region> out;
  for (std::size_t attempt = 0; out.size() < count && attempt < count * 200; ++attempt) {
    Region r{static_cast<int>(rng.uniform_int(0, w - kRegionSize)),
             static_cast<int>(rng.uniform_int(0, h - kRegionSize)), kRegionSize};
    if (std::none_of(out.begin(), out.end(), [&](const Region& k) { return k.overlaps(r); })) out.push_back(r);
  }
  return out;
}

MaskTemplate make_template(std::vector<Region> regions, std::uint16_t version, int w = kCanvasSize,
                           int h = kCanvasSize) {
  MaskTemplate t;
  t.source_versions = {version};
  t.canvas_width = w;
  t.canvas_height = h;
  t.priorities.assign(regions.size(), 1);
  t.regions = std::move(regions);
  return t;
}

// ---------------------------------------------------------------------------

Check table_rows() {
  Check c;
  const struct {
    double t_o, f_c, r_s;
  } rows[] = {{0.999, 0.918, 0.849}, {0.997, 0.989, 0.981}, {0.998, 0.996, 0.994},
              {0.986, 0.936, 0.891}, {0.965, 0.999, 1.034}};
  for (const auto& r : rows) {
    const double got = protection_rate(r.t_o, r.f_c);
    char buf[96];
    std::snprintf(buf, sizeof buf, "r_s(%.3f, %.3f) = %.6f, want %.3f", r.t_o, r.f_c, got, r.r_s);
    c.expect(std::abs(got - r.r_s) <= 0.001, buf);
  }
  if (c.ok) c.detail = "5/5 rows within 0.001";
  return c;
}

Check bit_exact_restore() {
  Check c;
  SplitMix64 rng(2);
  std::size_t regions_total = 0;
  for (int i = 0; i < 100; ++i) {
    const auto img = random_image(rng, 256, 256, 3);
    CloakKey key;
    key.mask = make_template(random_regions(rng, 256, 256, static_cast<std::size_t>(rng.uniform_int(1, 500))), 9);
    regions_total += key.mask.regions.size();
    key.payloads.resize(key.mask.regions.size() * 48);
    for (auto& b : key.payloads) b = static_cast<std::uint8_t>(rng.next() & 0xFF);
    const auto prot = protect(img, key);
    c.expect(count_differences(restore(prot, key), img) == 0, "round trip differs on image " + std::to_string(i));
    for (int y = 0; y < 256 && c.ok; ++y) {
      for (int x = 0; x < 256; ++x) {
        const bool inside = std::any_of(key.mask.regions.begin(), key.mask.regions.end(),
                                        [&](const Region& r) { return r.contains(x, y); });
        if (inside) continue;
        for (int ch = 0; ch < 3; ++ch) {
          c.expect(prot.at(x, y, ch) == img.at(x, y, ch), "protect touched a pixel outside the mask");
        }
      }
    }
  }
  if (c.ok) c.detail = "100 images, " + std::to_string(regions_total) + " regions, 0 differing samples";
  return c;
}

Check regression_oracle() {
  Check c;
  SplitMix64 rng(3);
  double worst_rel = 0, worst_grad = 0;
  const double lambdas[] = {0.0, 0.1, 1.0};
  for (int sys = 0; sys < 50; ++sys) {
    const auto cols = static_cast<Eigen::Index>(rng.uniform_int(1, 32));
    const auto rows = static_cast<Eigen::Index>(rng.uniform_int(cols, 64));
    const double lambda = lambdas[sys % 3];
    Eigen::MatrixXd a(rows, cols), t(rows, 1);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.gaussian();
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.gaussian();
    const Eigen::VectorXd w = fit_feature_regression(a, t, lambda).weights.col(0);
    Eigen::MatrixXd n = a.transpose() * a + lambda * Eigen::MatrixXd::Identity(cols, cols);
    const Eigen::VectorXd oracle = n.fullPivLu().inverse() * (a.transpose() * t);
    worst_rel = std::max(worst_rel, (w - oracle).norm() / std::max(oracle.norm(), 1e-300));
    const auto objective = [&](const Eigen::VectorXd& v) {
      return regression_loss(a, t.col(0), v) + lambda * v.squaredNorm();
    };
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < cols; ++i) {
      Eigen::VectorXd up = w, dn = w;
      up[i] += h;
      dn[i] -= h;
      worst_grad = std::max(worst_grad, std::abs(objective(up) - objective(dn)) / (2 * h));
    }
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "max rel err %.2e (<= 1e-9), max |grad| %.2e (<= 1e-6)", worst_rel, worst_grad);
  c.expect(worst_rel <= 1e-9 && worst_grad <= 1e-6, buf);
  c.detail = buf;
  return c;
}

Check budget_property() {
  Check c;
  SplitMix64 rng(4);
  std::size_t gained = 0;
  for (int run = 0; run < 200; ++run) {
    const int w = 32 + 8 * static_cast<int>(rng.uniform_int(0, 4));
    const auto img = random_image(rng, w, w, 3);
    FeatureLayout layout{1, {"a", "b", "c"}, 4, 3};
    LandmarkSet lm{layout.point_labels, {}};
    for (int i = 0; i < 3; ++i) lm.points.push_back({0.1 + 0.8 * rng.uniform(), 0.1 + 0.8 * rng.uniform()});
    std::vector<Region> regions;
    for (const auto& p : lm.points) {
      const Region r{patch_origin(p.x, w, 4), patch_origin(p.y, w, 4), 4};
      if (std::none_of(regions.begin(), regions.end(), [&](const Region& k) { return k.overlaps(r); })) {
        regions.push_back(r);
      }
    }
    const auto mask = make_template(regions, 1, w, w);
    const Eigen::Index d = 144, k = 5;
    Eigen::MatrixXd g(d, k);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.gaussian();
    RecognizerModel m;
    m.layout = layout;
    m.basis = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ() * Eigen::MatrixXd::Identity(d, k);
    m.mean = Eigen::VectorXd::Constant(d, 0.5);
    m.tau = Eigen::VectorXd::Ones(k);
    m.identities = {"a", "b"};
    m.centroids = Eigen::MatrixXd::Zero(k, 2);
    const RecognizerModel* targets[] = {&m};

    PerturbationConfig cfg;
    cfg.sigma = std::exp(std::log(1e-4) + rng.uniform() * (std::log(0.2) - std::log(1e-4)));
    cfg.phase1_rounds = 60;
    cfg.group_size = 2;
    cfg.group_rounds = 10;
    cfg.seed = rng.next();
    NoiseSource src;
    src.seed = rng.next();
    src.gaussian_sigma = 0.05 + 0.5 * rng.uniform();
    const auto res = optimize_perturbation(img, lm, mask, targets, cfg, src);
    const double got = dssim(img, protect(img, res.key));
    c.expect(got <= cfg.sigma + 1e-6, "run " + std::to_string(run) + " exceeds its budget");
    c.expect(std::is_sorted(res.trace.begin(), res.trace.end()), "run " + std::to_string(run) + " trace decreases");
    gained += !res.no_gain;
  }
  if (c.ok) c.detail = "200 runs within budget, traces non-decreasing (" + std::to_string(gained) + " with gain)";
  return c;
}

Check superposition() {
  Check c;
  SplitMix64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<MaskTemplate> ts;
    const auto count = static_cast<std::size_t>(rng.uniform_int(2, 5));
    for (std::size_t i = 0; i < count; ++i) {
      ts.push_back(make_template(random_regions(rng, 256, 256, 80), static_cast<std::uint16_t>(i + 1)));
    }
    std::vector<int> prio(count);
    for (auto& p : prio) p = static_cast<int>(rng.uniform_int(1, 3));
    const auto merged = superpose(ts, prio);
    const auto& m = merged.value;
    for (std::size_t i = 0; i < m.regions.size(); ++i) {
      for (std::size_t j = i + 1; j < m.regions.size(); ++j) {
        c.expect(!m.regions[i].overlaps(m.regions[j]), "merged regions overlap");
      }
    }
    // Every dropped region collides with a kept region of equal or stronger rank.
    for (std::size_t t = 0; t < count; ++t) {
      for (const auto& r : ts[t].regions) {
        const auto it = std::find(m.regions.begin(), m.regions.end(), r);
        if (it != m.regions.end()) continue;
        bool justified = false;
        for (std::size_t j = 0; j < m.regions.size(); ++j) {
          justified = justified || (m.regions[j].overlaps(r) && m.priorities[j] <= prio[t]);
        }
        c.expect(justified, "region dropped without a stronger conflict");
      }
    }
    const bool warned = std::any_of(merged.warnings.begin(), merged.warnings.end(), [](const std::string& w) {
      return w.find("less than 3 are recommended") != std::string::npos;
    });
    c.expect(warned == (count > 3), "recommendation warning mismatch for " + std::to_string(count) + " sources");

    const auto img = random_image(rng, 256, 256, 3);
    CloakKey key;
    key.mask = m;
    key.payloads.resize(m.regions.size() * 48);
    for (auto& b : key.payloads) b = static_cast<std::uint8_t>(rng.next() & 0xFF);
    const auto bytes = serialize_key(key);
    const auto loaded = std::get<CloakKey>(deserialize_key_file(bytes));
    c.expect(count_differences(restore(protect(img, key), loaded), img) == 0, "superposed key restore differs");
  }
  if (c.ok) c.detail = "50 merges disjoint, priority-consistent, warning iff > 3, restores exact";
  return c;
}

Check key_format() {
  Check c;
  SplitMix64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    CloakKey key;
    key.mask = make_template(random_regions(rng, 256, 256, static_cast<std::size_t>(rng.uniform_int(0, 200))), 9);
    key.payloads.resize(key.mask.regions.size() * 48);
    for (auto& b : key.payloads) b = static_cast<std::uint8_t>(rng.next() & 0xFF);
    const auto bytes = serialize_key(key);
    c.expect(serialize_key(std::get<CloakKey>(deserialize_key_file(bytes))) == bytes, "key round trip differs");
    const auto tbytes = serialize_template(key.mask);
    c.expect(serialize_template(std::get<MaskTemplate>(deserialize_key_file(tbytes))) == tbytes,
             "template round trip differs");
  }
  c.expect(serialize_template(make_template({}, 9)).size() == 23, "empty template is not 23 bytes");

  CloakKey key;
  key.mask = make_template({{0, 0, 4}, {10, 10, 4}}, 9);
  key.payloads.assign(96, 0x3C);
  const auto good = serialize_key(key);
  const auto raises = [&](std::vector<std::uint8_t> bytes, auto tag, const std::string& name) {
    using Want = decltype(tag);
    try {
      deserialize_key_file(bytes);
      c.expect(false, name + ": accepted");
    } catch (const Want&) {
    } catch (const std::exception& e) {
      c.expect(false, name + ": wrong error: " + e.what());
    }
  };
  auto magic = good;
  magic[0] ^= 0x20;
  raises(magic, BadMagicError(""), "magic");
  auto version = good;
  version[4] = 7;
  raises(version, UnsupportedVersionError(""), "version");
  raises(std::vector<std::uint8_t>(good.begin(), good.end() - 20), TruncatedFileError(""), "truncation");
  auto crc = good;
  crc[40] ^= 0x10;
  raises(crc, ChecksumError(""), "checksum");
  if (c.ok) c.detail = "100 byte-identical round trips; magic/version/truncation/CRC raise distinct errors";
  return c;
}

// ---------------------------------------------------------------------------
// Desk-scale experiment through the command line.

struct DeskRun {
  fs::path root;
  bool ok = true;
  std::map<std::string, std::string> values;
};

bool run_pipeline(const fs::path& root) {
  const auto s = [&](const char* rel) { return (root / rel).string(); };
  const std::vector<std::vector<std::string>> steps = {
      {"make-corpus", "--seed", "2024", "--identities", "20", "--per-identity", "6", "--out", s("corpus")},
      {"train-recognizer", "--corpus", s("corpus"), "--layout", "9", "--k", "32", "--seed", "2024", "--out",
       s("models")},
      {"fit-template", "--corpus", s("corpus"), "--model", s("models/model_v9.mvm"), "--seed", "2024", "--out",
       s("models")},
      {"protect", "--corpus", s("corpus"), "--held-out", "--model", s("models/model_v9.mvm"), "--regression",
       s("models/regression_v9.mvr"), "--sigma", "0.05", "--seed", "7", "--out", s("run")},
      {"restore", "--run", s("run"), "--corpus", s("corpus")},
      {"evaluate", "--corpus", s("corpus"), "--held-out", "--model", s("models/model_v9.mvm"), "--run", s("run"),
       "--out", s("eval")},
      {"export-pca", "--corpus", s("corpus"), "--held-out", "--model", s("models/model_v9.mvm"), "--run",
       s("run"), "--out", s("eval/pca.csv")},
      {"superpose", "--template", s("models/template_v9.mvk"), s("models/template_v9.mvk"), "--out",
       s("models/merged.mvk")},
  };
  for (const auto& step : steps) {
    if (invoke(step) != 0) return false;
  }
  for (const char* p : {"20", "88", "167", "325"}) {
    if (invoke({"baseline", "--corpus", s("corpus"), "--held-out", "--model", s("models/model_v9.mvm"), "--kind",
                "confuse", "--p", p, "--seed", "7", "--out", s((std::string("baseline/confuse_") + p).c_str())}) != 0) {
      return false;
    }
  }
  for (const char* q : {"50", "59", "63", "72"}) {
    if (invoke({"baseline", "--corpus", s("corpus"), "--held-out", "--model", s("models/model_v9.mvm"), "--kind",
                "twist", "--pressure", q, "--seed", "7", "--out",
                s((std::string("baseline/twist_") + q).c_str())}) != 0) {
      return false;
    }
  }
  return true;
}

std::vector<std::string> tree(const fs::path& root) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root).generic_string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

double num(const std::map<std::string, std::string>& m, const std::string& key) {
  const auto it = m.find(key);
  return it == m.end() ? std::nan("") : std::stod(it->second);
}

}  // namespace

int main(int argc, char** argv) {
  const bool write_pins = argc > 1 && std::string(argv[1]) == "--write-pins";
  const fs::path pins_path = MASKVEIL_PINS_FILE;
  const fs::path corpus_pin = pins_path.parent_path() / "desk_corpus_manifest.txt";
  Pins pins = read_pins(pins_path);

  int failures = 0;
  const auto report = [&](const char* id, const char* name, const Check& c, double seconds) {
    std::printf("[%s] %s %s: %s (%.1fs)\n", c.ok ? "PASS" : "FAIL", id, name, c.detail.c_str(), seconds);
    std::fflush(stdout);
    failures += !c.ok;
  };
  const auto timed = [&](const char* id, const char* name, const std::function<Check()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    const Check c = fn();
    report(id, name, c, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  };

  timed("C1", "protection rate matches reference rows", table_rows);
  timed("C2", "bit-exact restoration", bit_exact_restore);
  timed("C3", "regression oracle equivalence", regression_oracle);
  timed("C4", "budget enforcement", budget_property);

  const fs::path base = fs::temp_directory_path() / "maskveil_acceptance";
  fs::remove_all(base);
  const auto t0 = std::chrono::steady_clock::now();
  const bool first_ok = run_pipeline(base / "a");
  const double first_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const auto train = first_ok ? read_manifest(base / "a/models/train_manifest_v9.txt") : Pins{};
  const auto metrics = first_ok ? read_manifest(base / "a/eval/metrics_manifest.txt") : Pins{};
  std::map<std::string, std::string> observed;
  if (first_ok) {
    observed["T_o"] = metrics.at("T_o");
    observed["F_c"] = metrics.at("F_c");
    observed["T_r"] = metrics.at("T_r");
    observed["restored_accuracy"] = metrics.at("restored_accuracy");
    observed["mean_dssim"] = metrics.at("mean_dssim");
    observed["held_out_T_o"] = train.at("T_o");
    observed["model_crc32"] = train.at("model_crc32");
    observed["protect_manifest_crc32"] = file_crc(base / "a/run/protect_manifest.txt");
    for (const char* p : {"20", "88", "167", "325"}) {
      observed[std::string("confuse_") + p + "_F_c"] =
          read_manifest(base / "a/baseline" / (std::string("confuse_") + p) / "baseline_confuse_manifest.txt")
              .at("F_c");
    }
    for (const char* q : {"50", "59", "63", "72"}) {
      observed[std::string("twist_") + q + "_F_c"] =
          read_manifest(base / "a/baseline" / (std::string("twist_") + q) / "baseline_twist_manifest.txt").at("F_c");
    }
  }

  if (write_pins && first_ok) {
    std::ofstream out(pins_path, std::ios::trunc);
    out << "# Desk-run values recorded on the first verified run.\n";
    for (const auto& [k, v] : observed) out << k << " = " << v << "\n";
    fs::copy_file(base / "a/corpus/corpus_manifest.txt", corpus_pin, fs::copy_options::overwrite_existing);
    pins = observed;
    std::printf("pins written to %s\n", pins_path.string().c_str());
  }

  {
    Check c;
    c.expect(first_ok, "pipeline command failed");
    if (first_ok) {
      const double t_o = num(observed, "T_o"), f_c = num(observed, "F_c");
      const double restored = num(observed, "restored_accuracy"), r_s = num(metrics, "r_s");
      char buf[256];
      std::snprintf(buf, sizeof buf, "T_o %.4f (>= 0.9), F_c %.4f (>= 0.7), restored acc %.4f (|d| <= 0.01), r_s %.4f",
                    t_o, f_c, restored, r_s);
      c.expect(t_o >= 0.9, std::string("T_o below 0.9; ") + buf);
      c.expect(f_c >= 0.7, std::string("F_c below 0.7; ") + buf);
      c.expect(std::abs(restored - t_o) <= 0.01, std::string("restored accuracy drifts; ") + buf);
      c.expect(std::abs(r_s - protection_rate(t_o, f_c)) <= 1e-6, "r_s inconsistent with T_o and F_c");
      c.expect(fs::exists(corpus_pin) && slurp(corpus_pin) == slurp(base / "a/corpus/corpus_manifest.txt"),
               "corpus digests differ from the pinned manifest");
      for (const auto& [k, v] : observed) {
        const auto it = pins.find(k);
        c.expect(it != pins.end(), "no pinned value for " + k);
        if (it != pins.end()) c.expect(it->second == v, k + " = " + v + " but pinned " + it->second);
      }
      c.expect(first_secs < 600, "pipeline slower than 10 min");
      if (c.ok) c.detail = std::string(buf) + ", matches pins";
    }
    report("C5", "desk-scale protection experiment", c, first_secs);
  }

  timed("C6", "superposition correctness", superposition);

  timed("C7", "baseline trends", [&] {
    Check c;
    c.expect(first_ok, "pipeline command failed");
    if (!first_ok) return c;
    std::vector<double> confuse, twist;
    for (const char* p : {"20", "88", "167", "325"}) confuse.push_back(num(observed, std::string("confuse_") + p + "_F_c"));
    for (const char* q : {"50", "59", "63", "72"}) twist.push_back(num(observed, std::string("twist_") + q + "_F_c"));
    char buf[200];
    std::snprintf(buf, sizeof buf, "confuse F_c %.3f %.3f %.3f %.3f; twist F_c %.3f %.3f %.3f %.3f", confuse[0],
                  confuse[1], confuse[2], confuse[3], twist[0], twist[1], twist[2], twist[3]);
    c.expect(std::is_sorted(confuse.begin(), confuse.end()), std::string("confusion not monotone: ") + buf);
    c.expect(std::is_sorted(twist.begin(), twist.end()), std::string("twist not monotone: ") + buf);
    if (c.ok) c.detail = buf;
    return c;
  });

  timed("C8", "determinism", [&] {
    Check c;
    c.expect(first_ok, "pipeline command failed");
    if (!first_ok) return c;
    c.expect(run_pipeline(base / "b"), "second pipeline run failed");
    if (!c.ok) return c;
    const auto files = tree(base / "a");
    c.expect(files == tree(base / "b"), "artifact sets differ");
    std::size_t same = 0;
    for (const auto& f : files) {
      const bool eq = slurp(base / "a" / f) == slurp(base / "b" / f);
      c.expect(eq, f + " differs between runs");
      same += eq;
    }
    if (c.ok) c.detail = std::to_string(same) + " artifacts byte-identical across reruns";
    return c;
  });

  timed("C9", "key-file format", key_format);

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
