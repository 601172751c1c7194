#include "maskveil/perturbation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "maskveil/errors.hpp"

namespace maskveil {

void NoiseSource::validate() const {
  if (kind == NoiseKind::kCorpus) {
    if (patch_bytes == 0 || bank.empty()) throw DomainError("noise source: corpus bank is empty");
    if (bank.size() % patch_bytes != 0) throw DomainError("noise source: ragged corpus bank");
  } else if (!(gaussian_sigma >= 0.0)) {
    throw DomainError("noise source: gaussian sigma must be >= 0");
  }
}

NoiseSource harvest_patch_bank(std::span<const LabeledImage> references, std::uint64_t seed) {
  NoiseSource src;
  src.kind = NoiseKind::kCorpus;
  src.seed = seed;
  if (references.empty()) throw DomainError("harvest_patch_bank: no reference images");
  src.patch_bytes = static_cast<std::size_t>(kRegionSize * kRegionSize * references[0].image.channels());
  for (const auto& ref : references) {
    const auto& img = ref.image;
    if (static_cast<std::size_t>(kRegionSize * kRegionSize * img.channels()) != src.patch_bytes) {
      throw DomainError("harvest_patch_bank: mixed channel counts");
    }
    for (const auto& p : ref.landmarks.points) {
      const int ox = patch_origin(p.x, img.width(), kRegionSize);
      const int oy = patch_origin(p.y, img.height(), kRegionSize);
      for (int y = oy; y < oy + kRegionSize; ++y) {
        for (int x = ox; x < ox + kRegionSize; ++x) {
          for (int c = 0; c < img.channels(); ++c) src.bank.push_back(img.at(x, y, c));
        }
      }
    }
  }
  return src;
}

NoiseSampler::NoiseSampler(const NoiseSource& source) : source_(source), rng_(source.seed) {
  source.validate();
}

void NoiseSampler::fill(std::span<std::uint8_t> out) {
  if (source_.kind == NoiseKind::kGaussian) {
    const double scale = source_.gaussian_sigma * 255.0;
    for (auto& b : out) {
      const double v = std::round(std::abs(rng_.gaussian()) * scale);
      b = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
    return;
  }
  if (out.size() != source_.patch_bytes) throw DomainError("noise sampler: patch size mismatch");
  const auto idx = static_cast<std::size_t>(
      rng_.uniform_int(0, static_cast<std::int64_t>(source_.bank_size()) - 1));
  std::copy_n(source_.bank.begin() + static_cast<std::ptrdiff_t>(idx * source_.patch_bytes),
              source_.patch_bytes, out.begin());
}

std::vector<std::uint8_t> sample_noise(const NoiseSource& source, std::size_t region_count) {
  NoiseSampler sampler(source);
  std::vector<std::uint8_t> out(region_count * source.patch_bytes);
  for (std::size_t i = 0; i < region_count; ++i) {
    sampler.fill(std::span(out).subspan(i * source.patch_bytes, source.patch_bytes));
  }
  return out;
}

void PerturbationConfig::validate() const {
  if (!(sigma > 0.0 && sigma <= 1.0)) throw DomainError("perturbation: sigma must be in (0, 1]");
  if (phase1_rounds < 0 || group_rounds < 0) throw DomainError("perturbation: negative round count");
  if (group_size < 1) throw DomainError("perturbation: group size must be >= 1");
}

namespace {

std::vector<Eigen::VectorXd> base_embeddings(const PixelImage& img, const LandmarkSet& landmarks,
                                             std::span<const RecognizerModel* const> targets) {
  std::vector<Eigen::VectorXd> out;
  out.reserve(targets.size());
  for (const auto* m : targets) out.push_back(embed(*m, img, landmarks));
  return out;
}

double displacement(const PixelImage& perturbed, const LandmarkSet& landmarks,
                    std::span<const RecognizerModel* const> targets,
                    const std::vector<Eigen::VectorXd>& base) {
  double worst = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < targets.size(); ++t) {
    worst = std::min(worst, (embed(*targets[t], perturbed, landmarks) - base[t]).norm());
  }
  return worst;
}

// Working image kept equal to original XOR pads, with an incrementally
// maintained DSSIM against the original.
class PadState {
 public:
  PadState(const PixelImage& original, const MaskTemplate& mask)
      : original_(original),
        regions_(mask.regions),
        per_(mask.payload_bytes_per_region()),
        pads_(regions_.size() * per_, 0),
        image_(original),
        tracker_(original_, image_) {}

  std::span<const std::uint8_t> pad(std::size_t r) const {
    return std::span(pads_).subspan(r * per_, per_);
  }
  const std::vector<std::uint8_t>& pads() const { return pads_; }
  const PixelImage& image() const { return image_; }
  const PixelImage& original() const { return original_; }
  const Region& region(std::size_t r) const { return regions_[r]; }
  std::size_t per_region() const { return per_; }
  std::size_t region_count() const { return regions_.size(); }
  double dssim() const { return tracker_.value(); }

  void set_pad(std::size_t r, std::span<const std::uint8_t> pad) {
    std::copy(pad.begin(), pad.end(), pads_.begin() + static_cast<std::ptrdiff_t>(r * per_));
    const Region& reg = regions_[r];
    const int ch = image_.channels();
    std::size_t k = 0;
    for (int y = reg.origin_y; y < reg.origin_y + reg.size; ++y) {
      for (int x = reg.origin_x; x < reg.origin_x + reg.size; ++x) {
        for (int c = 0; c < ch; ++c) image_.at(x, y, c) = original_.at(x, y, c) ^ pad[k++];
      }
    }
    tracker_.update(image_, reg);
  }

  void set_all(const std::vector<std::uint8_t>& pads) {
    for (std::size_t r = 0; r < regions_.size(); ++r) {
      const auto next = std::span(pads).subspan(r * per_, per_);
      if (!std::equal(next.begin(), next.end(), pad(r).begin())) set_pad(r, next);
    }
  }

 private:
  const PixelImage& original_;
  std::vector<Region> regions_;
  std::size_t per_;
  std::vector<std::uint8_t> pads_;
  PixelImage image_;
  DssimTracker tracker_;
};

class HillClimber {
 public:
  HillClimber(const PixelImage& img, const LandmarkSet& landmarks, const MaskTemplate& mask,
              std::span<const RecognizerModel* const> targets, const PerturbationConfig& config,
              const NoiseSource& source)
      : landmarks_(landmarks),
        targets_(targets),
        config_(config),
        source_(source),
        sampler_(source),
        rng_(config.seed),
        state_(img, mask),
        base_(base_embeddings(img, landmarks, targets)),
        mask_(mask),
        best_pads_(state_.pads()),
        scratch_(state_.per_region()) {}

  PerturbationResult run() {
    const std::size_t n = state_.region_count();
    current_obj_ = 0.0;
    if (n > 0) {
      std::vector<std::size_t> all(n);
      std::iota(all.begin(), all.end(), 0);
      // Phase 1: joint exploration over every region.
      climb(all, config_.phase1_rounds, /*single=*/false);

      // Phase 2: independent hunts per group from the phase-1 point, then
      // recombination of the groups' best pads.
      const auto base_pads = state_.pads();
      const double base_obj = current_obj_;
      std::vector<std::uint8_t> combined = base_pads;
      std::vector<double> group_obj;
      std::vector<std::vector<std::uint8_t>> group_pads;
      const auto gs = static_cast<std::size_t>(config_.group_size);
      for (std::size_t g0 = 0; g0 < n; g0 += gs) {
        std::vector<std::size_t> group;
        for (std::size_t r = g0; r < std::min(n, g0 + gs); ++r) group.push_back(r);
        state_.set_all(base_pads);
        current_obj_ = base_obj;
        climb(group, config_.group_rounds, false);
        group_obj.push_back(current_obj_);
        group_pads.push_back(state_.pads());
        const auto per = state_.per_region();
        for (auto r : group) {
          std::copy_n(state_.pads().begin() + static_cast<std::ptrdiff_t>(r * per), per,
                      combined.begin() + static_cast<std::ptrdiff_t>(r * per));
        }
      }
      if (!group_pads.empty() && budget_left()) {
        state_.set_all(combined);
        consider(evaluate());
      }
      // Continue from the best point found so far.
      state_.set_all(best_pads_);
      current_obj_ = best_obj_;
      climb(all, config_.group_rounds, /*single=*/true);
    }
    PerturbationResult res;
    res.evaluations = evaluations_;
    res.trace = std::move(trace_);
    res.no_gain = !(best_obj_ > 0.0);
    res.key.mask = mask_copy();
    res.key.target_versions = target_versions();
    if (res.no_gain) {
      res.key.payloads.assign(state_.pads().size(), 0);
      res.objective = 0.0;
      res.dssim = 0.0;
    } else {
      res.key.payloads = best_pads_;
      res.objective = best_obj_;
      res.dssim = best_dssim_;
    }
    res.key.sigma_used = res.dssim;
    return res;
  }

 private:
  struct Eval {
    double objective;
    double dssim;
  };

  bool budget_left() const { return evaluations_ < config_.total_budget; }

  Eval evaluate() {
    ++evaluations_;
    return {displacement(state_.image(), landmarks_, targets_, base_), state_.dssim()};
  }

  // Updates the global best with a feasible evaluation of the current state.
  void consider(const Eval& e) {
    if (e.dssim <= config_.sigma && e.objective > best_obj_) {
      best_obj_ = e.objective;
      best_dssim_ = e.dssim;
      best_pads_ = state_.pads();
    }
    trace_.push_back(best_obj_);
  }

  void propose(std::size_t r) {
    const auto cur = state_.pad(r);
    const std::size_t per = state_.per_region();
    std::vector<std::uint8_t> next(cur.begin(), cur.end());
    if (!config_.pad_alphabet.empty()) {
      const auto changes = rng_.uniform_int(1, std::max<std::int64_t>(1, static_cast<std::int64_t>(per / 4)));
      const auto last = static_cast<std::int64_t>(config_.pad_alphabet.size()) - 1;
      for (std::int64_t i = 0; i < changes; ++i) {
        const auto pos = static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(per) - 1));
        next[pos] = config_.pad_alphabet[static_cast<std::size_t>(rng_.uniform_int(0, last))];
      }
    } else if (source_.kind == NoiseKind::kGaussian) {
      sampler_.fill(scratch_);
      for (std::size_t i = 0; i < per; ++i) next[i] ^= scratch_[i];
    } else {
      sampler_.fill(scratch_);
      const Region& reg = state_.region(r);
      const PixelImage& orig = state_.original();
      std::size_t k = 0;
      for (int y = reg.origin_y; y < reg.origin_y + reg.size; ++y) {
        for (int x = reg.origin_x; x < reg.origin_x + reg.size; ++x) {
          for (int c = 0; c < orig.channels(); ++c, ++k) next[k] = orig.at(x, y, c) ^ scratch_[k];
        }
      }
    }
    state_.set_pad(r, next);
  }

  // Accept-if-strictly-better hill climbing over `regions`. `single`
  // restricts each proposal to one region.
  void climb(const std::vector<std::size_t>& regions, int rounds, bool single) {
    const std::size_t per = state_.per_region();
    std::vector<std::size_t> chosen;
    std::vector<std::uint8_t> saved;
    for (int round = 0; round < rounds && budget_left(); ++round) {
      chosen.clear();
      if (single || regions.size() == 1) {
        chosen.push_back(regions[static_cast<std::size_t>(
            rng_.uniform_int(0, static_cast<std::int64_t>(regions.size()) - 1))]);
      } else {
        for (auto r : regions) {
          if (rng_.uniform() < 0.5) chosen.push_back(r);
        }
        if (chosen.empty()) {
          chosen.push_back(regions[static_cast<std::size_t>(
              rng_.uniform_int(0, static_cast<std::int64_t>(regions.size()) - 1))]);
        }
      }
      saved.resize(chosen.size() * per);
      for (std::size_t i = 0; i < chosen.size(); ++i) {
        const auto p = state_.pad(chosen[i]);
        std::copy(p.begin(), p.end(), saved.begin() + static_cast<std::ptrdiff_t>(i * per));
        propose(chosen[i]);
      }
      const Eval e = evaluate();
      const bool accept = e.dssim <= config_.sigma && e.objective > current_obj_;
      consider(e);
      if (accept) {
        current_obj_ = e.objective;
      } else {
        for (std::size_t i = 0; i < chosen.size(); ++i) {
          state_.set_pad(chosen[i], std::span(saved).subspan(i * per, per));
        }
      }
    }
  }

  MaskTemplate mask_copy() const { return mask_; }

  std::vector<std::uint16_t> target_versions() const {
    std::vector<std::uint16_t> out;
    for (const auto* m : targets_) out.push_back(m->layout.version_id);
    return out;
  }

  const LandmarkSet& landmarks_;
  std::span<const RecognizerModel* const> targets_;
  const PerturbationConfig& config_;
  const NoiseSource& source_;
  NoiseSampler sampler_;
  SplitMix64 rng_;
  PadState state_;
  std::vector<Eigen::VectorXd> base_;
  const MaskTemplate& mask_;

  double current_obj_ = 0.0;
  double best_obj_ = 0.0;
  double best_dssim_ = 0.0;
  std::vector<std::uint8_t> best_pads_;
  std::vector<std::uint8_t> scratch_;
  std::size_t evaluations_ = 0;
  std::vector<double> trace_;
};

}  // namespace

PerturbationResult optimize_perturbation(const PixelImage& img, const LandmarkSet& landmarks,
                                         const MaskTemplate& mask,
                                         std::span<const RecognizerModel* const> targets,
                                         const PerturbationConfig& config,
                                         const NoiseSource& source) {
  config.validate();
  source.validate();
  if (targets.empty()) throw DomainError("optimize_perturbation: no target recognizers");
  if (img.width() != mask.canvas_width || img.height() != mask.canvas_height ||
      img.channels() != mask.channels) {
    throw DomainError("optimize_perturbation: image does not match template canvas");
  }
  for (const auto& r : mask.regions) {
    if (!r.fits(img.width(), img.height())) {
      throw DomainError("optimize_perturbation: template region out of bounds");
    }
  }
  if (mask.priorities.size() != mask.regions.size()) {
    throw DomainError("optimize_perturbation: template priority count mismatch");
  }
  if (source.kind == NoiseKind::kCorpus && source.patch_bytes != mask.payload_bytes_per_region()) {
    throw DomainError("optimize_perturbation: corpus patch size does not match regions");
  }
  return HillClimber(img, landmarks, mask, targets, config, source).run();
}

double embedding_displacement(const PixelImage& original, const PixelImage& perturbed,
                              const LandmarkSet& landmarks,
                              std::span<const RecognizerModel* const> targets) {
  if (targets.empty()) throw DomainError("embedding_displacement: no targets");
  return displacement(perturbed, landmarks, targets, base_embeddings(original, landmarks, targets));
}

PixelImage protect(const PixelImage& img, const CloakKey& key) {
  if (img.width() != key.mask.canvas_width || img.height() != key.mask.canvas_height ||
      img.channels() != key.mask.channels) {
    throw DomainError("image " + std::to_string(img.width()) + "x" + std::to_string(img.height()) +
                      "x" + std::to_string(img.channels()) + " does not match key canvas " +
                      std::to_string(key.mask.canvas_width) + "x" +
                      std::to_string(key.mask.canvas_height) + "x" +
                      std::to_string(key.mask.channels));
  }
  return xor_apply(img, key.mask.regions, key.payloads);
}

PixelImage restore(const PixelImage& protected_img, const CloakKey& key) {
  return protect(protected_img, key);
}

std::size_t count_differences(const PixelImage& a, const PixelImage& b) {
  if (!a.same_shape(b)) throw DomainError("count_differences: dimension mismatch");
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a.data()[i] != b.data()[i];
  return n;
}

bool fools_all(const PixelImage& img, const LabeledImage& truth,
               std::span<const RecognizerModel* const> targets) {
  for (const auto* m : targets) {
    const auto r = recognize(*m, img, truth.landmarks);
    if (m->identities[r.identity] == truth.identity) return false;
  }
  return true;
}

namespace {

const MaskTemplate& template_for(std::span<const MaskTemplate> templates, std::size_t i) {
  return templates.size() == 1 ? templates[0] : templates[i];
}

}  // namespace

double misclassification_at(std::span<const LabeledImage> samples,
                            std::span<const MaskTemplate> templates,
                            std::span<const RecognizerModel* const> targets, double sigma,
                            const PerturbationConfig& config, const NoiseSource& source) {
  if (samples.empty()) throw DomainError("misclassification_at: empty sample");
  if (templates.size() != 1 && templates.size() != samples.size()) {
    throw DomainError("misclassification_at: need one template or one per image");
  }
  std::size_t fooled = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    PerturbationConfig cfg = config;
    cfg.sigma = sigma;
    cfg.seed = derive_seed(config.seed, samples[i].name);
    NoiseSource src = source;
    src.seed = derive_seed(source.seed, samples[i].name);
    const auto res = optimize_perturbation(samples[i].image, samples[i].landmarks,
                                           template_for(templates, i), targets, cfg, src);
    if (fools_all(protect(samples[i].image, res.key), samples[i], targets)) ++fooled;
  }
  return static_cast<double>(fooled) / static_cast<double>(samples.size());
}

SigmaTuning tune_sigma(std::span<const LabeledImage> samples,
                       std::span<const MaskTemplate> templates,
                       std::span<const RecognizerModel* const> targets, double fc_target,
                       const PerturbationConfig& config, const NoiseSource& source) {
  if (!(fc_target >= 0.0 && fc_target <= 1.0)) throw DomainError("tune_sigma: fc_target outside [0, 1]");
  SigmaTuning out;
  const double at_one = misclassification_at(samples, templates, targets, 1.0, config, source);
  out.trace.emplace_back(1.0, at_one);
  if (at_one < fc_target) {
    throw UnreachableTargetError("tune_sigma: F_c target " + std::to_string(fc_target) +
                                     " unreachable; best F_c at sigma=1 is " + std::to_string(at_one),
                                 at_one);
  }
  double lo = 0.0, hi = 1.0;
  for (int step = 0; step < kMaxBisectionSteps && hi - lo > kSigmaTolerance; ++step) {
    const double mid = 0.5 * (lo + hi);
    const double fc = misclassification_at(samples, templates, targets, mid, config, source);
    out.trace.emplace_back(mid, fc);
    if (fc >= fc_target) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  out.sigma = hi;
  return out;
}

}  // namespace maskveil
