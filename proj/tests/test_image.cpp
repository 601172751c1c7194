#include <doctest.h>

#include <cmath>
#include <cstdint>

#include "maskveil/errors.hpp"
#include "maskveil/image.hpp"
#include "support.hpp"

using namespace maskveil;
using maskveil::testing::random_image;
using maskveil::testing::random_regions;

namespace {

// Exact integer bilinear resampler: positions are kept as num / 255.
PixelImage oracle_resample(const PixelImage& src) {
  PixelImage out(kCanvasSize, kCanvasSize, kCanvasChannels);
  const std::int64_t den = kCanvasSize - 1;
  for (int y = 0; y < kCanvasSize; ++y) {
    const std::int64_t ny = static_cast<std::int64_t>(y) * (src.height() - 1);
    const int y0 = static_cast<int>(ny / den);
    const std::int64_t wy = ny % den;
    const int y1 = std::min(y0 + 1, src.height() - 1);
    for (int x = 0; x < kCanvasSize; ++x) {
      const std::int64_t nx = static_cast<std::int64_t>(x) * (src.width() - 1);
      const int x0 = static_cast<int>(nx / den);
      const std::int64_t wx = nx % den;
      const int x1 = std::min(x0 + 1, src.width() - 1);
      for (int c = 0; c < kCanvasChannels; ++c) {
        const int sc = src.channels() == 1 ? 0 : c;
        const std::int64_t acc = (den - wx) * (den - wy) * src.at(x0, y0, sc) +
                                 wx * (den - wy) * src.at(x1, y0, sc) +
                                 (den - wx) * wy * src.at(x0, y1, sc) + wx * wy * src.at(x1, y1, sc);
        // floor(acc / den^2 + 1/2)
        out.at(x, y, c) = static_cast<std::uint8_t>((2 * acc + den * den) / (2 * den * den));
      }
    }
  }
  return out;
}

// Windowed SSIM computed directly from its definition, window by window.
double oracle_dssim(const PixelImage& a, const PixelImage& b) {
  const double c1 = 6.5025, c2 = 58.5225;
  double total = 0;
  for (int c = 0; c < a.channels(); ++c) {
    double sum = 0;
    int windows = 0;
    for (int wy = 0; wy < a.height(); wy += 8) {
      for (int wx = 0; wx < a.width(); wx += 8) {
        std::vector<double> xa, xb;
        for (int y = wy; y < std::min(wy + 8, a.height()); ++y) {
          for (int x = wx; x < std::min(wx + 8, a.width()); ++x) {
            xa.push_back(a.at(x, y, c));
            xb.push_back(b.at(x, y, c));
          }
        }
        const double n = static_cast<double>(xa.size());
        double ma = 0, mb = 0;
        for (std::size_t i = 0; i < xa.size(); ++i) {
          ma += xa[i] / n;
          mb += xb[i] / n;
        }
        double va = 0, vb = 0, cv = 0;
        for (std::size_t i = 0; i < xa.size(); ++i) {
          va += (xa[i] - ma) * (xa[i] - ma) / n;
          vb += (xb[i] - mb) * (xb[i] - mb) / n;
          cv += (xa[i] - ma) * (xb[i] - mb) / n;
        }
        sum += ((2 * ma * mb + c1) * (2 * cv + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++windows;
      }
    }
    total += sum / windows;
  }
  return (1.0 - total / a.channels()) / 2.0;
}

}  // namespace

TEST_CASE("pixel image rejects unsupported channel counts") {
  CHECK_THROWS_AS(PixelImage(4, 4, 2), DomainError);
  CHECK_THROWS_AS(PixelImage(4, 4, 3, std::vector<std::uint8_t>(5)), DomainError);
}

TEST_CASE("patch origin centres and clamps") {
  CHECK(patch_origin(0.5, 256, 4) == 126);
  CHECK(patch_origin(0.0, 256, 4) == 0);
  CHECK(patch_origin(1.0, 256, 4) == 252);
  CHECK(patch_origin(0.5, 4, 4) == 0);
}

TEST_CASE("region overlap is symmetric and edge exclusive") {
  const Region a{10, 10, 4};
  CHECK(a.overlaps(Region{13, 13, 4}));
  CHECK(Region{13, 13, 4}.overlaps(a));
  CHECK_FALSE(a.overlaps(Region{14, 10, 4}));
  CHECK_FALSE(a.overlaps(Region{10, 14, 4}));
}

TEST_CASE("normalize_canvas matches the exact bilinear oracle") {
  SplitMix64 rng(11);
  for (auto [w, h, ch] : {std::tuple{7, 5, 3}, {64, 48, 3}, {300, 200, 3}, {31, 90, 1}, {2, 2, 1}}) {
    const auto src = random_image(rng, w, h, ch);
    CHECK(normalize_canvas(src) == oracle_resample(src));
  }
}

TEST_CASE("normalize_canvas keeps canonical input and replicates gray") {
  SplitMix64 rng(3);
  const auto canon = random_image(rng, 256, 256, 3);
  CHECK(normalize_canvas(canon) == canon);
  const auto gray = random_image(rng, 256, 256, 1);
  const auto out = normalize_canvas(gray);
  for (int y = 0; y < 256; y += 17) {
    for (int x = 0; x < 256; x += 13) {
      CHECK(out.at(x, y, 0) == gray.at(x, y, 0));
      CHECK(out.at(x, y, 2) == gray.at(x, y, 0));
    }
  }
}

TEST_CASE("xor_apply equals a per-pixel fold and is an involution") {
  SplitMix64 rng(5);
  const auto img = random_image(rng, 64, 64, 3);
  const auto regions = random_regions(rng, 64, 64, 20);
  const auto payload = maskveil::testing::random_bytes(rng, regions.size() * 48);
  const auto out = xor_apply(img, regions, payload);
  PixelImage fold = img;
  for (std::size_t r = 0; r < regions.size(); ++r) {
    for (int dy = 0; dy < 4; ++dy) {
      for (int dx = 0; dx < 4; ++dx) {
        for (int c = 0; c < 3; ++c) {
          fold.at(regions[r].origin_x + dx, regions[r].origin_y + dy, c) ^=
              payload[r * 48 + (dy * 4 + dx) * 3 + c];
        }
      }
    }
  }
  CHECK(out == fold);
  CHECK(xor_apply(out, regions, payload) == img);
}

TEST_CASE("xor_apply validates payload length and bounds") {
  PixelImage img(16, 16, 3);
  const std::vector<Region> inside{{0, 0, 4}};
  CHECK_THROWS_AS(xor_apply(img, inside, std::vector<std::uint8_t>(47)), DomainError);
  const std::vector<Region> outside{{13, 0, 4}};
  CHECK_THROWS_AS(xor_apply(img, outside, std::vector<std::uint8_t>(48)), DomainError);
}

TEST_CASE("dssim of constant black against constant white") {
  const PixelImage black(16, 16, 3, 0), white(16, 16, 3, 255);
  // SSIM = C1 / (255^2 + C1) with C2 cancelling.
  const double c1 = 6.5025;
  CHECK(dssim(black, white) == doctest::Approx((1.0 - c1 / (65025.0 + c1)) / 2.0).epsilon(1e-12));
  CHECK(dssim(black, white) == doctest::Approx(0.49995).epsilon(1e-5));
  CHECK(dssim(white, white) == 0.0);
}

TEST_CASE("dssim matches the windowed oracle, including clipped edge windows") {
  SplitMix64 rng(8);
  for (auto [w, h, ch] : {std::tuple{32, 32, 3}, {37, 21, 3}, {9, 9, 1}}) {
    const auto a = random_image(rng, w, h, ch);
    auto b = a;
    for (int i = 0; i < w * h / 3; ++i) {
      b.data()[rng.uniform_int(0, static_cast<std::int64_t>(b.size()) - 1)] ^= 0x5A;
    }
    CHECK(dssim(a, b) == doctest::Approx(oracle_dssim(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("incremental tracker equals a fresh computation") {
  SplitMix64 rng(21);
  const auto ref = random_image(rng, 64, 64, 3);
  auto cur = ref;
  DssimTracker tracker(ref, cur);
  for (int step = 0; step < 30; ++step) {
    const Region r{static_cast<int>(rng.uniform_int(0, 60)), static_cast<int>(rng.uniform_int(0, 60)), 4};
    xor_region(cur, r, maskveil::testing::random_bytes(rng, 48));
    tracker.update(cur, r);
    CHECK(tracker.value() == doctest::Approx(oracle_dssim(ref, cur)).epsilon(1e-12));
  }
}

TEST_CASE("png and ppm round-trip; lossy formats are rejected by name") {
  SplitMix64 rng(2);
  const auto img = random_image(rng, 19, 7, 3);
  CHECK(decode_image(encode_png(img)) == img);
  CHECK(decode_image(encode_ppm(img)) == img);
  const auto gray = random_image(rng, 5, 6, 1);
  CHECK(decode_image(encode_png(gray)) == gray);
  const std::vector<std::uint8_t> jpeg{0xFF, 0xD8, 0xFF, 0xE0, 0, 0x10, 'J', 'F', 'I', 'F'};
  try {
    decode_image(jpeg);
    FAIL("jpeg accepted");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("JPEG") != std::string::npos);
  }
}

TEST_CASE("image digest depends on shape and content") {
  const PixelImage a(4, 4, 3, 7), b(4, 4, 3, 8), c(8, 2, 3, 7);
  CHECK(image_digest(a).size() == 16);
  CHECK(image_digest(a) != image_digest(b));
  CHECK(image_digest(a) != image_digest(c));
  CHECK(image_digest(a) == image_digest(PixelImage(4, 4, 3, 7)));
}
