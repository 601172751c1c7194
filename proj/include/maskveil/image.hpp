#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace maskveil {

inline constexpr int kCanvasSize = 256;
inline constexpr int kCanvasChannels = 3;
inline constexpr int kRegionSize = 4;

/// Row-major, channel-interleaved 8-bit raster.
class PixelImage {
 public:
  PixelImage() = default;
  PixelImage(int width, int height, int channels, std::uint8_t fill = 0);
  PixelImage(int width, int height, int channels, std::vector<std::uint8_t> data);

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  bool empty() const { return data_.empty(); }
  std::size_t size() const { return data_.size(); }

  std::uint8_t at(int x, int y, int c) const { return data_[index(x, y, c)]; }
  std::uint8_t& at(int x, int y, int c) { return data_[index(x, y, c)]; }

  std::span<const std::uint8_t> data() const { return data_; }
  std::span<std::uint8_t> data() { return data_; }

  bool same_shape(const PixelImage& o) const {
    return width_ == o.width_ && height_ == o.height_ && channels_ == o.channels_;
  }

  bool is_canonical() const {
    return width_ == kCanvasSize && height_ == kCanvasSize && channels_ == kCanvasChannels;
  }

  friend bool operator==(const PixelImage&, const PixelImage&) = default;

 private:
  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Square block of pixels addressed by its top-left corner.
struct Region {
  int origin_x = 0;
  int origin_y = 0;
  int size = kRegionSize;

  bool overlaps(const Region& o) const {
    return origin_x < o.origin_x + o.size && o.origin_x < origin_x + size &&
           origin_y < o.origin_y + o.size && o.origin_y < origin_y + size;
  }
  bool contains(int x, int y) const {
    return x >= origin_x && x < origin_x + size && y >= origin_y && y < origin_y + size;
  }
  bool fits(int width, int height) const {
    return origin_x >= 0 && origin_y >= 0 && origin_x + size <= width && origin_y + size <= height;
  }

  friend bool operator==(const Region&, const Region&) = default;
};

/// Top-left coordinate of a `size`-wide block centred on a normalized
/// coordinate, clamped so the block lies inside [0, extent).
int patch_origin(double normalized, int extent, int size);

/// Loads a PNG or binary PPM (P6, maxval 255). JPEG and other lossy or
/// unknown formats are rejected with a FormatError naming the format.
PixelImage load_image(const std::filesystem::path& path);

/// Decodes an in-memory PNG or PPM byte stream.
PixelImage decode_image(std::span<const std::uint8_t> bytes);

void save_png(const PixelImage& img, const std::filesystem::path& path);
void save_ppm(const PixelImage& img, const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const PixelImage& img);
std::vector<std::uint8_t> encode_ppm(const PixelImage& img);

/// Resamples to the canonical 256x256x3 canvas with corner-aligned bilinear
/// interpolation. Grayscale inputs are replicated across channels.
PixelImage normalize_canvas(const PixelImage& img);

/// XORs each region's payload into the image, regions applied in list order.
/// `payloads` holds size*size*channels bytes per region, concatenated.
PixelImage xor_apply(const PixelImage& img, std::span<const Region> regions,
                     std::span<const std::uint8_t> payloads);

/// In-place variant of xor_apply for a single region; no bounds re-check.
void xor_region(PixelImage& img, const Region& region, std::span<const std::uint8_t> payload);

/// Structural dissimilarity (1 - SSIM) / 2 over 8x8 non-overlapping windows
/// (edge windows clipped), averaged over windows then channels.
double dssim(const PixelImage& a, const PixelImage& b);

/// SSIM of one window given its sample statistics.
double ssim_from_stats(double mean_a, double mean_b, double var_a, double var_b, double cov);

/// Incrementally maintained DSSIM between a fixed reference and a mutable
/// image, recomputing only windows touched by edited regions.
class DssimTracker {
 public:
  static constexpr int kWindow = 8;

  DssimTracker(const PixelImage& reference, const PixelImage& current);

  double value() const;
  void update(const PixelImage& current, const Region& touched);
  void update(const PixelImage& current, std::span<const Region> touched);

 private:
  double window_ssim(const PixelImage& current, int wx, int wy, int c) const;

  const PixelImage* reference_;
  int windows_x_;
  int windows_y_;
  int channels_;
  std::vector<double> ssim_;
  double sum_ = 0.0;
};

/// Digest of raw samples plus dimensions (FNV-1a 64), hex encoded.
std::string image_digest(const PixelImage& img);

}  // namespace maskveil
