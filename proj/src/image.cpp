#include "maskveil/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "maskveil/errors.hpp"

namespace maskveil {

PixelImage::PixelImage(int width, int height, int channels, std::uint8_t fill)
    : width_(width), height_(height), channels_(channels) {
  if (width < 0 || height < 0 || (channels != 1 && channels != 3)) {
    throw DomainError("PixelImage: invalid shape");
  }
  data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
}

PixelImage::PixelImage(int width, int height, int channels, std::vector<std::uint8_t> data)
    : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
  if (width < 0 || height < 0 || (channels != 1 && channels != 3)) {
    throw DomainError("PixelImage: invalid shape");
  }
  if (data_.size() != static_cast<std::size_t>(width) * height * channels) {
    throw DomainError("PixelImage: data length " + std::to_string(data_.size()) +
                      " does not match " + std::to_string(width) + "x" + std::to_string(height) +
                      "x" + std::to_string(channels));
  }
}

int patch_origin(double normalized, int extent, int size) {
  const auto origin = std::lround(normalized * (extent - 1) - (size - 1) / 2.0);
  return static_cast<int>(std::clamp<long>(origin, 0, std::max(0, extent - size)));
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

bool starts_with(std::span<const std::uint8_t> b, std::initializer_list<std::uint8_t> magic) {
  if (b.size() < magic.size()) return false;
  return std::equal(magic.begin(), magic.end(), b.begin());
}

PixelImage decode_png(std::span<const std::uint8_t> bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    std::string msg = "PNG: ";
    msg += image.message;
    png_image_free(&image);
    throw FormatError(msg);
  }
  if (image.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&image);
    throw FormatError("PNG: 16-bit samples are not supported");
  }
  if (image.format & PNG_FORMAT_FLAG_ALPHA) {
    png_image_free(&image);
    throw FormatError("PNG: alpha channel is not supported");
  }
  const bool color = image.format & PNG_FORMAT_FLAG_COLOR;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const int channels = color ? 3 : 1;
  std::vector<std::uint8_t> data(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, data.data(), 0, nullptr)) {
    std::string msg = "PNG: ";
    msg += image.message;
    png_image_free(&image);
    throw FormatError(msg);
  }
  return PixelImage(static_cast<int>(image.width), static_cast<int>(image.height), channels,
                    std::move(data));
}

// Reads one whitespace-delimited header token, skipping '#' comments.
bool ppm_token(std::span<const std::uint8_t> b, std::size_t& pos, long& value) {
  while (pos < b.size()) {
    if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else if (std::isspace(b[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  if (pos >= b.size() || !std::isdigit(b[pos])) return false;
  value = 0;
  while (pos < b.size() && std::isdigit(b[pos])) {
    value = value * 10 + (b[pos] - '0');
    if (value > 1'000'000) return false;
    ++pos;
  }
  return true;
}

PixelImage decode_ppm(std::span<const std::uint8_t> b) {
  std::size_t pos = 2;
  long w = 0, h = 0, maxval = 0;
  if (!ppm_token(b, pos, w) || !ppm_token(b, pos, h) || !ppm_token(b, pos, maxval)) {
    throw FormatError("PPM: malformed header");
  }
  if (maxval != 255) throw FormatError("PPM: only maxval 255 is supported");
  if (w <= 0 || h <= 0) throw FormatError("PPM: zero dimension");
  if (pos >= b.size() || !std::isspace(b[pos])) throw FormatError("PPM: malformed header");
  ++pos;
  const auto need = static_cast<std::size_t>(w) * h * 3;
  if (b.size() - pos < need) throw FormatError("PPM: truncated pixel data");
  std::vector<std::uint8_t> data(b.begin() + static_cast<std::ptrdiff_t>(pos),
                                 b.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return PixelImage(static_cast<int>(w), static_cast<int>(h), 3, std::move(data));
}

}  // namespace

PixelImage decode_image(std::span<const std::uint8_t> bytes) {
  if (starts_with(bytes, {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'})) return decode_png(bytes);
  if (starts_with(bytes, {'P', '6'})) return decode_ppm(bytes);
  if (starts_with(bytes, {0xFF, 0xD8, 0xFF})) {
    throw FormatError("JPEG is lossy and cannot be restored bit-exactly; use PNG or PPM");
  }
  if (starts_with(bytes, {'P', '3'})) throw FormatError("ASCII PPM (P3) is not supported");
  if (starts_with(bytes, {'G', 'I', 'F'})) throw FormatError("GIF is not supported");
  if (starts_with(bytes, {'B', 'M'})) throw FormatError("BMP is not supported");
  if (starts_with(bytes, {'R', 'I', 'F', 'F'})) throw FormatError("WebP is not supported");
  throw FormatError("unrecognized image format");
}

PixelImage load_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_image(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_png(const PixelImage& img) {
  if (img.empty()) throw DomainError("encode_png: empty image");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(image, size, 0, img.data().data(), 0, nullptr)) {
    throw FormatError(std::string("PNG encode: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.data().data(), 0, nullptr)) {
    throw FormatError(std::string("PNG encode: ") + image.message);
  }
  out.resize(size);
  return out;
}

std::vector<std::uint8_t> encode_ppm(const PixelImage& img) {
  if (img.channels() != 3) throw DomainError("encode_ppm: P6 requires 3 channels");
  const std::string header =
      "P6\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.data().begin(), img.data().end());
  return out;
}

void save_png(const PixelImage& img, const std::filesystem::path& path) {
  write_file(path, encode_png(img));
}

void save_ppm(const PixelImage& img, const std::filesystem::path& path) {
  write_file(path, encode_ppm(img));
}

PixelImage normalize_canvas(const PixelImage& img) {
  if (img.width() == 0 || img.height() == 0) throw DomainError("normalize_canvas: zero dimension");
  if (img.is_canonical()) return img;

  const auto map = [](int out, int in_extent) {
    return kCanvasSize > 1 ? static_cast<double>(out) * (in_extent - 1) / (kCanvasSize - 1) : 0.0;
  };
  PixelImage out(kCanvasSize, kCanvasSize, kCanvasChannels);
  for (int y = 0; y < kCanvasSize; ++y) {
    const double sy = map(y, img.height());
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const double fy = sy - y0;
    for (int x = 0; x < kCanvasSize; ++x) {
      const double sx = map(x, img.width());
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, img.width() - 1);
      const double fx = sx - x0;
      for (int c = 0; c < kCanvasChannels; ++c) {
        const int sc = img.channels() == 1 ? 0 : c;
        const double top = (1.0 - fx) * img.at(x0, y0, sc) + fx * img.at(x1, y0, sc);
        const double bottom = (1.0 - fx) * img.at(x0, y1, sc) + fx * img.at(x1, y1, sc);
        const double v = (1.0 - fy) * top + fy * bottom;
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
      }
    }
  }
  return out;
}

void xor_region(PixelImage& img, const Region& r, std::span<const std::uint8_t> payload) {
  const int ch = img.channels();
  std::size_t k = 0;
  for (int y = r.origin_y; y < r.origin_y + r.size; ++y) {
    for (int x = r.origin_x; x < r.origin_x + r.size; ++x) {
      for (int c = 0; c < ch; ++c) img.at(x, y, c) ^= payload[k++];
    }
  }
}

PixelImage xor_apply(const PixelImage& img, std::span<const Region> regions,
                     std::span<const std::uint8_t> payloads) {
  std::size_t need = 0;
  for (const auto& r : regions) {
    if (r.size <= 0 || !r.fits(img.width(), img.height())) {
      throw DomainError("xor_apply: region at (" + std::to_string(r.origin_x) + "," +
                        std::to_string(r.origin_y) + ") is out of bounds");
    }
    need += static_cast<std::size_t>(r.size) * r.size * img.channels();
  }
  if (payloads.size() != need) {
    throw DomainError("xor_apply: payload length " + std::to_string(payloads.size()) +
                      " does not match regions (" + std::to_string(need) + ")");
  }
  PixelImage out = img;
  std::size_t offset = 0;
  for (const auto& r : regions) {
    const auto len = static_cast<std::size_t>(r.size) * r.size * img.channels();
    xor_region(out, r, payloads.subspan(offset, len));
    offset += len;
  }
  return out;
}

double ssim_from_stats(double mean_a, double mean_b, double var_a, double var_b, double cov) {
  constexpr double c1 = (0.01 * 255) * (0.01 * 255);
  constexpr double c2 = (0.03 * 255) * (0.03 * 255);
  return ((2 * mean_a * mean_b + c1) * (2 * cov + c2)) /
         ((mean_a * mean_a + mean_b * mean_b + c1) * (var_a + var_b + c2));
}

DssimTracker::DssimTracker(const PixelImage& reference, const PixelImage& current)
    : reference_(&reference),
      windows_x_((reference.width() + kWindow - 1) / kWindow),
      windows_y_((reference.height() + kWindow - 1) / kWindow),
      channels_(reference.channels()) {
  if (!reference.same_shape(current)) throw DomainError("dssim: dimension mismatch");
  if (reference.empty()) throw DomainError("dssim: empty image");
  ssim_.resize(static_cast<std::size_t>(windows_x_) * windows_y_ * channels_);
  for (int c = 0; c < channels_; ++c) {
    for (int wy = 0; wy < windows_y_; ++wy) {
      for (int wx = 0; wx < windows_x_; ++wx) {
        ssim_[(static_cast<std::size_t>(c) * windows_y_ + wy) * windows_x_ + wx] =
            window_ssim(current, wx, wy, c);
      }
    }
  }
}

double DssimTracker::window_ssim(const PixelImage& cur, int wx, int wy, int c) const {
  const PixelImage& ref = *reference_;
  const int x0 = wx * kWindow, y0 = wy * kWindow;
  const int x1 = std::min(x0 + kWindow, ref.width()), y1 = std::min(y0 + kWindow, ref.height());
  const double n = static_cast<double>((x1 - x0) * (y1 - y0));
  double sa = 0, sb = 0;
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      sa += ref.at(x, y, c);
      sb += cur.at(x, y, c);
    }
  }
  const double ma = sa / n, mb = sb / n;
  double va = 0, vb = 0, cv = 0;
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const double da = ref.at(x, y, c) - ma, db = cur.at(x, y, c) - mb;
      va += da * da;
      vb += db * db;
      cv += da * db;
    }
  }
  return ssim_from_stats(ma, mb, va / n, vb / n, cv / n);
}

double DssimTracker::value() const {
  const std::size_t per_channel = static_cast<std::size_t>(windows_x_) * windows_y_;
  double total = 0;
  for (int c = 0; c < channels_; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < per_channel; ++i) s += ssim_[c * per_channel + i];
    total += s / static_cast<double>(per_channel);
  }
  const double ssim = total / channels_;
  return std::clamp((1.0 - ssim) / 2.0, 0.0, 1.0);
}

void DssimTracker::update(const PixelImage& cur, const Region& r) {
  const int wx0 = r.origin_x / kWindow, wx1 = (r.origin_x + r.size - 1) / kWindow;
  const int wy0 = r.origin_y / kWindow, wy1 = (r.origin_y + r.size - 1) / kWindow;
  for (int c = 0; c < channels_; ++c) {
    for (int wy = wy0; wy <= wy1; ++wy) {
      for (int wx = wx0; wx <= wx1; ++wx) {
        ssim_[(static_cast<std::size_t>(c) * windows_y_ + wy) * windows_x_ + wx] =
            window_ssim(cur, wx, wy, c);
      }
    }
  }
}

void DssimTracker::update(const PixelImage& cur, std::span<const Region> touched) {
  for (const auto& r : touched) update(cur, r);
}

double dssim(const PixelImage& a, const PixelImage& b) {
  if (!a.same_shape(b)) throw DomainError("dssim: dimension mismatch");
  return DssimTracker(a, b).value();
}

std::string image_digest(const PixelImage& img) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  const auto mix = [&h](std::uint8_t byte) {
    h ^= byte;
    h *= 0x100000001B3ULL;
  };
  for (int v : {img.width(), img.height(), img.channels()}) {
    for (int i = 0; i < 4; ++i) mix(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
  }
  for (auto b : img.data()) mix(b);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = kHex[h & 0xF];
    h >>= 4;
  }
  return out;
}

}  // namespace maskveil
