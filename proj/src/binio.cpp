#include "maskveil/binio.hpp"

#include <zlib.h>

#include <algorithm>
#include <fstream>
#include <iterator>

#include "maskveil/errors.hpp"

namespace maskveil::binio {

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(
      ::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size())));
}

void Writer::str16(std::string_view s) {
  u16(static_cast<std::uint16_t>(s.size()));
  buf_.insert(buf_.end(), s.begin(), s.end());
}

std::vector<std::uint8_t> Writer::finish() {
  u32(crc32(buf_));
  return std::move(buf_);
}

Reader::Reader(std::span<const std::uint8_t> bytes,
               std::span<const std::string_view> accepted_magic, std::string_view what)
    : what_(what) {
  if (bytes.size() < 4) throw TruncatedFileError(what_ + ": truncated before magic");
  magic_.assign(bytes.begin(), bytes.begin() + 4);
  if (std::find(accepted_magic.begin(), accepted_magic.end(), magic_) == accepted_magic.end()) {
    throw BadMagicError(what_ + ": unknown magic '" + magic_ + "'");
  }
  if (bytes.size() < 6) throw TruncatedFileError(what_ + ": truncated before version");
  const auto version = static_cast<std::uint16_t>(bytes[4] | bytes[5] << 8);
  if (version != 1) {
    throw UnsupportedVersionError(what_ + ": unsupported format version " +
                                  std::to_string(version));
  }
  if (bytes.size() < 10) throw TruncatedFileError(what_ + ": truncated before checksum");
  all_ = bytes;
  body_ = bytes.first(bytes.size() - 4);
  pos_ = 6;
}

void Reader::finish() {
  if (pos_ != body_.size()) throw FormatError(what_ + ": trailing bytes before checksum");
  const auto footer = all_.last(4);
  const std::uint32_t stored = static_cast<std::uint32_t>(footer[0]) |
                               static_cast<std::uint32_t>(footer[1]) << 8 |
                               static_cast<std::uint32_t>(footer[2]) << 16 |
                               static_cast<std::uint32_t>(footer[3]) << 24;
  if (crc32(body_) != stored) throw ChecksumError(what_ + ": checksum mismatch");
}

void Reader::need(std::size_t n) {
  if (body_.size() - pos_ < n) throw TruncatedFileError(what_ + ": truncated");
}

std::uint64_t Reader::get(int n) {
  need(static_cast<std::size_t>(n));
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(body_[pos_ + i]) << (8 * i);
  pos_ += static_cast<std::size_t>(n);
  return v;
}

std::uint8_t Reader::u8() { return static_cast<std::uint8_t>(get(1)); }
std::uint16_t Reader::u16() { return static_cast<std::uint16_t>(get(2)); }
std::uint32_t Reader::u32() { return static_cast<std::uint32_t>(get(4)); }
std::uint64_t Reader::u64() { return get(8); }

double Reader::f64() {
  const auto bits = u64();
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

std::span<const std::uint8_t> Reader::bytes(std::size_t n) {
  need(n);
  auto out = body_.subspan(pos_, n);
  pos_ += n;
  return out;
}

std::string Reader::str16() {
  const auto n = u16();
  auto b = bytes(n);
  return std::string(b.begin(), b.end());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace maskveil::binio
