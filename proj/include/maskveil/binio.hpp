#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace maskveil::binio {

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

/// Little-endian byte sink.
class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  /// Writes the 4-byte magic followed by the u16 format version.
  void header(std::string_view magic, std::uint16_t version = 1) {
    buf_.insert(buf_.end(), magic.begin(), magic.end());
    u16(version);
  }
  void str16(std::string_view s);

  /// Appends the CRC32 of everything written so far and returns the buffer.
  std::vector<std::uint8_t> finish();

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

/// Little-endian byte source over a CRC-terminated container laid out as
/// magic(4) | u16 version | body | u32 CRC32. Construction checks magic and
/// version; the caller parses the body, then calls finish() which rejects
/// trailing bytes and verifies the checksum. Reads past the body raise
/// TruncatedFileError, so structural truncation is reported before the CRC.
class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::span<const std::string_view> accepted_magic,
         std::string_view what);

  const std::string& magic() const { return magic_; }
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::span<const std::uint8_t> bytes(std::size_t n);
  std::string str16();
  void finish();

 private:
  void need(std::size_t n);
  std::uint64_t get(int n);

  std::span<const std::uint8_t> all_;
  std::span<const std::uint8_t> body_;
  std::size_t pos_ = 0;
  std::string magic_;
  std::string what_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace maskveil::binio
