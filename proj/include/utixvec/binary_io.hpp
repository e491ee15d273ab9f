#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <string_view>

namespace utixvec {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian and written with plain memory copies");

/// Sequential little-endian writer over a file. Throws IoError on any failure.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path);

  void bytes(const void* data, std::size_t size);
  void magic(std::string_view tag) { bytes(tag.data(), tag.size()); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u16(std::uint16_t v) { bytes(&v, 2); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void f32s(std::span<const float> v) { bytes(v.data(), v.size_bytes()); }

  std::uint64_t offset() const { return offset_; }

  /// Flushes and closes; errors surface here rather than in a destructor.
  void close();

 private:
  std::string path_;
  std::ofstream out_;
  std::uint64_t offset_ = 0;
};

/// Random-access little-endian reader. Short reads throw CorruptionError
/// naming the offset; a wrong magic throws FormatError.
class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path);

  const std::string& path() const { return path_; }
  std::uint64_t size() const { return size_; }
  std::uint64_t offset() const { return offset_; }
  void seek(std::uint64_t offset);

  void bytes(void* data, std::size_t size);
  void expect_magic(std::string_view tag);
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  void f32s(std::span<float> out) { bytes(out.data(), out.size_bytes()); }
  std::string string(std::size_t size);

 private:
  std::string path_;
  std::ifstream in_;
  std::uint64_t size_ = 0;
  std::uint64_t offset_ = 0;
};

}  // namespace utixvec
