#include "utixvec/binary_io.hpp"

#include <filesystem>

#include "utixvec/errors.hpp"

namespace utixvec {

BinaryWriter::BinaryWriter(const std::string& path)
    : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw IoError("cannot open " + path + " for writing");
}

void BinaryWriter::bytes(const void* data, std::size_t size) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out_) throw IoError("write failed on " + path_ + " at offset " + std::to_string(offset_));
  offset_ += size;
}

void BinaryWriter::close() {
  out_.flush();
  if (!out_) throw IoError("flush failed on " + path_);
  out_.close();
}

BinaryReader::BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw IoError("cannot open " + path + " for reading");
  std::error_code ec;
  size_ = std::filesystem::file_size(path, ec);
  if (ec) throw IoError("cannot stat " + path + ": " + ec.message());
}

void BinaryReader::seek(std::uint64_t offset) {
  if (offset > size_) {
    throw CorruptionError(path_ + ": offset " + std::to_string(offset) + " lies past end of file (" +
                          std::to_string(size_) + " bytes)");
  }
  in_.clear();
  in_.seekg(static_cast<std::streamoff>(offset));
  offset_ = offset;
}

void BinaryReader::bytes(void* data, std::size_t size) {
  if (size > size_ - offset_) {
    throw CorruptionError(path_ + ": truncated at offset " + std::to_string(offset_) + ", need " +
                          std::to_string(size) + " bytes, " + std::to_string(size_ - offset_) +
                          " left");
  }
  in_.read(static_cast<char*>(data), static_cast<std::streamsize>(size));
  if (!in_) throw IoError("read failed on " + path_ + " at offset " + std::to_string(offset_));
  offset_ += size;
}

void BinaryReader::expect_magic(std::string_view tag) {
  std::string got(tag.size(), '\0');
  if (size_ - offset_ < tag.size()) {
    throw FormatError(path_ + ": too short to hold the " + std::string(tag) + " magic");
  }
  bytes(got.data(), got.size());
  if (got != tag) throw FormatError(path_ + ": bad magic, expected " + std::string(tag));
}

std::uint8_t BinaryReader::u8() {
  std::uint8_t v;
  bytes(&v, 1);
  return v;
}

std::uint16_t BinaryReader::u16() {
  std::uint16_t v;
  bytes(&v, 2);
  return v;
}

std::uint32_t BinaryReader::u32() {
  std::uint32_t v;
  bytes(&v, 4);
  return v;
}

std::string BinaryReader::string(std::size_t size) {
  std::string s(size, '\0');
  bytes(s.data(), size);
  return s;
}

}  // namespace utixvec
