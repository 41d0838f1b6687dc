#pragma once

// Little-endian framing shared by the dataset and checkpoint formats:
//   magic[4] | version u16 | payload_len u64 | payload | crc32(payload) u32

#include "discon/numerics.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace discon {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};
class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

std::uint32_t crc32(std::string_view bytes);

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v);
  void string(std::string_view s);
  void matrix(const Matrix& m);
  void raw(std::string_view bytes) { buf_.append(bytes); }

  const std::string& bytes() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64();
  std::string string();
  Matrix matrix();

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view take(std::size_t n);
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string frame(std::string_view magic, std::uint16_t version, std::string_view payload);
// Validates magic, version, length and checksum, in that order; returns the payload.
std::string_view unframe(std::string_view file, std::string_view magic, std::uint16_t version);

void write_file(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

// Hex CRC-32 of a file's bytes, used as a short content hash in manifests.
std::string file_hash(const std::filesystem::path& path);
std::string hex32(std::uint32_t v);

}  // namespace discon
