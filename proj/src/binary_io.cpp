#include "discon/binary_io.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace discon {

std::uint32_t crc32(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
  std::size_t left = bytes.size();
  while (left > 0) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    crc = ::crc32(crc, p, n);
    p += n;
    left -= n;
  }
  return static_cast<std::uint32_t>(crc);
}

void ByteWriter::u16(std::uint16_t v) {
  for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
void ByteWriter::string(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  raw(s);
}
void ByteWriter::matrix(const Matrix& m) {
  u64(static_cast<std::uint64_t>(m.rows()));
  u64(static_cast<std::uint64_t>(m.cols()));
  for (Index i = 0; i < m.size(); ++i) f64(m.data()[i]);
}

std::string_view ByteReader::take(std::size_t n) {
  if (n > remaining()) {
    throw TruncatedError("unexpected end of data: need " + std::to_string(n) + " bytes, have " +
                         std::to_string(remaining()));
  }
  auto s = bytes_.substr(pos_, n);
  pos_ += n;
  return s;
}

std::uint8_t ByteReader::u8() { return static_cast<std::uint8_t>(take(1)[0]); }
std::uint16_t ByteReader::u16() {
  auto s = take(2);
  std::uint16_t v = 0;
  for (int i = 0; i < 2; ++i) v = static_cast<std::uint16_t>(v | (static_cast<std::uint8_t>(s[i]) << (8 * i)));
  return v;
}
std::uint32_t ByteReader::u32() {
  auto s = take(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(s[i])) << (8 * i);
  return v;
}
std::uint64_t ByteReader::u64() {
  auto s = take(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(s[i])) << (8 * i);
  return v;
}
double ByteReader::f64() { return std::bit_cast<double>(u64()); }
std::string ByteReader::string() {
  const auto n = u32();
  return std::string(take(n));
}
Matrix ByteReader::matrix() {
  const auto rows = u64();
  const auto cols = u64();
  if (cols != 0 && rows > remaining() / 8 / cols) throw TruncatedError("matrix block larger than remaining data");
  Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = f64();
  return m;
}

std::string frame(std::string_view magic, std::uint16_t version, std::string_view payload) {
  ByteWriter w;
  w.raw(magic);
  w.u16(version);
  w.u64(payload.size());
  w.raw(payload);
  w.u32(crc32(payload));
  return w.take();
}

std::string_view unframe(std::string_view file, std::string_view magic, std::uint16_t version) {
  if (file.size() < magic.size() || file.substr(0, magic.size()) != magic) {
    throw FormatError("bad magic: expected '" + std::string(magic) + "'");
  }
  ByteReader r(file.substr(magic.size()));
  const auto v = r.u16();
  if (v != version) {
    throw VersionError("unsupported format version " + std::to_string(v) + " (expected " +
                       std::to_string(version) + ")");
  }
  const auto len = r.u64();
  const std::size_t header = magic.size() + 2 + 8;
  if (file.size() - header < len + 4) {
    throw TruncatedError("file truncated: payload declares " + std::to_string(len) + " bytes");
  }
  const auto payload = file.substr(header, len);
  ByteReader tail(file.substr(header + len, 4));
  const auto stored = tail.u32();
  if (stored != crc32(payload)) throw ChecksumError("payload checksum mismatch");
  return payload;
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

std::string file_hash(const std::filesystem::path& path) { return hex32(crc32(read_file(path))); }

}  // namespace discon
