#include "valler/binary_io.hpp"

#include <fstream>
#include <iterator>

namespace valler::io {

void ByteWriter::magic(std::string_view four_cc) {
  bytes_.insert(bytes_.end(), four_cc.begin(), four_cc.end());
}

void ByteWriter::f32s(std::span<const float> values) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
  bytes_.insert(bytes_.end(), p, p + values.size_bytes());
}

void ByteWriter::str(std::string_view s) {
  u16(static_cast<std::uint16_t>(s.size()));
  bytes_.insert(bytes_.end(), s.begin(), s.end());
}

void ByteReader::need(std::size_t n) const {
  if (bytes_.size() - pos_ < n) {
    fail("truncated input: need " + std::to_string(n) + " bytes at offset " +
         std::to_string(pos_));
  }
}

void ByteReader::fail(const std::string& what) const { throw Error(on_error_, what); }

void ByteReader::expect_magic(std::string_view four_cc) {
  if (!peek_magic(four_cc)) fail("bad magic, expected '" + std::string(four_cc) + "'");
  pos_ += four_cc.size();
}

bool ByteReader::peek_magic(std::string_view four_cc) const {
  if (remaining() < four_cc.size()) return false;
  return std::memcmp(bytes_.data() + pos_, four_cc.data(), four_cc.size()) == 0;
}

void ByteReader::f32s(std::span<float> out) {
  need(out.size_bytes());
  std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
  pos_ += out.size_bytes();
}

std::string ByteReader::str() {
  const auto n = u16();
  need(n);
  std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

}  // namespace valler::io
