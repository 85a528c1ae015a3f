#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "valler/common.hpp"

namespace valler::io {

static_assert(std::endian::native == std::endian::little,
              "artifact formats are little-endian; big-endian hosts need byte swapping");

/// Append-only little-endian byte buffer.
class ByteWriter {
 public:
  void magic(std::string_view four_cc);
  void u8(std::uint8_t v) { put(v); }
  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f32(float v) { put(v); }
  void f32s(std::span<const float> values);
  void str(std::string_view s);  // u16 length prefix

  std::size_t size() const noexcept { return bytes_.size(); }
  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }

 private:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  std::vector<std::uint8_t> bytes_;
};

/// Bounds-checked reader. Every read past the end throws Error(kind).
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, ErrorKind on_error = ErrorKind::Load)
      : bytes_(bytes), on_error_(on_error) {}

  void expect_magic(std::string_view four_cc);
  bool peek_magic(std::string_view four_cc) const;
  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return get<float>(); }
  void f32s(std::span<float> out);
  std::string str();

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  bool at_end() const noexcept { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const;

 private:
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) const;

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  ErrorKind on_error_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace valler::io
