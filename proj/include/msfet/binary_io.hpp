#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "msfet/error.hpp"

namespace msfet::io {

/// Appends little-endian scalars to a byte buffer.
class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  template <typename U>
  void put(U value) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char raw[sizeof(U)];
    std::memcpy(raw, &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) {
      for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>(raw[sizeof(U) - 1 - i]));
    } else {
      buf_.insert(buf_.end(), raw, raw + sizeof(U));
    }
  }

  const std::vector<char>& buffer() const { return buf_; }
  std::vector<char> take() { return std::move(buf_); }

 private:
  std::vector<char> buf_;
};

/// Reads little-endian scalars; every short read throws ParseError with the
/// byte offset.
class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    unsigned char raw[sizeof(U)];
    if constexpr (std::endian::native == std::endian::big) {
      for (std::size_t i = 0; i < sizeof(U); ++i) raw[i] = static_cast<unsigned char>(data_[pos_ + sizeof(U) - 1 - i]);
    } else {
      std::memcpy(raw, data_.data() + pos_, sizeof(U));
    }
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, raw, sizeof(U));
    return v;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw ParseError(std::string("truncated input reading ") + what + " at byte offset " +
                       std::to_string(pos_));
    }
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline void write_file(const std::string& path, std::string_view text) {
  write_file(path, std::vector<char>(text.begin(), text.end()));
}

}  // namespace msfet::io
