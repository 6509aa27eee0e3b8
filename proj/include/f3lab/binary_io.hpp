// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>

#include "f3lab/tensor.hpp"

namespace f3lab {

struct FormatError : Error {
  using Error::Error;
};

struct CorruptFileError : FormatError {
  using FormatError::FormatError;
};

struct VersionError : FormatError {
  using FormatError::FormatError;
};

struct IoError : Error {
  using Error::Error;
};

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xCBF29CE484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Fixed 17-significant-digit rendering; round-trips every double.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Little-endian serializer.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u64(s.size());
    buf_.append(s);
  }
  void tensor(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) u64(e);
    for (double v : t.data()) f64(v);
  }

  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  Tensor tensor() {
    const std::uint32_t rank = u32();
    if (rank == 0 || rank > 8) throw CorruptFileError("corrupt file: bad tensor rank");
    Shape shape(rank);
    std::uint64_t total = 1;
    for (auto& e : shape) {
      e = u64();
      if (e == 0 || e > (1u << 28)) throw CorruptFileError("corrupt file: bad tensor extent");
      total *= e;
    }
    need(total * 8);
    std::vector<double> data(total);
    for (auto& v : data) v = f64();
    return Tensor(std::move(shape), std::move(data));
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw CorruptFileError("corrupt file: unexpected end of data");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

/// Container layout: 4-byte magic, u32 version, u64 payload length, payload, u64 FNV-1a of payload.
inline std::string seal(std::string_view magic, std::uint32_t version, const std::string& payload) {
  ByteWriter w;
  std::string out(magic);
  w.u32(version);
  w.u64(payload.size());
  out += w.bytes();
  out += payload;
  ByteWriter tail;
  tail.u64(fnv1a64(payload));
  out += tail.bytes();
  return out;
}

inline std::string unseal(std::string_view bytes, std::string_view magic, std::uint32_t version,
                          const std::string& what) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != magic) {
    throw CorruptFileError("corrupt " + what + " file: bad magic");
  }
  ByteReader r(bytes.substr(4));
  const std::uint32_t found = r.u32();
  if (found != version) {
    throw VersionError(what + " file version " + std::to_string(found) + " does not match supported version " +
                       std::to_string(version));
  }
  const std::uint64_t n = r.u64();
  if (bytes.size() < 24 || n != bytes.size() - 24) {
    throw CorruptFileError("corrupt " + what + " file: length mismatch (truncated?)");
  }
  std::string payload(bytes.substr(16, n));
  ByteReader tail(bytes.substr(16 + n));
  if (tail.u64() != fnv1a64(payload)) throw CorruptFileError("corrupt " + what + " file: checksum mismatch");
  return payload;
}

}  // namespace f3lab
