#pragma once

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <type_traits>
#include <vector>

#include "ccst/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary formats are read and written in host order, which must be little-endian");

namespace ccst {

inline constexpr std::string_view kVersion = "1.0.0";

// Squared Euclidean distance. Every search path and the ground truth share
// this loop so that equal inputs give bit-equal distances.
inline float l2_sqr(std::span<const float> a, std::span<const float> b) {
  float acc = 0.0f;
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) {
    const float d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

inline double l2_sqr_f64(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc;
}

/// Worker count from CCST_THREADS, falling back to hardware concurrency.
inline unsigned thread_count() {
  if (const char* env = std::getenv("CCST_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Splits [0, n) into contiguous chunks, one per worker. `fn(begin, end)`
/// must only write state owned by its own index range.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, unsigned workers = thread_count()) {
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  if (workers <= 1) {
    if (n > 0) fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : pool) t.join();
}

inline std::uint32_t crc32(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded pieces.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t len = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + pos), static_cast<uInt>(len));
    pos += len;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failure on '" + path + "'");
  return std::move(ss).str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failure on '" + path + "'");
}

/// Append-only little-endian byte sink used by every binary format.
class BinaryWriter {
 public:
  template <class T>
    requires std::is_trivially_copyable_v<T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }

  template <class T>
    requires std::is_trivially_copyable_v<T>
  void put_span(std::span<const T> v) {
    buf_.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
  }

  void put_bytes(std::string_view s) { buf_.append(s); }

  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }

  // Appends the CRC-32 of everything written so far.
  void seal() { put(crc32(buf_)); }

  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

/// Bounds-checked reader over a byte buffer; every overrun is a FormatError
/// naming the offset.
class BinaryReader {
 public:
  BinaryReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  template <class T>
    requires std::is_trivially_copyable_v<T>
  T get() {
    require(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  template <class T>
    requires std::is_trivially_copyable_v<T>
  std::vector<T> get_vector(std::size_t n) {
    if (n > (bytes_.size() - pos_) / sizeof(T)) require(n * sizeof(T));
    std::vector<T> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
    return v;
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    require(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }

  void expect_magic(std::string_view magic) {
    require(magic.size());
    if (bytes_.substr(pos_, magic.size()) != magic)
      throw FormatError(what_ + ": bad magic, expected '" + std::string(magic) + "'");
    pos_ += magic.size();
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void require(std::size_t n) const {
    if (n > bytes_.size() - pos_)
      throw FormatError(what_ + ": truncated at byte offset " + std::to_string(pos_) + " (need " +
                        std::to_string(n) + " more bytes, have " + std::to_string(bytes_.size() - pos_) +
                        ")");
  }

  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

/// Verifies and strips the trailing CRC-32 of a sealed buffer.
inline std::string_view verify_sealed(std::string_view bytes, const std::string& what) {
  if (bytes.size() < sizeof(std::uint32_t))
    throw FormatError(what + ": file too short for checksum");
  const std::string_view body = bytes.substr(0, bytes.size() - sizeof(std::uint32_t));
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof stored);
  if (crc32(body) != stored) throw FormatError(what + ": checksum mismatch (file corrupt or truncated)");
  return body;
}

inline std::string shape_string(std::span<const std::size_t> shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace ccst
