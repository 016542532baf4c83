#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "aar/errors.hpp"

// Little-endian binary readers/writers shared by the checkpoint formats.
// All snapshot files start with an 8-byte magic string; readers fail with
// format_error on magic mismatch or truncation, never by crashing.

namespace aar::bin {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void write_u32(std::ostream& os, uint32_t v) { write_bytes(os, &v, 4); }
inline void write_u64(std::ostream& os, uint64_t v) { write_bytes(os, &v, 8); }
inline void write_f32(std::ostream& os, float v) { write_bytes(os, &v, 4); }
inline void write_f64(std::ostream& os, double v) { write_bytes(os, &v, 8); }

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  write_bytes(os, s.data(), s.size());
}

inline void read_bytes(std::istream& is, void* p, size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n)
    throw format_error(std::string("truncated file while reading ") + what);
}

inline uint32_t read_u32(std::istream& is, const char* what) {
  uint32_t v;
  read_bytes(is, &v, 4, what);
  return v;
}

inline uint64_t read_u64(std::istream& is, const char* what) {
  uint64_t v;
  read_bytes(is, &v, 8, what);
  return v;
}

inline float read_f32(std::istream& is, const char* what) {
  float v;
  read_bytes(is, &v, 4, what);
  return v;
}

inline double read_f64(std::istream& is, const char* what) {
  double v;
  read_bytes(is, &v, 8, what);
  return v;
}

inline std::string read_string(std::istream& is, const char* what) {
  uint32_t n = read_u32(is, what);
  std::string s(n, '\0');
  if (n) read_bytes(is, s.data(), n, what);
  return s;
}

inline void write_magic(std::ostream& os, const char magic[9]) {
  write_bytes(os, magic, 8);
}

inline void check_magic(std::istream& is, const char magic[9], const std::string& path) {
  char got[8];
  is.read(got, 8);
  if (is.gcount() != 8 || std::memcmp(got, magic, 8) != 0)
    throw format_error("bad magic in " + path + " (expected " + std::string(magic, 8) + ")");
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open for reading: " + path);
  return is;
}

}  // namespace aar::bin
