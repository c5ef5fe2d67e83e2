#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace attnlens {

constexpr const char* kToolVersion = "attnlens 0.1.0";

// Shape mismatches and misuse of the API are programming errors.
struct ShapeError : std::logic_error {
  using std::logic_error::logic_error;
};

// Bad or malformed external data (files, flags referencing missing inputs).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical blow-up: non-finite values, divergence.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write file: " + path);
  out << content;
  if (!out) throw DataError("write failed: " + path);
}

// 64-bit mix used to derive independent deterministic RNG streams
// (per sentence, per sample) from one master seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL + (b << 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace attnlens
