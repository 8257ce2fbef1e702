#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace seqctl {

// Error taxonomy mirrored by the C API status codes.
class Error : public std::runtime_error {
 public:
  enum class Kind { InvalidArgument, Io, Format, Incompatible, Runtime };

  Error(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

[[noreturn]] inline void fail(Error::Kind kind, const std::string& msg) {
  throw Error(kind, msg);
}

inline void require(bool cond, Error::Kind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

// FNV-1a, 64-bit. Used for vocab/corpus/checkpoint fingerprints.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 14695981039346656037ull) {
  return fnv1a(s.data(), s.size(), h);
}

std::string hex64(uint64_t v);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);
std::vector<std::string> read_lines(const std::string& path);
bool file_exists(const std::string& path);

std::string format_double(double v);  // shortest round-trip decimal

}  // namespace seqctl
