#pragma once

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mf {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Incompatible tensor shapes (messages always carry both shapes).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid module/layer configuration (e.g. non-integer conv output size).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by a primitive, or tape misuse.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

/// When on, every primitive scans its output for NaN/Inf and throws
/// NumericError naming the op. Training keeps it on; hot inference paths
/// may switch it off.
inline bool& checked_mode() {
  static bool on = true;
  return on;
}

}  // namespace mf
