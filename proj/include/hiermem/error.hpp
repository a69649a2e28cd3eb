#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hiermem {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity reached an operation, or a loss diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument outside of shape checks (empty sets, bad ranges).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration key or value. `key()` names the offending entry.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error(key.empty() ? what : key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// File could not be read or parsed. `offset()` is the byte position of the
/// failure when it is known.
class IoError : public Error {
 public:
  IoError(const std::string& what, std::int64_t offset = -1)
      : Error(offset >= 0 ? what + " (byte offset " + std::to_string(offset) + ")" : what),
        offset_(offset) {}
  std::int64_t offset() const { return offset_; }

 private:
  std::int64_t offset_;
};

/// Memory bank has no entries; callers fall back to the memory prior.
class MemoryEmpty : public Error {
 public:
  MemoryEmpty() : Error("memory bank is empty") {}
};

}  // namespace hiermem
