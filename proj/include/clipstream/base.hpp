#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace clipstream {

/// Virtual time in microseconds. All timestamps in the library are supplied
/// by the caller; nothing reads a wall clock.
using Micros = std::int64_t;

/// Root of the library's exception hierarchy.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Input ended before a complete structure could be decoded.
struct Truncated : Error {
  Truncated() : Error("truncated input") {}
  explicit Truncated(const std::string& what) : Error(what) {}
};

}  // namespace clipstream
