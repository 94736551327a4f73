#pragma once

#include <stdexcept>
#include <string>

namespace cfm {

// File or container violates its on-disk contract (bad magic, truncated
// payload, header/size mismatch, malformed manifest line, ...).
class format_error : public std::runtime_error {
 public:
  explicit format_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem-level failure: missing file, unreadable stream, failed rename.
class io_error : public std::runtime_error {
 public:
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite value where the pipeline requires finite data (loss, gradient,
// map payload about to be serialized).
class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cfm
