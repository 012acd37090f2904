#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace gcunet {

enum class ErrorKind {
  config,     // bad configuration / validation failure
  shape,      // incompatible tensor shapes
  usage,      // API misuse (non-scalar loss, empty dataset, ...)
  numeric,    // NaN/Inf detected
  io,         // filesystem / serialization
  integrity,  // checksum mismatch, truncated file
  version,    // format version mismatch
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

  // CLI exit code contract: 1 validation, 2 numeric, 3 io.
  int exit_code() const {
    switch (kind_) {
      case ErrorKind::numeric: return 2;
      case ErrorKind::io:
      case ErrorKind::integrity:
      case ErrorKind::version: return 3;
      default: return 1;
    }
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind k, const std::string& msg) { throw Error(k, msg); }
[[noreturn]] inline void fail_shape(const std::string& msg) { fail(ErrorKind::shape, msg); }
[[noreturn]] inline void fail_config(const std::string& msg) { fail(ErrorKind::config, msg); }

// Runtime switches. Finite checks scan op outputs for NaN/Inf; they default to
// on in debug builds and can be toggled at runtime (tests enable them around
// the error-path cases).
struct Runtime {
  static bool& finite_checks() {
#ifdef NDEBUG
    static bool v = false;
#else
    static bool v = true;
#endif
    return v;
  }
  // Kernels are single-threaded with fixed reduction order, so execution is
  // deterministic either way; the flag records the requested mode.
  static bool& deterministic() {
    static bool v = true;
    return v;
  }
};

}  // namespace gcunet
