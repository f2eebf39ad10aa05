#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace utnet {

// Error taxonomy. The CLI maps these onto process exit codes:
// ConfigError -> 2, DataError -> 3, VerifyError -> 4, anything else -> 1.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};
struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(msg) {}
};
struct VerifyError : Error {
  explicit VerifyError(const std::string& msg) : Error(msg) {}
};
// Thrown by the post-op scan when an op produces NaN/Inf from finite inputs.
struct NonFiniteError : Error {
  std::string op;
  explicit NonFiniteError(const std::string& op_tag)
      : Error("non-finite value produced by op '" + op_tag + "'"), op(op_tag) {}
};

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

// Runtime toggle for the NaN/Inf scan that runs after every forward op.
// On by default; the bench harness switches it off so timings stay clean.
inline bool& nan_checks_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NanCheckGuard {
  bool prev;
  explicit NanCheckGuard(bool enabled) : prev(nan_checks_enabled()) {
    nan_checks_enabled() = enabled;
  }
  ~NanCheckGuard() { nan_checks_enabled() = prev; }
};

}  // namespace utnet
