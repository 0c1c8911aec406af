#pragma once

#include <stdexcept>
#include <string>

namespace lrnet {

enum class ErrorKind {
  kShape,    // tensor or parameter shapes disagree
  kNumeric,  // NaN/Inf, non-simplex posterior, failed gradient check
  kData,     // malformed dataset or checkpoint file
  kConfig,   // invalid configuration or usage
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace lrnet
