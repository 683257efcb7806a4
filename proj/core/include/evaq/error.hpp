#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace evaq {

/// Error with a stable machine-readable kind ("parse", "io", "shape",
/// "numeric", "leakage", "stale_input", "config", "usage").
class Error : public std::runtime_error {
public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

private:
  std::string kind_;
};

[[noreturn]] inline void fail(std::string kind, const std::string& message) {
  throw Error(std::move(kind), message);
}

} // namespace evaq
