#pragma once

#include <stdexcept>
#include <string>

namespace oat {

// Exit-code families for the CLI: usage 2, data 3, numeric 4.
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace oat
