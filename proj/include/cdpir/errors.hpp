#pragma once

#include <stdexcept>
#include <string>

namespace cdpir {

// Error taxonomy. The CLI maps these onto exit codes 1 (usage), 2 (data) and
// 3 (numerical failure); everything else in the library throws
// std::invalid_argument for violated preconditions.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw std::invalid_argument(message);
}

}  // namespace cdpir
