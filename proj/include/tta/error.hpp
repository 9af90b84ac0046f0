#pragma once

#include <stdexcept>
#include <string>

namespace tta {

// Shape disagreement between operands. Message names the op and the shapes.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// NaN/Inf surfaced during a forward pass or training divergence.
class NumericFault : public std::runtime_error {
 public:
  explicit NumericFault(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller violated an operation's precondition.
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Bad values in a user-supplied configuration file or flag.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace tta
