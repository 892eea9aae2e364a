#ifndef SINODN_ERROR_HPP
#define SINODN_ERROR_HPP

#include <stdexcept>
#include <string>

namespace sinodn {

/// Invalid configuration or precondition violation. Maps to CLI exit code 1.
class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// File-system or format failure. Maps to CLI exit code 2.
class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values or degenerate numerics. Maps to CLI exit code 3.
class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool condition, const std::string& message) {
  if (!condition)
    throw ConfigError(message);
}

} // namespace detail
} // namespace sinodn

#endif
