#pragma once

#include <stdexcept>
#include <string>

namespace lavi {

// Precondition or shape contract broken by the caller.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid user-facing configuration (schedules, presets, LoRA patterns, config files).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite losses, degenerate covariances and similar numerical failures.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint and file-format failures (corruption, version mismatch, I/O).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
[[noreturn]] void throw_contract(const std::string& what);
}  // namespace detail

#define LAVI_EXPECT(cond, msg)                 \
  do {                                         \
    if (!(cond)) {                             \
      ::lavi::detail::throw_contract(msg);     \
    }                                          \
  } while (0)

}  // namespace lavi
