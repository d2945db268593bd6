#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace ucl {

/// Violation of a documented precondition or invariant.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Dataset or archive could not be read or failed verification.
struct IngestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite value reached a place that requires finite numbers.
struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Process exit codes used by the CLI.
namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;
inline constexpr int kConfigError = 2;
inline constexpr int kIngestError = 3;
inline constexpr int kNumericsError = 4;
}  // namespace exit_code

namespace detail {
[[noreturn]] inline void throw_contract(const char* expr, const char* file, int line,
                                        const std::string& msg) {
  std::ostringstream out;
  out << "contract violation: " << msg << " [" << expr << " at " << file << ":" << line << "]";
  throw ContractError(out.str());
}
}  // namespace detail

}  // namespace ucl

#define UCL_CHECK(expr, msg)                                             \
  do {                                                                   \
    if (!(expr)) ::ucl::detail::throw_contract(#expr, __FILE__, __LINE__, (msg)); \
  } while (false)
