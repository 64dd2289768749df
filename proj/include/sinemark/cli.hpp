#pragma once

#include <ostream>

namespace sinemark::cli {

inline constexpr const char* kVersion = "0.1.0";

/// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sinemark::cli
