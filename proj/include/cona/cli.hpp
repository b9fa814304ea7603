#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cona::cli {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int {
  kSuccess = 0,
  kFlagError = 2,
  kDataError = 3,
  kNumericError = 4,
};

/// Runs one command line (args excludes the program name). Human-readable
/// output goes to `out`; failures print a single JSON line to `err`.
int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err);

}  // namespace cona::cli
