#pragma once

#include <exception>
#include <ostream>
#include <string>
#include <vector>

namespace tapmerge::cli {

enum ExitCode : int { kSuccess = 0, kUsage = 1, kData = 2, kNumerical = 3 };

/// Maps a library exception onto the exit-code contract.
int exit_code_for(const std::exception& e);

/// Runs one invocation. `args` excludes the program name. Reports go to the
/// files named by flags, summaries to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tapmerge::cli
