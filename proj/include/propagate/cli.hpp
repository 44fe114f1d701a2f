#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace propagate::cli {

enum ExitCode : int {
    kOk = 0,
    kInputError = 2,
    kEmptyData = 3,
    kFitFailure = 4,
    kArtifactMismatch = 5,
};

/// Runs one command line (without the program name). Summaries go to `out`,
/// diagnostics to `err`; the return value is the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace propagate::cli
