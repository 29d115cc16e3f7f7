#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sdsae::cli {

// Runs one command line; returns the process exit code (see ExitCode).
// Human summaries go to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace sdsae::cli
