#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace prinv {

enum ExitCode : int {
  kExitOk = 0,
  kExitVerifyFailed = 1,
  kExitUsage = 2,
  kExitNumerical = 3,
};

// Entry point of the `prinv` tool. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace prinv
