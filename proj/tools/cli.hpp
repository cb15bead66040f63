#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace tiered::cli {

enum ExitCode : int {
  kOk = 0,
  kRuntime = 1,
  kUsage = 2,
  kSpec = 3,
  kDesign = 4,       // structure, chain or balance failure
  kApplicability = 5,
  kData = 6,
};

// args[0] is the program name.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tiered::cli
