#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sonoalign::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitIo = 1,
  kExitConfig = 2,
  kExitNumeric = 3,
};

// Entry point of the `sonoalign` tool. `args` excludes the program name.
// Subcommands: gen-data, train, eval, show-prior, inspect-graph,
// export-embeddings.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sonoalign::cli
