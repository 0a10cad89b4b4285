#pragma once

// Subcommands gen, train, cluster, experiment, bounds and gradcheck.
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
// numeric failure (including a failed gradient or bound check).

#include <ostream>
#include <string>
#include <vector>

namespace mmsc::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mmsc::cli
