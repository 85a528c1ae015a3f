#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace valler::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Runs one subcommand. args[0] is the program name.
int cmd_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cmd_dispatch(int argc, const char* const* argv);

/// Closest candidate by edit distance, or "" when nothing is reasonably close.
std::string suggest(const std::string& word, const std::vector<std::string>& candidates);

}  // namespace valler::cli
