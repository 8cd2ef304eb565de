#pragma once

// The `cem` command line: gen-data, train, eval, transfer, infer, reenact, render.

#include <iosfwd>
#include <string>
#include <vector>

namespace cem::cli {

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitDiverged = 4;

// Runs the command line `args` (without the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// --help text of a subcommand ("" for the top level).
std::string help(const std::string& command);

}  // namespace cem::cli
