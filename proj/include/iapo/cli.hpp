#pragma once

#include <string>
#include <vector>

namespace iapo {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomain = 1;
inline constexpr int kExitUsage = 2;

// Subcommands: train, eval, estimate-mi, theory-check, bench, gen-data.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);  // args[0] is the program name

}  // namespace iapo
