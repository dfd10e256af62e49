#pragma once

#include <string>
#include <vector>

namespace dpe {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point behind the `dpe` executable. args[0] is the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace dpe
