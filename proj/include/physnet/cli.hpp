#pragma once

#include <string>
#include <vector>

namespace physnet {

// Entry point of the `physnet` tool. Returns the process exit code:
// 0 success, 1 argument or validation error, 2 I/O error.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);  // args[0] is the program name

}  // namespace physnet
