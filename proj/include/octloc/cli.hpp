#pragma once

#include <string>
#include <vector>

namespace octloc {

// Full command-line entry point. Exit codes: 0 success, 2 config error,
// 3 data error, 4 integrity error.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, char** argv);

}  // namespace octloc
