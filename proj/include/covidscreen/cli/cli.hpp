#pragma once

#include <ostream>

namespace covidscreen::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

// Parses and runs one `covidscreen` command line. Usage errors return
// kExitUsage, failures while running return kExitRuntime.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace covidscreen::cli
