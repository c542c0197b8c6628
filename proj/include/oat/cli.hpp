#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace oat {

// Entry point behind the executable, separated so tests can drive the full
// command surface in-process. args excludes the program name. Returns the
// process exit code: 0 success, 2 usage error, 3 data error, 4 numeric
// failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err);

}  // namespace oat
