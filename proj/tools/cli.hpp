#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cmrlm {

/// Entry point of the `cmrlm` tool: 0 on success, 2 on usage errors, 1 on runtime errors.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cmrlm
