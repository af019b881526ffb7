#pragma once

#include <ostream>

namespace qdrift {

// Entry point of the `qdrift` command-line tool. Returns the process exit
// code (0 success, 2 config error, 3 IO error, 4 numerical failure); errors
// are reported on `err` as a single-line JSON object.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace qdrift
