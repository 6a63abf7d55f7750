#pragma once

namespace r3mem {

// full command-line entry point; returns the process exit code
// (0 success, 1 task failure, 2 usage error)
int cli_main(int argc, const char * const * argv);

} // namespace r3mem
