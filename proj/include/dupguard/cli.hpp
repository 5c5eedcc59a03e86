#pragma once

#include <ostream>

namespace dupguard {

/// Entry point of the `dupguard` tool. Returns the process exit status;
/// errors are printed to `err` as `error[E_CODE]: message`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dupguard
